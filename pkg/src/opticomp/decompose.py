"""Activation-aware low-rank + structured-sparse decomposition of one layer.

Given a weight W (m x n) and calibration activations X (n x T), we scale
columns by d_j = ||X[j, :]||_2 and alternately fit, in the scaled domain,

    W diag(d)  ~=  A @ B + expand(S)

where A B has rank at most r and S keeps, per row-chunk of height g, the
round(n * s) columns with the largest L1 mass (stored condensed). The best
iterate seen wins; a closing SVD refit against its sparse part makes the
returned (A, B) the exact truncated SVD of the remaining residual, which is
what lets the rank allocator slice factors instead of re-decomposing.
Stored factors are de-scaled so A @ B + expand(S) approximates W directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import balanced_factors, frobenius_norm, truncated_svd
from .util import as_matrix, philox_rng

EPS_SCALE = 1e-8  # floor for D entries, relative to the largest entry


@dataclass(frozen=True)
class ScalingDiag:
    """Diagonal activation scaling d_j = sqrt(sum_t X[j,t]^2), clamped below."""

    d: np.ndarray
    epsilon_clamped: bool

    @property
    def inv(self) -> np.ndarray:
        return 1.0 / self.d

    @classmethod
    def identity(cls, n: int) -> "ScalingDiag":
        return cls(d=np.ones(n), epsilon_clamped=False)


def compute_scaling(x_calib: np.ndarray) -> ScalingDiag:
    x = as_matrix(x_calib, "calibration activations")
    if x.shape[1] < 1:
        raise ValueError("calibration set is empty (no activation columns)")
    d = np.sqrt(np.sum(x * x, axis=1))
    top = float(d.max())
    if top == 0.0:
        raise ValueError("calibration activations are identically zero; cannot scale")
    floor = EPS_SCALE * top
    clamped = bool(np.any(d < floor))
    return ScalingDiag(d=np.maximum(d, floor), epsilon_clamped=clamped)


@dataclass(frozen=True)
class StructuredSparse:
    """Column-pruned sparse component in condensed form.

    Rows are split into ceil(m / g) chunks of height g (last may be
    shorter). Chunk i keeps the d column indices ``kept_cols[i]`` (sorted
    ascending) and stores their values in the matching rows of
    ``condensed`` (m x d), i.e. condensed row blocks line up with chunks.
    """

    granularity: int
    full_rows: int
    full_cols: int
    kept_cols: np.ndarray  # (num_chunks x d) int64, each row sorted ascending
    condensed: np.ndarray  # (m x d) float64

    @property
    def num_chunks(self) -> int:
        return -(-self.full_rows // self.granularity)

    @property
    def kept_per_chunk(self) -> int:
        return self.kept_cols.shape[1]

    def chunk_rows(self, i: int) -> tuple[int, int]:
        lo = i * self.granularity
        return lo, min(lo + self.granularity, self.full_rows)

    def validate(self) -> None:
        if self.kept_cols.shape != (self.num_chunks, self.kept_per_chunk):
            raise ValueError("kept_cols shape disagrees with chunk count")
        if self.condensed.shape != (self.full_rows, self.kept_per_chunk):
            raise ValueError("condensed shape disagrees with (rows, kept columns)")
        diffs = np.diff(self.kept_cols, axis=1)
        if self.kept_cols.min() < 0 or self.kept_cols.max() >= self.full_cols:
            raise ValueError("kept column index out of range")
        if diffs.size and diffs.min() <= 0:
            raise ValueError("kept column indices must be strictly increasing per chunk")


def structured_sparsify(residual: np.ndarray, g: int, s: float) -> StructuredSparse:
    """Keep, per row-chunk of height g, the top round(n*s) columns by L1 norm.

    Ties rank the lower column index first so results are platform stable.
    """
    r = as_matrix(residual, "residual")
    m, n = r.shape
    if g < 1:
        raise ValueError(f"granularity must be >= 1, got {g}")
    if not 0.0 < s < 1.0:
        raise ValueError(f"sparse ratio must lie in (0, 1), got {s}")
    d = int(round(n * s))
    if d == 0:
        raise ValueError("sparse budget rounds to zero columns")

    num_chunks = -(-m // g)
    kept = np.empty((num_chunks, d), dtype=np.int64)
    condensed = np.empty((m, d))
    for i in range(num_chunks):
        lo, hi = i * g, min((i + 1) * g, m)
        norms = np.abs(r[lo:hi]).sum(axis=0)
        order = np.argsort(-norms, kind="stable")  # stable: ties keep lower index first
        cols = np.sort(order[:d])
        kept[i] = cols
        condensed[lo:hi] = r[lo:hi, cols]
    return StructuredSparse(granularity=g, full_rows=m, full_cols=n, kept_cols=kept, condensed=condensed)


def expand(sp: StructuredSparse) -> np.ndarray:
    """Scatter the condensed values back to a dense (m x n) matrix."""
    out = np.zeros((sp.full_rows, sp.full_cols))
    rows = np.arange(sp.full_rows)
    cols = sp.kept_cols[rows // sp.granularity]  # (m x d)
    out[rows[:, None], cols] = sp.condensed
    return out


def _scale_sparse_cols(sp: StructuredSparse, col_scale: np.ndarray) -> StructuredSparse:
    rows = np.arange(sp.full_rows)
    factors = col_scale[sp.kept_cols[rows // sp.granularity]]
    return StructuredSparse(
        granularity=sp.granularity,
        full_rows=sp.full_rows,
        full_cols=sp.full_cols,
        kept_cols=sp.kept_cols,
        condensed=sp.condensed * factors,
    )


@dataclass
class Decomposition:
    """Result of one layer's decomposition: W ~= a @ b + expand(sparse)."""

    a: np.ndarray  # (m x r)
    b: np.ndarray  # (r x n)
    sparse: StructuredSparse
    rank: int
    objective_trace: list[float]
    best_objective: float
    singular_values: np.ndarray | None = field(default=None, repr=False)

    def reconstruct(self) -> np.ndarray:
        return self.a @ self.b + expand(self.sparse)


def decompose_layer(
    w: np.ndarray,
    d: ScalingDiag,
    r: int,
    s: float,
    g: int,
    iters: int = 80,
) -> Decomposition:
    """Alternating SVD / structured-prune fit of the scaled weight matrix.

    Starts from S = 0 with an L-step first, so the first trace entry equals
    the plain rank-r SVD objective and the best iterate can never lose to
    it. The objective ||W D - A B - expand(S)||_F is logged after every
    half-step.
    """
    w = as_matrix(w, "weight")
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    if iters < 1:
        raise ValueError(f"iteration count must be >= 1, got {iters}")
    wd = w * d.d[None, :]

    sparse = structured_sparsify(np.zeros_like(wd), g, s)  # S = 0 start
    sparse_exp = expand(sparse)
    trace: list[float] = []
    best: tuple[float, np.ndarray, np.ndarray, StructuredSparse] | None = None
    for _ in range(iters):
        svd = truncated_svd(wd - sparse_exp, r)
        a, b = balanced_factors(svd)
        low = a @ b
        obj = frobenius_norm(wd - low - sparse_exp)
        # Eckart-Young: with S fixed, the L half-step never raises the objective.
        assert not trace or obj <= trace[-1] + 1e-9 * (1.0 + trace[-1])
        trace.append(obj)
        if best is None or obj < best[0]:
            best = (obj, a, b, sparse)

        sparse = structured_sparsify(wd - low, g, s)
        sparse_exp = expand(sparse)
        obj = frobenius_norm(wd - low - sparse_exp)
        trace.append(obj)
        if obj < best[0]:
            best = (obj, a, b, sparse)

    # Closing refit: re-solve the L-step against the best sparse component so
    # the stored factors are an exact truncated SVD of (W D - expand(S)).
    # Eckart-Young guarantees this never worsens the best objective.
    best_sparse = best[3]
    best_sparse_exp = expand(best_sparse)
    svd = truncated_svd(wd - best_sparse_exp, r)
    a, b = balanced_factors(svd)
    trace.append(frobenius_norm(wd - a @ b - best_sparse_exp))

    # De-scale so the stored triple approximates W directly.
    inv = d.inv
    b_out = b * inv[None, :]
    sparse_out = _scale_sparse_cols(best_sparse, inv)
    return Decomposition(
        a=a,
        b=b_out,
        sparse=sparse_out,
        rank=r,
        objective_trace=trace,
        best_objective=min(trace),
        singular_values=svd.singular_values.copy(),
    )


def layer_error(w: np.ndarray, d: ScalingDiag, dec: Decomposition) -> float:
    """Normalized activation-aware error, evaluated in the scaled domain.

    The stored factors approximate W, so B and the sparse values are
    re-scaled by D before comparing against W D.
    """
    w = as_matrix(w, "weight")
    wd = w * d.d[None, :]
    denom = frobenius_norm(wd)
    if denom == 0.0:
        raise ValueError("||W D||_F is zero; error ratio undefined")
    recon = dec.a @ (dec.b * d.d[None, :]) + expand(_scale_sparse_cols(dec.sparse, d.d))
    return frobenius_norm(wd - recon) / denom


# --- local low-rank adaptation ----------------------------------------------


def adapter_objective_and_grads(
    w: np.ndarray,
    x: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    sparse_exp: np.ndarray,
    ua: np.ndarray,
    va: np.ndarray,
    ub: np.ndarray,
    vb: np.ndarray,
):
    """Calibration objective and its exact gradients w.r.t. the adapters.

    f = || W X - [(A + Ua Va)(B + Ub Vb) + S] X ||_F^2
    """
    target = (w - sparse_exp) @ x  # (m x T), constant across steps
    a_eff = a + ua @ va
    b_eff = b + ub @ vb
    bx = b_eff @ x  # (r x T)
    err = a_eff @ bx - target  # (m x T)
    f = float(np.sum(err * err))
    ga = 2.0 * (err @ bx.T)  # df/d(A_eff), (m x r)
    gb = 2.0 * (a_eff.T @ err) @ x.T  # df/d(B_eff), (r x n)
    return f, (ga @ va.T, ua.T @ ga, gb @ vb.T, ub.T @ gb)


def local_adapt(
    dec: Decomposition,
    w: np.ndarray,
    x_calib: np.ndarray,
    steps: int = 100,
    lr: float = 1e-2,
    seed: int = 0,
) -> Decomposition:
    """Refine (A, B) with rank-limited adapters against raw calibration data.

    Adapters dA = Ua Va and dB = Ub Vb have rank at most floor(r/4) (min 1)
    and are merged back on return, so the parameter count is unchanged. Uses
    plain gradient descent; a step that raises the objective is rejected and
    retried at half the learning rate (floor 1e-8). The best iterate is
    kept, so the returned objective never exceeds the input's.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return dec
    w = as_matrix(w, "weight")
    x = as_matrix(x_calib, "calibration activations")
    m, r = dec.a.shape
    n = dec.b.shape[1]
    q = max(1, r // 4)
    rng = philox_rng(seed, 3)
    ua = rng.uniform(-1e-3, 1e-3, size=(m, q))
    ub = rng.uniform(-1e-3, 1e-3, size=(r, q))
    va = np.zeros((q, r))
    vb = np.zeros((q, n))
    sparse_exp = expand(dec.sparse)

    f, grads = adapter_objective_and_grads(w, x, dec.a, dec.b, sparse_exp, ua, va, ub, vb)
    trace = [f]
    best = (f, ua.copy(), va.copy(), ub.copy(), vb.copy())
    step_lr = lr
    for step in range(steps):
        if not all(np.all(np.isfinite(gr)) for gr in grads):
            raise FloatingPointError(f"non-finite adapter gradient at step {step}")
        while True:
            cand = (ua - step_lr * grads[0], va - step_lr * grads[1], ub - step_lr * grads[2], vb - step_lr * grads[3])
            f_new, grads_new = adapter_objective_and_grads(w, x, dec.a, dec.b, sparse_exp, *cand)
            if f_new <= f:
                break
            step_lr *= 0.5
            if step_lr < 1e-8:
                break
        if f_new > f:
            break  # learning rate floored out; no further progress
        ua, va, ub, vb = cand
        f, grads = f_new, grads_new
        trace.append(f)
        if f < best[0]:
            best = (f, ua.copy(), va.copy(), ub.copy(), vb.copy())

    _, ua, va, ub, vb = best
    return Decomposition(
        a=dec.a + ua @ va,
        b=dec.b + ub @ vb,
        sparse=dec.sparse,
        rank=dec.rank,
        objective_trace=trace,
        best_objective=min(trace),
        singular_values=dec.singular_values,
    )


def calibration_objective(dec: Decomposition, w: np.ndarray, x_calib: np.ndarray) -> float:
    """|| W X - (A B + expand(S)) X ||_F^2 on the raw calibration matrix."""
    diff = (as_matrix(w, "weight") - dec.reconstruct()) @ as_matrix(x_calib, "calibration activations")
    return float(np.sum(diff * diff))
