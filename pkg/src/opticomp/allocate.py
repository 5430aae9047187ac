"""Batch-wise greedy rank allocation under a global compression target.

Every layer is decomposed once at its break-even rank
r_max = floor(m n / (m + n)); because the stored factors are an exact
truncated SVD of the residual (decompose module contract), the rank-r
candidate is just a column/row slice and its error follows from the
singular-value tail, with no further SVDs or data passes. The search
raises ranks of high-error layers in batches until the parameter budget
runs out, leaving the achieved reduction psi at or above the target alpha.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .decompose import Decomposition, ScalingDiag, decompose_layer, frobenius_norm
from .util import as_matrix

BASE_SCALE_HIDDEN = 768  # hidden sizes at or above this use the full basis rank


def max_rank(rows: int, cols: int) -> int:
    """Break-even rank: beyond this the factors store more than W itself."""
    return max(1, (rows * cols) // (rows + cols))


@dataclass
class LayerState:
    layer_id: str
    rows: int
    cols: int
    r_max: int
    rank: int
    decomposition: Decomposition  # full-rank factors, de-scaled
    wd_norm: float
    tail_sq: np.ndarray  # tail_sq[r] = best_obj^2 + sum of sigma[r:]^2

    @property
    def unit_cost(self) -> int:
        return self.rows + self.cols

    def error_at(self, r: int) -> float:
        """Normalized scaled-domain error of the rank-r slice, O(1)."""
        if not 1 <= r <= self.r_max:
            raise ValueError(f"rank {r} outside [1, {self.r_max}] for layer {self.layer_id!r}")
        return math.sqrt(self.tail_sq[r]) / self.wd_norm

    @property
    def error(self) -> float:
        return self.error_at(self.rank)

    def sliced_factors(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        return self.decomposition.a[:, :r], self.decomposition.b[:r, :]


@dataclass
class RankState:
    layers: list[LayerState]

    def errors(self) -> np.ndarray:
        return np.array([l.error for l in self.layers])


def prepare_full_rank(
    layers: list[tuple[str, np.ndarray]],
    scaling: dict[str, ScalingDiag],
    s: float,
    g: int,
    iters: int = 80,
) -> RankState:
    """Decompose every layer once at its maximum useful rank."""
    states = []
    for layer_id, w in layers:
        w = as_matrix(w, layer_id)
        m, n = w.shape
        d = scaling[layer_id]
        r_top = max_rank(m, n)
        dec = decompose_layer(w, d, r_top, s, g, iters=iters)
        sigma = dec.singular_values
        wd_norm = frobenius_norm(w * d.d[None, :])
        base_sq = dec.best_objective**2
        # tail_sq[r] = base^2 + sum_{i >= r} sigma_i^2, indexable at r = r_max
        suffix = np.concatenate([np.cumsum((sigma**2)[::-1])[::-1], [0.0]])
        states.append(
            LayerState(
                layer_id=layer_id,
                rows=m,
                cols=n,
                r_max=r_top,
                rank=r_top,
                decomposition=dec,
                wd_norm=wd_norm,
                tail_sq=base_sq + suffix,
            )
        )
    return RankState(layers=states)


def basis_rank(hidden_size: int, ptc_dim: int, override: int | None = None) -> int:
    """Rank-step quantum: the PTC dimension, halved below base-scale models."""
    if override is not None:
        return int(override)
    if ptc_dim < 2:
        raise ValueError(f"PTC dimension must be >= 2, got {ptc_dim}")
    if hidden_size >= BASE_SCALE_HIDDEN:
        return ptc_dim
    return max(1, ptc_dim // 2)


def step_size(remaining: int, budget: int, b: int) -> int:
    """Linear-decay step schedule: 2b, then b, then ceil(b/2)."""
    if budget <= 0:
        raise ValueError("total budget must be positive")
    if remaining >= budget / 2:
        return 2 * b
    if remaining >= budget / 4:
        return b
    return max(1, -(-b // 2))


def select_batch(
    errors: np.ndarray,
    threshold: float = 0.5,
    temperature: float = 1.0,
    saturated: np.ndarray | None = None,
) -> tuple[list[int], np.ndarray]:
    """Pick the smallest high-error prefix whose softmax mass reaches threshold.

    Saturated layers are dropped before the softmax. Returns (indices,
    probabilities) ordered by descending probability, ties broken toward
    the lower layer index. Empty when everything is saturated.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if not np.all(np.isfinite(errors)):
        raise ValueError("layer errors must be finite")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    active = np.arange(len(errors))
    if saturated is not None:
        active = active[~np.asarray(saturated, dtype=bool)]
    if len(active) == 0:
        return [], np.empty(0)
    z = errors[active] / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    cum = 0.0
    batch: list[int] = []
    probs: list[float] = []
    for j in order:
        batch.append(int(active[j]))
        probs.append(float(p[j]))
        cum += p[j]
        if cum >= threshold:
            break
    return batch, np.array(probs)


def redistribute(
    batch: list[int],
    probs: np.ndarray,
    delta_r: int,
    headroom: list[int] | None = None,
) -> list[int]:
    """Split |batch| * delta_r rank units proportionally to probability.

    Every member gets at least one unit; the proportional remainder is
    floored with leftovers handed out in descending-probability order.
    Headroom caps are honored, with overflow re-offered down the same
    order.
    """
    if not batch:
        raise ValueError("batch is empty")
    n = len(batch)
    total = n * delta_r
    caps = list(headroom) if headroom is not None else [total] * n
    inc = [1] * n
    rem = total - n
    psum = float(np.sum(probs))
    extra = [int(rem * p / psum) for p in probs]
    leftover = rem - sum(extra)
    for i in range(n):
        inc[i] += extra[i]
    for i in range(n):  # descending-p order is the batch order
        if leftover == 0:
            break
        inc[i] += 1
        leftover -= 1
    overflow = 0
    for i in range(n):
        if inc[i] > caps[i]:
            overflow += inc[i] - caps[i]
            inc[i] = caps[i]
    for i in range(n):
        if overflow == 0:
            break
        room = caps[i] - inc[i]
        take = min(room, overflow)
        inc[i] += take
        overflow -= take
    return inc


@dataclass
class PlanLayer:
    id: str
    rows: int
    cols: int
    r: int
    d: int
    g: int
    params: int
    error: float | None = None


@dataclass
class CompressionPlan:
    alpha: float
    sparse_ratio: float
    layers: list[PlanLayer]
    psi_achieved: float
    iterations: int
    rank_trace: list[list[int]] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "sparse_ratio": self.sparse_ratio,
            "psi_achieved": self.psi_achieved,
            "iterations": self.iterations,
            "layers": [
                {
                    "id": l.id,
                    "rows": l.rows,
                    "cols": l.cols,
                    "r": l.r,
                    "d": l.d,
                    "g": l.g,
                    "params": l.params,
                    "error": l.error,
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CompressionPlan":
        layers = [
            PlanLayer(d["id"], d["rows"], d["cols"], d["r"], d["d"], d["g"], d["params"], d.get("error"))
            for d in obj["layers"]
        ]
        return cls(
            alpha=obj["alpha"],
            sparse_ratio=obj["sparse_ratio"],
            layers=layers,
            psi_achieved=obj["psi_achieved"],
            iterations=obj["iterations"],
        )


def psi(plan: CompressionPlan) -> float:
    """Achieved parameter reduction; index storage is reported separately."""
    orig = sum(l.rows * l.cols for l in plan.layers)
    kept = sum(l.r * (l.rows + l.cols) + l.rows * l.d for l in plan.layers)
    return 1.0 - kept / orig


@dataclass
class BudgetModel:
    """Parameter budget left for low-rank factors under target alpha."""

    alpha: float
    original_params: int
    sparse_params: int
    spent: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.budget < 0:
            raise ValueError(
                f"sparse component alone ({self.sparse_params} params) already "
                f"violates the {self.alpha:.0%} reduction target"
            )

    @property
    def budget(self) -> int:
        # Exact rational arithmetic: any integer spend within this bound
        # keeps the true reduction at or above alpha, with no float slack.
        limit = math.floor((1 - Fraction(self.alpha)) * self.original_params)
        return limit - self.sparse_params

    @property
    def remaining(self) -> int:
        return self.budget - self.spent

    def charge(self, units: int, unit_cost: int) -> None:
        cost = units * unit_cost
        if cost > self.remaining:
            raise ValueError("budget overrun")
        self.spent += cost


def allocate_ranks(
    state: RankState,
    alpha: float,
    sparse_ratio: float,
    g: int,
    b: int,
    threshold: float = 0.5,
    temperature: float = 1.0,
) -> CompressionPlan:
    """Greedy batch-wise rank search; see module docstring for the loop."""
    layers = state.layers
    original = sum(l.rows * l.cols for l in layers)
    sparse_params = sum(l.rows * l.decomposition.sparse.kept_per_chunk for l in layers)
    budget = BudgetModel(alpha=alpha, original_params=original, sparse_params=sparse_params)

    for l in layers:
        l.rank = min(l.r_max, max(1, round(0.10 * l.r_max)))
    init_cost = sum(l.rank * l.unit_cost for l in layers)
    if init_cost > budget.budget:
        raise ValueError(
            f"target infeasible at 10% floor: initial ranks cost {init_cost} "
            f"but the budget is {budget.budget}"
        )
    budget.spent = init_cost

    trace = [[l.rank for l in layers]]
    iterations = 0
    while True:
        saturated = np.array([l.rank >= l.r_max for l in layers])
        unsat = [l for l, sat in zip(layers, saturated) if not sat]
        if not unsat:
            break
        cheapest = min(l.unit_cost for l in unsat)
        if budget.remaining < cheapest:
            break
        batch, probs = select_batch(state.errors(), threshold, temperature, saturated)
        if not batch:
            break
        delta_r = step_size(budget.remaining, budget.budget, b)
        headroom = [layers[i].r_max - layers[i].rank for i in batch]
        increments = redistribute(batch, probs, delta_r, headroom)
        applied = 0
        # Cheapest layers first so a tight remainder is not wasted on one
        # expensive increment.
        for i, want in sorted(zip(batch, increments), key=lambda t: (layers[t[0]].unit_cost, t[0])):
            layer = layers[i]
            affordable = budget.remaining // layer.unit_cost
            units = min(want, layer.r_max - layer.rank, affordable)
            if units <= 0:
                continue
            budget.charge(units, layer.unit_cost)
            layer.rank += units
            applied += units
        iterations += 1
        trace.append([l.rank for l in layers])
        if applied == 0:
            break

    plan_layers = [
        PlanLayer(
            id=l.layer_id,
            rows=l.rows,
            cols=l.cols,
            r=l.rank,
            d=l.decomposition.sparse.kept_per_chunk,
            g=g,
            params=l.rank * l.unit_cost + l.rows * l.decomposition.sparse.kept_per_chunk,
            error=l.error,
        )
        for l in layers
    ]
    plan = CompressionPlan(
        alpha=alpha,
        sparse_ratio=sparse_ratio,
        layers=plan_layers,
        psi_achieved=0.0,
        iterations=iterations,
        rank_trace=trace,
    )
    plan.psi_achieved = psi(plan)
    return plan
