"""End-to-end compression pipeline and artifact verification.

Glues the stages together: calibration capture -> activation scaling ->
full-rank decomposition -> greedy rank allocation -> per-layer
re-decomposition at the assigned rank -> local adaptation -> serialized
compressed model + plan. Verification re-derives every stored quantity
from the artifacts themselves.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .allocate import CompressionPlan, allocate_ranks, basis_rank, prepare_full_rank
from .container import read_container, write_container
from .decompose import (
    Decomposition,
    StructuredSparse,
    compute_scaling,
    decompose_layer,
    expand,
    layer_error,
    local_adapt,
)
from .model import ModelGraph, load_model
from .photonic import EngineConfig, EnergyParams, condensed_matmul, load_energy_params, load_engine_config
from .quantize import dequantize, inject_noise, quantize
from .util import philox_rng, stable_key
from .vit import ToyViT, block_loss, collect_calibration, forward, logit_loss


@dataclass
class CompressedLayer:
    a: np.ndarray
    b: np.ndarray
    sparse: StructuredSparse

    def effective_weight(self) -> np.ndarray:
        return self.a @ self.b + expand(self.sparse)


def load_calibration_inputs(path) -> np.ndarray:
    _, tensors = read_container(path)
    if "inputs" not in tensors:
        raise ValueError(f"{path}: no 'inputs' tensor in calibration container")
    return np.asarray(tensors["inputs"], dtype=np.float64)


def compress_model(cfg: dict, engines: EngineConfig):
    """Run the full pipeline; returns (graph, compressed layers, plan, summary)."""
    graph, tensors = load_model(cfg["paths"]["model"])
    calib_inputs = load_calibration_inputs(cfg["paths"]["calibration"])
    calib = collect_calibration(graph, tensors, calib_inputs)

    t = cfg["targets"]
    dcfg = cfg["decomposition"]
    weights = {l.id: np.asarray(tensors[l.id], dtype=np.float64) for l in graph.compressible_layers()}
    scaling = {lid: compute_scaling(calib.activations[lid]) for lid in weights}

    state = prepare_full_rank(
        [(lid, weights[lid]) for lid in weights],
        scaling,
        s=t["sparse_ratio"],
        g=t["granularity"],
        iters=dcfg["iters"],
    )
    b = basis_rank(graph.hidden_size, engines.dense.ptc.n_h, override=cfg["allocator"]["basis_rank"])
    plan = allocate_ranks(
        state,
        alpha=t["alpha"],
        sparse_ratio=t["sparse_ratio"],
        g=t["granularity"],
        b=b,
        threshold=cfg["allocator"]["threshold"],
        temperature=cfg["allocator"]["temperature"],
    )

    compressed: dict[str, CompressedLayer] = {}
    ranks = {pl.id: pl.r for pl in plan.layers}
    for idx, lid in enumerate(weights):
        w, d = weights[lid], scaling[lid]
        dec = decompose_layer(w, d, ranks[lid], t["sparse_ratio"], t["granularity"], iters=dcfg["iters"])
        if dcfg["adapt_steps"] > 0:
            dec = local_adapt(
                dec, w, calib.activations[lid],
                steps=dcfg["adapt_steps"], lr=dcfg["adapt_lr"],
                seed=cfg["seed"] * 1_000_003 + idx,
            )
        compressed[lid] = CompressedLayer(a=dec.a, b=dec.b, sparse=dec.sparse)
        for pl in plan.layers:
            if pl.id == lid:
                pl.error = layer_error(w, d, dec)

    summary = {
        "alpha": t["alpha"],
        "psi_achieved": plan.psi_achieved,
        "iterations": plan.iterations,
        "layers": {pl.id: {"r": pl.r, "d": pl.d} for pl in plan.layers},
    }
    return graph, tensors, compressed, plan, summary


def save_compressed(path, graph: ModelGraph, tensors: dict, compressed: dict[str, CompressedLayer]) -> None:
    """Write a compressed model: factors + condensed sparse per layer,
    untouched tensors (embedding, head, layernorms) as-is."""
    out: dict[str, np.ndarray] = {}
    comp_meta = {}
    for name, arr in tensors.items():
        if name not in compressed:
            out[name] = np.asarray(arr)
    for lid, cl in compressed.items():
        out[f"{lid}.a"] = cl.a
        out[f"{lid}.b"] = cl.b
        out[f"{lid}.sparse.values"] = cl.sparse.condensed
        out[f"{lid}.sparse.cols"] = cl.sparse.kept_cols.astype(np.int32)
        comp_meta[lid] = {"r": int(cl.a.shape[1]), "d": int(cl.sparse.kept_per_chunk), "g": cl.sparse.granularity}
    write_container(path, out, extra={"graph": graph.to_json(), "compressed_layers": comp_meta})


def load_compressed(path):
    """Read a compressed model; returns (graph, compressed layers, other tensors)."""
    manifest, tensors = read_container(path)
    graph = ModelGraph.from_json(manifest["graph"])
    comp_meta = manifest.get("compressed_layers", {})
    if not comp_meta:
        raise ValueError(f"{path}: container holds no compressed layers")
    compressed = {}
    for lid, info in comp_meta.items():
        spec = graph.layer(lid)
        sparse = StructuredSparse(
            granularity=int(info["g"]),
            full_rows=spec.rows,
            full_cols=spec.cols,
            kept_cols=np.asarray(tensors[f"{lid}.sparse.cols"], dtype=np.int64),
            condensed=np.asarray(tensors[f"{lid}.sparse.values"], dtype=np.float64),
        )
        compressed[lid] = CompressedLayer(
            a=np.asarray(tensors[f"{lid}.a"], dtype=np.float64),
            b=np.asarray(tensors[f"{lid}.b"], dtype=np.float64),
            sparse=sparse,
        )
    others = {
        name: arr
        for name, arr in tensors.items()
        if not any(name.startswith(f"{lid}.") for lid in comp_meta)
    }
    return graph, compressed, others


def effective_tensors(graph: ModelGraph, compressed: dict[str, CompressedLayer], others: dict) -> dict:
    """Dense tensor bundle with compressed layers reconstructed, for inference."""
    tensors = dict(others)
    for lid, cl in compressed.items():
        tensors[lid] = cl.effective_weight()
    return tensors


def write_plan(path, plan: CompressionPlan) -> None:
    Path(path).write_text(json.dumps(plan.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


def read_plan(path) -> CompressionPlan:
    return CompressionPlan.from_json(json.loads(Path(path).read_text()))


def hardware_from_config(cfg: dict) -> tuple[EngineConfig, EnergyParams]:
    hw = cfg["hardware"]
    engines = load_engine_config(hw["engine_config"]) if hw["engine_config"] else EngineConfig.default()
    params = load_energy_params(hw["energy_params"]) if hw["energy_params"] else EnergyParams()
    return engines, params


# --- verification -------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def verify_artifacts(
    original_path,
    compressed_path,
    plan_path,
    calibration_path=None,
    quant_noise_ratio: float | None = None,
    seed: int = 0,
) -> list[CheckResult]:
    """Re-derive stored quantities from the artifacts and check consistency."""
    checks: list[CheckResult] = []
    graph_o, tensors_o = load_model(original_path)
    graph_c, compressed, others = load_compressed(compressed_path)
    plan = read_plan(plan_path)
    plan_by_id = {pl.id: pl for pl in plan.layers}

    # Condensed matmul equals expand-then-multiply on every stored layer;
    # runs first because it also validates the stored index structure.
    worst = 0.0
    failed = None
    for lid, cl in compressed.items():
        try:
            cl.sparse.validate()
            x = philox_rng(seed, 5, stable_key(lid)).standard_normal((cl.sparse.full_cols, 8))
            diff = np.abs(condensed_matmul(cl.sparse, x) - expand(cl.sparse) @ x).max()
            worst = max(worst, float(diff))
        except (ValueError, IndexError) as exc:
            failed = f"{lid}: {exc}"
            break
    structure_ok = failed is None
    checks.append(
        CheckResult(
            "condensed_matmul",
            structure_ok and worst <= 1e-9,
            failed or f"max |condensed - dense| = {worst:.3e}",
        )
    )

    # Reconstruction fidelity: recorded activation-aware error matches a
    # recomputation from the artifacts (needs calibration activations).
    if calibration_path is not None:
        calib_inputs = load_calibration_inputs(calibration_path)
        calib = collect_calibration(graph_o, tensors_o, calib_inputs)
        worst = 0.0
        detail = None
        for lid, cl in compressed.items():
            w = np.asarray(tensors_o[lid], dtype=np.float64)
            d = compute_scaling(calib.activations[lid])
            dec = Decomposition(
                a=cl.a, b=cl.b, sparse=cl.sparse, rank=cl.a.shape[1],
                objective_trace=[0.0], best_objective=0.0,
            )
            recorded = plan_by_id[lid].error
            try:
                recomputed = layer_error(w, d, dec)
            except (ValueError, IndexError) as exc:
                detail = f"{lid}: {exc}"
                break
            worst = max(worst, abs(recomputed - (recorded or 0.0)))
        checks.append(
            CheckResult(
                "reconstruction_fidelity",
                detail is None and worst <= 1e-6,
                detail or f"max |recorded - recomputed| layer error = {worst:.3e}",
            )
        )

    # psi recomputed from actual stored tensor shapes, exact rational check.
    orig = sum(l.rows * l.cols for l in graph_c.compressible_layers())
    kept = sum(
        cl.a.shape[1] * (cl.a.shape[0] + cl.b.shape[1]) + cl.sparse.full_rows * cl.sparse.kept_per_chunk
        for cl in compressed.values()
    )
    psi_exact = Fraction(orig - kept, orig)
    psi_ok = abs(float(psi_exact) - plan.psi_achieved) <= 1e-12 and psi_exact >= Fraction(plan.alpha)
    checks.append(
        CheckResult("psi_recomputation", psi_ok, f"psi = {float(psi_exact):.6f} vs target {plan.alpha}")
    )

    if not structure_ok:
        return checks  # model-level checks need valid sparse structure

    # Feature / logit drift between original and compressed model.
    model_o = ToyViT.from_tensors(graph_o, tensors_o)
    model_c = ToyViT.from_tensors(graph_c, effective_tensors(graph_c, compressed, others))
    in_dim = int(graph_o.meta["in_dim"])
    probe = philox_rng(seed, 6).standard_normal((in_dim, 16))
    logits_o, feats_o = forward(model_o, probe)
    logits_c, feats_c = forward(model_c, probe)
    bdrift = block_loss(feats_c, feats_o)
    ldrift = logit_loss(logits_c[None, :], logits_o[None, :], np.array([int(np.argmax(logits_o))]))
    checks.append(
        CheckResult(
            "distillation_drift",
            bool(np.isfinite(bdrift) and np.isfinite(ldrift)),
            f"block_loss = {bdrift:.4f}, logit_loss = {ldrift:.4f}",
        )
    )

    if quant_noise_ratio is not None:
        clean = quantized_matmul_weights(model_c.weights, ratio=0.0, seed=seed)
        noisy = quantized_matmul_weights(model_c.weights, ratio=quant_noise_ratio, seed=seed)
        lo, _ = forward(ToyViT(graph_c, clean, model_c.ln_params, model_c.hidden, model_c.heads, model_c.num_blocks), probe)
        ln, _ = forward(ToyViT(graph_c, noisy, model_c.ln_params, model_c.hidden, model_c.heads, model_c.num_blocks), probe)
        drift = float(np.abs(lo - ln).max())
        expected_zero = quant_noise_ratio == 0.0
        ok = drift == 0.0 if expected_zero else bool(np.isfinite(drift))
        checks.append(
            CheckResult("quant_noise", ok, f"max logit shift under quant+noise = {drift:.4e}")
        )
    return checks


def quantized_matmul_weights(weights: dict[str, np.ndarray], ratio: float, seed: int) -> dict[str, np.ndarray]:
    """Per-channel weight quantization, then optional multiplicative noise."""
    out = {}
    for name in sorted(weights):
        wq = dequantize(quantize(weights[name], "per_output_channel"))
        if ratio > 0.0:
            wq = inject_noise(wq, ratio, seed, key=stable_key(name))
        out[name] = wq
    return out


def activation_quant_matmul(ratio: float, seed: int):
    """matmul_fn quantizing (and optionally noising) activations per tensor."""
    counter = iter(range(1 << 30))

    def mm(w, x):
        xq = dequantize(quantize(x, "per_tensor"))
        if ratio > 0.0:
            xq = inject_noise(xq, ratio, seed, key=1_000_000 + next(counter))
        return w @ xq

    return mm
