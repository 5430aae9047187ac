"""Toy pre-norm ViT forward pass, distillation losses, and calibration capture.

Tokens are column vectors: a layer with weight W (rows x cols) consumes an
activation matrix of shape (cols x tokens). Each block runs
LN -> multi-head self-attention -> residual add, then
LN -> MLP with exact GELU -> residual add. Logits come from mean-pooling
tokens and applying the head matrix. Everything is pure-functional numpy,
so repeated calls are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from .container import read_container, write_container
from .model import CalibrationSet, LayerSpec, ModelGraph
from .util import as_matrix, philox_rng

LN_EPS = 1e-6


@dataclass
class ToyViT:
    """Executable toy vision transformer built from a graph + tensor bundle."""

    graph: ModelGraph
    weights: dict[str, np.ndarray]  # layer id -> float64 matrix
    ln_params: dict[str, np.ndarray]  # "block{i}.ln{1,2}.{weight,bias}" -> vector
    hidden: int
    heads: int
    num_blocks: int

    @classmethod
    def from_tensors(cls, graph: ModelGraph, tensors: dict[str, np.ndarray]) -> "ToyViT":
        heads = int(graph.meta.get("heads", "1"))
        num_blocks = len(graph.blocks)
        if graph.hidden_size % heads != 0:
            raise ValueError(f"hidden size {graph.hidden_size} not divisible by {heads} heads")
        weights = {l.id: as_matrix(tensors[l.id], l.id) for l in graph.layers}
        ln_params = {}
        for i in range(num_blocks):
            for ln in ("ln1", "ln2"):
                for part in ("weight", "bias"):
                    name = f"block{i}.{ln}.{part}"
                    ln_params[name] = np.asarray(tensors[name], dtype=np.float64).reshape(-1)
        return cls(graph, weights, ln_params, graph.hidden_size, heads, num_blocks)


@dataclass
class BlockFeatures:
    """Residual-stream snapshots, one (tokens x hidden) matrix per sub-block."""

    attn: list[np.ndarray] = field(default_factory=list)
    mlp: list[np.ndarray] = field(default_factory=list)

    def pairs(self) -> list[np.ndarray]:
        return list(self.attn) + list(self.mlp)


def _layernorm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # x is (hidden x tokens); normalize each token over the hidden axis.
    mu = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * weight[:, None] + bias[:, None]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


try:  # scipy is common but not required; fall back to a vectorized math.erf
    from scipy.special import erf as _erf
except ImportError:  # pragma: no cover
    import math

    _erf = np.vectorize(math.erf, otypes=[np.float64])


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _erf(x / sqrt(2.0)))


def forward(model: ToyViT, inputs: np.ndarray, matmul_fn=None, tap: dict | None = None):
    """Run one token matrix (in_dim x tokens) through the model.

    Returns (logits, BlockFeatures) where logits is a (classes,) vector for
    the mean-pooled sequence. ``matmul_fn(w, x)`` overrides the product used
    for every weight-matrix application (PTC execution hooks into this).
    ``tap``, when given, is filled with the exact input activation of each
    weight layer plus per-block attention matrices under ``attn_probs``.
    """
    mm = matmul_fn if matmul_fn is not None else np.matmul

    def apply(layer_id: str, x: np.ndarray) -> np.ndarray:
        w = model.weights[layer_id]
        if w.shape[1] != x.shape[0]:
            raise ValueError(f"layer {layer_id!r}: weight {w.shape} cannot consume input {x.shape}")
        if tap is not None:
            tap[layer_id] = x.copy()
        return mm(w, x)

    inputs = as_matrix(inputs, "inputs")
    x = apply("embed", inputs)
    feats = BlockFeatures()
    dh = model.hidden // model.heads
    if tap is not None:
        tap["attn_probs"] = []
    for i in range(model.num_blocks):
        normed = _layernorm(x, model.ln_params[f"block{i}.ln1.weight"], model.ln_params[f"block{i}.ln1.bias"])
        q = apply(f"block{i}.attn.q", normed)
        k = apply(f"block{i}.attn.k", normed)
        v = apply(f"block{i}.attn.v", normed)
        heads_out = []
        for h in range(model.heads):
            sl = slice(h * dh, (h + 1) * dh)
            probs = _softmax_rows(q[sl].T @ k[sl] / sqrt(dh))  # (tokens x tokens), rows sum to 1
            if tap is not None:
                tap["attn_probs"].append(probs)
            heads_out.append(v[sl] @ probs.T)
        x = x + apply(f"block{i}.attn.o", np.concatenate(heads_out, axis=0))
        feats.attn.append(x.T.copy())

        normed = _layernorm(x, model.ln_params[f"block{i}.ln2.weight"], model.ln_params[f"block{i}.ln2.bias"])
        hidden_act = _gelu(apply(f"block{i}.mlp.fc1", normed))
        x = x + apply(f"block{i}.mlp.fc2", hidden_act)
        feats.mlp.append(x.T.copy())

    pooled = x.mean(axis=1, keepdims=True)
    logits = apply("head", pooled)[:, 0]
    return logits, feats


def block_loss(student: BlockFeatures, teacher: BlockFeatures) -> float:
    """Mean squared-Frobenius gap over all present feature pairs."""
    s_pairs, t_pairs = student.pairs(), teacher.pairs()
    if len(s_pairs) != len(t_pairs) or not s_pairs:
        raise ValueError(f"feature sets differ: {len(s_pairs)} vs {len(t_pairs)} matrices")
    total = 0.0
    for fs, ft in zip(s_pairs, t_pairs):
        if fs.shape != ft.shape:
            raise ValueError(f"feature shape mismatch {fs.shape} vs {ft.shape}")
        diff = fs - ft
        total += float(np.sum(diff * diff))
    return total / len(s_pairs)


def _log_softmax(y: np.ndarray) -> np.ndarray:
    z = y - y.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logit_loss(y_s: np.ndarray, y_t: np.ndarray, labels: np.ndarray, tau: float = 4.0) -> float:
    """0.5 * KL(student/tau || teacher/tau) + 0.5 * CE(student, labels), sample mean.

    The KL term carries no tau^2 rescaling; cross entropy uses the raw
    student logits. Both terms are shift invariant per sample.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    y_s = as_matrix(y_s, "student logits")
    y_t = as_matrix(y_t, "teacher logits")
    if y_s.shape != y_t.shape:
        raise ValueError(f"logit shapes differ: {y_s.shape} vs {y_t.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (y_s.shape[0],) or labels.min() < 0 or labels.max() >= y_s.shape[1]:
        raise ValueError("labels must index valid classes, one per sample")

    log_ps = _log_softmax(y_s / tau)
    log_pt = _log_softmax(y_t / tau)
    kl = float(np.mean(np.sum(np.exp(log_ps) * (log_ps - log_pt), axis=1)))
    ce = float(-np.mean(_log_softmax(y_s)[np.arange(len(labels)), labels]))
    return 0.5 * kl + 0.5 * ce


@dataclass
class ToyDataset:
    """Inputs (samples x in_dim x tokens) with one integer label per sample."""

    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


def evaluate(model: ToyViT, dataset: ToyDataset, matmul_fn=None) -> float:
    """Top-1 accuracy over the dataset."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    hits = 0
    for i in range(len(dataset)):
        logits, _ = forward(model, dataset.inputs[i], matmul_fn=matmul_fn)
        hits += int(np.argmax(logits) == dataset.labels[i])
    return hits / len(dataset)


def predict_logits(model: ToyViT, dataset: ToyDataset, matmul_fn=None) -> np.ndarray:
    out = np.empty((len(dataset), model.weights["head"].shape[0]))
    for i in range(len(dataset)):
        out[i], _ = forward(model, dataset.inputs[i], matmul_fn=matmul_fn)
    return out


def collect_calibration(graph: ModelGraph, tensors: dict[str, np.ndarray], inputs: np.ndarray) -> CalibrationSet:
    """Record the exact activation matrix each compressible layer consumes."""
    model = ToyViT.from_tensors(graph, tensors)
    inputs = as_matrix(inputs, "calibration inputs")
    embed = graph.layer("embed")
    if inputs.shape[0] != embed.cols:
        raise ValueError(f"layer 'embed': expected {embed.cols} input rows, got {inputs.shape[0]}")
    tap: dict = {}
    forward(model, inputs, tap=tap)
    activations = {l.id: tap[l.id] for l in graph.compressible_layers()}
    return CalibrationSet(activations=activations, sample_count=inputs.shape[1])


# --- toy generators ---------------------------------------------------------


def build_toy_graph(hidden=48, heads=4, mlp_ratio=2, blocks=2, classes=10, in_dim=24) -> ModelGraph:
    mlp_hidden = hidden * mlp_ratio
    layers = [LayerSpec("embed", "embed", hidden, in_dim)]
    block_groups = []
    for i in range(blocks):
        attn_ids, mlp_ids = [], []
        for proj in ("q", "k", "v", "o"):
            lid = f"block{i}.attn.{proj}"
            layers.append(LayerSpec(lid, f"attn_{proj}", hidden, hidden))
            attn_ids.append(lid)
        layers.append(LayerSpec(f"block{i}.mlp.fc1", "mlp_fc1", mlp_hidden, hidden))
        layers.append(LayerSpec(f"block{i}.mlp.fc2", "mlp_fc2", hidden, mlp_hidden))
        mlp_ids = [f"block{i}.mlp.fc1", f"block{i}.mlp.fc2"]
        block_groups.append({"attn": attn_ids, "mlp": mlp_ids})
    layers.append(LayerSpec("head", "head", classes, hidden))
    meta = {
        "heads": str(heads),
        "mlp_ratio": str(mlp_ratio),
        "blocks": str(blocks),
        "classes": str(classes),
        "in_dim": str(in_dim),
    }
    return ModelGraph(layers=layers, blocks=block_groups, hidden_size=hidden, meta=meta)


def gen_toy_model(graph: ModelGraph, seed: int) -> dict[str, np.ndarray]:
    """Seeded random weights, fan-in scaled; layernorms start at identity."""
    tensors: dict[str, np.ndarray] = {}
    for idx, layer in enumerate(graph.layers):
        rng = philox_rng(seed, 1, idx)
        tensors[layer.id] = rng.normal(0.0, 1.0 / sqrt(layer.cols), size=(layer.rows, layer.cols))
    for i in range(len(graph.blocks)):
        for ln in ("ln1", "ln2"):
            tensors[f"block{i}.{ln}.weight"] = np.ones(graph.hidden_size)
            tensors[f"block{i}.{ln}.bias"] = np.zeros(graph.hidden_size)
    return tensors


def gen_toy_dataset(graph: ModelGraph, tensors: dict[str, np.ndarray], samples: int, tokens: int, seed: int) -> ToyDataset:
    """Random token inputs labeled by the generating model's own argmax."""
    model = ToyViT.from_tensors(graph, tensors)
    in_dim = int(graph.meta["in_dim"])
    rng = philox_rng(seed, 2)
    inputs = rng.normal(0.0, 1.0, size=(samples, in_dim, tokens))
    labels = np.empty(samples, dtype=np.int64)
    for i in range(samples):
        logits, _ = forward(model, inputs[i])
        labels[i] = int(np.argmax(logits))
    return ToyDataset(inputs=inputs, labels=labels)


def save_dataset(path, dataset: ToyDataset) -> None:
    write_container(path, {"inputs": dataset.inputs, "labels": dataset.labels}, extra={"kind": "dataset"})


def load_dataset(path) -> ToyDataset:
    _, tensors = read_container(path)
    return ToyDataset(
        inputs=np.asarray(tensors["inputs"], dtype=np.float64),
        labels=np.asarray(tensors["labels"], dtype=np.int64).reshape(-1),
    )
