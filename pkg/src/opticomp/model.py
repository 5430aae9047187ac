"""Transformer model manifest and tensor bundle on top of the LTEN container."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container

COMPRESSIBLE_KINDS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_fc1", "mlp_fc2")
LAYER_KINDS = COMPRESSIBLE_KINDS + ("embed", "head")


@dataclass(frozen=True)
class LayerSpec:
    """One weight matrix: ``rows x cols`` acting as y = W @ x."""

    id: str
    kind: str
    rows: int
    cols: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.id!r}: unknown kind {self.kind!r}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"layer {self.id!r}: degenerate shape {self.rows}x{self.cols}")

    @property
    def compressible(self) -> bool:
        return self.kind in COMPRESSIBLE_KINDS


@dataclass
class ModelGraph:
    """Ordered layers, their grouping into blocks, and free-form metadata."""

    layers: list[LayerSpec]
    blocks: list[dict]  # [{"attn": [ids], "mlp": [ids]}], in block order
    hidden_size: int
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate layer ids in model graph")
        grouped = set()
        for block in self.blocks:
            for group in ("attn", "mlp"):
                grouped.update(block.get(group, []))
        for layer in self.layers:
            in_group = layer.id in grouped
            if layer.compressible and not in_group:
                raise ValueError(f"layer {layer.id!r} belongs to no block group")
            if not layer.compressible and in_group:
                raise ValueError(f"layer {layer.id!r} is embedding/head but grouped in a block")

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(f"no layer {layer_id!r} in model graph")

    def compressible_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.compressible]

    def to_json(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "layers": [
                {"id": l.id, "kind": l.kind, "rows": l.rows, "cols": l.cols} for l in self.layers
            ],
            "blocks": self.blocks,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelGraph":
        layers = [LayerSpec(d["id"], d["kind"], d["rows"], d["cols"]) for d in obj["layers"]]
        return cls(layers=layers, blocks=obj["blocks"], hidden_size=obj["hidden_size"], meta=dict(obj.get("meta", {})))


@dataclass
class CalibrationSet:
    """Per-layer input activations; ``activations[id]`` is (cols x sample_count)."""

    activations: dict[str, np.ndarray]
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("calibration set needs at least one sample")


def save_model(path, graph: ModelGraph, tensors: dict[str, np.ndarray]) -> None:
    """Write graph + tensors to an LTEN file; layer tensors are shape-checked."""
    for layer in graph.layers:
        arr = tensors.get(layer.id)
        if arr is None:
            raise ValueError(f"missing tensor for layer {layer.id!r}")
        if tuple(arr.shape) != (layer.rows, layer.cols):
            raise ValueError(
                f"layer {layer.id!r}: manifest says {layer.rows}x{layer.cols}, tensor is {arr.shape}"
            )
    write_container(path, tensors, extra={"graph": graph.to_json()})


def load_model(path) -> tuple[ModelGraph, dict[str, np.ndarray]]:
    manifest, tensors = read_container(path)
    if "graph" not in manifest:
        raise ValueError(f"{path}: container has no model graph in its manifest")
    graph = ModelGraph.from_json(manifest["graph"])
    for layer in graph.layers:
        arr = tensors.get(layer.id)
        if arr is None or tuple(arr.shape) != (layer.rows, layer.cols):
            got = None if arr is None else arr.shape
            raise ValueError(f"layer {layer.id!r}: stored tensor shape {got} does not match manifest")
    return graph, tensors
