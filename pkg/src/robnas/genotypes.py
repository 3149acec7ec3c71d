"""Search-space description: cell kinds, network layout, discrete genotypes.

The layout rule places reduction cells at one third and two thirds of the
stack, accuracy-oriented cells before the second reduction and
robustness-oriented cells after it, and widens filters only at the first
reduction (the 1-2-2 schedule). A genotype freezes, per cell kind and per
intermediate node, the two strongest incoming edges and their operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .blocks import N_OPS, OP_ORDER, OpKind


class CellKind(Enum):
    ACCURATE = "accurate"
    ROBUST = "robust"
    REDUCTION = "reduction"


KIND_ORDER: tuple[CellKind, ...] = tuple(CellKind)

_PLACEMENT_CODES = {"A": CellKind.ACCURATE, "R": CellKind.ROBUST}


def edge_count(intermediate_nodes: int) -> int:
    """Each node i draws candidate edges from both inputs and all earlier nodes."""
    return sum(2 + i for i in range(intermediate_nodes))


def edge_offsets(intermediate_nodes: int) -> tuple[int, ...]:
    """Row offset of each node's first edge in the flat (edge, op) matrix."""
    offs = []
    total = 0
    for i in range(intermediate_nodes):
        offs.append(total)
        total += 2 + i
    return tuple(offs)


@dataclass(frozen=True)
class SupernetConfig:
    """Stack layout: cell count, channel schedule, reduction placement."""

    total_cells: int = 8
    init_channels: int = 24
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    reduction_positions: tuple[int, ...] | None = None
    placement: str = "A-A-R"
    input_channels: int = 3
    image_size: int = 32
    class_count: int = 10
    intermediate_nodes: int = 4

    def resolved_reductions(self) -> tuple[int, ...]:
        if self.reduction_positions is not None:
            return tuple(self.reduction_positions)
        return (self.total_cells // 3, 2 * self.total_cells // 3)

    def validate(self) -> None:
        reductions = self.resolved_reductions()
        if self.total_cells < 1:
            raise ValueError(f"total_cells must be positive, got {self.total_cells}")
        if self.init_channels < 2 or self.init_channels % 2 != 0:
            raise ValueError(
                f"init_channels must be a positive even number, "
                f"got {self.init_channels}")
        for r in reductions:
            if not 0 < r < self.total_cells:
                raise ValueError(
                    f"reduction position {r} not strictly inside "
                    f"(0, {self.total_cells})")
        if list(reductions) != sorted(set(reductions)):
            raise ValueError(f"reduction positions must be strictly increasing, "
                             f"got {reductions}")
        segments = len(reductions) + 1
        parts = self.placement.split("-")
        if len(parts) != segments or any(p not in _PLACEMENT_CODES for p in parts):
            raise ValueError(
                f"placement {self.placement!r} does not describe {segments} "
                f"segments with codes A/R")
        if len(self.channel_multipliers) != segments:
            raise ValueError(
                f"channel_multipliers {self.channel_multipliers} does not "
                f"cover {segments} segments")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel multipliers must be positive")
        if self.intermediate_nodes < 1:
            raise ValueError("need at least one intermediate node")
        if self.class_count < 2:
            raise ValueError("need at least two classes")

    def segment_of(self, position: int) -> int:
        return sum(1 for r in self.resolved_reductions() if r <= position)

    def cell_kinds(self) -> tuple[CellKind, ...]:
        """Kind of the cell at each stack position."""
        self.validate()
        reductions = set(self.resolved_reductions())
        parts = self.placement.split("-")
        kinds = []
        for i in range(self.total_cells):
            if i in reductions:
                kinds.append(CellKind.REDUCTION)
            else:
                kinds.append(_PLACEMENT_CODES[parts[self.segment_of(i)]])
        return tuple(kinds)

    def cell_channels(self) -> tuple[int, ...]:
        """Per-node channel width of the cell at each stack position."""
        self.validate()
        return tuple(self.init_channels * self.channel_multipliers[self.segment_of(i)]
                     for i in range(self.total_cells))

    def to_dict(self) -> dict:
        return {
            "total_cells": self.total_cells,
            "init_channels": self.init_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "reduction_positions": list(self.resolved_reductions()),
            "placement": self.placement,
            "input_channels": self.input_channels,
            "image_size": self.image_size,
            "class_count": self.class_count,
            "intermediate_nodes": self.intermediate_nodes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SupernetConfig":
        cfg = cls(
            total_cells=int(d["total_cells"]),
            init_channels=int(d["init_channels"]),
            channel_multipliers=tuple(int(m) for m in d["channel_multipliers"]),
            reduction_positions=tuple(int(r) for r in d["reduction_positions"])
            if d.get("reduction_positions") is not None else None,
            placement=str(d["placement"]),
            input_channels=int(d.get("input_channels", 3)),
            image_size=int(d["image_size"]),
            class_count=int(d["class_count"]),
            intermediate_nodes=int(d.get("intermediate_nodes", 4)),
        )
        cfg.validate()
        return cfg


# One chosen edge: (predecessor state index, operation).
Edge = tuple[int, OpKind]
# Per kind: one tuple of two edges per intermediate node.
CellGenes = tuple[tuple[Edge, Edge], ...]

GENOTYPE_FORMAT_VERSION = 1
_GENOTYPE_MAGIC = "robnas-genotype"


@dataclass(frozen=True)
class Genotype:
    """Discrete architecture: two chosen (predecessor, op) pairs per node."""

    cells: dict[CellKind, CellGenes] = field(default_factory=dict)
    config: SupernetConfig = field(default_factory=SupernetConfig)

    def validate(self) -> None:
        nodes = self.config.intermediate_nodes
        for kind, genes in self.cells.items():
            if len(genes) != nodes:
                raise ValueError(
                    f"{kind.value} cell describes {len(genes)} nodes, "
                    f"expected {nodes}")
            for node, pair in enumerate(genes):
                if len(pair) != 2:
                    raise ValueError(
                        f"{kind.value} node {node} needs exactly 2 edges")
                preds = [p for p, _ in pair]
                if len(set(preds)) != 2:
                    raise ValueError(
                        f"{kind.value} node {node} has duplicate predecessors "
                        f"{preds}")
                for p, _ in pair:
                    if not 0 <= p < 2 + node:
                        raise ValueError(
                            f"{kind.value} node {node} predecessor {p} out of "
                            f"range")


def genotype_to_text(genotype: Genotype) -> str:
    genotype.validate()
    cfg = genotype.config.to_dict()
    header = " ".join(
        f"{k}={','.join(str(v) for v in cfg[k]) if isinstance(cfg[k], list) else cfg[k]}"
        for k in sorted(cfg))
    lines = [f"{_GENOTYPE_MAGIC} v{GENOTYPE_FORMAT_VERSION}", header]
    for kind in KIND_ORDER:
        if kind not in genotype.cells:
            continue
        for node, pair in enumerate(genotype.cells[kind]):
            for pred, op in pair:
                lines.append(f"{kind.value},{node},{pred},{op.value}")
    return "\n".join(lines) + "\n"


def genotype_from_text(text: str) -> Genotype:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ValueError("genotype text too short")
    magic, _, version = lines[0].partition(" v")
    if magic != _GENOTYPE_MAGIC:
        raise ValueError(f"not a genotype file (header {lines[0]!r})")
    if version != str(GENOTYPE_FORMAT_VERSION):
        raise ValueError(
            f"genotype format v{version} unsupported "
            f"(expected v{GENOTYPE_FORMAT_VERSION})")
    cfg_dict: dict = {}
    for item in lines[1].split():
        key, _, value = item.partition("=")
        cfg_dict[key] = value.split(",") if "," in value else value
    # Scalar-valued list fields still arrive as strings.
    for key in ("channel_multipliers", "reduction_positions"):
        if isinstance(cfg_dict.get(key), str):
            cfg_dict[key] = [cfg_dict[key]]
    config = SupernetConfig.from_dict(cfg_dict)

    ops_by_value = {op.value: op for op in OpKind}
    kinds_by_value = {k.value: k for k in CellKind}
    collected: dict[CellKind, list[list[Edge]]] = {}
    for ln in lines[2:]:
        kind_s, node_s, pred_s, op_s = ln.split(",")
        kind = kinds_by_value[kind_s]
        node, pred = int(node_s), int(pred_s)
        rows = collected.setdefault(
            kind, [[] for _ in range(config.intermediate_nodes)])
        rows[node].append((pred, ops_by_value[op_s]))
    cells = {kind: tuple(tuple(pair) for pair in rows)
             for kind, rows in collected.items()}
    genotype = Genotype(cells=cells, config=config)
    genotype.validate()
    return genotype


def save_genotype(genotype: Genotype, path) -> None:
    with open(path, "w") as f:
        f.write(genotype_to_text(genotype))


def load_genotype(path) -> Genotype:
    with open(path) as f:
        return genotype_from_text(f.read())


def discretize_matrix(weights: np.ndarray, intermediate_nodes: int) -> CellGenes:
    """Pick per-node edges from softmaxed scores for one cell kind.

    Per edge the best operation is the argmax over its row (ties: lowest
    operation index); per node the two edges with the largest best-op weights
    are kept (ties: lowest predecessor index). Chosen pairs are listed in
    predecessor order.
    """
    genes = []
    offsets = edge_offsets(intermediate_nodes)
    for node in range(intermediate_nodes):
        n_preds = 2 + node
        rows = weights[offsets[node]:offsets[node] + n_preds]
        best_ops = rows.argmax(axis=1)
        scores = rows[np.arange(n_preds), best_ops]
        ranked = sorted(range(n_preds), key=lambda j: (-scores[j], j))[:2]
        pair = tuple(sorted(
            ((pred, OP_ORDER[int(best_ops[pred])]) for pred in ranked),
            key=lambda e: e[0]))
        genes.append(pair)
    return tuple(genes)


def _row_softmax(alpha: np.ndarray) -> np.ndarray:
    a = alpha.astype(np.float64)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def discretize(arch, config: SupernetConfig) -> Genotype:
    """Extract the discrete genotype from continuous architecture parameters."""
    cells = {}
    for kind in KIND_ORDER:
        alpha = arch.tensors[kind].data
        if not np.isfinite(alpha).all():
            raise ValueError(f"non-finite architecture parameters for "
                             f"{kind.value} cells")
        cells[kind] = discretize_matrix(_row_softmax(alpha),
                                        config.intermediate_nodes)
    genotype = Genotype(cells=cells, config=config)
    genotype.validate()
    return genotype


def random_genotype(config: SupernetConfig, rng: np.random.Generator) -> Genotype:
    """Uniformly random genotype over the same (edge, op) choices."""
    cells = {}
    for kind in KIND_ORDER:
        genes = []
        for node in range(config.intermediate_nodes):
            preds = rng.choice(2 + node, size=2, replace=False)
            pair = tuple(sorted(
                ((int(p), OP_ORDER[int(rng.integers(N_OPS))]) for p in preds),
                key=lambda e: e[0]))
            genes.append(pair)
        cells[kind] = tuple(genes)
    return Genotype(cells=cells, config=config)


def with_config(genotype: Genotype, config: SupernetConfig) -> Genotype:
    """Retarget a genotype to a different stack layout (e.g. 8 -> 20 cells)."""
    config.validate()
    if config.intermediate_nodes != genotype.config.intermediate_nodes:
        raise ValueError("cannot retarget across node counts")
    return Genotype(cells=dict(genotype.cells), config=config)


__all__ = [
    "CellKind", "KIND_ORDER", "SupernetConfig", "Genotype", "Edge",
    "CellGenes", "GENOTYPE_FORMAT_VERSION", "edge_count", "edge_offsets",
    "genotype_to_text", "genotype_from_text", "save_genotype", "load_genotype",
    "discretize", "discretize_matrix", "random_genotype", "with_config",
]
