"""Mixed operations, cells, supernet assembly, and discrete instantiation.

The supernet stacks cells of three kinds according to the layout config;
every edge inside a cell is a softmax-weighted mixture of the seven
candidate operations, and all cells of the same kind share one architecture
parameter matrix. Discretized networks reuse the same layout with only the
chosen operations materialized.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, add, concat_channels, softmax
from .blocks import (
    Block,
    BlockList,
    FactorizedReduce,
    Head,
    N_OPS,
    OP_ORDER,
    ReLUConvBN,
    Stem,
    make_op,
)
from .genotypes import (
    CellKind,
    Genotype,
    KIND_ORDER,
    SupernetConfig,
    edge_count,
    edge_offsets,
)


class ArchParams:
    """Continuous architecture parameters: one (edges x ops) matrix per cell kind.

    All cells of the same kind share the matrix. The canonical flat layout is
    kind-major (accurate, robust, reduction), then edge, then operation.
    """

    def __init__(self, tensors: dict[CellKind, Tensor],
                 intermediate_nodes: int):
        self.intermediate_nodes = intermediate_nodes
        n_edges = edge_count(intermediate_nodes)
        for kind in KIND_ORDER:
            t = tensors[kind]
            if t.data.shape != (n_edges, N_OPS):
                raise ShapeError(
                    f"alpha matrix for {kind.value} has shape {t.data.shape}, "
                    f"expected {(n_edges, N_OPS)}")
        self.tensors = {kind: tensors[kind] for kind in KIND_ORDER}

    @classmethod
    def initial(cls, rng: np.random.Generator, intermediate_nodes: int = 4,
                std: float = 1e-3, dtype=np.float64) -> "ArchParams":
        """Near-uniform initial mixture: zero-mean Gaussian entries, std 1e-3."""
        n_edges = edge_count(intermediate_nodes)
        tensors = {
            kind: Tensor(rng.normal(0.0, std, (n_edges, N_OPS)).astype(dtype),
                         grad_required=True, name=f"alpha.{kind.value}")
            for kind in KIND_ORDER
        }
        return cls(tensors, intermediate_nodes)

    def params(self) -> list[Tensor]:
        return [self.tensors[kind] for kind in KIND_ORDER]

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.tensors[kind].data.reshape(-1) for kind in KIND_ORDER])

    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def with_flat(self, flat: np.ndarray) -> "ArchParams":
        """Build replacement parameters from a flat vector (same layout)."""
        if flat.size != self.size():
            raise ShapeError(
                f"flat vector of length {flat.size} does not match "
                f"{self.size()} architecture parameters")
        tensors = {}
        start = 0
        for kind in KIND_ORDER:
            ref = self.tensors[kind]
            n = ref.data.size
            tensors[kind] = Tensor(
                flat[start:start + n].reshape(ref.data.shape)
                .astype(ref.data.dtype),
                grad_required=True, name=ref.name)
            start += n
        return ArchParams(tensors, self.intermediate_nodes)

    def clone(self) -> "ArchParams":
        return self.with_flat(self.flatten())


def mixed_op(x: Tensor, alpha_row: Tensor, blocks) -> Tensor:
    """Softmax-weighted sum of all candidate operations on one edge."""
    if alpha_row.data.shape != (len(blocks),):
        raise ShapeError(
            f"alpha row has shape {alpha_row.data.shape}, expected "
            f"({len(blocks)},)")
    if not np.isfinite(alpha_row.data).all():
        raise ValueError("non-finite architecture parameters in mixed op")
    weights = softmax(alpha_row, axis=-1)
    out = None
    for o, block in enumerate(blocks):
        term = weights[o] * block(x)
        out = term if out is None else add(out, term)
    return out


class MixedEdge(Block):
    """All candidate operations for one edge of a cell."""

    def __init__(self, channels: int, stride: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.ops = BlockList(
            make_op(kind, channels, stride, affine=False, rng=rng, dtype=dtype)
            for kind in OP_ORDER)

    def forward(self, x: Tensor, alpha_row: Tensor) -> Tensor:
        return mixed_op(x, alpha_row, self.ops)


class Cell(Block):
    """One searched cell: 2 input nodes, N intermediate nodes, concat output.

    Intermediate node i sums the mixed operations on its 2+i incoming edges;
    reduction cells apply stride 2 on edges leaving the two input nodes.
    Preprocess layers reconcile the incoming feature shapes.
    """

    def __init__(self, kind: CellKind, node_channels: int, c_prev_prev: int,
                 c_prev: int, prev_was_reduction: bool,
                 intermediate_nodes: int = 4, *, rng: np.random.Generator,
                 dtype=np.float64, affine: bool = False):
        super().__init__()
        self.kind = kind
        self.node_channels = node_channels
        self.intermediate_nodes = intermediate_nodes
        self.out_channels = intermediate_nodes * node_channels
        if prev_was_reduction:
            self.pre0 = FactorizedReduce(c_prev_prev, node_channels,
                                         affine=affine, rng=rng, dtype=dtype)
        else:
            self.pre0 = ReLUConvBN(c_prev_prev, node_channels, affine=affine,
                                   rng=rng, dtype=dtype)
        self.pre1 = ReLUConvBN(c_prev, node_channels, affine=affine, rng=rng,
                               dtype=dtype)
        edges = []
        for node in range(intermediate_nodes):
            for pred in range(2 + node):
                stride = 2 if (kind is CellKind.REDUCTION and pred < 2) else 1
                edges.append(MixedEdge(node_channels, stride, rng=rng,
                                       dtype=dtype))
        self.edges = BlockList(edges)

    def forward(self, s0: Tensor, s1: Tensor, alpha: Tensor) -> Tensor:
        n_edges = edge_count(self.intermediate_nodes)
        if alpha.data.shape != (n_edges, N_OPS):
            raise ShapeError(
                f"cell alpha has shape {alpha.data.shape}, expected "
                f"{(n_edges, N_OPS)}")
        try:
            states = [self.pre0(s0), self.pre1(s1)]
        except ShapeError as e:
            raise ShapeError(f"cell preprocess failed: {e}") from e
        ei = 0
        for node in range(self.intermediate_nodes):
            acc = None
            for pred in range(2 + node):
                y = self.edges[ei](states[pred], alpha[ei])
                acc = y if acc is None else add(acc, y)
                ei += 1
            states.append(acc)
        return concat_channels(states[2:])


class Supernet(Block):
    """The full over-parameterized network for differentiable search."""

    def __init__(self, config: SupernetConfig, *, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        config.validate()
        self.config = config
        kinds = config.cell_kinds()
        channels = config.cell_channels()
        self.stem = Stem(config.input_channels, config.init_channels, rng=rng,
                         dtype=dtype)
        cells = []
        c_pp = c_p = config.init_channels
        prev_reduction = False
        for kind, c_node in zip(kinds, channels):
            cell = Cell(kind, c_node, c_pp, c_p, prev_reduction,
                        config.intermediate_nodes, rng=rng, dtype=dtype,
                        affine=False)
            cells.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            prev_reduction = kind is CellKind.REDUCTION
        self.cells = BlockList(cells)
        self.head = Head(c_p, config.class_count, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, arch: ArchParams) -> Tensor:
        logits, _ = self.forward_with_cells(x, arch)
        return logits

    def forward_with_cells(self, x: Tensor,
                           arch: ArchParams) -> tuple[Tensor, list[Tensor]]:
        if arch.intermediate_nodes != self.config.intermediate_nodes:
            raise ShapeError("architecture parameters target a different "
                             "node count")
        s0 = s1 = self.stem(x)
        outputs = []
        for index, cell in enumerate(self.cells):
            try:
                s0, s1 = s1, cell(s0, s1, arch.tensors[cell.kind])
            except ShapeError as e:
                raise ShapeError(f"cell {index}: {e}") from e
            outputs.append(s1)
        return self.head(s1), outputs


class BoundSupernet:
    """Supernet with fixed architecture parameters; behaves as a plain model."""

    def __init__(self, net: Supernet, arch: ArchParams):
        self.net = net
        self.arch = arch

    def __call__(self, x: Tensor) -> Tensor:
        return self.net.forward(x, self.arch)

    @property
    def training(self) -> bool:
        return self.net.training

    def train(self, mode: bool = True):
        self.net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def named_parameters(self, prefix: str = ""):
        return self.net.named_parameters(prefix)

    def named_buffers(self, prefix: str = ""):
        return self.net.named_buffers(prefix)


class DiscreteCell(Block):
    """Cell with only the genotype-chosen edges materialized."""

    def __init__(self, kind: CellKind, genes, node_channels: int,
                 c_prev_prev: int, c_prev: int, prev_was_reduction: bool, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.kind = kind
        self.genes = genes
        self.node_channels = node_channels
        self.intermediate_nodes = len(genes)
        self.out_channels = self.intermediate_nodes * node_channels
        if prev_was_reduction:
            self.pre0 = FactorizedReduce(c_prev_prev, node_channels,
                                         affine=True, rng=rng, dtype=dtype)
        else:
            self.pre0 = ReLUConvBN(c_prev_prev, node_channels, affine=True,
                                   rng=rng, dtype=dtype)
        self.pre1 = ReLUConvBN(c_prev, node_channels, affine=True, rng=rng,
                               dtype=dtype)
        ops = []
        for node, pair in enumerate(genes):
            for pred, op_kind in pair:
                stride = 2 if (kind is CellKind.REDUCTION and pred < 2) else 1
                ops.append(make_op(op_kind, node_channels, stride, affine=True,
                                   rng=rng, dtype=dtype))
        self.ops = BlockList(ops)

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        states = [self.pre0(s0), self.pre1(s1)]
        oi = 0
        for node, pair in enumerate(self.genes):
            acc = None
            for pred, _ in pair:
                y = self.ops[oi](states[pred])
                acc = y if acc is None else add(acc, y)
                oi += 1
            states.append(acc)
        return concat_channels(states[2:])


class DiscreteNetwork(Block):
    """Stack of discrete cells following the same layout rules as the supernet."""

    def __init__(self, genotype: Genotype, config: SupernetConfig | None = None,
                 *, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        config = config if config is not None else genotype.config
        config.validate()
        genotype.validate()
        self.config = config
        self.genotype = genotype
        kinds = config.cell_kinds()
        missing = {k.value for k in set(kinds)} - {k.value for k in genotype.cells}
        if missing:
            raise ValueError(
                f"genotype lacks cells required by the layout: "
                f"{sorted(missing)}")
        channels = config.cell_channels()
        self.stem = Stem(config.input_channels, config.init_channels, rng=rng,
                         dtype=dtype)
        cells = []
        c_pp = c_p = config.init_channels
        prev_reduction = False
        for kind, c_node in zip(kinds, channels):
            cell = DiscreteCell(kind, genotype.cells[kind], c_node, c_pp, c_p,
                                prev_reduction, rng=rng, dtype=dtype)
            cells.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            prev_reduction = kind is CellKind.REDUCTION
        self.cells = BlockList(cells)
        self.head = Head(c_p, config.class_count, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return self.head(s1)


def build_supernet(config: SupernetConfig, *, rng: np.random.Generator,
                   dtype=np.float64) -> Supernet:
    return Supernet(config, rng=rng, dtype=dtype)


def instantiate(genotype: Genotype, config: SupernetConfig | None = None, *,
                rng: np.random.Generator, dtype=np.float64) -> DiscreteNetwork:
    return DiscreteNetwork(genotype, config, rng=rng, dtype=dtype)
