"""Candidate operation blocks for the search space, plus network stem/head.

Blocks are lightweight stateful modules over the autodiff primitives: they
own named parameter tensors, batchnorm running statistics, and a train/eval
flag. The seven candidate operations follow the standard cell-search
convention: separable convs are (relu - depthwise - pointwise - batchnorm)
applied twice, dilated convs are a single such unit with dilation 2, pooling
is followed by batchnorm, and a stride-2 identity becomes a factorized
spatial reduction. Supernet batchnorms run without learned affine scaling so
architecture weights cannot be confounded by free per-branch rescaling.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from enum import Enum

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    avgpool2d,
    batchnorm2d,
    concat_channels,
    conv2d,
    global_avg_pool,
    matmul,
    maxpool2d,
    relu,
)

_BN_STATS_ENABLED = True


@contextlib.contextmanager
def bn_stats_frozen():
    """Suppress running-statistic updates while keeping batch-stat behavior.

    Used for forwards that must not pollute the running averages (attack
    crafting happens in eval mode anyway; architecture-gradient and metric
    forwards use this).
    """
    global _BN_STATS_ENABLED
    prev = _BN_STATS_ENABLED
    _BN_STATS_ENABLED = False
    try:
        yield
    finally:
        _BN_STATS_ENABLED = prev


class Block:
    """Minimal module: named parameters, buffers, children, train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        params = self.__dict__.get("_params")
        if params is not None:
            if isinstance(value, Tensor):
                params[name] = value
                self._children.pop(name, None)
            elif isinstance(value, Block):
                self._children[name] = value
                params.pop(name, None)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def train(self, mode: bool = True) -> "Block":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Block":
        return self.train(False)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def replace_parameters(self, updates: dict[str, Tensor]) -> None:
        """Install replacement tensors by dotted parameter name."""
        for name, tensor in updates.items():
            parts = name.split(".")
            target = self
            for part in parts[:-1]:
                target = target._children[part]
            if parts[-1] not in target._params:
                raise KeyError(f"unknown parameter {name!r}")
            setattr(target, parts[-1], tensor)


class BlockList(Block):
    """Sequence of child blocks addressable by integer index."""

    def __init__(self, blocks=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for b in blocks:
            self.append(b)

    def append(self, block: Block) -> None:
        self._children[str(len(self._items))] = block
        self._items.append(block)

    def __getitem__(self, i: int) -> Block:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def parameter_checksum(block: Block) -> str:
    """Stable digest over all named parameters and buffers."""
    h = hashlib.sha256()
    for name, p in block.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    for name, b in block.named_buffers():
        h.update(name.encode())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


class Conv2d(Block):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1, *, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        fan_in = (in_channels // groups) * kernel * kernel
        std = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, (out_channels, in_channels // groups,
                                  kernel, kernel))
        self.weight = Tensor(w.astype(dtype), grad_required=True)
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding,
                      dilation=self.dilation, groups=self.groups)


class BatchNorm2d(Block):
    def __init__(self, channels: int, affine: bool = True, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.affine = affine
        self.eps = eps
        self.momentum = momentum
        if affine:
            self.gamma = Tensor(np.ones(channels, dtype=dtype),
                                grad_required=True)
            self.beta = Tensor(np.zeros(channels, dtype=dtype),
                               grad_required=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(
            x,
            self.gamma if self.affine else None,
            self.beta if self.affine else None,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
            update_running=_BN_STATS_ENABLED,
        )


class Linear(Block):
    def __init__(self, in_features: int, out_features: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        std = math.sqrt(1.0 / in_features)
        self.weight = Tensor(
            rng.normal(0.0, std, (in_features, out_features)).astype(dtype),
            grad_required=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype),
                           grad_required=True)

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class OpKind(Enum):
    """The seven candidate operations; enum order fixes the alpha column index."""

    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    DIL_CONV_3X3 = "dil_conv_3x3"
    DIL_CONV_5X5 = "dil_conv_5x5"
    MAX_POOL_3X3 = "max_pool_3x3"
    AVG_POOL_3X3 = "avg_pool_3x3"
    IDENTITY = "identity"


OP_ORDER: tuple[OpKind, ...] = tuple(OpKind)
N_OPS = len(OP_ORDER)


class Identity(Block):
    """Stride-1 pass-through; validates the channel contract only."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.channels:
            raise ShapeError(
                f"identity: expected {self.channels} channels, "
                f"got {x.data.shape}")
        return x


class FactorizedReduce(Block):
    """Channel-preserving stride-2 reduction: two offset 1x1 convs, concat, bn."""

    def __init__(self, in_channels: int, out_channels: int,
                 affine: bool = True, *, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        if out_channels % 2 != 0:
            raise ShapeError(
                f"factorized reduce needs even output channels, "
                f"got {out_channels}")
        self.conv1 = Conv2d(in_channels, out_channels // 2, 1, stride=2,
                            rng=rng, dtype=dtype)
        self.conv2 = Conv2d(in_channels, out_channels // 2, 1, stride=2,
                            rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, affine=affine, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(x)
        a = self.conv1(x)
        b = self.conv2(x[:, :, 1:, 1:])
        return self.bn(concat_channels([a, b]))


class ReLUConvBN(Block):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1,
                 stride: int = 1, padding: int = 0, affine: bool = True, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, stride=stride,
                           padding=padding, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, affine=affine, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(relu(x)))


class SepConv(Block):
    """Separable conv: (relu - depthwise - pointwise - bn) applied twice."""

    def __init__(self, channels: int, kernel: int, stride: int,
                 affine: bool = True, *, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        pad = kernel // 2
        self.dw1 = Conv2d(channels, channels, kernel, stride=stride,
                          padding=pad, groups=channels, rng=rng, dtype=dtype)
        self.pw1 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(channels, affine=affine, dtype=dtype)
        self.dw2 = Conv2d(channels, channels, kernel, stride=1, padding=pad,
                          groups=channels, rng=rng, dtype=dtype)
        self.pw2 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, affine=affine, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn1(self.pw1(self.dw1(relu(x))))
        return self.bn2(self.pw2(self.dw2(relu(x))))


class DilConv(Block):
    """Dilated separable conv: one relu - depthwise(d=2) - pointwise - bn unit."""

    def __init__(self, channels: int, kernel: int, stride: int,
                 affine: bool = True, *, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        dilation = 2
        pad = dilation * (kernel - 1) // 2
        self.dw = Conv2d(channels, channels, kernel, stride=stride,
                         padding=pad, dilation=dilation, groups=channels,
                         rng=rng, dtype=dtype)
        self.pw = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, affine=affine, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.pw(self.dw(relu(x))))


class PoolBN(Block):
    """3x3 pooling (pad 1, average counts padded zeros) followed by batchnorm."""

    def __init__(self, pool: str, channels: int, stride: int,
                 affine: bool = True, dtype=np.float64):
        super().__init__()
        if pool not in ("max", "avg"):
            raise ValueError(f"unknown pool kind {pool!r}")
        self.pool = pool
        self.channels = channels
        self.stride = stride
        self.bn = BatchNorm2d(channels, affine=affine, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.channels:
            raise ShapeError(
                f"{self.pool}_pool: expected {self.channels} channels, "
                f"got {x.data.shape}")
        if self.pool == "max":
            y = maxpool2d(x, 3, stride=self.stride, padding=1)
        else:
            y = avgpool2d(x, 3, stride=self.stride, padding=1)
        return self.bn(y)


def make_op(kind: OpKind, channels: int, stride: int, affine: bool, *,
            rng: np.random.Generator, dtype=np.float64) -> Block:
    """Build one candidate operation block for an edge."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if kind is OpKind.SEP_CONV_3X3:
        return SepConv(channels, 3, stride, affine, rng=rng, dtype=dtype)
    if kind is OpKind.SEP_CONV_5X5:
        return SepConv(channels, 5, stride, affine, rng=rng, dtype=dtype)
    if kind is OpKind.DIL_CONV_3X3:
        return DilConv(channels, 3, stride, affine, rng=rng, dtype=dtype)
    if kind is OpKind.DIL_CONV_5X5:
        return DilConv(channels, 5, stride, affine, rng=rng, dtype=dtype)
    if kind is OpKind.MAX_POOL_3X3:
        return PoolBN("max", channels, stride, affine, dtype=dtype)
    if kind is OpKind.AVG_POOL_3X3:
        return PoolBN("avg", channels, stride, affine, dtype=dtype)
    if kind is OpKind.IDENTITY:
        if stride == 1:
            return Identity(channels)
        return FactorizedReduce(channels, channels, affine, rng=rng,
                                dtype=dtype)
    raise ValueError(f"unknown op kind {kind!r}")


def op_param_count(kind: OpKind, channels: int, stride: int,
                   affine: bool) -> int:
    """Analytic parameter count per block; must match the built block."""
    c = channels
    bn = 2 * c if affine else 0

    def sep(k: int) -> int:
        return 2 * (c * k * k + c * c + bn)

    def dil(k: int) -> int:
        return c * k * k + c * c + bn

    if kind is OpKind.SEP_CONV_3X3:
        return sep(3)
    if kind is OpKind.SEP_CONV_5X5:
        return sep(5)
    if kind is OpKind.DIL_CONV_3X3:
        return dil(3)
    if kind is OpKind.DIL_CONV_5X5:
        return dil(5)
    if kind in (OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3):
        return bn
    if kind is OpKind.IDENTITY:
        if stride == 1:
            return 0
        return 2 * (c * (c // 2)) + bn
    raise ValueError(f"unknown op kind {kind!r}")


class Stem(Block):
    """3x3 conv + batchnorm mapping raw images to the first cell width."""

    def __init__(self, in_channels: int, out_channels: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if out_channels < 1:
            raise ValueError(f"stem channels must be positive, got {out_channels}")
        self.conv = Conv2d(in_channels, out_channels, 3, padding=1, rng=rng,
                           dtype=dtype)
        self.bn = BatchNorm2d(out_channels, affine=True, dtype=dtype)
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class Head(Block):
    """Global average pooling followed by a linear classifier."""

    def __init__(self, channels: int, classes: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if classes < 2:
            raise ValueError(f"need at least 2 classes, got {classes}")
        self.fc = Linear(channels, classes, rng=rng, dtype=dtype)
        self.classes = classes

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(global_avg_pool(x))
