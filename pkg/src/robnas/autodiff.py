"""Dense n-dimensional tensors with tape-based reverse-mode differentiation.

Every loss and gradient in the package flows through this module: tensors
wrap numpy arrays, primitive applications are recorded on a per-forward-pass
tape, and ``backward`` replays the tape in reverse to produce exact gradients.
A central finite-difference checker is included so gradients can always be
validated against an independent numerical oracle.

Conventions:
  * Tensors are immutable values; optimizers build replacement tensors.
  * A tape belongs to one forward pass and is garbage-collected with the
    tensors that reference it.
  * 64-bit precision is the default; training code may opt into 32-bit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive is applied to incompatibly shaped inputs."""


class TapeError(RuntimeError):
    """Raised when backward is requested for a detached or non-scalar loss."""


DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure evaluation forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Immutable n-dimensional value, optionally recorded on a tape.

    ``grad_required`` marks leaves that should receive gradients; tensors
    produced by primitives inherit the flag from their inputs and carry a
    ``node_handle`` into the tape of the current forward pass.
    """

    __slots__ = ("data", "grad_required", "node_handle", "tape", "name")

    def __init__(self, data, grad_required: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad_required = bool(grad_required)
        self.node_handle: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, grad_required=False, name=self.name)

    def __repr__(self) -> str:
        req = ", grad_required=True" if self.grad_required else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    # Thin operator sugar over the primitive functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class _TapeEntry:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Entries are appended in execution order, so parents always precede
    consumers and a single reverse sweep visits each node exactly once.
    Independent sub-graphs start on separate tapes; the first primitive that
    combines them merges the records (entries of one tape never reference
    tensors recorded on another, so concatenation preserves the topological
    order).
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._merged_into: "Tape | None" = None

    def __len__(self) -> int:
        return len(self._root()._entries)

    def _root(self) -> "Tape":
        tape = self
        while tape._merged_into is not None:
            tape = tape._merged_into
        if tape is not self and self._merged_into is not tape:
            self._merged_into = tape
        return tape

    def _record(self, op: str, out: Tensor, parents: tuple[Tensor, ...],
                backward: Callable) -> int:
        root = self._root()
        root._entries.append(_TapeEntry(op, out, parents, backward))
        return len(root._entries) - 1

    @staticmethod
    def _merge(a: "Tape", b: "Tape") -> "Tape":
        a, b = a._root(), b._root()
        if a is b:
            return a
        if len(a._entries) < len(b._entries):
            a, b = b, a
        a._entries.extend(b._entries)
        b._entries = []
        b._merged_into = a
        return a


class GradientMap(dict):
    """Maps parameter tensors (by identity) to gradient tensors of equal shape."""

    def flat(self, params: Sequence[Tensor]) -> np.ndarray:
        """Concatenate gradients for ``params`` in order, zeros where absent."""
        chunks = []
        for p in params:
            g = self.get(p)
            chunks.append(np.zeros(p.data.size, dtype=p.data.dtype)
                          if g is None else g.data.reshape(-1))
        return np.concatenate(chunks) if chunks else np.zeros(0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make_result(op: str, data: np.ndarray, parents: tuple[Tensor, ...],
                 backward: Callable) -> Tensor:
    tape = None
    tracked = False
    if _GRAD_ENABLED:
        for p in parents:
            if p.node_handle is not None and p.tape is not None:
                tape = p.tape if tape is None else Tape._merge(tape, p.tape)
            if p.grad_required:
                tracked = True
    out = Tensor(data)
    if tracked:
        if tape is None:
            tape = Tape()
        out.grad_required = True
        out.tape = tape._root()
        out.node_handle = out.tape._record(op, out, parents, backward)
    return out


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> GradientMap:
    """Reverse-mode gradients of a recorded scalar loss.

    Returns a GradientMap over every grad-required leaf reachable from the
    loss, or — when ``wrt`` is given — exactly those tensors (zero-filled for
    any that do not influence the loss). The tape itself is left untouched so
    repeated calls agree bit for bit.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.node_handle is None or loss.tape is None:
        raise TapeError("loss is detached from any tape")
    entries = loss.tape._root()._entries

    depends: set[int] | None = None
    if wrt is not None:
        depends = {id(t) for t in wrt}
        for e in entries:
            if any(id(p) in depends for p in e.parents):
                depends.add(id(e.out))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for e in reversed(entries):
        go = grads.pop(id(e.out), None)
        if go is None:
            continue
        if depends is None:
            need = tuple(p.grad_required for p in e.parents)
        else:
            need = tuple(id(p) in depends for p in e.parents)
        if not any(need):
            continue
        parent_grads = e.backward(go, need)
        for p, g in zip(e.parents, parent_grads):
            if g is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = g if acc is None else acc + g
            if p.node_handle is None:
                leaves[id(p)] = p

    result = GradientMap()
    if wrt is not None:
        for t in wrt:
            g = grads.get(id(t))
            result[t] = Tensor(np.zeros_like(t.data) if g is None else g)
    else:
        for tid, t in leaves.items():
            result[t] = Tensor(grads[tid])
    return result


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(go, need):
        return (_unbroadcast(go, a.data.shape) if need[0] else None,
                _unbroadcast(go, b.data.shape) if need[1] else None)

    return _make_result("add", data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(go, need):
        return (_unbroadcast(go, a.data.shape) if need[0] else None,
                _unbroadcast(-go, b.data.shape) if need[1] else None)

    return _make_result("sub", data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(go, need):
        return (_unbroadcast(go * b.data, a.data.shape) if need[0] else None,
                _unbroadcast(go * a.data, b.data.shape) if need[1] else None)

    return _make_result("mul", data, (a, b), bwd)


def mul_scalar(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    data = a.data * s

    def bwd(go, need):
        return (go * s if need[0] else None,)

    return _make_result("mul_scalar", data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(go, need):
        return (go @ b.data.T if need[0] else None,
                a.data.T @ go if need[1] else None)

    return _make_result("matmul", data, (a, b), bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def bwd(go, need):
        return (go * (x.data > 0) if need[0] else None,)

    return _make_result("relu", data, (x,), bwd)


def sign(x) -> Tensor:
    x = _as_tensor(x)
    data = np.sign(x.data)

    def bwd(go, need):
        return (np.zeros_like(x.data) if need[0] else None,)

    return _make_result("sign", data, (x,), bwd)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    if lo > hi:
        raise ShapeError(f"clamp: lo {lo} > hi {hi}")
    data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(go, need):
        return (go * mask if need[0] else None,)

    return _make_result("clamp", data, (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)
    orig = x.data.shape

    def bwd(go, need):
        return (go.reshape(orig) if need[0] else None,)

    return _make_result("reshape", data, (x,), bwd)


def getitem(x, idx) -> Tensor:
    """Basic (non-overlapping) indexing: ints, slices, or tuples thereof."""
    x = _as_tensor(x)
    data = np.array(x.data[idx])

    def bwd(go, need):
        if not need[0]:
            return (None,)
        g = np.zeros_like(x.data)
        g[idx] = go.reshape(data.shape)
        return (g,)

    return _make_result("getitem", data, (x,), bwd)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(go, need):
        if not need[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(go, x.data.shape).copy(),)
        g = go if keepdims else np.expand_dims(go, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make_result("sum", data, (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def bwd(go, need):
        if not need[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(go / count, x.data.shape).copy(),)
        g = go if keepdims else np.expand_dims(go, axis)
        return (np.broadcast_to(g / count, x.data.shape).copy(),)

    return _make_result("mean", data, (x,), bwd)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(
                f"concat_channels: incompatible shapes {base} and {s}")
    data = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]

    def bwd(go, need):
        outs = []
        start = 0
        for t, c, n in zip(tensors, sizes, need):
            outs.append(go[:, start:start + c] if n else None)
            start += c
        return tuple(outs)

    return _make_result("concat_channels", data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(go, need):
        if not need[0]:
            return (None,)
        inner = (go * s).sum(axis=axis, keepdims=True)
        return (s * (go - inner),)

    return _make_result("softmax", s, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse

    def bwd(go, need):
        if not need[0]:
            return (None,)
        return (go - np.exp(ls) * go.sum(axis=axis, keepdims=True),)

    return _make_result("log_softmax", ls, (x,), bwd)


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of raw logits against integer class labels."""
    logits = _as_tensor(logits)
    y = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(
            f"cross_entropy: logits must be 2-d, got {logits.data.shape}")
    n, k = logits.data.shape
    if y.shape != (n,):
        raise ShapeError(
            f"cross_entropy: labels shape {y.shape} does not match batch {n}")
    if y.min() < 0 or y.max() >= k:
        raise ShapeError(
            f"cross_entropy: label out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = shifted[np.arange(n), y]
    data = np.asarray((lse[:, 0] - picked).mean(), dtype=logits.data.dtype)
    p = np.exp(shifted - lse)

    def bwd(go, need):
        if not need[0]:
            return (None,)
        g = p.copy()
        g[np.arange(n), y] -= 1.0
        return (g * (go / n),)

    return _make_result("cross_entropy", data, (logits,), bwd)


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------

def _check_conv_attrs(op: str, stride: int, padding: int, dilation: int,
                      groups: int) -> None:
    if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
        raise ShapeError(
            f"{op}: invalid attrs stride={stride} padding={padding} "
            f"dilation={dilation} groups={groups}")


def _pad2d(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * p, w + 2 * p), value, dtype=x.dtype)
    out[:, :, p:-p, p:-p] = x
    return out


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
             oh: int, ow: int) -> np.ndarray:
    """Read-only strided window view (N, C, OH, OW, KH, KW)."""
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    shape = (n, c, oh, ow, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh * dilation, sw * dilation)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _out_extent(op: str, extent: int, k: int, stride: int, padding: int,
                dilation: int) -> int:
    span = dilation * (k - 1) + 1
    out = (extent + 2 * padding - span) // stride + 1
    if out < 1:
        raise ShapeError(
            f"{op}: window {k}x{k} (dilation {dilation}, padding {padding}) "
            f"does not fit extent {extent}")
    return out


def _fold_patches(gp: np.ndarray, in_shape: tuple[int, ...], kh: int, kw: int,
                  stride: int, padding: int, dilation: int,
                  oh: int, ow: int) -> np.ndarray:
    """Scatter-add patch gradients (N, C, KH, KW, OH, OW) back to the input."""
    n, c, h, w = in_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    gxp = np.zeros((n, c, hp, wp), dtype=gp.dtype)
    for i in range(kh):
        ih = i * dilation
        for j in range(kw):
            jw = j * dilation
            gxp[:, :, ih:ih + stride * (oh - 1) + 1:stride,
                jw:jw + stride * (ow - 1) + 1:stride] += gp[:, :, i, j]
    if padding:
        return gxp[:, :, padding:-padding, padding:-padding]
    return gxp


def _conv_pointwise(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """1x1 ungrouped convolution: a channel matmul on a strided view."""
    n, cin, h, wd = x.data.shape
    cout = w.data.shape[0]
    xs = x.data[:, :, ::stride, ::stride]
    oh, ow = xs.shape[2], xs.shape[3]
    xs2 = np.ascontiguousarray(xs).reshape(n, cin, oh * ow)
    wm = w.data.reshape(cout, cin)
    out = np.matmul(wm, xs2).reshape(n, cout, oh, ow)

    def bwd(go, need):
        gor = go.reshape(n, cout, oh * ow)
        gx = gw = None
        if need[1]:
            gw = np.matmul(gor, xs2.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(w.data.shape)
        if need[0]:
            gxs = np.matmul(wm.T, gor).reshape(n, cin, oh, ow)
            if stride == 1:
                gx = gxs
            else:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gxs
        return (gx, gw)

    return _make_result("conv2d", out, (x, w), bwd)


def _conv_depthwise(x: Tensor, w: Tensor, stride: int, padding: int,
                    dilation: int) -> Tensor:
    """Per-channel convolution (groups == channels, one filter per channel).

    Kernels are tiny (3x3 / 5x5), so one fused multiply-add per tap over a
    strided slice of the padded input beats materializing patch columns.
    """
    n, c, h, wd = x.data.shape
    kh, kw = w.data.shape[2], w.data.shape[3]
    oh = _out_extent("conv2d", h, kh, stride, padding, dilation)
    ow = _out_extent("conv2d", wd, kw, stride, padding, dilation)
    xp = _pad2d(x.data, padding)

    def tap(i: int, j: int) -> np.ndarray:
        return xp[:, :, i * dilation:i * dilation + stride * (oh - 1) + 1:stride,
                  j * dilation:j * dilation + stride * (ow - 1) + 1:stride]

    wk = w.data[:, 0]
    out = np.zeros((n, c, oh, ow), dtype=xp.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(tap(i, j), wk[:, i, j][None, :, None, None], out=tmp)
            out += tmp

    def bwd(go, need):
        gx = gw = None
        buf = np.empty_like(go)
        if need[1]:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    np.multiply(tap(i, j), go, out=buf)
                    gw[:, 0, i, j] = buf.sum(axis=(0, 2, 3))
        if need[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                ih = i * dilation
                for j in range(kw):
                    jw = j * dilation
                    np.multiply(go, wk[:, i, j][None, :, None, None], out=buf)
                    gxp[:, :, ih:ih + stride * (oh - 1) + 1:stride,
                        jw:jw + stride * (ow - 1) + 1:stride] += buf
            gx = (gxp[:, :, padding:-padding, padding:-padding]
                  if padding else gxp)
        return (gx, gw)

    return _make_result("conv2d", out, (x, w), bwd)


def conv2d(x, w, stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """Grouped 2-d convolution (cross-correlation) without bias."""
    x, w = _as_tensor(x), _as_tensor(w)
    _check_conv_attrs("conv2d", stride, padding, dilation, groups)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-d input and weight, got {x.data.shape} "
            f"and {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_g, kh, kw = w.data.shape
    if cin != cin_g * groups or cout % groups != 0:
        raise ShapeError(
            f"conv2d: channel mismatch input {x.data.shape}, weight "
            f"{w.data.shape}, groups {groups}")
    if kh == kw == 1 and groups == 1 and padding == 0:
        return _conv_pointwise(x, w, stride)
    if groups == cin and cout == cin:
        return _conv_depthwise(x, w, stride, padding, dilation)
    oh = _out_extent("conv2d", h, kh, stride, padding, dilation)
    ow = _out_extent("conv2d", wd, kw, stride, padding, dilation)
    cout_g = cout // groups
    k = cin_g * kh * kw

    xp = _pad2d(x.data, padding)
    # (N, C, OH, OW, KH, KW) -> (N, G, Cg*KH*KW, OH*OW)
    cols = (_patches(xp, kh, kw, stride, dilation, oh, ow)
            .transpose(0, 1, 4, 5, 2, 3)
            .reshape(n, groups, k, oh * ow))
    wm = w.data.reshape(groups, cout_g, k)
    out = np.matmul(wm, cols).reshape(n, cout, oh, ow)

    def bwd(go, need):
        gor = go.reshape(n, groups, cout_g, oh * ow)
        gx = gw = None
        if need[1]:
            gw = np.matmul(gor, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            gw = gw.reshape(w.data.shape)
        if need[0]:
            gcols = np.matmul(wm.transpose(0, 2, 1), gor)
            gp = gcols.reshape(n, cin, kh, kw, oh, ow)
            gx = _fold_patches(gp, x.data.shape, kh, kw, stride, padding,
                               dilation, oh, ow)
        return (gx, gw)

    return _make_result("conv2d", out, (x, w), bwd)


def maxpool2d(x, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    x = _as_tensor(x)
    _check_conv_attrs("maxpool2d", stride, padding, 1, 1)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    oh = _out_extent("maxpool2d", h, kernel, stride, padding, 1)
    ow = _out_extent("maxpool2d", w, kernel, stride, padding, 1)
    xp = _pad2d(x.data, padding, value=-np.inf)
    win = (_patches(xp, kernel, kernel, stride, 1, oh, ow)
           .reshape(n, c, oh, ow, kernel * kernel))
    amax = win.argmax(axis=-1)
    out = np.take_along_axis(win, amax[..., None], axis=-1)[..., 0]

    def bwd(go, need):
        if not need[0]:
            return (None,)
        gp = np.zeros((n, c, kernel, kernel, oh, ow), dtype=go.dtype)
        for tap in range(kernel * kernel):
            mask = amax == tap
            if mask.any():
                gp[:, :, tap // kernel, tap % kernel] += go * mask
        return (_fold_patches(gp, x.data.shape, kernel, kernel, stride,
                              padding, 1, oh, ow),)

    return _make_result("maxpool2d", np.ascontiguousarray(out), (x,), bwd)


def avgpool2d(x, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling; padded zeros are counted in the average."""
    x = _as_tensor(x)
    _check_conv_attrs("avgpool2d", stride, padding, 1, 1)
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    oh = _out_extent("avgpool2d", h, kernel, stride, padding, 1)
    ow = _out_extent("avgpool2d", w, kernel, stride, padding, 1)
    xp = _pad2d(x.data, padding)
    win = _patches(xp, kernel, kernel, stride, 1, oh, ow)
    area = kernel * kernel
    out = win.sum(axis=(-1, -2)) / area

    def bwd(go, need):
        if not need[0]:
            return (None,)
        gp = np.broadcast_to((go / area)[:, :, None, None],
                             (n, c, kernel, kernel, oh, ow)).copy()
        return (_fold_patches(gp, x.data.shape, kernel, kernel, stride,
                              padding, 1, oh, ow),)

    return _make_result("avgpool2d", out, (x,), bwd)


def global_avg_pool(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(
            f"global_avg_pool: expected 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3))

    def bwd(go, need):
        if not need[0]:
            return (None,)
        return (np.broadcast_to(go[:, :, None, None] / (h * w),
                                x.data.shape).copy(),)

    return _make_result("global_avg_pool", data, (x,), bwd)


def batchnorm2d(x, gamma: Tensor | None, beta: Tensor | None,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5,
                update_running: bool = True) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with current-batch statistics (and optionally
    folds them into the running averages in place); eval mode normalizes with
    the running averages. Gradients in training mode flow through the batch
    statistics.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected 4-d input, got {x.data.shape}")
    c = x.data.shape[1]
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: running stats shaped {running_mean.shape} do not "
            f"match {c} channels")
    parents: list[Tensor] = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    if training:
        bm = x.data.mean(axis=(0, 2, 3))
        xc = x.data - bm[None, :, None, None]
        bv = np.multiply(xc, xc).mean(axis=(0, 2, 3))
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * bm
            running_var *= 1.0 - momentum
            running_var += momentum * bv
        ivar = 1.0 / np.sqrt(bv + eps)
        xhat = xc * ivar[None, :, None, None]
    else:
        bm = running_mean.astype(x.data.dtype, copy=False)
        bv = running_var.astype(x.data.dtype, copy=False)
        ivar = 1.0 / np.sqrt(bv + eps)
        xhat = (x.data - bm[None, :, None, None]) * ivar[None, :, None, None]
    out = xhat
    if gamma is not None:
        out = out * gamma.data[None, :, None, None]
    if beta is not None:
        out = out + beta.data[None, :, None, None]

    def bwd(go, need):
        gxhat = go
        if gamma is not None:
            gxhat = go * gamma.data[None, :, None, None]
        if training and need[0]:
            m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = ivar[None, :, None, None] * (gxhat - m1 - xhat * m2)
        elif need[0]:
            gx = gxhat * ivar[None, :, None, None]
        else:
            gx = None
        grads = [gx]
        i = 1
        if gamma is not None:
            grads.append((go * xhat).sum(axis=(0, 2, 3)) if need[i] else None)
            i += 1
        if beta is not None:
            grads.append(go.sum(axis=(0, 2, 3)) if need[i] else None)
        return tuple(grads)

    return _make_result("batchnorm2d", out.astype(x.data.dtype, copy=False),
                        tuple(parents), bwd)


# ---------------------------------------------------------------------------
# dispatcher and gradient checking
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul-by-scalar": mul_scalar,
    "elementwise-mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "global-avg-pool": global_avg_pool,
    "relu": relu,
    "batchnorm2d": batchnorm2d,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "cross-entropy-with-integer-labels": cross_entropy,
    "concat-along-channels": concat_channels,
    "sign": sign,
    "clamp": clamp,
    "reshape": reshape,
    "sum": tsum,
    "mean": tmean,
}


def forward_primitive(kind: str, inputs: Iterable, attrs: dict | None = None) -> Tensor:
    """Apply a primitive by id; the canonical registry of supported ops."""
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    fn = PRIMITIVES[kind]
    inputs = list(inputs)
    if kind == "concat-along-channels":
        return fn(inputs, **(attrs or {}))
    return fn(*inputs, **(attrs or {}))


def finite_difference_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                            h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at each coordinate is |analytic - numeric| / max(1, |analytic|);
    ``fn`` must be a deterministic tensor-to-scalar function.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    p = Tensor(point.data.copy(), grad_required=True)
    loss = fn(p)
    if not np.isfinite(loss.data).all():
        raise ValueError("fn produced a non-finite value at the base point")
    analytic = backward(loss, wrt=[p])[p].data.reshape(-1)

    flat = p.data.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(p).item()
            flat[i] = orig - h
            down = fn(p).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError(
                    f"fn produced a non-finite value at coordinate {i}")
            numeric[i] = (up - down) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
