"""Dense float64 tensors with a reverse-mode tape.

Every operation on tape-bound tensors appends a node holding a vector-Jacobian
closure. ``backward`` walks the tape in reverse recording order, so gradients
with respect to any intermediate activation (not just leaves) are available.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, float, Sequence]
Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible.

    ``dimension`` names the offending axis (e.g. ``"channels"``, ``"height"``).
    """

    def __init__(self, message: str, dimension: Optional[str] = None):
        super().__init__(message)
        self.dimension = dimension


class Tensor:
    """N-D float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "grad", "tape", "node")

    def __init__(self, data: ArrayLike, tape: Optional["Tape"] = None, node: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


# ScalarTarget is any tensor whose extents are all 1.
ScalarTarget = Tensor


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    vjp: Optional[Vjp]
    shape: Tuple[int, ...]
    name: Optional[str] = None


class Tape:
    """Ordered record of operations; node ids are positions in ``nodes``."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.tensors: List[Tensor] = []
        self.leaves: Dict[str, Tensor] = {}
        # Optional test hook: (op, input_grads) -> input_grads, applied during backward.
        self.grad_hook: Optional[Callable[[str, Tuple], Tuple]] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data: ArrayLike, name: Optional[str] = None) -> Tensor:
        t = Tensor(data)
        return self._push("leaf", (), None, t, name)

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Vjp) -> Tensor:
        ids = tuple(self._id_of(t) for t in inputs)
        return self._push(op, ids, vjp, Tensor(out))

    def _push(self, op: str, ids: Tuple[int, ...], vjp: Optional[Vjp], t: Tensor,
              name: Optional[str] = None) -> Tensor:
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(Node(op, ids, vjp, t.shape, name))
        self.tensors.append(t)
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = t
        return t

    def _id_of(self, t: Tensor) -> int:
        if t.tape is not self:
            # Constants (or tensors from another tape) enter as fresh leaves.
            t = self.leaf(t.data)
        return t.node

    def backward(self, target: Tensor, wanted: Iterable[int]) -> Dict[int, Tensor]:
        """Gradients of ``target`` with respect to each node id in ``wanted``."""
        if target.tape is not self:
            raise ValueError("target is not recorded on this tape")
        if any(n != 1 for n in target.shape):
            raise ShapeError(f"backward needs a scalar target, got shape {target.shape}")
        wanted = list(wanted)
        for w in wanted:
            if not isinstance(w, (int, np.integer)) or not 0 <= w < len(self.nodes):
                raise KeyError(f"unknown node id {w!r}")

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[target.node] = np.ones(target.shape)
        stop = min(wanted) if wanted else target.node
        for i in range(target.node, stop - 1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            in_grads = node.vjp(g)
            if self.grad_hook is not None:
                in_grads = self.grad_hook(node.op, in_grads)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None:
                    continue
                grads[j] = gj.copy() if grads[j] is None else grads[j] + gj

        out: Dict[int, Tensor] = {}
        for w in wanted:
            g = grads[w]
            res = Tensor(np.zeros(self.nodes[w].shape) if g is None else g)
            self.tensors[w].grad = res.data
            out[int(w)] = res
        return out


def backward(target: Tensor, wanted: Iterable[Union[int, Tensor]]) -> Dict[int, Tensor]:
    """Module-level form of :meth:`Tape.backward`; accepts node ids or tensors."""
    if target.tape is None:
        raise ValueError("target is not recorded on any tape")
    ids = [w.node if isinstance(w, Tensor) else w for w in wanted]
    return target.tape.backward(target, ids)


def _tape_of(*ts: Tensor) -> Tape:
    for t in ts:
        if t.tape is not None:
            return t.tape
    return Tape()


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Vjp) -> Tensor:
    return _tape_of(*inputs).record(op, inputs, out, vjp)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ", "shape")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ", "shape")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, k: float) -> Tensor:
    return _record("scale", (a,), a.data * k, lambda g: (g * k,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.array([x.data.sum()]),
                   lambda g: (np.full(shape, g.reshape(-1)[0]),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis (skip connections)."""
    base = tensors[0].shape
    for t in tensors[1:]:
        for axis, dim in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[axis] != base[axis]:
                raise ShapeError(f"concat: {dim} {t.shape[axis]} != {base[axis]}", dim)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=1)))


def pixel_sum(x: Tensor, channel: int, mask: np.ndarray) -> Tensor:
    """Sum of ``x[0, channel]`` over the pixels where ``mask`` is true."""
    if x.data.ndim != 4:
        raise ShapeError(f"pixel_sum expects NCHW, got {x.shape}", "rank")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[2:]:
        raise ShapeError(f"pixel_sum: mask {mask.shape} vs spatial {x.shape[2:]}", "height")
    if not 0 <= channel < x.shape[1]:
        raise ShapeError(f"pixel_sum: channel {channel} out of range", "channels")
    shape = x.shape
    value = x.data[0, channel][mask].sum()

    def vjp(g):
        gx = np.zeros(shape)
        gx[0, channel][mask] = g.reshape(-1)[0]
        return (gx,)

    return _record("pixel_sum", (x,), np.array([value]), vjp)


def select(x: Tensor, index: Tuple[int, ...]) -> Tensor:
    """Single element of ``x`` as a scalar node."""
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        gx[index] = g.reshape(-1)[0]
        return (gx,)

    return _record("select", (x,), np.array([x.data[index]]), vjp)


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax", (x,), s, vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial extent."""
    b, c, h, w = x.shape
    n = h * w

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / n, (b, c, h, w)).copy(),)

    return _record("gap", (x,), x.data.mean(axis=(2, 3)), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in)."""
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: in-features {x.shape[1]} != {weight.shape[1]}", "features")
    xd, wd = x.data, weight.data

    def vjp(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _record("linear", (x, weight, bias), xd @ wd.T + bias.data, vjp)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def cross_entropy(logits: Tensor, label: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label]; logits NCHW with N=1."""
    _, c, h, w = logits.shape
    label = np.asarray(label)
    if label.shape != (h, w):
        raise ShapeError(f"label {label.shape} vs logits spatial {(h, w)}", "height")
    if label.min() < 0 or label.max() >= c:
        raise ValueError(f"label ids must lie in [0, {c})")
    z = logits.data[0]
    zmax = z.max(axis=0)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    rows, cols = np.indices((h, w))
    picked = z[label, rows, cols]
    loss = (lse - picked).mean()
    n = h * w

    def vjp(g):
        p = np.exp(z - lse)
        p[label, rows, cols] -= 1.0
        return ((g.reshape(-1)[0] / n) * p[None],)

    return _record("cross_entropy", (logits,), np.array([loss]), vjp)


# ---------------------------------------------------------------------------
# Spatial primitives
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation of NCHW input with an (out, in, kh, kw) kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.shape}", "rank")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {kernel.shape}", "rank")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {kcin}", "channels")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)", "bias")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded height {h + 2 * padding}", "height")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded width {w + 2 * padding}", "width")

    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # (B, Ho, Wo, Cin, kh, kw) flattened to an im2col matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, -1)
    out = (cols @ kmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    kdata = kernel.data
    xshape = xp.shape

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gmat.T @ cols).reshape(cout, cin, kh, kw)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros(xshape)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kdata[:, :, i, j], axes=([1], [0]))  # B,Ho,Wo,Cin
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gk, gb

    return _record("conv2d", (x, kernel, bias), np.ascontiguousarray(out), vjp)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties route to the first element in row-major order."""
    b, c, h, w = x.shape
    k = window
    if k < 1:
        raise ValueError("window must be >= 1")
    if h % k:
        raise ShapeError(f"maxpool2d: height {h} not divisible by window {k}", "height")
    if w % k:
        raise ShapeError(f"maxpool2d: width {w} not divisible by window {k}", "width")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros((b, c, ho, wo, k * k))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return _record("maxpool2d", (x,), out, vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    b, c, h, w = x.shape
    f = factor
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def vjp(g):
        return (g.reshape(b, c, h, f, w, f).sum(axis=(3, 5)),)

    return _record("upsample_nearest", (x,), out, vjp)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) align-corners linear interpolation weights."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear upscaling of an NCHW tensor."""
    b, c, h, w = x.shape
    if out_h < h:
        raise ShapeError(f"upsample_bilinear: cannot downscale height {h} -> {out_h}", "height")
    if out_w < w:
        raise ShapeError(f"upsample_bilinear: cannot downscale width {w} -> {out_w}", "width")
    ry = bilinear_matrix(h, out_h)
    rx = bilinear_matrix(w, out_w)
    out = np.einsum("ih,bchw,jw->bcij", ry, x.data, rx, optimize=True)

    def vjp(g):
        return (np.einsum("ih,bcij,jw->bchw", ry, g, rx, optimize=True),)

    return _record("upsample_bilinear", (x,), out, vjp)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_grad(f: Callable[[np.ndarray], float], x: Union[Tensor, ArrayLike],
                           h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, element by element."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return Tensor(grad.reshape(base.shape))


def relative_error(analytic: ArrayLike, numeric: ArrayLike, floor: float = 1e-6) -> float:
    """Max over elements of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())
