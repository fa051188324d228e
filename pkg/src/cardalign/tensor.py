"""Dense tensors with reverse-mode automatic differentiation.

Every model computation in this package runs through the primitives defined
here. Gradients are recorded on a per-step :class:`GradTape` (append order is
topological order) and discarded after :func:`backward`. 64-bit reals are the
default; 32-bit mode exists for speed and is excluded from gradient-check
tolerances.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

_DTYPES = {"f64": np.float64, "f32": np.float32}
_default_dtype = np.float64

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(name: str) -> None:
    """Select the run-wide real dtype: "f64" (default) or "f32"."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


class ShapeError(ValueError):
    """Operand shapes violate a primitive's shape rule."""

    def __init__(self, primitive: str, detail: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: {detail}")


class Tensor:
    """Immutable dense n-dimensional real array, optionally tape-tracked.

    ``data`` must not be mutated after construction; all operations return
    new tensors. ``requires_grad`` marks differentiation targets: such
    tensors are watched as leaves the first time they enter a primitive
    while a tape is active.
    """

    __slots__ = ("data", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        """Tape handle of this tensor on the active tape, or None."""
        return None if self._node is None else self._node.id

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; python scalars become constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def constant(x, dtype=None) -> Tensor:
    """A tensor that never participates in differentiation."""
    return Tensor(x, requires_grad=False, dtype=dtype)


class _Node:
    __slots__ = ("id", "kind", "input_ids", "vjp", "tensor")

    def __init__(self, id, kind, input_ids, vjp, tensor):
        self.id = id
        self.kind = kind
        self.input_ids = input_ids
        self.vjp = vjp
        self.tensor = tensor


class GradTape:
    """Append-only record of primitive applications for one training step.

    Node inputs always precede the node itself, so reverse iteration over
    ``nodes`` is a valid reverse-topological sweep. A tape is confined to
    one thread and one step; it is released when its context exits.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaf_ids: list[int] = []

    def _append(self, kind, input_ids, vjp, tensor) -> _Node:
        node = _Node(len(self.nodes), kind, input_ids, vjp, tensor)
        self.nodes.append(node)
        return node

    def _watch(self, tensor: Tensor) -> _Node:
        node = self._append("leaf", (), None, tensor)
        self.leaf_ids.append(node.id)
        tensor._node = node
        return node

    def _release(self):
        for node in self.nodes:
            node.tensor._node = None
            node.vjp = None
        self.nodes.clear()
        self.leaf_ids.clear()


_ACTIVE_TAPE: GradTape | None = None


@contextlib.contextmanager
def tape():
    """Activate a fresh gradient tape for the duration of the block."""
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is not None:
        raise RuntimeError("a gradient tape is already active; tapes do not nest")
    t = GradTape()
    _ACTIVE_TAPE = t
    try:
        yield t
    finally:
        _ACTIVE_TAPE = None
        t._release()


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE


PRIMITIVES: dict[str, Callable] = {}


def primitive(kind: str):
    def deco(fn):
        fn.kind = kind
        PRIMITIVES[kind] = fn
        return fn

    return deco


def apply_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Apply a registered primitive, recording it on the active tape.

    Raises :class:`ShapeError` naming the primitive when input shapes do not
    conform to its shape rule.
    """
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    out_data, vjp = prim(*[t.data for t in tensors], **attrs)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in tensors))
    tp = _ACTIVE_TAPE
    if tp is not None:
        for t in tensors:
            if t._node is None and t.requires_grad:
                tp._watch(t)
        if any(t._node is not None for t in tensors):
            input_ids = tuple(-1 if t._node is None else t._node.id for t in tensors)
            out._node = tp._append(kind, input_ids, vjp, out)
    return out


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns grads keyed by leaf node id.

    Every watched leaf appears in the result; leaves not reachable from the
    loss get zero gradients.
    """
    if loss.data.shape != ():
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    tp = _ACTIVE_TAPE
    if tp is None or loss._node is None:
        raise RuntimeError("loss is not recorded on an active gradient tape")
    grads: list[np.ndarray | None] = [None] * len(tp.nodes)
    grads[loss._node.id] = np.ones((), dtype=loss.data.dtype)
    for node in reversed(tp.nodes):
        g = grads[node.id]
        if g is None or node.kind == "leaf":
            continue
        needs = tuple(i >= 0 for i in node.input_ids)
        contribs = node.vjp(g, needs)
        for iid, contrib in zip(node.input_ids, contribs):
            if iid < 0 or contrib is None:
                continue
            if grads[iid] is None:
                grads[iid] = contrib
            else:
                grads[iid] = grads[iid] + contrib
    out: dict[int, Tensor] = {}
    for lid in tp.leaf_ids:
        g = grads[lid]
        if g is None:
            g = np.zeros_like(tp.nodes[lid].tensor.data)
        out[lid] = Tensor(g)
    return out


def grads_by_name(gradmap: dict[int, Tensor], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Match a backward() result to named parameters (zeros if unwatched)."""
    out = {}
    for name, p in params.items():
        if p._node is not None and p._node.id in gradmap:
            out[name] = gradmap[p._node.id].data
        else:
            out[name] = np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# primitive implementations (ndarray in, (ndarray, vjp) out)
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, f"shapes {a.shape} and {b.shape} do not broadcast") from None


@primitive("add")
def _add(a, b):
    _check_broadcast("add", a, b)
    out = a + b

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return out, vjp


@primitive("sub")
def _sub(a, b):
    _check_broadcast("sub", a, b)
    out = a - b

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return out, vjp


@primitive("mul")
def _mul(a, b):
    _check_broadcast("mul", a, b)
    out = a * b

    def vjp(g, needs):
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )

    return out, vjp


@primitive("div")
def _div(a, b):
    _check_broadcast("div", a, b)
    out = a / b

    def vjp(g, needs):
        return (
            _unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None,
        )

    return out, vjp


@primitive("neg")
def _neg(a):
    return -a, lambda g, needs: (-g,)


@primitive("pow_const")
def _pow_const(a, exponent: float):
    out = a**exponent

    def vjp(g, needs):
        return (g * exponent * a ** (exponent - 1.0),)

    return out, vjp


@primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g, needs: (g * out,)


@primitive("log")
def _log(a):
    return np.log(a), lambda g, needs: (g / a,)


@primitive("sqrt")
def _sqrt(a):
    out = np.sqrt(a)
    return out, lambda g, needs: (g * 0.5 / out,)


@primitive("sigmoid")
def _sigmoid(a):
    out = expit(a)
    return out, lambda g, needs: (g * out * (1.0 - out),)


@primitive("softplus")
def _softplus(a):
    out = np.logaddexp(0.0, a)
    return out, lambda g, needs: (g * expit(a),)


@primitive("gelu")
def _gelu(a):
    # exact Gaussian-CDF formulation; the tanh approximation is out of scope
    cdf = 0.5 * (1.0 + erf(a / _SQRT2))
    out = a * cdf

    def vjp(g, needs):
        pdf = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
        return (g * (cdf + a * pdf),)

    return out, vjp


@primitive("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", f"batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None
    out = a @ b

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ b.swapaxes(-1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(a.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return out, vjp


def _conv_out_extent(kind, name, size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(kind, f"kernel {k} exceeds padded {name} extent {size + 2 * pad}")
    return span // stride + 1


@primitive("conv1d")
def _conv1d(x, w, stride: int = 1, padding: int = 0):
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv1d", f"expected x (N,C,L) and w (O,C,K), got {x.shape} and {w.shape}")
    n, ci, length = x.shape
    co, ci_w, k = w.shape
    if ci != ci_w:
        raise ShapeError("conv1d", f"input channels {ci} != kernel channels {ci_w}")
    lo = _conv_out_extent("conv1d", "length", length, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride]  # (N,C,Lo,K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * lo, ci * k)
    wmat = w.reshape(co, ci * k)
    out = (cols @ wmat.T).reshape(n, lo, co).transpose(0, 2, 1)

    def vjp(g, needs):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(n * lo, co)
        gw = gx = None
        if needs[1]:
            gw = (gmat.T @ cols).reshape(w.shape)
        if needs[0]:
            gcols = (gmat @ wmat).reshape(n, lo, ci, k)
            gxp = np.zeros((n, ci, length + 2 * padding), dtype=x.dtype)
            for kk in range(k):
                gxp[:, :, kk : kk + stride * lo : stride] += gcols[:, :, :, kk].transpose(0, 2, 1)
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        return gx, gw

    return out, vjp


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected int or 3-tuple, got {v!r}")
    return t


@primitive("conv3d")
def _conv3d(x, w, stride=1, padding=0):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError("conv3d", f"expected x (N,C,D,H,W) and w (O,C,Kd,Kh,Kw), got {x.shape} and {w.shape}")
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    n, ci, d, h, wd = x.shape
    co, ci_w, kd, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError("conv3d", f"input channels {ci} != kernel channels {ci_w}")
    do = _conv_out_extent("conv3d", "depth", d, kd, sd, pd)
    ho = _conv_out_extent("conv3d", "height", h, kh, sh, ph)
    wo = _conv_out_extent("conv3d", "width", wd, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if (pd or ph or pw) else x
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    # (N,C,Do,Ho,Wo,Kd,Kh,Kw) -> (N*P, C*K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n * do * ho * wo, ci * kd * kh * kw
    )
    wmat = w.reshape(co, -1)
    out = (cols @ wmat.T).reshape(n, do, ho, wo, co).transpose(0, 4, 1, 2, 3)

    def vjp(g, needs):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(n * do * ho * wo, co)
        gw = gx = None
        if needs[1]:
            gw = (gmat.T @ cols).reshape(w.shape)
        if needs[0]:
            gcols = (gmat @ wmat).reshape(n, do, ho, wo, ci, kd, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gxp[
                            :,
                            :,
                            a : a + sd * do : sd,
                            b : b + sh * ho : sh,
                            c : c + sw * wo : sw,
                        ] += gcols[:, :, :, :, :, a, b, c].transpose(0, 4, 1, 2, 3)
            gx = gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wd] if (pd or ph or pw) else gxp
        return gx, gw

    return out, vjp


@primitive("avg_pool3d")
def _avg_pool3d(x, kernel=2, stride=None):
    if x.ndim != 5:
        raise ShapeError("avg_pool3d", f"expected x (N,C,D,H,W), got {x.shape}")
    kd, kh, kw = _triple(kernel)
    sd, sh, sw = _triple(stride) if stride is not None else (kd, kh, kw)
    n, c, d, h, w = x.shape
    do = _conv_out_extent("avg_pool3d", "depth", d, kd, sd, 0)
    ho = _conv_out_extent("avg_pool3d", "height", h, kh, sh, 0)
    wo = _conv_out_extent("avg_pool3d", "width", w, kw, sw, 0)
    win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    out = win.mean(axis=(5, 6, 7))
    scale = 1.0 / (kd * kh * kw)

    def vjp(g, needs):
        gx = np.zeros_like(x)
        gs = g * scale
        for a in range(kd):
            for b in range(kh):
                for cc in range(kw):
                    gx[:, :, a : a + sd * do : sd, b : b + sh * ho : sh, cc : cc + sw * wo : sw] += gs
        return (gx,)

    return out, vjp


@primitive("layer_norm")
def _layer_norm(x, gamma, beta, eps=None):
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ShapeError(
            "layer_norm",
            f"affine width {gamma.shape[-1]}/{beta.shape[-1]} != feature width {x.shape[-1]}",
        )
    if eps is None:
        eps = 1e-12 if x.dtype == np.float64 else 1e-5
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma + beta

    def vjp(g, needs):
        gx = ggamma = gbeta = None
        bcast_axes = tuple(range(x.ndim - 1))
        if needs[1]:
            ggamma = _unbroadcast(g * xhat, gamma.shape)
        if needs[2]:
            gbeta = _unbroadcast(g, beta.shape)
        if needs[0]:
            gh = g * gamma
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return out, vjp


@primitive("softmax")
def _softmax(x, axis: int = -1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return out, vjp


@primitive("l2_normalize")
def _l2_normalize(x, axis: int = -1, eps: float = 1e-24):
    sq = (x * x).sum(axis=axis, keepdims=True)
    norm = np.sqrt(sq + eps)
    out = x / norm

    def vjp(g, needs):
        inner = (g * x).sum(axis=axis, keepdims=True)
        return (g / norm - x * (inner / (norm * norm * norm)),)

    return out, vjp


@primitive("reduce_sum")
def _reduce_sum(x, axis=None, keepdims: bool = False):
    out = x.sum(axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, vjp


@primitive("reduce_mean")
def _reduce_mean(x, axis=None, keepdims: bool = False):
    out = x.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return out, vjp


@primitive("mse")
def _mse(a, b):
    if a.shape != b.shape:
        raise ShapeError("mse", f"operand shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    out = np.asarray((diff * diff).mean())
    scale = 2.0 / a.size

    def vjp(g, needs):
        base = g * scale * diff
        return (base if needs[0] else None, -base if needs[1] else None)

    return out, vjp


@primitive("reshape")
def _reshape(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None
    return out, lambda g, needs: (g.reshape(x.shape),)


@primitive("transpose")
def _transpose(x, axes):
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"axes {axes} is not a permutation for rank {x.ndim}")
    inv = np.argsort(axes)
    return x.transpose(axes), lambda g, needs: (g.transpose(inv),)


@primitive("narrow")
def _narrow(x, axis: int, start: int, length: int):
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(
            "narrow", f"window [{start}, {start + length}) outside axis {axis} of extent {x.shape[axis]}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g, needs):
        gx = np.zeros_like(x)
        gx[sl] = g
        return (gx,)

    return x[sl], vjp


@primitive("take_rows")
def _take_rows(x, indices=None):
    idx = np.asarray(indices)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(
            "take_rows", f"expected x (B,T,D) and indices (B,K), got {x.shape} and {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError("take_rows", f"index out of range for {x.shape[1]} rows")
    out = np.take_along_axis(x, idx[:, :, None], axis=1)
    b_idx = np.arange(x.shape[0])[:, None]

    def vjp(g, needs):
        gx = np.zeros_like(x)
        np.add.at(gx, (b_idx, idx), g)
        return (gx,)

    return out, vjp


@primitive("concat")
def _concat(*arrays, axis: int = 0):
    ranks = {a.ndim for a in arrays}
    if len(ranks) != 1:
        raise ShapeError("concat", f"mixed ranks {sorted(ranks)}")
    for a in arrays[1:]:
        if a.shape[:axis] + a.shape[axis + 1 :] != arrays[0].shape[:axis] + arrays[0].shape[axis + 1 :]:
            raise ShapeError("concat", f"shapes {arrays[0].shape} and {a.shape} differ off axis {axis}")
    out = np.concatenate(arrays, axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return out, vjp


# ---------------------------------------------------------------------------
# public op wrappers
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return apply_primitive("add", a, b)


def sub(a, b) -> Tensor:
    return apply_primitive("sub", a, b)


def mul(a, b) -> Tensor:
    return apply_primitive("mul", a, b)


def div(a, b) -> Tensor:
    return apply_primitive("div", a, b)


def neg(a) -> Tensor:
    return apply_primitive("neg", a)


def pow_const(a, exponent: float) -> Tensor:
    return apply_primitive("pow_const", a, exponent=exponent)


def exp(a) -> Tensor:
    return apply_primitive("exp", a)


def log(a) -> Tensor:
    return apply_primitive("log", a)


def sqrt(a) -> Tensor:
    return apply_primitive("sqrt", a)


def sigmoid(a) -> Tensor:
    return apply_primitive("sigmoid", a)


def softplus(a) -> Tensor:
    return apply_primitive("softplus", a)


def gelu(a) -> Tensor:
    return apply_primitive("gelu", a)


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", a, b)


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    return apply_primitive("conv1d", x, w, stride=stride, padding=padding)


def conv3d(x, w, stride=1, padding=0) -> Tensor:
    return apply_primitive("conv3d", x, w, stride=stride, padding=padding)


def avg_pool3d(x, kernel=2, stride=None) -> Tensor:
    return apply_primitive("avg_pool3d", x, kernel=kernel, stride=stride)


def layer_norm(x, gamma=None, beta=None, eps=None) -> Tensor:
    xt = as_tensor(x)
    width = xt.shape[-1]
    if gamma is None:
        gamma = constant(np.ones(width, dtype=xt.dtype))
    if beta is None:
        beta = constant(np.zeros(width, dtype=xt.dtype))
    return apply_primitive("layer_norm", xt, gamma, beta, eps=eps)


def softmax(x, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", x, axis=axis)


def l2_normalize(x, axis: int = -1, eps: float = 1e-24) -> Tensor:
    return apply_primitive("l2_normalize", x, axis=axis, eps=eps)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("reduce_sum", x, axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("reduce_mean", x, axis=axis, keepdims=keepdims)


def mse(a, b) -> Tensor:
    return apply_primitive("mse", a, b)


def reshape(x, shape) -> Tensor:
    return apply_primitive("reshape", x, shape=tuple(shape))


def transpose(x, axes) -> Tensor:
    return apply_primitive("transpose", x, axes=tuple(axes))


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    return apply_primitive("narrow", x, axis=axis, start=start, length=length)


def take_rows(x, indices) -> Tensor:
    return apply_primitive("take_rows", x, indices=np.asarray(indices, dtype=np.int64))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply_primitive("concat", *tensors, axis=axis)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def logsumexp(x, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along one axis.

    The max shift is a constant: ``lse = m + log(sum(exp(x - m)))`` is an
    exact identity for any m, so treating m as non-differentiable is exact.
    """
    xt = as_tensor(x)
    m = xt.data.max(axis=axis, keepdims=True)
    shifted = sub(xt, constant(m))
    s = log(reduce_sum(exp(shifted), axis=axis))
    return add(s, constant(np.squeeze(m, axis=axis)))


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued. Error per coordinate is
    ``|analytic - central| / (|analytic| + |central| + 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.asarray(x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    with tape():
        y = f(xt)
        if y.data.shape != ():
            raise ShapeError("finite_diff_check", f"f must be scalar-valued, got shape {y.data.shape}")
        analytic = backward(y)[xt._node.id].data

    central = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        central.reshape(-1)[i] = (fp - fm) / (2.0 * step)

    denom = np.abs(analytic) + np.abs(central) + 1e-12
    return float(np.max(np.abs(analytic - central) / denom))
