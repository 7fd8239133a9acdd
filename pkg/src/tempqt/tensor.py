"""Dense tensors with taped reverse-mode differentiation.

numpy arrays hold the values; every backward rule is written out
explicitly against the recorded inputs. A ``Tape`` collects operations
in execution order while active, and ``backward`` replays the tape in
reverse, accumulating gradients into every ``requires_grad`` leaf that
the loss reaches. Ops executed with no active tape produce plain
constants, which is the inference path.

float32 is the working precision. All ops follow the dtype of their
inputs, so the finite-difference harness can run a float64 shadow of
the exact same code paths.

Broadcasting is deliberately limited to scalar-with-tensor. The shaped
pairings the models need (row bias, per-feature norm scales,
convolution bias) are dedicated operations with their own gradients.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf, expit

from .errors import ArgumentError, DimensionError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# When true, every op result is checked for NaN/Inf. Off by default:
# the scan costs more than most desk-scale ops it guards.
check_finite = False


def set_finite_checks(enabled: bool) -> None:
    global check_finite
    check_finite = bool(enabled)


def _guard(arr: np.ndarray) -> None:
    if check_finite and not np.all(np.isfinite(arr)):
        raise ArgumentError("tensor holds a non-finite value")


class Tensor:
    """A dense float array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "needs_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.array(data, dtype=dtype)
        _guard(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        # needs_grad marks tensors the backward sweep must visit: leaves
        # that require grad, and anything computed from one on a tape.
        self.needs_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; the module-level functions carry the contracts
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        return abs_(self)

    def square(self):
        return square(self)

    def mean(self):
        return mean(self)

    def sum(self):
        return sum_(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Execution-ordered record of differentiable operations."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(arr: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap a computed array, recording the op if a tape is active."""
    _guard(arr)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.requires_grad = False
    tape = _active_tape()
    track = tape is not None and any(t.needs_grad for t in inputs)
    out.needs_grad = track
    if track:
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep: accumulate d(loss)/d(leaf) into leaf.grad.

    Repeated calls keep accumulating until grads are zeroed.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, shape is {loss.shape}")
    if not loss.needs_grad:
        raise ArgumentError("loss is not connected to any requires_grad tensor on the tape")
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.needs_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = inp
    for key, g in grads.items():
        leaf = holders[key]
        if not leaf.requires_grad:
            continue
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=leaf.data.dtype)
        else:
            leaf.grad = leaf.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _as_scalar(x) -> float | None:
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


def _check_same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{name} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _emit(a.data + s, (a,), lambda g: (g,))
    _check_same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _emit(a.data - s, (a,), lambda g: (g,))
    _check_same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _emit(a.data * s, (a,), lambda g: (g * s,))
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    value = _as_scalar(s)
    if value is None:
        raise ArgumentError("scale factor must be a plain number")
    return mul(a, value)


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    # subgradient 0 at the kink
    return _emit(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (g * (2.0 * ad),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    val = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        return (np.full(a.data.shape, g / n, dtype=a.data.dtype),)

    return _emit(val, (a,), bwd)


def sum_(a: Tensor) -> Tensor:
    val = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return (np.full(a.data.shape, g, dtype=a.data.dtype),)

    return _emit(val, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    ad = a.data
    e = erf(ad * (1.0 / _SQRT2))
    out = 0.5 * ad * (1.0 + e)

    def bwd(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT_2PI
        return (g * (0.5 * (1.0 + e) + ad * pdf),)

    return _emit(out, (a,), bwd)


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one shared slope (a scalar tensor)."""
    if slope.data.size != 1:
        raise DimensionError(f"prelu slope must be a scalar, shape is {slope.shape}")
    ad = a.data
    s = float(slope.data.reshape(()))
    pos = ad > 0
    out = np.where(pos, ad, s * ad)

    def bwd(g):
        ga = g * np.where(pos, 1.0, s) if a.needs_grad else None
        gs = None
        if slope.needs_grad:
            gs = np.asarray((g * np.where(pos, 0.0, ad)).sum(), dtype=slope.data.dtype)
            gs = gs.reshape(slope.data.shape)
        return (ga, gs)

    return _emit(out.astype(ad.dtype, copy=False), (a, slope), bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)

    def bwd(g):
        return (g * (y * (1.0 - y)),)

    return _emit(y.astype(a.data.dtype, copy=False), (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.needs_grad else None
        gb = ad.T @ g if b.needs_grad else None
        return (ga, gb)

    return _emit(ad @ bd, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    src_shape = a.data.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src_shape),))


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ArgumentError("concat needs at least one tensor")
    ndim = parts[0].data.ndim
    if not 0 <= axis < ndim:
        raise DimensionError(f"concat axis {axis} out of range for ndim {ndim}")
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise DimensionError("concat operands must share ndim")
        for ax in range(ndim):
            if ax != axis and p.data.shape[ax] != parts[0].data.shape[ax]:
                raise DimensionError(
                    f"concat operands disagree off-axis: {parts[0].shape} vs {p.shape}"
                )
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def _slice_axis(a: Tensor, start: int, stop: int, axis: int, name: str) -> Tensor:
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"{name}[{start}:{stop}] out of range for axis size {n}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit(np.ascontiguousarray(a.data[index]), (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"slice_rows needs a 2-D tensor, got {a.shape}")
    return _slice_axis(a, start, stop, 0, "slice_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols needs a 2-D tensor, got {a.shape}")
    return _slice_axis(a, start, stop, 1, "slice_cols")


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[t, :] + b for a (T, n) tensor and an (n,) bias."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_row_bias shapes {x.shape} and {b.shape} do not align")

    def bwd(g):
        gx = g if x.needs_grad else None
        gb = g.sum(axis=0) if b.needs_grad else None
        return (gx, gb)

    return _emit(x.data + b.data[None, :], (x, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: matmul plus row bias."""
    return add_row_bias(matmul(x, w), b)


# ---------------------------------------------------------------------------
# normalization and attention kernels


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; scale and shift."""
    d = x.data.shape[-1] if x.data.ndim else 0
    if x.data.ndim < 1:
        raise DimensionError("layer_norm needs at least one axis")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/shift must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(xd.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.needs_grad else None
        gbeta = g.sum(axis=lead) if beta.needs_grad else None
        gx = None
        if x.needs_grad:
            a = g * gamma.data
            gx = inv * (
                a
                - a.mean(axis=-1, keepdims=True)
                - xhat * (a * xhat).mean(axis=-1, keepdims=True)
            )
        return (gx, ggamma, gbeta)

    return _emit(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    x is (C_in, H, W), w is (C_out, C_in, 3, 3), b is (C_out,).
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d_3x3 input must be (C, H, W), got {x.shape}")
    if w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d_3x3 weight must be (C_out, C_in, 3, 3), got {w.shape}")
    c_in, h, wid = x.data.shape
    c_out = w.data.shape[0]
    if w.data.shape[1] != c_in:
        raise DimensionError(f"conv weight expects {w.data.shape[1]} input channels, got {c_in}")
    if b.data.shape != (c_out,):
        raise DimensionError(f"conv bias must have shape ({c_out},), got {b.shape}")

    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # (C_in, H, W, 3, 3) -> (C_in*9, H*W)
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * 9, h * wid)
    w_mat = w.data.reshape(c_out, c_in * 9)
    out = (w_mat @ cols + b.data[:, None]).reshape(c_out, h, wid)

    def bwd(g):
        gm = g.reshape(c_out, h * wid)
        gw = (gm @ cols.T).reshape(w.data.shape) if w.needs_grad else None
        gb = gm.sum(axis=1) if b.needs_grad else None
        gx = None
        if x.needs_grad:
            gcols = (w_mat.T @ gm).reshape(c_in, 3, 3, h, wid)
            gxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gxp[:, di : di + h, dj : dj + wid] += gcols[:, di, dj]
            gx = gxp[:, 1 : 1 + h, 1 : 1 + wid]
        return (gx, gw, gb)

    return _emit(out, (x, w, b), bwd)


_resize_rows_cache: dict = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic interpolation matrix for one axis, half-pixel centers."""
    key = (n_in, n_out)
    cached = _resize_rows_cache.get(key)
    if cached is not None:
        return cached
    r = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        s = (o + 0.5) * ratio - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        frac = s - i0
        r[o, i0] += 1.0 - frac
        r[o, i1] += frac
    _resize_rows_cache[key] = r
    return r


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize (C, H, W) to (C, out_h, out_w) with half-pixel bilinear sampling."""
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_resize input must be (C, H, W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"output size must be positive, got {out_h}x{out_w}")
    _, h, wid = x.data.shape
    ry = _resize_matrix(h, out_h).astype(x.data.dtype)
    rx = _resize_matrix(wid, out_w).astype(x.data.dtype)
    # out[c] = Ry @ x[c] @ Rx^T, done as two tensordots
    tmp = np.tensordot(ry, x.data, axes=(1, 1)).transpose(1, 0, 2)  # (C, oh, W)
    out = np.tensordot(tmp, rx, axes=(2, 1))  # (C, oh, ow)

    def bwd(g):
        t = np.tensordot(g, rx, axes=(2, 0))  # (C, oh, W)
        gx = np.tensordot(ry, t, axes=(0, 1)).transpose(1, 0, 2)  # (C, H, W)
        return (np.ascontiguousarray(gx),)

    return _emit(np.ascontiguousarray(out), (x,), bwd)


def global_average_pool(x: Tensor, grid: int = 1) -> Tensor:
    """Adaptive average pool of (C, H, W) to a flat (C * grid * grid,) vector."""
    if x.data.ndim != 3:
        raise DimensionError(f"global_average_pool input must be (C, H, W), got {x.shape}")
    c, h, wid = x.data.shape
    if not 1 <= grid <= min(h, wid):
        raise ArgumentError(f"grid must be in [1, {min(h, wid)}], got {grid}")
    bounds_h = [(int(np.floor(i * h / grid)), int(np.ceil((i + 1) * h / grid))) for i in range(grid)]
    bounds_w = [(int(np.floor(j * wid / grid)), int(np.ceil((j + 1) * wid / grid))) for j in range(grid)]
    out = np.empty((c, grid, grid), dtype=x.data.dtype)
    for i, (h0, h1) in enumerate(bounds_h):
        for j, (w0, w1) in enumerate(bounds_w):
            out[:, i, j] = x.data[:, h0:h1, w0:w1].mean(axis=(1, 2))

    def bwd(g):
        gg = g.reshape(c, grid, grid)
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(bounds_h):
            for j, (w0, w1) in enumerate(bounds_w):
                area = (h1 - h0) * (w1 - w0)
                gx[:, h0:h1, w0:w1] += gg[:, i, j][:, None, None] / area
        return (gx,)

    return _emit(out.reshape(c * grid * grid), (x,), bwd)
