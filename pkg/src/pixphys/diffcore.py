"""Reverse-mode autodiff substrate shared by every learnable component.

The differentiable primitive set is deliberately closed: matrix multiply,
2-D convolution (stride 1 or 2), nearest-neighbor x2 upsampling, tanh,
sigmoid, softmax over a designated axis, elementwise add/multiply/subtract
(with broadcasting), scalar affine, constant-exponent power, constant
floor (maximum with a scalar), mask select, sum/mean reductions,
concatenation, bilinear grid sampling and sin/cos/atan2.  Shape-only
plumbing (reshape, transpose, basic slicing, stop-gradient) moves no
values and is allowed anywhere.  Anything else raises
``UnsupportedPrimitiveError`` so an unsupported graph fails loudly rather
than silently falling back to numpy.

Every primitive checks its output for NaN/Inf and raises
``NonFiniteError`` instead of propagating poison values.  Training runs
in float32; gradient verification (``grad_check``) runs in float64
because central differences below 1e-4 relative error are unreachable in
single precision.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import torch as _torch
import torch.nn.functional as _tfunc

# All parallelism is managed by the caller (one process per worker); a
# single-threaded kernel pool keeps timings and results reproducible.
_torch.set_num_threads(1)


def set_threads(n: int) -> None:
    """Resize the kernel thread pool; 1 (the default) is bit-reproducible."""
    n = int(n)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _torch.set_num_threads(n)


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class UnsupportedPrimitiveError(TypeError):
    """The requested operation is outside the supported primitive set."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording the tape."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    # One fused pass: the sum of a finite array is finite; any NaN/Inf
    # survives into the sum (inf + -inf -> nan, still caught).
    if a.size and not np.isfinite(a.sum(dtype=np.float64)):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values produced by '{op}'")
    return a


class Tensor:
    """A dense float array plus its place on the reverse-mode tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- tape helpers --------------------------------------------------------
    def _result(self, data: np.ndarray, parents: tuple, vjp, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    def detach(self) -> "Tensor":
        """Gradient stop: same values, no path back through the tape."""
        return Tensor(self.data, requires_grad=False)

    # -- arithmetic ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedPrimitiveError(
                "tensor/tensor division is not a primitive; use power(x, -1) on a floored denominator"
            )
        return affine(self, 1.0 / float(other), 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def __pow__(self, p):
        return power(self, p)

    # Anything that would silently leave the primitive set:
    def __array__(self, *a, **k):
        raise UnsupportedPrimitiveError(
            "implicit numpy conversion would leave the tape; use .data explicitly"
        )


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data
    return a._result(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data
    return a._result(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data
    return a._result(
        out, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def affine(x: Tensor, a: float, b: float) -> Tensor:
    """Scalar affine a*x + b with python-scalar coefficients."""
    a = float(a)
    b = float(b)
    out = x.data * x.data.dtype.type(a) + x.data.dtype.type(b)
    return x._result(out, (x,), lambda g: (g * a,), "affine")


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a constant real exponent.

    Covers the norms and reciprocals needed by the force laws
    (sqrt = 0.5, inverse cube of a distance = -1.5 on the squared norm).
    Negative or fractional exponents require a positive base; floor the
    base first (``maximum_const``).
    """
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x.data ** x.data.dtype.type(p)
    _check_finite(out, "power")

    def vjp(g):
        return (g * p * x.data ** x.data.dtype.type(p - 1.0),)

    return x._result(out, (x,), vjp, "power")


def maximum_const(x: Tensor, c: float) -> Tensor:
    """max(x, c) with gradient passing only through the active branch."""
    c = float(c)
    out = np.maximum(x.data, x.data.dtype.type(c))

    def vjp(g):
        return (np.where(x.data > c, g, 0.0).astype(g.dtype, copy=False),)

    return x._result(out, (x,), vjp, "maximum_const")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select a[mask] else b; the mask is data, not a differentiable input."""
    mask = np.asarray(mask, dtype=bool)
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        zero = np.zeros((), dtype=g.dtype)
        return (
            _unbroadcast(np.where(mask, g, zero), a.data.shape),
            _unbroadcast(np.where(mask, zero, g), b.data.shape),
        )

    return a._result(out, (a, b), vjp, "where")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return x._result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return x._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sin(x: Tensor) -> Tensor:
    return x._result(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x: Tensor) -> Tensor:
    return x._result(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y = as_tensor(y, x if isinstance(x, Tensor) else None)
    x = as_tensor(x, y)
    out = np.arctan2(y.data, x.data)
    denom = y.data * y.data + x.data * x.data

    def vjp(g):
        return (
            _unbroadcast(g * x.data / denom, y.data.shape),
            _unbroadcast(-g * y.data / denom, x.data.shape),
        )

    return y._result(out, (y, x), vjp, "atan2")


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return x._result(out, (x,), vjp, "softmax")


# ---------------------------------------------------------------------------
# reductions / structure
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return x._result(np.asarray(out, dtype=x.data.dtype), (x,), vjp, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.data.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape) / n,)

    return x._result(np.asarray(out, dtype=x.data.dtype), (x,), vjp, "mean")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return tensors[0]._result(out, tuple(tensors), vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return tensors[0]._result(out, tuple(tensors), vjp, "stack")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return x._result(out, (x,), lambda g: (g.reshape(x.data.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)
    return x._result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return x._result(np.ascontiguousarray(out), (x,), vjp, "getitem")


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


# ---------------------------------------------------------------------------
# matmul / conv / upsample / grid sample
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UnsupportedPrimitiveError("matmul is 2-D; reshape batch dims explicitly")
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return a._result(out, (a, b), vjp, "matmul")


def _to_torch_nhwc(a: np.ndarray) -> "_torch.Tensor":
    """Zero-copy view of an NHWC array as a channels-last torch tensor."""
    return _torch.from_numpy(np.ascontiguousarray(a)).permute(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """NHWC convolution, weights (kh, kw, Cin, Cout), stride 1 or 2.

    The inner kernels (forward, input-gradient, weight-gradient) are
    torch's CPU convolutions in channels-last layout, which an NHWC numpy
    array aliases without copying; the tape, gradient bookkeeping, and
    every other primitive stay in numpy.
    """
    if stride not in (1, 2):
        raise UnsupportedPrimitiveError("conv2d supports stride 1 or 2 only")
    kh, kw, cin, cout = w.data.shape
    B, H, W, C = x.data.shape
    if C != cin:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {cin}")

    cl = _torch.channels_last
    xt = _to_torch_nhwc(x.data)
    wt = _torch.from_numpy(w.data).permute(3, 2, 0, 1).contiguous(memory_format=cl)
    with _torch.no_grad():
        yt = _tfunc.conv2d(xt, wt, stride=stride, padding=pad)
    out = np.ascontiguousarray(yt.permute(0, 2, 3, 1).numpy())

    def vjp(g):
        gt = _to_torch_nhwc(g)
        with _torch.no_grad():
            dxt = _torch.nn.grad.conv2d_input(
                (B, cin, H, W), wt, gt, stride=stride, padding=pad
            )
            dwt = _torch.nn.grad.conv2d_weight(
                xt, wt.shape, gt, stride=stride, padding=pad
            )
        dx = np.ascontiguousarray(dxt.permute(0, 2, 3, 1).numpy())
        dw = np.ascontiguousarray(dwt.permute(2, 3, 1, 0).numpy())
        return (dx, dw)

    return x._result(out, (x, w), vjp, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of NHWC."""
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def vjp(g):
        B, H, W, C = g.shape
        return (g.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4)),)

    return x._result(out, (x,), vjp, "upsample2x")


def grid_sample(img: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``img`` (Hs, Ws, C) at normalized coordinates.

    ``grid`` has shape (..., 2) with (x, y) per point; (-1, -1) is the
    center of the top-left source pixel and (+1, +1) the bottom-right one.
    Points outside [-1, 1] blend toward 0 (zero padding): any bilinear tap
    that falls off the image contributes nothing.
    """
    img = as_tensor(img)
    grid = as_tensor(grid, img)
    if grid.data.shape[-1] != 2:
        raise ValueError("grid last extent must be 2 (x, y)")
    hs, ws, C = img.data.shape
    dtype = img.data.dtype
    gshape = grid.data.shape[:-1]

    # Forward runs on torch's bilinear sampler (same convention: zero
    # padding, corner-aligned normalization); the backward pass gathers the
    # same four taps in numpy, where the scatter-add back into the image is
    # cheaper than torch's sampler gradient.
    imgt = _torch.from_numpy(img.data).permute(2, 0, 1).unsqueeze(0)
    gridt = _torch.from_numpy(np.ascontiguousarray(grid.data)).reshape(1, 1, -1, 2)
    with _torch.no_grad():
        yt = _tfunc.grid_sample(
            imgt, gridt, mode="bilinear", padding_mode="zeros", align_corners=True
        )
    out = np.ascontiguousarray(yt[0, :, 0].T.numpy()).reshape(gshape + (C,))

    def vjp(g):
        ix = (grid.data[..., 0] + 1.0) * ((ws - 1) / 2.0)
        iy = (grid.data[..., 1] + 1.0) * ((hs - 1) / 2.0)
        x0f = np.floor(ix)
        y0f = np.floor(iy)
        fx = (ix - x0f).astype(dtype)
        fy = (iy - y0f).astype(dtype)
        x0 = x0f.astype(np.int32)
        y0 = y0f.astype(np.int32)

        def tap(dy, dx_):
            xx = x0 + dx_
            yy = y0 + dy
            valid = (xx >= 0) & (xx < ws) & (yy >= 0) & (yy < hs)
            idx = np.where(valid, yy.astype(np.int64) * ws + xx, 0).ravel()
            wgt = np.where(
                valid,
                (fx if dx_ else 1.0 - fx) * (fy if dy else 1.0 - fy),
                dtype.type(0),
            )
            return idx, wgt, valid

        flat = img.data.reshape(-1, C)
        gflat = g.reshape(-1, C)
        dimg = np.zeros((hs * ws, C), dtype=dtype)
        dix = np.zeros(x0.shape, dtype=dtype)
        diy = np.zeros(x0.shape, dtype=dtype)
        for dy, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
            idx, wgt, valid = tap(dy, dx_)
            vals = flat[idx].reshape(x0.shape + (C,))
            gdotv = (g * vals).sum(axis=-1)
            sx = fx if dx_ else 1.0 - fx
            sy = fy if dy else 1.0 - fy
            dix += gdotv * np.where(valid, (1.0 if dx_ else -1.0) * sy, dtype.type(0))
            diy += gdotv * np.where(valid, (1.0 if dy else -1.0) * sx, dtype.type(0))
            contrib = gflat * wgt.ravel()[:, None]
            for c in range(C):
                dimg[:, c] += np.bincount(
                    idx, weights=contrib[:, c], minlength=hs * ws
                ).astype(dtype, copy=False)
        dgrid = np.stack(
            [dix * ((ws - 1) / 2.0), diy * ((hs - 1) / 2.0)], axis=-1
        )
        return (dimg.reshape(img.data.shape), dgrid)

    return img._result(out, (img, grid), vjp, "grid_sample")


# ---------------------------------------------------------------------------
# parameters and backprop
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> (tensor, trainable) map; the trainable set is frozen
    at construction time of each entry and iteration order is insertion
    order, so updates and serialization are deterministic."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def set_value(self, name: str, value: np.ndarray) -> None:
        t = self._params[name]
        value = np.asarray(value, dtype=t.data.dtype)
        if value.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {t.data.shape}")
        t.data = value

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss; accumulates ``.grad`` on leaves."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # Iterative topological order (graphs reach thousands of nodes).
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            if g is not None and node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._vjp = None


def evaluate_and_backprop(program: Callable[[], Tensor], params: ParamStore) -> dict[str, np.ndarray]:
    """Run ``program`` to a scalar loss and return gradients per trainable
    parameter; parameters unreached by the graph get exact zeros."""
    for name in params:
        params[name].grad = None
    loss = program()
    backward(loss)
    grads = {}
    for name in params.trainable_names():
        t = params[name]
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads


# ---------------------------------------------------------------------------
# finite-difference verification harness
# ---------------------------------------------------------------------------

class NonDifferentiableError(ArithmeticError):
    """grad_check probed a point where the op is not differentiable."""


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    probe_limit: int = 0,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of scalar ``fn(*inputs)`` against central
    finite differences in float64.

    Returns the worst relative error, denominator max(|analytic|,
    |numeric|, 1e-8).  When the analytic value disagrees with the central
    difference *and* the left/right one-sided slopes disagree with each
    other, the probed point is reported as non-differentiable (a kink)
    instead of silently failing.
    ``probe_limit`` > 0 caps how many coordinates of each input are probed
    (sampled without replacement); 0 probes every element.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]

    def run(*arrays):
        ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        out = fn(*ts)
        if out.data.size != 1:
            raise ValueError("grad_check requires a scalar output")
        return out, ts

    out, ts = run(*xs)
    backward(out)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts
    ]

    def value(arrays) -> float:
        with no_grad():
            return float(fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data)

    f0 = value(xs)
    worst = 0.0
    for i, x in enumerate(xs):
        flat = x.ravel()
        n = flat.size
        if probe_limit and n > probe_limit:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(n, size=probe_limit, replace=False)
        else:
            picks = range(n)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + step
            fp = value(xs)
            flat[j] = orig - step
            fm = value(xs)
            flat[j] = orig
            num = (fp - fm) / (2.0 * step)
            a = float(analytic[i].ravel()[j])
            # Cancellation noise floor of the difference quotient: smaller
            # disagreements than this are indistinguishable from roundoff.
            noise = 100.0 * np.finfo(np.float64).eps * max(
                1.0, abs(f0), abs(fp), abs(fm)
            ) / step
            if abs(a - num) <= noise:
                continue
            denom = max(abs(a), abs(num), 1e-8)
            rel = abs(a - num) / denom
            if rel > 1e-2:
                # Distinguish a wrong gradient from a genuine kink: at a
                # kink the left and right one-sided slopes disagree while
                # central differences quietly average them.
                sp = (fp - f0) / step
                sm = (f0 - fm) / step
                side_gap = abs(sp - sm) / max(abs(sp), abs(sm), 1e-8)
                if side_gap > 0.1:
                    raise NonDifferentiableError(
                        f"input {i} element {j}: one-sided slopes disagree "
                        f"({sp:.6g} vs {sm:.6g}); op is not differentiable at "
                        "the probed point"
                    )
            worst = max(worst, rel)
    return worst
