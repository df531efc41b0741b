"""Dense tensors with tape-based reverse-mode differentiation.

Values are immutable numpy arrays (float32 by default, float64 for gradient
verification). Operations execute eagerly; when a Tape is active, each
differentiable operation appends a node so `backward` can replay adjoints in
exact reverse execution order. Feature maps use NCHW at the image boundary
and NHWC ("token") layout inside attention blocks; each op documents which
layout it expects.
"""

from __future__ import annotations

import ctypes
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .errors import ShapeError

_INV_SQRT_2PI = 0.3989422804014327

# Large attention/im2col buffers churn every iteration; keeping big blocks on
# the glibc heap instead of mmap avoids a page-fault storm per allocation.
try:  # pragma: no cover - platform dependent
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except (OSError, AttributeError):
    pass

# The GEMMs here are small enough that BLAS worker-thread synchronization
# costs more than it saves; elementwise passes are threaded explicitly below.
# HMA_BLAS_THREADS overrides for experimentation.
try:  # pragma: no cover - optional
    import threadpoolctl

    threadpoolctl.threadpool_limits(int(__import__("os").environ.get("HMA_BLAS_THREADS", "1")), "blas")
except Exception:
    pass

_tls = threading.local()

_N_WORKERS = int(__import__("os").environ.get("HMA_WORKERS", "0")) or min(2, __import__("os").cpu_count() or 1)
_POOL = None
_PAR_MIN_BYTES = 1 << 19


def _pool():
    global _POOL
    if _POOL is None:
        from concurrent.futures import ThreadPoolExecutor

        _POOL = ThreadPoolExecutor(max_workers=_N_WORKERS)
    return _POOL


def _chunked(fn, *arrays):
    """Apply fn(*chunks) over leading-axis halves in worker threads.

    numpy/scipy ufuncs release the GIL, so disjoint slices parallelize; used
    only for big memory-bound passes where it pays for the dispatch.
    """
    lead = arrays[0].shape[0]
    if _N_WORKERS < 2 or lead < 2 or arrays[0].nbytes < _PAR_MIN_BYTES:
        fn(*arrays)
        return
    mid = lead // 2
    f = _pool().submit(fn, *(a[:mid] for a in arrays))
    fn(*(a[mid:] for a in arrays))
    f.result()


def _mm(a, b):
    # concurrent calls into OpenBLAS serialize on its internal buffer pool,
    # so matrix products stay on one thread; only ufunc passes are chunked
    return np.matmul(a, b)


def _mm2(a, w):
    return np.matmul(a, w)


def _mm_tn(a, b):
    return np.matmul(a.T, b)


def _sum0(a):
    """a.sum(axis=0) with the summed axis split across the pool."""
    n = a.shape[0]
    if _N_WORKERS < 2 or n < 2 or a.nbytes < _PAR_MIN_BYTES:
        return a.sum(axis=0)
    mid = n // 2
    f = _pool().submit(np.sum, a[:mid], 0)
    second = a[mid:].sum(axis=0)
    return f.result() + second


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """A dense n-dimensional array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_track")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._track = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Single-writer: one forward/backward pass owns the tape. Entering the
    context makes it the active tape for the current thread.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray | None]]]]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tls.stack
        stack.pop()
        _tls.tape = stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self._nodes)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t._track for t in inputs):
        out._track = True
        tape._nodes.append((out, backward_fn))
        tape._produced.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d loss / d x into `.grad` of every requires_grad leaf.

    A value consumed by k operations receives the sum of its k adjoint
    contributions; traversal is exact reverse execution order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("loss was not produced under this tape")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    nodes = tape._nodes
    for i in range(len(nodes) - 1, -1, -1):
        out, backward_fn = nodes[i]
        nodes[i] = None  # release saved buffers as soon as the node is done
        g = adjoints.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        for t, contrib in backward_fn(g):
            if contrib is None or not t._track:
                continue
            key = id(t)
            if key in adjoints:
                adjoints[key] = adjoints[key] + contrib
            else:
                adjoints[key] = contrib
                holders[key] = t
    nodes.clear()
    for key, g in adjoints.items():
        t = holders[key]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and structural ops
# ----------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: ((a, -g),))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: ((a, g * c),))


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: ((a, g * np.sign(a.data)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: ((a, np.ascontiguousarray(g.transpose(inv))),))


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = Tensor(np.roll(a.data, shifts, axis=axes))
    inv = tuple(-s for s in shifts)
    return _record(out, (a,), lambda g: ((a, np.roll(g, inv, axis=axes)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(zip(tensors, pieces))

    return _record(out, tensors, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(a.data[idx]))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return _record(out, (a,), bwd)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds into the table."""
    if table.ndim != 2:
        raise ShapeError(f"take expects a 2-D table, got shape {table.shape}")
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(
            f"take index range [{index.min()}, {index.max()}] exceeds table rows {table.shape[0]}"
        )
    out = Tensor(table.data[index])

    def bwd(g):
        # bincount per column is far faster than np.add.at for large gathers
        rows, cols = table.shape
        flat = index.reshape(-1)
        gm = g.reshape(-1, cols)
        full = np.empty_like(table.data)
        for c in range(cols):
            full[:, c] = np.bincount(flat, weights=gm[:, c], minlength=rows)
        return ((table, full),)

    return _record(out, (table,), bwd)


def permute_rows(a: Tensor, idx: np.ndarray, inv_idx: np.ndarray,
                 out_shape: Sequence[int]) -> Tensor:
    """Reorder the token rows of `a` (any leading shape, channels last) by a
    precomputed permutation; the inverse permutation drives the backward."""
    c = a.shape[-1]
    out = Tensor(a.data.reshape(-1, c)[idx].reshape(tuple(out_shape)))

    def bwd(g):
        return ((a, g.reshape(-1, c)[inv_idx].reshape(a.shape)),)

    return _record(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: ((a, np.broadcast_to(g, a.shape).astype(a.data.dtype)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.data.mean())
    return _record(out, (a,), lambda g: ((a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype)),))


def mean_axes(a: Tensor, axes: Sequence[int], keepdims: bool = True) -> Tensor:
    axes = tuple(axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype)),)

    return _record(out, (a,), bwd)


# ----------------------------------------------------------------------------
# nonlinearities and normalization
# ----------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    return _record(out, (a,), lambda g: ((a, g * y * (1.0 - y)),))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = a.data
    phi = np.empty_like(x)
    _chunked(lambda xc, pc: ndtr(xc, out=pc), x.reshape(-1), phi.reshape(-1))
    out = Tensor(x * phi)

    def bwd(g):
        pdf = np.exp(x * x * -0.5)
        pdf *= _INV_SQRT_2PI
        pdf *= x
        pdf += phi
        pdf *= g
        return ((a, pdf),)

    return _record(out, (a,), bwd)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((a, y * (g - dot)),)

    return _record(out, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gamma, beta."""
    if eps <= 0:
        raise ShapeError(f"layer_norm eps must be > 0, got {eps}")
    c = a.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature width {c}"
        )
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xh = x - mu
    var = np.einsum("...i,...i->...", xh, xh)[..., None] / n
    inv = 1.0 / np.sqrt(var + eps, dtype=x.dtype)
    xh *= inv
    out = Tensor(xh * gamma.data + beta.data)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gm = g.reshape(-1, n)
        dgamma = np.einsum("ji,ji->i", gm, xh.reshape(-1, n))
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = np.einsum("...i,...i->...", gx, xh)[..., None] / n
        dx = gx
        dx -= m1
        dx -= xh * m2
        dx *= inv
        return ((a, dx), (gamma, dgamma), (beta, dbeta))

    return _record(out, (a, gamma, beta), bwd)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(da, a.shape)), (b, _unbroadcast(db, b.shape)))

    return _record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """y = x @ w + b over the last axis; leading axes broadcast."""
    din, dout = w.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear input width {x.shape[-1]} does not match weight {w.shape}")
    xm = x.data.reshape(-1, din)
    y = _mm2(xm, w.data)
    if b is not None:
        if b.shape != (dout,):
            raise ShapeError(f"linear bias shape {b.shape} does not match output width {dout}")
        y += b.data
    out = Tensor(y.reshape(x.shape[:-1] + (dout,)))

    def bwd(g):
        gm = g.reshape(-1, dout)
        dx = _mm2(gm, w.data.T).reshape(x.shape)
        dw = _mm_tn(xm, gm)
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, _sum0(gm)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


# ----------------------------------------------------------------------------
# convolution and pixel shuffle
# ----------------------------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    return ho, wo


def _im2col(xn, kh, kw, stride, pads):
    """(N, H, W, C) -> (N*Ho*Wo, kh*kw*C) patch matrix; pads = (ph, pw)."""
    n, h, w, ci = xn.shape
    ph, pw = pads
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    xp = np.pad(xn, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xn
    if kh == 1 and kw == 1 and stride == 1:
        return xp.reshape(-1, ci), xp.shape
    if stride == 1:
        gather = np.empty((n, ho, wo, kh * kw, ci), dtype=xp.dtype)
        taps = [(i, divmod(i, kw)) for i in range(kh * kw)]

        def fill(work):
            for tap, (dy, dx) in work:
                gather[:, :, :, tap, :] = xp[:, dy:dy + ho, dx:dx + wo, :]

        if _N_WORKERS > 1 and gather.nbytes >= _PAR_MIN_BYTES:
            fut = _pool().submit(fill, taps[: len(taps) // 2])
            fill(taps[len(taps) // 2:])
            fut.result()
        else:
            fill(taps)
        return gather.reshape(n * ho * wo, kh * kw * ci), xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * ci)
    return col, xp.shape


def _conv_forward_nhwc(xn, wk, bias, stride, pad):
    n, h, w, ci = xn.shape
    kh, kw, wci, co = wk.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad)
    col, xp_shape = _im2col(xn, kh, kw, stride, (pad, pad))
    y = _mm2(col, wk.reshape(kh * kw * ci, co))
    if bias is not None:
        y += bias
    return y.reshape(n, ho, wo, co), col, xp_shape


def _conv_backward_nhwc(g, col, wk, stride, pad, x_shape, xp_shape, need_dx=True):
    n, h, w, ci = x_shape
    kh, kw, _, co = wk.shape
    ho, wo = g.shape[1], g.shape[2]
    gm = g.reshape(-1, co)
    dw = _mm_tn(col, gm).reshape(kh, kw, ci, co)
    db = _sum0(gm)
    if not need_dx:
        return None, dw, db
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return _mm2(gm, wk.reshape(ci, co).T).reshape(x_shape), dw, db
    if stride == 1 and pad < kh and pad < kw:
        # dx is the full correlation of g with the flipped kernel: one im2col
        # over g plus a single GEMM instead of nine strided scatter-adds
        wflip = wk[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh, kw, co, ci)
        gcol, _ = _im2col(g, kh, kw, 1, (kh - 1 - pad, kw - 1 - pad))
        return (_mm2(gcol, np.ascontiguousarray(wflip).reshape(kh * kw * co, ci))
                .reshape(x_shape), dw, db)
    dcol = _mm2(gm, wk.reshape(kh * kw * ci, co).T)
    dcol = dcol.reshape(n, ho, wo, kh, kw, ci)
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcol[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(dxp), dw, db


def _conv_common(x, w, b, stride, pad, nhwc: bool):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d pad must be >= 0, got {pad}")
    ci = x.shape[3] if nhwc else x.shape[1]
    if ci != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {ci} channels, weight {w.shape} expects {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {w.shape[0]} output channels")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW input, OIHW weight, zero padding."""
    _conv_common(x, w, b, stride, pad, nhwc=False)
    xn = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))
    y, col, xp_shape = _conv_forward_nhwc(xn, wk, None if b is None else b.data, stride, pad)
    out = Tensor(np.ascontiguousarray(y.transpose(0, 3, 1, 2)))

    def bwd(g):
        gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        dx, dw, db = _conv_backward_nhwc(gn, col, wk, stride, pad, xn.shape, xp_shape,
                                         need_dx=x._track)
        grads = [(w, np.ascontiguousarray(dw.transpose(3, 2, 0, 1)))]
        if dx is not None:
            grads.append((x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2))))
        if b is not None:
            grads.append((b, db))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def conv2d_nhwc(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution on NHWC feature maps; weight stays OIHW for storage."""
    _conv_common(x, w, b, stride, pad, nhwc=True)
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))
    y, col, xp_shape = _conv_forward_nhwc(x.data, wk, None if b is None else b.data, stride, pad)
    out = Tensor(y)

    def bwd(g):
        dx, dw, db = _conv_backward_nhwc(g, col, wk, stride, pad, x.shape, xp_shape,
                                         need_dx=x._track)
        grads = [(w, np.ascontiguousarray(dw.transpose(3, 2, 0, 1)))]
        if dx is not None:
            grads.append((x, dx))
        if b is not None:
            grads.append((b, db))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def _check_shuffle_channels(c: int, r: int):
    if r < 1:
        raise ShapeError(f"pixel_shuffle factor must be >= 1, got {r}")
    if c % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle needs channels divisible by {r * r}, got {c}")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r^2, H, W) into (N, C, r*H, r*W)."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle needs a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    _check_shuffle_channels(c, r)
    co = c // (r * r)
    y = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        dx = g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w)
        return ((x, np.ascontiguousarray(dx)),)

    return _record(out, (x,), bwd)


def pixel_shuffle_nhwc(x: Tensor, r: int) -> Tensor:
    """NHWC variant of pixel_shuffle: (N, H, W, C*r^2) -> (N, r*H, r*W, C)."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle needs a 4-D tensor, got shape {x.shape}")
    n, h, w, c = x.shape
    _check_shuffle_channels(c, r)
    co = c // (r * r)
    y = x.data.reshape(n, h, w, co, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(n, h * r, w * r, co)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        dx = g.reshape(n, h, r, w, r, co).transpose(0, 1, 3, 5, 2, 4).reshape(n, h, w, c)
        return ((x, np.ascontiguousarray(dx)),)

    return _record(out, (x,), bwd)


# ----------------------------------------------------------------------------
# fused attention
# ----------------------------------------------------------------------------

def fused_attention(q: Tensor, k: Tensor, v: Tensor, scale: float,
                    bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T * scale [+ bias] [+ mask]) v as one tape node.

    q, k, v are (B, heads, T, d); bias broadcasts as (heads, T, T); mask is a
    constant (n_windows, T, T) block repeated over B // n_windows. The logits
    and probabilities are computed in place; attention matrices for long
    token groups dominate this package's training cost, so the op keeps the
    number of full passes over them minimal.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention inputs must agree, got {q.shape}, {k.shape}, {v.shape}")
    scale = float(scale)  # a numpy scalar would promote float32 operands
    b, heads, t, d = q.shape
    logits = _mm(q.data * scale, np.swapaxes(k.data, -1, -2))
    if bias is not None and bias.shape != (heads, t, t):
        raise ShapeError(f"attention bias shape {bias.shape}, expected {(heads, t, t)}")
    if mask is not None:
        nw = mask.shape[0]
        if b % nw:
            raise ShapeError(f"mask for {nw} windows does not divide batch {b}")
        view = logits.reshape(b // nw, nw, heads, t, t)
        view += mask[None, :, None, :, :]
    bias_data = None if bias is None else bias.data

    def norm_chunk(chunk):
        if bias_data is not None:
            chunk += bias_data
        np.subtract(chunk, chunk.max(axis=-1, keepdims=True), out=chunk)
        np.exp(chunk, out=chunk)
        chunk /= chunk.sum(axis=-1, keepdims=True)

    _chunked(norm_chunk, logits)
    probs = logits
    out = Tensor(_mm(probs, v.data))

    def softmax_bwd_chunk(dlc, pc):
        dot = np.einsum("...ij,...ij->...i", dlc, pc)[..., None]
        dlc -= dot
        dlc *= pc

    def bwd(g):
        # dv and dk are written transposed (small outputs) to keep the big
        # (T, T) operands on the read side of each GEMM
        dv = np.swapaxes(_mm(np.swapaxes(g, -1, -2), probs), -1, -2)
        dl = _mm(g, np.swapaxes(v.data, -1, -2))
        _chunked(softmax_bwd_chunk, dl, probs)
        dk = np.swapaxes(_mm(np.swapaxes(q.data, -1, -2), dl), -1, -2)
        dk *= scale
        dq = _mm(dl, k.data)
        dq *= scale
        grads = [(q, dq), (k, dk), (v, dv)]
        if bias is not None:
            grads.append((bias, _sum0(dl)))
        return grads

    inputs = (q, k, v) if bias is None else (q, k, v, bias)
    return _record(out, inputs, bwd)


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

class Param:
    """A named parameter: a dot-separated path plus a trainable tensor."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: Tensor):
        self.name = name
        self.value = value

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


class ParamStore:
    """Ordered collection of uniquely named parameters."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        value.requires_grad = True
        value._track = True
        self._items[name] = value
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def n_scalars(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grads(self) -> None:
        for t in self._items.values():
            t.grad = None


# ----------------------------------------------------------------------------
# finite-difference oracle
# ----------------------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central finite differences.

    `f` must map a tensor to a scalar tensor and must be evaluated in float64.
    Relative error uses max(1, |analytic|) as denominator. When `sample` is
    given, only that many coordinates (seeded choice) are probed; otherwise
    every coordinate is.
    """
    if h <= 0:
        raise ValueError(f"grad_check step must be > 0, got {h}")
    if x.data.dtype != np.float64:
        raise ShapeError("grad_check requires a float64 input tensor")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        out = f(probe)
        if out.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        backward(tape, out)
    analytic = probe.grad
    if analytic is None:
        analytic = np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        idx = np.random.default_rng(seed).choice(n, size=sample, replace=False)
    else:
        idx = np.arange(n)

    ana_flat = analytic.reshape(-1)
    worst = 0.0
    work = x.data.copy().reshape(-1)
    for i in idx:
        orig = work[i]
        work[i] = orig + h
        fp = f(Tensor(work.reshape(x.shape), dtype=np.float64)).item()
        work[i] = orig - h
        fm = f(Tensor(work.reshape(x.shape), dtype=np.float64)).item()
        work[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(numeric - ana_flat[i]) / max(1.0, abs(ana_flat[i]))
        if err > worst:
            worst = err
    return worst
