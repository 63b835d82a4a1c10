"""Dense tensors on a recorded operation tape with reverse-mode gradients.

Arithmetic is strict: elementwise operands must have identical shapes and
dtypes (matrix products use the usual inner-dimension contract), and there
is no broadcasting.  Every forward operation checks its output for NaN/Inf
and raises ``NumericalError`` rather than letting bad values propagate.

Training runs in float32; gradient checking requires float64 (central
finite differences are unreliable in single precision).
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

CE_POSITION_FLOPS = 2  # bookkeeping per supervised pixel beyond the 4K softmax terms


class ShapeError(ValueError):
    """Operand shapes (or dtypes) violate an operation's contract."""


class NumericalError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Invalid tape use: non-scalar loss or a second replay."""


class NonDeterministicError(RuntimeError):
    """Two forward passes of a supposedly deterministic map disagreed."""


class FlopCounter:
    """Process-wide runtime FLOP meter; enabled explicitly, cheap when off."""

    def __init__(self):
        self.enabled = False
        self.total = 0

    def add(self, n: int) -> None:
        if self.enabled:
            self.total += int(n)

    def reset(self) -> None:
        self.total = 0

    def __enter__(self) -> "FlopCounter":
        self.reset()
        self.enabled = True
        return self

    def __exit__(self, *exc) -> None:
        self.enabled = False


FLOPS = FlopCounter()


class Tensor:
    """A contiguous real array with an optional gradient buffer.

    Tensors are immutable after creation except for gradient accumulation;
    the training loop mutates parameter ``data`` in place only between
    tapes (an optimizer step invalidates any tape built before it).
    """

    __slots__ = ("data", "grad", "requires_grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._on_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# --- tape ------------------------------------------------------------------

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


@dataclass
class TapeOp:
    """One recorded operation: inputs, output, and its backward rule.

    ``backward`` maps the output gradient to one gradient array (or None)
    per input, in input order.
    """

    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]


class Tape:
    """Ordered record of operations; append order is topological by
    construction, so a single reverse sweep propagates all gradients."""

    def __init__(self):
        self.ops: list[TapeOp] = []
        self._replayed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def splice(self, subtapes: Iterable["Tape"]) -> None:
        """Append sub-tape records in the given order.

        Used to merge tapes recorded on worker threads; the splice order is
        chosen by the caller, so results never depend on thread scheduling.
        """
        for sub in subtapes:
            self.ops.extend(sub.ops)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _wrap(name: str, inputs: tuple, out_data: np.ndarray, backward_fn, flops: int = 0) -> Tensor:
    """Finite-check, count, wrap and (if needed) record an op result."""
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"{name}: non-finite values in output")
    if FLOPS.enabled:
        FLOPS.total += int(flops)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad or t._on_tape for t in inputs):
        out._on_tape = True
        tape.ops.append(TapeOp(name, inputs, out, backward_fn))
    return out


def custom_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn, flops: int = 0) -> Tensor:
    """Record a fused operation with a hand-written backward rule.

    Exposed so other modules can add primitives (e.g. the state-space scan)
    without touching the tape internals.
    """
    return _wrap(name, tuple(inputs), out_data, backward_fn, flops)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's grad.

    Visits each recorded op exactly once, in reverse order.  Parameters not
    reachable from the loss keep whatever is in their grad buffer (zeros
    after ``zero_grad``/creation).  A tape can be replayed only once; an
    optimizer step mutates parameter data, which would silently invalidate
    a second replay.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape._replayed:
        raise TapeError("tape already replayed; build a fresh tape for the next step")
    tape._replayed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss.grad += grads[id(loss)]
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        in_grads = op.backward(g)
        for t, ig in zip(op.inputs, in_grads):
            if ig is None:
                continue
            if t.requires_grad:
                t.grad += ig
            elif t._on_tape:
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = np.array(ig, copy=True)
                else:
                    acc += ig


def parallel_forward(thunks: Sequence[Callable[[], object]]) -> list:
    """Evaluate independent forward thunks on worker threads.

    Each thunk records onto a private sub-tape (the tape stack is
    thread-local); the sub-tapes are spliced into the caller's tape in
    thunk order.  Outputs and gradients are therefore bitwise identical to
    sequential evaluation regardless of scheduling.
    """
    main = active_tape()

    def run(thunk):
        sub = Tape()
        with sub:
            value = thunk()
        return value, sub

    with ThreadPoolExecutor(max_workers=max(1, len(thunks))) as pool:
        results = list(pool.map(run, thunks))
    if main is not None:
        main.splice([sub for _, sub in results])
    return [value for value, _ in results]


# --- shape/dtype checks ----------------------------------------------------


def _check_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} must match exactly")
    if a.dtype != b.dtype:
        raise ShapeError(f"{name}: dtypes {a.dtype} and {b.dtype} must match")


def _scalar(x: Tensor, value: float):
    return x.data.dtype.type(value)


# --- elementwise and linear primitives --------------------------------------


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("add", x, y)
    return _wrap("add", (x, y), x.data + y.data, lambda g: (g, g), flops=x.size)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("sub", x, y)
    return _wrap("sub", (x, y), x.data - y.data, lambda g: (g, -g), flops=x.size)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("mul", x, y)
    return _wrap("mul", (x, y), x.data * y.data, lambda g: (g * y.data, g * x.data), flops=x.size)


def div(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("div", x, y)
    out = x.data / y.data

    def bwd(g):
        return g / y.data, -g * out / y.data

    return _wrap("div", (x, y), out, bwd, flops=x.size)


def scale(x: Tensor, s: float) -> Tensor:
    sv = _scalar(x, s)
    return _wrap("scale", (x,), x.data * sv, lambda g: (g * sv,), flops=x.size)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (both factors differentiable)."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by: scale must be a scalar tensor, got shape {s.shape}")
    if x.dtype != s.dtype:
        raise ShapeError(f"scale_by: dtypes {x.dtype} and {s.dtype} must match")
    sv = s.data.reshape(())

    def bwd(g):
        return g * sv, (g * x.data).sum().reshape(s.shape)

    return _wrap("scale_by", (x, s), x.data * sv, bwd, flops=2 * x.size)


def element(x: Tensor, index: int) -> Tensor:
    """Extract one entry of a 1-D tensor as a scalar tensor."""
    if x.ndim != 1:
        raise ShapeError(f"element: expects a 1-D tensor, got shape {x.shape}")
    idx = int(index)

    def bwd(g):
        z = np.zeros_like(x.data)
        z[idx] = g.reshape(())
        return (z,)

    return _wrap("element", (x,), x.data[idx].reshape(()), bwd)


def matmul(x: Tensor, y: Tensor) -> Tensor:
    if x.dtype != y.dtype:
        raise ShapeError(f"matmul: dtypes {x.dtype} and {y.dtype} must match")
    if x.ndim != 2 or y.ndim not in (1, 2) or x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    out = x.data @ y.data

    if y.ndim == 1:

        def bwd(g):
            return np.outer(g, y.data), x.data.T @ g

        n_flops = 2 * x.shape[0] * x.shape[1]
    else:

        def bwd(g):
            return g @ y.data.T, x.data.T @ g

        n_flops = 2 * x.shape[0] * x.shape[1] * y.shape[1]
    return _wrap("matmul", (x, y), out, bwd, flops=n_flops)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _wrap("relu", (x,), np.where(mask, x.data, x.data.dtype.type(0)), lambda g: (g * mask,), flops=x.size)


def sum_all(x: Tensor) -> Tensor:
    return _wrap("sum_all", (x,), x.data.sum().reshape(()), lambda g: (np.full_like(x.data, g.reshape(())),), flops=x.size)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    inv = 1.0 / n
    out = (x.data.sum() * x.data.dtype.type(inv)).reshape(())
    return _wrap("mean_all", (x,), out, lambda g: (np.full_like(x.data, g.reshape(()) * x.data.dtype.type(inv)),), flops=x.size)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    first = parts[0]
    for p in parts[1:]:
        if p.ndim != first.ndim or p.dtype != first.dtype:
            raise ShapeError(f"concat: mismatched operand {p.shape}/{p.dtype} vs {first.shape}/{first.dtype}")
        for ax in range(first.ndim):
            if ax != axis and p.shape[ax] != first.shape[ax]:
                raise ShapeError(f"concat: shapes {first.shape} and {p.shape} differ off-axis")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        out = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return out

    return _wrap("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=axis), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        z = np.zeros_like(x.data)
        z[sl] = g
        return (z,)

    return _wrap("narrow", (x,), np.ascontiguousarray(x.data[sl]), bwd)


def split(x: Tensor, parts: int, axis: int = 0) -> tuple[Tensor, ...]:
    extent = x.shape[axis]
    if parts < 1 or extent % parts != 0:
        raise ShapeError(f"split: axis extent {extent} not divisible into {parts} parts")
    step = extent // parts
    return tuple(narrow(x, axis, i * step, step) for i in range(parts))


def spatial_mean(x: Tensor) -> Tensor:
    """Global average over the two trailing spatial axes: (C,h,w) -> (C,)."""
    if x.ndim != 3:
        raise ShapeError(f"spatial_mean: expects (C,h,w), got {x.shape}")
    c, h, w = x.shape
    inv = x.data.dtype.type(1.0 / (h * w))

    def bwd(g):
        return (np.broadcast_to(g[:, None, None] * inv, x.shape).copy(),)

    return _wrap("spatial_mean", (x,), x.data.mean(axis=(1, 2)), bwd, flops=x.size)


# --- spatial primitives ------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pad: int | None = None) -> Tensor:
    """Same-size 2-D cross-correlation, stride 1, zero padding.

    x: (C_in, h, w); weight: (C_out, C_in, k, k) with k in {1, 3};
    bias: (C_out,).  pad defaults to (k - 1) // 2 and must equal it.
    """
    if x.ndim != 3 or weight.ndim != 4 or bias.ndim != 1:
        raise ShapeError(f"conv2d: bad ranks x{x.shape} w{weight.shape} b{bias.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be square with k in {{1,3}}, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input channels {x.shape[0]} != weight C_in {c_in}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"conv2d: bias length {bias.shape[0]} != C_out {c_out}")
    if x.dtype != weight.dtype or x.dtype != bias.dtype:
        raise ShapeError("conv2d: operand dtypes must match")
    p = (k - 1) // 2
    if pad is not None and pad != p:
        raise ShapeError(f"conv2d: pad must be (k-1)//2 = {p} to preserve size, got {pad}")
    _, h, w = x.shape
    if k == 1:
        patches = x.data.reshape(c_in, 1, 1, h, w)
    else:
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
        patches = np.empty((c_in, k, k, h, w), dtype=x.data.dtype)
        for di in range(k):
            for dj in range(k):
                patches[:, di, dj] = xp[:, di : di + h, dj : dj + w]
    out = np.tensordot(weight.data, patches, axes=([1, 2, 3], [0, 1, 2]))
    out += bias.data[:, None, None]

    def bwd(g):
        dw = np.tensordot(g, patches, axes=([1, 2], [3, 4]))
        db = g.sum(axis=(1, 2))
        dpatch = np.tensordot(weight.data, g, axes=([0], [0]))  # (C_in,k,k,h,w)
        if k == 1:
            dx = dpatch.reshape(c_in, h, w)
        else:
            dxp = np.zeros((c_in, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for di in range(k):
                for dj in range(k):
                    dxp[:, di : di + h, dj : dj + w] += dpatch[:, di, dj]
            dx = np.ascontiguousarray(dxp[:, p : p + h, p : p + w])
        return dx, dw, db

    n_flops = h * w * c_out * (2 * c_in * k * k) + h * w * c_out
    return _wrap("conv2d", (x, weight, bias), out, bwd, flops=n_flops)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling; a trailing odd row/column is dropped."""
    if x.ndim != 3:
        raise ShapeError(f"avg_pool2: expects (C,h,w), got {x.shape}")
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"avg_pool2: spatial extent must be >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    view = x.data[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2)
    out = view.mean(axis=(2, 4))

    def bwd(g):
        dx = np.zeros_like(x.data)
        quarter = g * g.dtype.type(0.25)
        dx[:, : 2 * h2, : 2 * w2] = np.broadcast_to(
            quarter[:, :, None, :, None], (c, h2, 2, w2, 2)
        ).reshape(c, 2 * h2, 2 * w2)
        return (dx,)

    return _wrap("avg_pool2", (x,), out, bwd, flops=4 * c * h2 * w2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis at each spatial location."""
    if x.ndim != 3:
        raise ShapeError(f"layer_norm: expects (C,h,w), got {x.shape}")
    c = x.shape[0]
    if c == 0:
        raise ShapeError("layer_norm: channel axis is empty")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} must be ({c},)")
    if x.dtype != gamma.dtype or x.dtype != beta.dtype:
        raise ShapeError("layer_norm: operand dtypes must match")
    dt = x.data.dtype.type
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = dt(1.0) / np.sqrt(var + dt(eps))
    xhat = (x.data - mu) * inv_std
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        dxhat = g * gamma.data[:, None, None]
        dx = (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) * inv_std
        return dx, dgamma, dbeta

    _, h, w = x.shape
    return _wrap("layer_norm", (x, gamma, beta), out, bwd, flops=h * w * (7 * c + 4))


def _axis_weights(n_src: int, n_dst: int, dtype):
    """Half-pixel-center source indices and blend weights for one axis."""
    pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, float(n_src - 1))
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    t = (pos - i0).astype(dtype)
    return i0, i1, t


def bilinear_upsample(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Bilinear resize to the target extents (half-pixel centers)."""
    if x.ndim != 3:
        raise ShapeError(f"bilinear_upsample: expects (C,h,w), got {x.shape}")
    c, h, w = x.shape
    ht, wt = int(target[0]), int(target[1])
    if ht < h or wt < w:
        raise ShapeError(f"bilinear_upsample: target {ht}x{wt} smaller than source {h}x{w}")
    y0, y1, ty = _axis_weights(h, ht, x.data.dtype)
    x0, x1, tx = _axis_weights(w, wt, x.data.dtype)
    one = x.data.dtype.type(1.0)
    wy0, wy1 = (one - ty)[:, None], ty[:, None]
    wx0, wx1 = (one - tx)[None, :], tx[None, :]
    r0 = x.data[:, y0, :]
    r1 = x.data[:, y1, :]
    out = wy0 * (wx0 * r0[:, :, x0] + wx1 * r0[:, :, x1]) + wy1 * (wx0 * r1[:, :, x0] + wx1 * r1[:, :, x1])

    def bwd(g):
        dx = np.zeros_like(x.data)
        for yi, wy in ((y0, wy0), (y1, wy1)):
            for xi, wx in ((x0, wx0), (x1, wx1)):
                np.add.at(dx, (slice(None), yi[:, None], xi[None, :]), g * (wy * wx))
        return (dx,)

    return _wrap("bilinear_upsample", (x,), np.ascontiguousarray(out), bwd, flops=7 * c * ht * wt)


def softmax(x: Tensor, axis: int) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _wrap("softmax", (x,), out, bwd, flops=4 * x.size)


def masked_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class over supervised pixels.

    labels: (h, w) integers with 0 = unlabeled, 1..K = classes.  Supervised
    positions are those with mask nonzero AND label > 0; with no such
    positions the loss is exactly 0.  Positions outside the supervised set
    never influence the value or the gradient.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if logits.ndim != 3:
        raise ShapeError(f"masked_cross_entropy: logits must be (K,h,w), got {logits.shape}")
    k = logits.shape[0]
    if labels.shape != logits.shape[1:] or mask.shape != logits.shape[1:]:
        raise ShapeError(
            f"masked_cross_entropy: labels {labels.shape} / mask {mask.shape} must match spatial {logits.shape[1:]}"
        )
    if labels.min() < 0 or labels.max() > k:
        raise ValueError(f"masked_cross_entropy: label id {int(labels.max())} outside [0, {k}]")
    pos = (mask != 0) & (labels > 0)
    n = int(pos.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    ll = logits.data[:, pos]  # (K, n)
    m = ll.max(axis=0)
    lse = m + np.log(np.exp(ll - m).sum(axis=0))
    true = labels[pos].astype(np.int64) - 1
    picked = ll[true, np.arange(n)]
    out = ((lse - picked).sum() / logits.data.dtype.type(n)).reshape(())

    def bwd(g):
        p = np.exp(ll - lse)
        p[true, np.arange(n)] -= 1
        dl = np.zeros_like(logits.data)
        dl[:, pos] = p * (g.reshape(()) / n)
        return (dl,)

    return _wrap("masked_cross_entropy", (logits,), out, bwd, flops=n * (4 * k + CE_POSITION_FLOPS))


# --- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and numeric grads."""

    per_param: dict[str, float]
    threshold: float
    step: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def lines(self) -> list[str]:
        status = lambda v: "ok" if v < self.threshold else "FAIL"
        return [f"{name}: max_rel_err={err:.3e} [{status(err)}]" for name, err in self.per_param.items()]


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    threshold: float = 1e-4,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar map against central differences.

    ``fn`` must be deterministic and must not consume randomness: it is run
    twice up front and any bitwise disagreement raises
    ``NonDeterministicError`` (this rejects blocks with live Bernoulli
    sampling; freeze the mask first).  Parameters must be float64.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters (32-bit differences are unreliable)")
        if not p.requires_grad:
            raise ValueError("grad_check parameters must have requires_grad=True")

    probe_a = fn().data.copy()
    probe_b = fn().data.copy()
    if probe_a.tobytes() != probe_b.tobytes():
        raise NonDeterministicError("two forward passes disagree; non-differentiable sampling must be frozen")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    per_param: dict[str, float] = {}
    for name, p, a in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        num = numeric.reshape(p.shape)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-3)
        per_param[name] = float((np.abs(a - num) / denom).max()) if p.size else 0.0
    return GradCheckReport(per_param=per_param, threshold=threshold, step=step)
