"""Dense-tensor arithmetic with a reverse-mode tape, plus Adam and EMA.

The tape is define-by-run: every op that touches a tensor with
``requires_grad`` records a backward closure on the output.  ``backward()``
on a scalar loss walks the graph in reverse topological order and
accumulates gradients into ``.grad``.  Inference runs tape-free inside
``no_grad()``.

Only the op set the portrait model needs is provided; float32 is the
working precision, float64 is supported for finite-difference checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

# Pre-activation clamp for the density activation: keeps exp() finite and
# its gradient bounded.
TRUNC_EXP_BOUND = 15.0

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference hot path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    """Contract violation: operand shapes are not conformable."""


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    data           [any shape], float32 or float64
    grad           same shape as data, or None until backward touches it
    requires_grad  leaf parameters set this; op outputs inherit it
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_pending_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._pending_grad: np.ndarray | None = None

    # -- basic properties ------------------------------------------------

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- gradient plumbing -----------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Repeated calls without ``zero_grad`` accumulate, matching the
        trainer's explicit-zeroing contract.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_fn is None:
                # leaf parameter
                node._accumulate(g)
            if node._backward_fn is not None:
                node._backward_fn(g)  # pushes into _pending of parents
                for p in node._parents:
                    pg = p._pending_grad
                    if pg is not None:
                        if id(p) in grads:
                            grads[id(p)] += pg
                        else:
                            grads[id(p)] = pg
                        p._pending_grad = None


def _make_output(data: np.ndarray, parents: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _push(parent: Tensor, g: np.ndarray) -> None:
    if not (parent.requires_grad or parent._parents):
        return
    if parent._pending_grad is None:
        parent._pending_grad = g
    else:
        parent._pending_grad = parent._pending_grad + g


# hooks for modules defining their own differentiable ops (grid encoder)
custom_op = _make_output
push_grad = _push


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- elementwise arithmetic ------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a)
    data = a.data + b.data

    def bw(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(g, b.shape))

    return _make_output(data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a)
    data = a.data - b.data

    def bw(g):
        _push(a, _unbroadcast(g, a.shape))
        _push(b, _unbroadcast(-g, b.shape))

    return _make_output(data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a)
    data = a.data * b.data

    def bw(g):
        _push(a, _unbroadcast(g * b.data, a.shape))
        _push(b, _unbroadcast(g * a.data, b.shape))

    return _make_output(data, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a)
    data = a.data / b.data

    def bw(g):
        _push(a, _unbroadcast(g / b.data, a.shape))
        _push(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make_output(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _push(a, -g)

    return _make_output(-a.data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        _push(a, g * data)

    return _make_output(data, (a,), bw)


def truncated_exp(a: Tensor) -> Tensor:
    """exp with the input clamped to [-15, 15]; zero gradient outside."""
    clamped = np.clip(a.data, -TRUNC_EXP_BOUND, TRUNC_EXP_BOUND)
    data = np.exp(clamped)
    inside = (a.data > -TRUNC_EXP_BOUND) & (a.data < TRUNC_EXP_BOUND)

    def bw(g):
        _push(a, g * data * inside)

    return _make_output(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(g):
        _push(a, g / a.data)

    return _make_output(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _push(a, g * data * (1.0 - data))

    return _make_output(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bw(g):
        _push(a, g * (a.data > 0.0))

    return _make_output(data, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.02) -> Tensor:
    mask = a.data > 0.0
    data = np.where(mask, a.data, slope * a.data)

    def bw(g):
        _push(a, g * np.where(mask, 1.0, slope))

    return _make_output(data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bw(g):
        _push(a, g * np.sign(a.data))

    return _make_output(data, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only in the open interval."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        _push(a, g * inside)

    return _make_output(data, (a,), bw)


# -- linear algebra / reshaping --------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        _push(a, g @ b.data.T)
        _push(b, a.data.T @ g)

    return _make_output(data, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _push(t, piece)

    return _make_output(data, tensors, bw)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        _push(a, g.reshape(a.shape))

    return _make_output(data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _push(a, np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _push(a, np.broadcast_to(g, a.shape).copy())

    return _make_output(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    data = np.cumsum(a.data, axis=axis)

    def bw(g):
        # adjoint of cumsum is reversed cumsum along the same axis
        _push(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

    return _make_output(data, (a,), bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather along axis 0; backward scatter-adds (handles repeats)."""
    idx = np.asarray(idx)
    data = a.data[idx]

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _push(a, acc)

    return _make_output(data, (a,), bw)


def put_rows(src: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Scatter rows of `src` into a zero tensor of `length` rows.

    Indices must be unique (the renderer's compaction guarantees it).
    """
    idx = np.asarray(idx)
    data = np.zeros((length,) + src.shape[1:], dtype=src.data.dtype)
    data[idx] = src.data

    def bw(g):
        _push(src, g[idx])

    return _make_output(data, (src,), bw)


def tslice(a: Tensor, key) -> Tensor:
    """Basic slicing with gradient scatter back into place."""
    data = a.data[key]

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[key] = g
        _push(a, acc)

    return _make_output(data, (a,), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution: x [B, T, Cin], w [K, Cin, Cout] -> [B, To, Cout]."""
    B, T, Cin = x.shape
    K, Cin_w, Cout = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv1d channels: x has {Cin}, w expects {Cin_w}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    To = (T + 2 * padding - K) // stride + 1
    # im2col: [B, To, K, Cin]
    taps = np.stack([xp[:, k:k + stride * To:stride, :] for k in range(K)], axis=2)
    cols = taps.reshape(B * To, K * Cin)
    data = (cols @ w.data.reshape(K * Cin, Cout)).reshape(B, To, Cout)
    if b is not None:
        data = data + b.data

    def bw(g):
        gcols = g.reshape(B * To, Cout)
        _push(w, (cols.T @ gcols).reshape(K, Cin, Cout))
        if b is not None:
            _push(b, g.sum(axis=(0, 1)))
        gx_cols = (gcols @ w.data.reshape(K * Cin, Cout).T).reshape(B, To, K, Cin)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, k:k + stride * To:stride, :] += gx_cols[:, :, k, :]
        _push(x, gxp[:, padding:padding + T, :] if padding else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make_output(data, parents, bw)


def _integral_window_sum(x: np.ndarray, win: int) -> np.ndarray:
    """Valid-mode win x win box sums of a 2D array via integral image."""
    ii = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=x.dtype)
    ii[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    return (ii[win:, win:] - ii[:-win, win:] - ii[win:, :-win] + ii[:-win, :-win])


def window_mean2d(x: Tensor, win: int) -> Tensor:
    """Valid-mode mean over win x win windows of a 2D tensor."""
    if x.ndim != 2 or x.shape[0] < win or x.shape[1] < win:
        raise ShapeError(f"window_mean2d: shape {x.shape} too small for window {win}")
    inv = 1.0 / (win * win)
    data = _integral_window_sum(x.data, win) * inv

    def bw(g):
        # transpose of a box filter is a box filter over the zero-padded grad
        gpad = np.pad(g, ((win - 1, win - 1), (win - 1, win - 1)))
        _push(x, _integral_window_sum(gpad, win) * inv)

    return _make_output(data, (x,), bw)


def softmax_lastaxis(a: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis."""
    shift = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - shift)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _push(a, data * (g - dot))

    return _make_output(data, (a,), bw)


# -- operator sugar ---------------------------------------------------------

Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(self, o)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: add(neg(self), o)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(self, o)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.__getitem__ = lambda self, key: tslice(self, key)
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.reshape = reshape


# -- optimizer & averaging ---------------------------------------------------

class AdamState:
    """Adam moments plus the exponential lr schedule.

    lr at step s is lr_init * decay_target ** (s / total_steps): exactly
    lr_init at s=0 and decay_target * lr_init at s=total_steps.
    """

    def __init__(self, params: dict[str, Tensor], lr_init: float,
                 total_steps: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, decay_target: float = 0.1):
        self.params = params
        self.lr_init = lr_init
        self.total_steps = total_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_target = decay_target
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr_at(self, step: int) -> float:
        return self.lr_init * self.decay_target ** (step / self.total_steps)

    def step(self) -> float:
        """One Adam update over all params using their .grad; returns the lr used."""
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return lr


class EmaState:
    """Exponential moving average of parameters: shadow = d*shadow + (1-d)*p."""

    def __init__(self, params: dict[str, Tensor], decay: float = 0.95):
        self.params = params
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self) -> None:
        d = self.decay
        for k, p in self.params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p.data

    @contextlib.contextmanager
    def applied(self):
        """Swap shadow values into params for evaluation, restoring after."""
        backup = {k: p.data for k, p in self.params.items()}
        for k, p in self.params.items():
            p.data = self.shadow[k].copy()
        try:
            yield
        finally:
            for k, p in self.params.items():
                p.data = backup[k]


def zero_grads(params) -> None:
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.grad = None
