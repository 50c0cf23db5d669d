"""Reverse-mode automatic differentiation on numpy arrays.

A small tape-based engine in the micrograd tradition, lifted from scalars
to numpy arrays: every Tensor stores its value, a gradient slot, and a
closure that scatters an incoming gradient to its parents. Backward walks
the tape in reverse topological order and frees it afterwards. Training
runs in float32; gradient checking rebuilds the same graph in float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator

import numpy as np
from scipy.special import expit

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse mode.

    values is always a float32 or float64 ndarray; grad, once populated,
    matches its shape and dtype.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; implementations below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_(self, p)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ndarrays / scalars as constant Tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _make(values: np.ndarray, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = grad.astype(node.values.dtype, copy=True)
    else:
        node.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the pre-broadcast shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_vals = a.values + b.values

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _make(out_vals, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_vals = a.values * b.values

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _make(out_vals, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_vals = a.values / b.values

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g / b.values, a.values.shape))
        _accumulate(b, _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return _make(out_vals, (a, b), backward_fn)


def pow_(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    out_vals = a.values ** p

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * p * a.values ** (p - 1.0))

    return _make(out_vals, (a,), backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_vals = np.exp(a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * out_vals)

    return _make(out_vals, (a,), backward_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_vals = np.log(a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g / a.values)

    return _make(out_vals, (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_vals = np.sqrt(a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * 0.5 / out_vals)

    return _make(out_vals, (a,), backward_fn)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    floor = float(floor)
    out_vals = np.maximum(a.values, floor)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * (a.values > floor))

    return _make(out_vals, (a,), backward_fn)


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_vals = np.maximum(a.values, 0.0)

    def backward_fn(g: np.ndarray) -> None:
        # subgradient 0 at the kink
        _accumulate(a, g * (a.values > 0.0))

    return _make(out_vals, (a,), backward_fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_vals = expit(a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * out_vals * (1.0 - out_vals))

    return _make(out_vals, (a,), backward_fn)


def prelu(a, slope: Tensor) -> Tensor:
    """Parametric ReLU; slope has one entry per channel, broadcast over time."""
    a, slope = as_tensor(a), as_tensor(slope)
    s = slope.values
    if s.ndim == 1 and a.values.ndim == 2:
        s = s[:, None]
    pos = a.values > 0.0
    out_vals = np.where(pos, a.values, s * a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * np.where(pos, 1.0, s))
        gs = _unbroadcast(g * np.where(pos, 0.0, a.values), s.shape)
        _accumulate(slope, gs.reshape(slope.values.shape))

    return _make(out_vals, (a, slope), backward_fn)


def activation(name: str, a, slope: Tensor | None = None) -> Tensor:
    if name == "relu":
        return relu(a)
    if name == "sigmoid":
        return sigmoid(a)
    if name == "prelu":
        if slope is None:
            raise ValueError("prelu requires a slope tensor")
        return prelu(a, slope)
    raise ValueError(f"unknown activation: {name!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_vals = a.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g: np.ndarray) -> None:
        if axis is None:
            grad = np.broadcast_to(g, a.values.shape)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            grad = np.broadcast_to(g_exp, a.values.shape)
        _accumulate(a, np.ascontiguousarray(grad))

    return _make(out_vals, (a,), backward_fn)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.values.size
    else:
        count = a.values.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_vals = a.values.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.values.shape))

    return _make(out_vals, (a,), backward_fn)


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ValueError("transpose2d expects a 2-D tensor")
    out_vals = np.ascontiguousarray(a.values.T)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, np.ascontiguousarray(g.T))

    return _make(out_vals, (a,), backward_fn)


def narrow(a, start: int, length: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`; backward zero-pads."""
    a = as_tensor(a)
    if start < 0 or start + length > a.values.shape[axis]:
        raise ValueError(
            f"narrow [{start}, {start + length}) out of range for size {a.values.shape[axis]}")
    index = [slice(None)] * a.values.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_vals = a.values[index].copy()

    def backward_fn(g: np.ndarray) -> None:
        full = np.zeros_like(a.values)
        full[index] = g
        _accumulate(a, full)

    return _make(out_vals, (a,), backward_fn)


def crop(a, length: int, axis: int = -1) -> Tensor:
    """Keep the leading `length` entries along `axis`."""
    return narrow(a, 0, length, axis=axis)


def pad1d(a, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.values.ndim - 1) + [(left, right)]
    out_vals = np.pad(a.values, width)
    T = a.values.shape[-1]

    def backward_fn(g: np.ndarray) -> None:
        index = [slice(None)] * (a.values.ndim - 1) + [slice(left, left + T)]
        _accumulate(a, g[tuple(index)])

    return _make(out_vals, (a,), backward_fn)


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _make(out_vals, tuple(tensors), backward_fn)


# ---------------------------------------------------------------------------
# convolutions


def _conv_cols(x: np.ndarray, kernel: int, stride: int, dilation: int) -> np.ndarray:
    """Strided [C, K, T_out] view of a [C, T] array; no copy."""
    C, T = x.shape
    span = dilation * (kernel - 1) + 1
    if T < span:
        raise ValueError(f"input length {T} shorter than receptive field {span}")
    t_out = (T - span) // stride + 1
    s_c, s_t = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(C, kernel, t_out),
        strides=(s_c, dilation * s_t, stride * s_t), writeable=False)


def conv1d(x, w, stride: int = 1, dilation: int = 1) -> Tensor:
    """Valid cross-correlation: x [C_in, T], w [C_out, C_in, K] -> [C_out, T'].

    T' = floor((T - dilation*(K-1) - 1) / stride) + 1. Bias, if any, is a
    separate add.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.values.ndim != 2 or w.values.ndim != 3:
        raise ValueError("conv1d expects x [C_in, T] and w [C_out, C_in, K]")
    if x.values.shape[0] != w.values.shape[1]:
        raise ValueError(f"channel mismatch: x has {x.values.shape[0]}, w expects {w.values.shape[1]}")
    kernel = w.values.shape[2]
    cols = _conv_cols(x.values, kernel, stride, dilation)
    out_vals = np.tensordot(w.values, cols, axes=([1, 2], [0, 1]))

    def backward_fn(g: np.ndarray) -> None:
        t_out = g.shape[1]
        _accumulate(w, np.tensordot(g, cols, axes=([1], [2])))
        contrib = np.tensordot(w.values, g, axes=([0], [0]))  # [C_in, K, T']
        gx = np.zeros_like(x.values)
        for k in range(kernel):
            start = k * dilation
            stop = start + (t_out - 1) * stride + 1
            gx[:, start:stop:stride] += contrib[:, k, :]
        _accumulate(x, gx)

    return _make(out_vals, (x, w), backward_fn)


def conv_transpose1d(x, w, stride: int = 1) -> Tensor:
    """Adjoint of conv1d: x [C_in, T], w [C_in, C_out, K] -> [C_out, (T-1)*stride + K]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.values.ndim != 2 or w.values.ndim != 3:
        raise ValueError("conv_transpose1d expects x [C_in, T] and w [C_in, C_out, K]")
    if x.values.shape[0] != w.values.shape[0]:
        raise ValueError(f"channel mismatch: x has {x.values.shape[0]}, w expects {w.values.shape[0]}")
    kernel = w.values.shape[2]
    T = x.values.shape[1]
    t_out = (T - 1) * stride + kernel
    xw = np.tensordot(w.values, x.values, axes=([0], [0]))  # [C_out, K, T]
    out_vals = np.zeros((w.values.shape[1], t_out), dtype=x.values.dtype)
    for k in range(kernel):
        out_vals[:, k:k + (T - 1) * stride + 1:stride] += xw[:, k, :]

    def backward_fn(g: np.ndarray) -> None:
        cols = _conv_cols(g, kernel, stride, 1)  # [C_out, K, T]
        _accumulate(x, np.tensordot(w.values, cols, axes=([1, 2], [0, 1])))
        _accumulate(w, np.tensordot(x.values, cols, axes=([1], [2])))

    return _make(out_vals, (x, w), backward_fn)


def global_layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize x [C, T] by mean/variance over all C*T entries, then apply
    per-channel affine. Composed from primitives, so the gradient is free."""
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise ValueError("global_layer_norm expects x [C, T]")
    mu = mean_(x)
    centered = x - mu
    var = mean_(centered * centered)
    normed = centered / sqrt(var + eps)
    g = reshape(gain, (-1, 1))
    b = reshape(bias, (-1, 1))
    return normed * g + b


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients accumulate (+=) into every requires_grad leaf reachable from
    loss; intermediate tape state is freed afterwards.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")

    # iterative post-order, deterministic in construction order
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        if node._parents:
            # interior node: free tape state and its gradient buffer
            node._parents = ()
            node._backward = None
            if node is not loss:
                node.grad = None


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter tensors with deterministic (lexicographic) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def subset(self, prefix: str) -> "ParamStore":
        sub = ParamStore()
        for n, t in self.items():
            if n.startswith(prefix):
                sub._params[n] = t
        return sub

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for n, t in self.items():
            out.add(n, t.values.astype(dtype))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite matching parameters in place; shapes must agree."""
        for name, arr in arrays.items():
            if prefix and not name.startswith(prefix):
                continue
            if name not in self._params:
                raise KeyError(f"checkpoint tensor {name!r} has no matching parameter")
            dst = self._params[name]
            if dst.values.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: model {dst.values.shape}, checkpoint {arr.shape}")
            dst.values = arr.astype(dst.values.dtype).copy()

    def grad_l2_norm(self) -> float:
        total = 0.0
        for _, t in self.items():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def clip_grad_l2(self, max_norm: float) -> float:
        norm = self.grad_l2_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for _, t in self.items():
                if t.grad is not None:
                    t.grad *= scale
        return norm


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
               h: float = 1e-5, max_coords: int = 50, seed: int = 0) -> float:
    """Compare analytic gradients of f against central finite differences.

    f must rebuild its graph from params on every call. All parameters must
    be float64. Up to max_coords coordinates per tensor are probed (all of
    them when the tensor is small). Returns the worst relative error
    |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).

    Coordinates whose probe interval straddles a kink (e.g. a relu input
    within h of zero) are skipped: the second difference of the sampled
    function values and the step-halving consistency of the central
    difference both detect slope breaks, using no gradient information, so
    a wrong analytic gradient on a smooth path is still flagged.
    """
    for name, p in params.items():
        if p.values.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters; {name!r} is {p.values.dtype}")

    params.zero_grad()
    loss = f(params)
    f0 = float(loss.values)
    backward(loss)
    analytic = {
        n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for n, p in params.items()
    }

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.values.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]

            def probe(offset: float) -> float:
                flat[i] = orig + offset
                with no_grad():
                    out = float(f(params).values)
                flat[i] = orig
                return out

            fp, fm = probe(h), probe(-h)
            g_n = (fp - fm) / (2.0 * h)
            g_a = float(ga_flat[i])
            scale = max(abs(g_a), abs(g_n), 1e-8)
            # for a slope break the second difference equals the central-diff
            # error, so the cutoff must sit below the check tolerance
            if abs(fp - 2.0 * f0 + fm) / (2.0 * h) > 5e-5 * scale:
                continue  # kink inside the probe interval
            # paired kinks can cancel in the second difference but not in
            # the step-halving comparison
            g_half = (probe(h / 2) - probe(-h / 2)) / h
            if abs(g_n - g_half) > 5e-5 * scale:
                continue
            worst = max(worst, abs(g_a - g_n) / scale)
    return worst
