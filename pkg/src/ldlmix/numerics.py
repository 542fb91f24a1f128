"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside a ``with Tape() as tape:`` block are recorded in
execution order (which is a topological order by construction). Outside a
tape they run eagerly and nothing is recorded, which is how inference runs.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_all(x * x)
    >>> tape.backward(y)[x]
    array([6.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DimensionError

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that optionally takes part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(_Node(out, inputs, vjp, op))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf that requires grad.

        Gradients are also stored on each leaf's ``.grad`` attribute
        (overwriting any previous value).
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = {id(node.out) for node in self.nodes}
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key, np.zeros_like(leaf.data))
            leaf.grad = g
            result[leaf] = g
        return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(op, out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes when ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    _check_matmul(a.data, b.data)
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` as one recorded node (saves an intermediate).

    ``x`` may be a single vector or carry leading batch axes; those are
    flattened so the product is a single 2-D GEMM.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim < 1 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[-1],):
        raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    k, m = weight.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ weight.data
    out += bias.data

    def vjp(g):
        gx = gw = gb = None
        g2 = g.reshape(-1, m)
        if x.requires_grad:
            gx = (g2 @ weight.data.T).reshape(x.shape)
        if weight.requires_grad:
            gw = x2.T @ g2
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _emit("linear", out.reshape(x.shape[:-1] + (m,)), (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _emit("relu", out, (x,), lambda g: (g * (x.data > 0.0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def identity(x) -> Tensor:
    return as_tensor(x)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": identity}


def elementwise(x, f: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[f]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise function {f!r}") from None
    return fn(x)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# ---------------------------------------------------------------------------
# normalisations and reductions
# ---------------------------------------------------------------------------

def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", s, (x,),
                 lambda g: (s * (g - np.sum(g * s, axis=-1, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis), then apply a per-column affine map."""
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs width {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    # second centring pass removes the rounding left in mu
    xc -= xc.mean(axis=-1, keepdims=True)
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gain, bias), vjp)


def mean_columns(x) -> Tensor:
    """Average over the row axis (second to last): [..., r, c] -> [..., c]."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"mean_columns needs at least one row, got {x.shape}")
    r = x.shape[-2]
    return _emit("mean_columns", x.data.mean(axis=-2), (x,),
                 lambda g: (np.broadcast_to(g[..., None, :] / r, x.shape).copy(),))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _emit("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _emit("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def sum_last(x) -> Tensor:
    x = as_tensor(x)
    return _emit("sum_last", x.data.sum(axis=-1), (x,),
                 lambda g: (np.broadcast_to(g[..., None], x.shape).copy(),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _emit("transpose", np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    return _emit("broadcast", np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_3x3(x, kernel, bias) -> Tensor:
    """Single-channel 3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is ``[H, W]`` or ``[B, H, W]`` (a ``[1, H, W]`` image is the
    one-sample batch); ``kernel`` is ``[3, 3]`` or ``[1, 1, 3, 3]``; ``bias``
    is a scalar or one-element tensor. Output has the shape of ``x``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.data.size != 9 or kernel.shape[-2:] != (3, 3):
        raise ConfigurationError(f"conv kernel must be 3x3, got {kernel.shape}")
    if bias.data.size != 1:
        raise ConfigurationError(f"conv bias must be a scalar, got {bias.shape}")
    if x.ndim not in (2, 3) or min(x.shape[-2:]) < 1:
        raise DimensionError(f"conv2d_3x3 expects [H, W] or [B, H, W], got {x.shape}")
    x3 = np.ascontiguousarray(x.data.reshape((-1,) + x.shape[-2:]))
    k = np.ascontiguousarray(kernel.data.reshape(3, 3))
    out = kernels.conv3x3_forward(x3, k, float(bias.data.reshape(())))

    def vjp(g):
        g3 = np.ascontiguousarray(g.reshape(x3.shape))
        dx, dk, db = kernels.conv3x3_backward(x3, k, g3)
        return (dx.reshape(x.shape),
                dk.reshape(kernel.shape),
                np.full(bias.shape, db))

    return _emit("conv2d_3x3", out.reshape(x.shape), (x, kernel, bias), vjp)


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: str
    kinks: int = 0   # coordinates accepted on a one-sided difference

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, max_coords: int | None = None, seed: int = 0,
               floor: float = 1e-6, kink_aware: bool = False,
               tamper: Callable[[dict], dict] | None = None) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` to central differences.

    ``f`` reads ``params`` (mutated in place during the check) and must be
    deterministic. ``max_coords`` caps the coordinates probed per parameter
    (chosen at random); ``tamper`` lets tests corrupt the analytic gradients.
    The error for one coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    With ``kink_aware`` a coordinate whose central difference straddles a
    ReLU or absolute-value kink (the two one-sided slopes disagree) is scored
    against whichever one-sided slope is closer to the analytic value; such
    coordinates are counted in ``kinks``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ConfigurationError(f"finite-difference step {h} outside [1e-6, 1e-4]")
    params = list(params)
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    analytic = tape.backward(loss)
    grads = {id(p): analytic.get(p, np.zeros_like(p.data)) for p in params}
    if tamper is not None:
        grads = tamper(grads)
    base = float(f().data)
    if float(f().data) != base:
        raise ContractError("grad_check target is not deterministic (freeze its noise source)")

    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked, kinks = 0.0, "", 0, 0
    rel = lambda a, n: abs(a - n) / max(abs(a), abs(n), floor)  # noqa: E731
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        g = grads[id(p)].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            err = rel(g[i], (fp - fm) / (2.0 * h))
            if kink_aware and err >= tol:
                fwd, bwd = (fp - base) / h, (base - fm) / h
                if rel(fwd, bwd) >= tol:
                    err = min(rel(g[i], fwd), rel(g[i], bwd))
                    kinks += 1
            checked += 1
            if err > worst_err:
                worst_err = err
                worst_at = f"{p.name or f'param{pi}'}[{int(i)}]"
    return GradCheckReport(worst_err, tol, checked, worst_at, kinks)
