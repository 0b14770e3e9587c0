"""
Dense tensor engine for the conditioning stack.
- Tensor: float64 numpy storage with reverse-mode gradients
- Function: one class per differentiable op (forward/backward pair)
- Rng: counter-based generator, reproducible from a 64-bit seed
- grad / check_gradients / Adam
Every op checks its output for NaN/Inf and raises NumericsError naming the op.
"""

import logging
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.core_constants import UINT64_MASK
from core.core_errors import NumericsError

logger = logging.getLogger(__name__)


# ============================================================================
# COUNTER-BASED RNG
# ============================================================================
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SHIFT_11 = np.uint64(11)
_SHIFT_27 = np.uint64(27)
_SHIFT_30 = np.uint64(30)
_SHIFT_31 = np.uint64(31)


def _splitmix_finalize(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _SHIFT_30)) * _MIX1
        z = (z ^ (z >> _SHIFT_27)) * _MIX2
        return z ^ (z >> _SHIFT_31)


class Rng:
    """
    Word i (1-based) of the stream is
        finalize(seed + i * 0x9E3779B97F4A7C15 mod 2**64)
    with the SplitMix64 finalizer. Uniforms take the top 53 bits of a word;
    normals use Box-Muller over a block of 2n uniforms (first n feed the
    radius, last n the angle). Drawing n words advances the counter by n.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & UINT64_MASK
        self.counter = 0

    def derive(self, purpose: int) -> "Rng":
        return Rng(self.seed ^ purpose)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GAMMA
        return _splitmix_finalize(z)

    def uniform(self, shape: Union[int, Tuple[int, ...]]) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        words = self.next_u64(n)
        return ((words >> _SHIFT_11).astype(np.float64) * (2.0 ** -53)).reshape(shape)

    def normal(self, shape: Union[int, Tuple[int, ...]], scale: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform(2 * n)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:n]))
        return (scale * radius * np.cos(2.0 * math.pi * u[n:])).reshape(shape)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        if high <= low:
            raise NumericsError(f"empty integer range [{low}, {high})")
        span = np.uint64(high - low)
        return (self.next_u64(size) % span).astype(np.int64) + low

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")


# ============================================================================
# TENSOR
# ============================================================================
class Tensor:
    """Float64 array plus the op that produced it (when gradients are tracked)."""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, ctx: Optional["Function"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._ctx = ctx

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"<Tensor dims={self.dims}{flag}>"

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.dims

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # Arithmetic
    def __add__(self, other): return Add.apply(self, _as_tensor(other))
    def __radd__(self, other): return Add.apply(_as_tensor(other), self)
    def __sub__(self, other): return Sub.apply(self, _as_tensor(other))
    def __rsub__(self, other): return Sub.apply(_as_tensor(other), self)
    def __mul__(self, other): return Mul.apply(self, _as_tensor(other))
    def __rmul__(self, other): return Mul.apply(_as_tensor(other), self)
    def __truediv__(self, other): return Div.apply(self, _as_tensor(other))
    def __neg__(self): return Neg.apply(self)
    def __matmul__(self, other): return MatMul.apply(self, _as_tensor(other))
    def __getitem__(self, key): return Slice.apply(self, key=key)

    @property
    def T(self) -> "Tensor":
        return Transpose.apply(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Leaf tensor holding a private copy of `data`."""
    array = np.array(data, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(array)):
        raise NumericsError("tensor() received non-finite values")
    return Tensor(array, requires_grad=requires_grad)


def zeros(*dims: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(dims, dtype=np.float64), requires_grad=requires_grad)


# ============================================================================
# FUNCTIONS (differentiable ops)
# ============================================================================
class Function:
    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        ctx = cls(*parents)
        out = ctx.forward(*[p.data for p in parents], **kwargs)
        if not np.all(np.isfinite(out)):
            raise NumericsError(f"{cls.__name__} produced non-finite values")
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires_grad, ctx=ctx if requires_grad else None)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name: str, x: np.ndarray, y: np.ndarray) -> None:
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise NumericsError(f"{name}: cannot broadcast {x.shape} with {y.shape}") from None


class Add(Function):
    def forward(self, x, y):
        _check_broadcast("add", x, y)
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        _check_broadcast("sub", x, y)
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        _check_broadcast("mul", x, y)
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    def forward(self, x, y):
        _check_broadcast("div", x, y)
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return _unbroadcast(gx, self.x.shape), _unbroadcast(gy, self.y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise NumericsError(f"matmul: dims {x.shape} x {y.shape} do not match")
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


class Transpose(Function):
    def forward(self, x):
        if x.ndim != 2:
            raise NumericsError(f"transpose expects a matrix, got dims {x.shape}")
        return x.T.copy()

    def backward(self, grad):
        return (grad.T,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise NumericsError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Slice(Function):
    def forward(self, x, key=None):
        self.shape, self.key = x.shape, key
        return np.array(x[key], dtype=np.float64)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=np.float64)
        np.add.at(out, self.key, grad)
        return (out,)


class Concat(Function):
    def forward(self, *xs, axis=0):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        try:
            return np.concatenate(xs, axis=axis)
        except ValueError as e:
            raise NumericsError(f"concat: {e}") from None

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class SoftmaxRows(Function):
    def forward(self, x):
        if x.ndim != 2:
            raise NumericsError(f"softmax_rows expects a matrix, got dims {x.shape}")
        shifted = x - x.max(axis=1, keepdims=True) if x.shape[1] else x
        e = np.exp(shifted)
        self.y = e / e.sum(axis=1, keepdims=True)
        return self.y

    def backward(self, grad):
        inner = (grad * self.y).sum(axis=1, keepdims=True)
        return (self.y * (grad - inner),)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """tanh approximation."""

    def forward(self, x):
        self.x = x
        self.inner = _GELU_C * (x + 0.044715 * x ** 3)
        self.th = np.tanh(self.inner)
        return 0.5 * x * (1.0 + self.th)

    def backward(self, grad):
        x, th = self.x, self.th
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner
        return (grad * local,)


class RmsNorm(Function):
    def forward(self, x, eps=1e-6):
        self.x = x
        self.r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
        return x * self.r

    def backward(self, grad):
        n = self.x.shape[-1]
        gx = (grad * self.x).sum(axis=-1, keepdims=True)
        return (self.r * grad - (self.r ** 3) * self.x * gx / n,)


class RotatePairs(Function):
    """Planar rotation of adjacent pairs (2j, 2j+1) by per-row angles."""

    def forward(self, x, cos=None, sin=None):
        if x.ndim != 2 or x.shape[1] % 2 or cos.shape != (x.shape[0], x.shape[1] // 2):
            raise NumericsError(f"rotate_pairs: dims {x.shape} do not match table {cos.shape}")
        self.cos, self.sin = cos, sin
        even, odd = x[:, 0::2], x[:, 1::2]
        out = np.empty_like(x)
        out[:, 0::2] = even * cos - odd * sin
        out[:, 1::2] = even * sin + odd * cos
        return out

    def backward(self, grad):
        ge, go = grad[:, 0::2], grad[:, 1::2]
        out = np.empty_like(grad)
        out[:, 0::2] = ge * self.cos + go * self.sin
        out[:, 1::2] = -ge * self.sin + go * self.cos
        return (out,)


# ============================================================================
# FUNCTIONAL API
# ============================================================================
def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(_as_tensor(a), _as_tensor(b))


def softmax_rows(x: Tensor) -> Tensor:
    return SoftmaxRows.apply(_as_tensor(x))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*[_as_tensor(t) for t in tensors], axis=axis)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    return RmsNorm.apply(x, eps=eps)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    return RotatePairs.apply(x, cos=cos, sin=sin)


def mse(prediction: Tensor, target) -> Tensor:
    diff = prediction - _as_tensor(target)
    return (diff * diff).mean()


# ============================================================================
# GRADIENTS
# ============================================================================
def _toposort(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def grad(loss: Tensor, params: Iterable[Tensor]) -> Dict[Tensor, Tensor]:
    """Reverse-mode gradients of a scalar `loss` with respect to each param."""
    if loss.data.size != 1:
        raise NumericsError(f"grad requires a scalar loss, got dims {loss.dims}")
    params = list(params)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        if node._ctx is None or id(node) not in grads:
            continue
        upstream = grads[id(node)]
        for parent, g in zip(node._ctx.parents, node._ctx.backward(upstream)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + g if key in grads else g
    return {p: Tensor(grads.get(id(p), np.zeros_like(p.data))) for p in params}


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    probes: Optional[int] = None,
    rng: Optional[Rng] = None,
    floor: float = 1e-4,
) -> float:
    """
    Largest relative error between reverse-mode and central-difference
    derivatives, |a - n| / max(|a|, |n|, floor). With `probes`, only that many
    (param, entry) pairs drawn from `rng` are checked.
    """
    params = list(params)
    analytic = grad(loss_fn(), params)
    entries = [(p, i) for p in params for i in range(p.data.size)]
    if probes is not None and probes < len(entries):
        rng = rng or Rng(0)
        entries = [entries[int(j)] for j in rng.permutation(len(entries))[:probes]]

    worst = 0.0
    for param, flat_index in entries:
        view = param.data.reshape(-1)
        original = view[flat_index]
        view[flat_index] = original + eps
        plus = loss_fn().item()
        view[flat_index] = original - eps
        minus = loss_fn().item()
        view[flat_index] = original
        numeric = (plus - minus) / (2.0 * eps)
        exact = float(analytic[param].data.reshape(-1)[flat_index])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)
    logger.debug(f"Gradient check over {len(entries)} entries: max relative error {worst:.3e}")
    return worst


# ============================================================================
# OPTIMIZER
# ============================================================================
class Adam:
    """Adam updating parameter arrays in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, grads: Dict[Tensor, Tensor]) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads[p].data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
