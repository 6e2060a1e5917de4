"""Dense tensors with reverse-mode automatic differentiation on a numpy backend.

Every differentiable operation is a *primitive*: a forward function on raw
arrays that also returns a closure mapping the output gradient to the input
gradients.  Applying a primitive records a node on the graph when any input
requires a gradient; :meth:`Tensor.backward` walks the recorded nodes in
reverse topological order exactly once.

Training runs in float32.  Verification suites switch to float64 with
:func:`precision`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "apply_primitive",
    "PRIMITIVES",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "no_grad",
    "grad_check",
    "counters",
    "tensor",
    "zeros",
    "concat",
    "take",
    "conv2d",
    "maxpool2",
]

_default_dtype = np.float32
_grad_enabled = True

# zero_norm_rows: rows that l2_normalize left at zero instead of dividing by 0
counters = {"zero_norm_rows": 0}


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    """Input shapes do not fit the primitive's signature."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(TensorError):
    def __init__(self, op: str, where: str = "output"):
        self.op = op
        super().__init__(f"{op}: non-finite values in {where}")


class GraphError(RuntimeError):
    pass


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TensorError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating-point type (e.g. ``np.float64``)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _as_array(value, dtype=None) -> np.ndarray:
    dtype = dtype or _default_dtype
    arr = np.asarray(value)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """An immutable array that may participate in a differentiation graph.

    ``grad`` stays ``None`` until :meth:`backward` reaches the tensor; tensors
    with ``requires_grad=False`` never receive one.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = _as_array(data, dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- inspection -------------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", [self.shape], "tensor is not scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor({self.data!r}{flag}{op})"

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return apply_primitive("add", self, _lift(other))

    def __radd__(self, other):
        return apply_primitive("add", _lift(other), self)

    def __sub__(self, other):
        return apply_primitive("sub", self, _lift(other))

    def __rsub__(self, other):
        return apply_primitive("sub", _lift(other), self)

    def __mul__(self, other):
        return apply_primitive("mul", self, _lift(other))

    def __rmul__(self, other):
        return apply_primitive("mul", _lift(other), self)

    def __truediv__(self, other):
        return apply_primitive("div", self, _lift(other))

    def __rtruediv__(self, other):
        return apply_primitive("div", _lift(other), self)

    def __neg__(self):
        return apply_primitive("neg", self)

    def __matmul__(self, other):
        return apply_primitive("matmul", self, _lift(other))

    def relu(self):
        return apply_primitive("relu", self)

    def exp(self):
        return apply_primitive("exp", self)

    def log(self):
        return apply_primitive("log", self)

    def abs(self):
        return apply_primitive("abs", self)

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return apply_primitive("max", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", self, shape=shape)

    def flatten(self):
        return apply_primitive("flatten", self)

    @property
    def T(self):
        return apply_primitive("transpose", self)

    def softmax(self):
        return apply_primitive("softmax", self)

    def log_softmax(self):
        return apply_primitive("log_softmax", self)

    def l2_normalize(self):
        return apply_primitive("l2_normalize", self)

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Gradients of leaves accumulate across calls; callers reset them.
        """
        if self.data.size != 1:
            raise ShapeError("backward", [self.shape], "loss must be scalar")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        if self._consumed:
            raise GraphError("graph already backpropagated; record a new forward pass")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            if node._consumed:
                raise GraphError(f"node {node._op} already backpropagated")
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {}
# primitives that accept ``needs``, a per-input flag telling them which
# gradients will actually be consumed
_NEEDS_AWARE: set[str] = set()


def _primitive(name: str, needs_aware: bool = False):
    def register(fn):
        PRIMITIVES[name] = fn
        if needs_aware:
            _NEEDS_AWARE.add(name)
        return fn

    return register


def apply_primitive(op: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run primitive ``op`` on ``inputs`` and record it on the graph."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise TensorError(f"unknown primitive {op!r}") from None
    inputs = tuple(_lift(t) for t in inputs)
    if op in _NEEDS_AWARE:
        attrs["needs"] = tuple(_grad_enabled and t.requires_grad for t in inputs)
    out_data, backward = fn(*(t.data for t in inputs), **attrs)
    if not _finite(out_data):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = op
        out._parents = inputs
        out._backward = backward
    else:
        out.requires_grad = False
        out._op = None
        out._parents = ()
        out._backward = None
    return out


def _finite(arr: np.ndarray) -> bool:
    # a finite sum proves every entry finite; otherwise fall back to the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(np.sum(arr)):
            return True
    return bool(np.isfinite(arr).all())


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


@_primitive("add")
def _add(a, b):
    _check_broadcast("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@_primitive("sub")
def _sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@_primitive("mul")
def _mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_primitive("div")
def _div(a, b):
    _check_broadcast("div", a, b)
    out = a / b

    def backward(g):
        ga = _unbroadcast(g / b, a.shape)
        gb = _unbroadcast(-g * out / b, b.shape)
        return ga, gb

    return out, backward


@_primitive("neg")
def _neg(a):
    return -a, lambda g: (-g,)


@_primitive("matmul")
def _matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    out = a @ b

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 2:  # matrix @ vector
            return np.outer(g, b), a.T @ g
        if b.ndim == 2:  # vector @ matrix
            return b @ g, np.outer(a, g)
        return g * b, g * a

    return out, backward


@_primitive("transpose")
def _transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose", [a.shape], "expected a matrix")
    return a.T, lambda g: (g.T,)


@_primitive("relu")
def _relu(a):
    mask = a > 0
    return np.maximum(a, 0), lambda g: (g * mask,)


@_primitive("abs")
def _abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


@_primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@_primitive("log")
def _log(a):
    if (a <= 0).any():
        raise NonFiniteError("log", "input (non-positive argument)")
    return np.log(a), lambda g: (g / a,)


@_primitive("reshape")
def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, tuple(shape)]) from None
    return out, lambda g: (g.reshape(a.shape),)


@_primitive("flatten")
def _flatten(a):
    if a.ndim < 1:
        raise ShapeError("flatten", [a.shape])
    return a.reshape(a.shape[0], -1), lambda g: (g.reshape(a.shape),)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, in_shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


@_primitive("sum")
def _sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a, axis=axes, keepdims=keepdims)
    return out, lambda g: (np.array(_expand(g, a.shape, axes, keepdims)),)


@_primitive("mean")
def _mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.mean(a, axis=axes, keepdims=keepdims)
    return out, lambda g: (np.array(_expand(g, a.shape, axes, keepdims)) / count,)


@_primitive("max")
def _max(a, axis=None, keepdims=False):
    # gradient goes to the first maximal entry only (a valid subgradient)
    if a.size == 0:
        raise ShapeError("max", [a.shape], "empty reduction")
    if axis is None:
        flat = a.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]
        out = out.reshape((1,) * a.ndim) if keepdims else np.asarray(out)

        def backward(g):
            grad = np.zeros(a.size, dtype=a.dtype)
            grad[idx] = np.asarray(g).reshape(())
            return (grad.reshape(a.shape),)

        return out, backward
    if not isinstance(axis, int):
        raise TensorError("max reduces over a single axis or all axes")
    ax = axis % a.ndim
    idx = np.expand_dims(np.argmax(a, axis=ax), ax)
    out = np.take_along_axis(a, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def backward(g):
        grad = np.zeros_like(a)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(grad, idx, gk, axis=ax)
        return (grad,)

    return out, backward


@_primitive("softmax")
def _softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return out, backward


@_primitive("log_softmax")
def _log_softmax(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return out, backward


@_primitive("l2_normalize")
def _l2_normalize(a):
    if a.ndim < 1:
        raise ShapeError("l2_normalize", [a.shape])
    norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    zero = norm == 0
    n_zero = int(zero.sum())
    if n_zero:
        counters["zero_norm_rows"] += n_zero
    safe = np.where(zero, 1, norm)
    out = a / safe

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        grad = (g - out * proj) / safe
        return (np.where(zero, 0, grad),)

    return out, backward


@_primitive("take")
def _take(a, index):
    index = np.asarray(index, dtype=np.intp)
    if a.ndim < 1 or (index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0])):
        raise ShapeError("take", [a.shape, index.shape], "row index out of range")
    out = a[index]

    def backward(g):
        grad = np.zeros_like(a)
        np.add.at(grad, index, g)
        return (grad,)

    return out, backward


@_primitive("concat")
def _concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", [a.shape for a in arrays]) from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, backward


@_primitive("conv2d", needs_aware=True)
def _conv2d(x, w, padding="same", needs=(True, True)):
    # channels-last, stride 1: gather the kh*kw shifted windows, then one matmul
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", [x.shape, w.shape], "expected (B,H,W,C) and (kh,kw,C,O)")
    kh, kw, in_ch, out_ch = w.shape
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d", [w.shape], "same padding needs odd kernels")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise TensorError(f"conv2d: unknown padding {padding!r}")
    batch, height, width, _ = x.shape
    if height + 2 * ph < kh or width + 2 * pw < kw:
        raise ShapeError("conv2d", [x.shape, w.shape], "kernel larger than input")
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x
    oh, ow = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    cols = np.empty((batch, oh, ow, kh * kw, in_ch), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = xp[:, i:i + oh, j:j + ow, :]
    cols = cols.reshape(batch * oh * ow, kh * kw * in_ch)
    wmat = w.reshape(kh * kw * in_ch, out_ch)
    out = (cols @ wmat).reshape(batch, oh, ow, out_ch)

    def backward(g):
        g2 = g.reshape(-1, out_ch)
        gw = (cols.T @ g2).reshape(w.shape) if needs[1] else None
        if not needs[0]:
            return None, gw
        dcols = (g2 @ wmat.T).reshape(batch, oh, ow, kh * kw, in_ch)
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + oh, j:j + ow, :] += dcols[:, :, :, i * kw + j, :]
        gx = dxp[:, ph:ph + height, pw:pw + width, :] if (ph or pw) else dxp
        return gx, gw

    return out, backward


@_primitive("maxpool2")
def _maxpool2(x):
    # 2x2 window, stride 2, channels-last; ties route the gradient to the
    # first maximal entry in row-major window order
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError("maxpool2", [x.shape], "expected (B,H,W,C) with even H, W")
    corners = [x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def backward(g):
        grad = np.zeros_like(x)
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = (corner == out) & ~taken
            taken |= hit
            grad[:, di::2, dj::2] = g * hit
        return (grad,)

    return out, backward


def take(a: Tensor, index) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate gradient."""
    return apply_primitive("take", a, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", *tensors, axis=axis)


def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    return apply_primitive("conv2d", x, w, padding=padding)


def maxpool2(x: Tensor) -> Tensor:
    return apply_primitive("maxpool2", x)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps a tensor to a scalar tensor.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.  Requires float64 inputs.
    """
    if eps <= 0:
        raise TensorError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if _default_dtype is not np.float64:
        raise TensorError("grad_check requires float64 mode; wrap the call in precision(np.float64)")

    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError("grad_check", [out.shape], "f must return a scalar")
    if out.requires_grad:
        out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        vals = []
        for step in (eps, -eps):
            shifted = flat.copy()
            shifted[i] += step
            try:
                with no_grad():
                    v = f(Tensor(shifted.reshape(base.shape))).item()
            except NonFiniteError as exc:
                raise NonFiniteError(exc.op, f"probe at coordinate {i}") from exc
            if not np.isfinite(v):
                raise NonFiniteError("grad_check", f"probe at coordinate {i}")
            vals.append(v)
        numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
