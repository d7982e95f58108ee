"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed by the extractor and the CRF are
provided: elementwise arithmetic with numpy broadcasting, reductions,
reshaping/indexing, batched matmul, 2-D convolution, 2x2 max pooling,
log-softmax and a guarded L2 norm.  Operations are recorded on the active
:class:`GradientTape` (thread local) only when at least one operand requires a
gradient, so inference outside a tape costs nothing beyond numpy itself.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()
_default_dtype = np.float32


class ContractError(ValueError):
    """Operand shapes or arguments violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


def set_precision(name: str) -> None:
    global _default_dtype
    if name not in DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]


def get_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default floating-point precision ("f32"/"f64")."""
    global _default_dtype
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """An n-d array (at most 4 axes) that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim > 4:
            raise ContractError(f"tensors support at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradientTape:
    """Records primitive operations so gradients can be replayed in reverse.

    Usage::

        with GradientTape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``target`` with respect to each of ``sources``.

        Sources that ``target`` does not depend on receive exact zeros.  A
        source used along several paths receives the sum of the path
        gradients.
        """
        if target.data.size != 1:
            raise ContractError(f"gradient target must be a scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        wanted = {id(s) for s in sources}
        found: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in wanted:
                found[id(node.out)] = g
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        found.update({k: v for k, v in grads.items() if k in wanted})
        out = []
        for s in sources:
            g = found.get(id(s))
            if g is None:
                g = np.zeros_like(s.data)
            elif not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {s!r}")
            out.append(g)
        return out


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    stack = _tape_stack()
    needs = bool(stack) and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.name = None
    if needs:
        node = _Node(op, out, tuple(inputs), backward)
        for tape in stack:
            tape.record(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _emit("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def _note_branch(pattern: np.ndarray) -> None:
    branches = getattr(_state, "branches", None)
    if branches is not None:
        branches.append(pattern)


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch taken by every piecewise op (relu, clamp_min, maxpool2).

    Two forward passes with equal branch lists lie on the same smooth piece
    of the function, which is what :func:`finite_diff_check` needs to tell a
    genuine gradient error from a finite difference straddling a kink.
    """
    previous = getattr(_state, "branches", None)
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = previous


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    _note_branch(out > 0)
    return _emit("relu", out, (a,), lambda g: (g * (out > 0),))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero wherever the floor is active."""
    a = as_tensor(a)
    keep = a.data >= floor
    _note_branch(keep)
    out = np.where(keep, a.data, floor).astype(a.data.dtype)
    return _emit("clamp_min", out, (a,), lambda g: (g * keep,))


# -- reductions and shape ---------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.array(a.data[index]), (a,), backward)


def take(a, indices: np.ndarray) -> Tensor:
    """Gather ``a.ravel()[indices]``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices)

    def backward(g):
        full = np.zeros(a.data.size, dtype=a.data.dtype)
        np.add.at(full, indices.ravel(), g.ravel())
        return (full.reshape(a.shape),)

    return _emit("take", a.data.ravel()[indices], (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _emit("stack", out, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _emit("concat", out, tensors, backward)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product following ``numpy.matmul`` for 2-D+ operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul expects operands with at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """``weight @ x + bias`` for a vector, or row-wise for a batch ``[B, d_in]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[0],) or x.shape[-1] != weight.shape[1]:
        raise ContractError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), transpose(weight, (1, 0))), (weight.shape[0],))
    else:
        y = matmul(x, transpose(weight, (1, 0)))
    return add(y, bias)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax (max-subtraction) along ``axis``."""
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NonFiniteError("log_softmax received non-finite logits")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def l2norm(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm; the gradient at an exactly-zero vector is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g * a.data / safe, 0).astype(a.data.dtype),)

    return _emit("l2norm", out if keepdims else np.squeeze(out, axis), (a,), backward)


COSINE_EPS = 1e-8


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors, guarded by max(|a||b|, 1e-8)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"cosine_similarity expects equal 1-d vectors, got {a.shape}, {b.shape}")
    if not a.data.any() and not b.data.any():
        logger.debug("cosine_similarity: both inputs are zero vectors")
    dot = sum(mul(a, b))
    denom = clamp_min(mul(l2norm(a, keepdims=False), l2norm(b, keepdims=False)), COSINE_EPS)
    return div(dot, denom)


# -- convolutional layers ---------------------------------------------------


def conv2d(x, kernels, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [B,C,H,W]) with ``kernels`` [O,C,k,k]."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ContractError(f"conv2d: bad ranks input {x.shape}, kernels {kernels.shape}")
    B, C, H, W = x.shape
    O, Ck, k, k2 = kernels.shape
    if Ck != C or k != k2 or k % 2 == 0 or bias.shape != (O,):
        raise ContractError(f"conv2d: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    if stride < 1 or pad < 0 or (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ContractError(f"conv2d: output size not integral for H={H}, W={W}, k={k}, stride={stride}, pad={pad}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ContractError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xpt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))  # [C, B, Hp, Wp]
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xpt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(C * k * k, B * Ho * Wo)
    wmat = kernels.data.reshape(O, C * k * k)
    out = (wmat @ cols).reshape(O, B, Ho, Wo) + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
        gk = (gmat @ cols.T).reshape(kernels.shape)
        gb = gmat.sum(axis=1)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(C, k, k, B, Ho, Wo)
            gxpt = np.zeros_like(xpt)
            for i in range(k):
                for j in range(k):
                    gxpt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxpt[:, :, pad : pad + H, pad : pad + W].transpose(1, 0, 2, 3))
        return gx, gk, gb

    y = _emit("conv2d", out, (x, kernels, bias), backward)
    return reshape(y, y.shape[1:]) if squeeze else y


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes of [B,C,H,W]."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ContractError(f"maxpool2 needs even spatial size, got {H}x{W}")
    corners = [x.data[:, :, a::2, b::2] for a in (0, 1) for b in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    if getattr(_state, "branches", None) is not None:
        _note_branch(np.argmax(np.stack(corners), axis=0))

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for n, (a, b) in enumerate((a, b) for a in (0, 1) for b in (0, 1)):
            # the first corner in raster order that attains the max gets the gradient
            hit = (corners[n] == out) & ~taken
            taken |= hit
            gx[:, :, a::2, b::2] = g * hit
        return (gx,)

    return _emit("maxpool2", out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: [B,C,H,W] -> [B,C]."""
    return mean(as_tensor(x), axis=(2, 3))


# -- optimisation and verification ------------------------------------------


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
                      lr: float, momentum: float):
    """Classic heavy-ball update ``v <- m*v + g; theta <- theta - lr*v`` (in place).

    The whole step is skipped if any gradient is non-finite.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ContractError("params, grads and velocity must have equal length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != np.shape(g) or p.shape != np.shape(v):
            raise ContractError(f"incongruent shapes for {p!r}: grad {np.shape(g)}, velocity {np.shape(v)}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {p.name or p!r}; step aborted")
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p.data -= (lr * v).astype(p.data.dtype)
    return params, velocity


class SGD:
    """Stateful wrapper keeping one velocity buffer per parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.001, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        sgd_momentum_step(self.params, grads, self.velocity, self.lr, self.momentum)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-6,
                      max_elements: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                      skip_kinks: bool = False, stats: Optional[dict] = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values.  When ``max_elements`` is set, at most that many coordinates per
    parameter are probed (chosen with ``rng``).  With ``skip_kinks`` a
    coordinate is left out when either probe takes a different branch of a
    piecewise op than the unperturbed pass, since the central difference then
    mixes two one-sided derivatives.  ``stats`` (if given) accumulates the
    ``checked`` and ``skipped`` coordinate counts.
    """
    with GradientTape() as tape:
        loss = loss_fn()
    analytic = tape.gradient(loss, params)
    rng = rng or np.random.default_rng(0)

    def evaluate():
        if not skip_kinks:
            return float(loss_fn().data), None
        with record_branches() as branches:
            value = float(loss_fn().data)
        return value, branches

    def same(a, b):
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    base = evaluate()[1]
    worst = 0.0
    checked = skipped = 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        ga_flat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus, b_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus, b_minus = evaluate()
            flat[i] = orig
            if skip_kinks and not (same(base, b_plus) and same(base, b_minus)):
                skipped += 1
                continue
            checked += 1
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(ga_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst
