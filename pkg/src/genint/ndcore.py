"""Dense tensors with a reverse-mode tape, Adam, and a finite-difference checker.

Forward operations executed while a :class:`Tape` is active append a node to
it whenever one of their inputs requires a gradient.  Nodes are appended in
execution order, which is a topological order of the computation, so
:meth:`Tape.backward` simply walks the list in reverse.

Arrays are float32 by default.  Float64 inputs are kept as float64 so that
gradient checks can run without float32 round-off dominating the central
differences.  Sums and means accumulate in float64 in a fixed order.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, NonFiniteError, ValidationError

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "genint_active_tape", default=None
)


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense row-major array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_float_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is not None:
        return Tensor(np.asarray(value, dtype=dtype))
    return Tensor(value)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: object  # callable: upstream adjoint -> tuple of input adjoints


@dataclass
class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False

    def record(self, out: Tensor, inputs, vjp) -> None:
        self.nodes.append(_Node(out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate adjoints from a scalar ``loss`` to every leaf tensor.

        Returns a mapping from each leaf that requires a gradient to its
        gradient; the gradient is also stored on ``leaf.grad``.
        """
        if loss.data.size != 1:
            raise ValidationError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = adjoints.pop(id(node.out), None)
            if upstream is None:
                continue
            for inp, g in zip(node.inputs, node.vjp(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + g
                else:
                    adjoints[key] = np.zeros_like(inp.data) + g
        grads: dict[Tensor, np.ndarray] = {}
        for leaf in _leaves(self, loss):
            g = adjoints.get(id(leaf))
            g = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype)
            leaf.grad = g
            grads[leaf] = g
        return grads


def _leaves(tape: Tape, loss: Tensor) -> list[Tensor]:
    outs = {id(n.out) for n in tape.nodes}
    seen: dict[int, Tensor] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in outs:
                seen.setdefault(id(inp), inp)
    if loss.requires_grad and id(loss) not in outs:
        seen.setdefault(id(loss), loss)
    return list(seen.values())


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1 - out),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- shape / linear algebra --------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x`` [n, in], ``W`` [in, out], ``b`` [out]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: x {x.shape} does not match W {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} does not match W {W.shape}")
    out = x.data @ W.data + b.data
    return _emit(
        out,
        (x, W, b),
        lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)),
    )


affine_forward = affine


# -- reductions --------------------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, dtype=np.float64), dtype=a.dtype)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _emit(out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / max(count, 1))


# -- losses ------------------------------------------------------------------


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    s = np.exp(x - m).sum(axis=axis, keepdims=True, dtype=np.float64)
    return (np.squeeze(m, axis) + np.log(np.squeeze(s, axis))).astype(x.dtype)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True, dtype=np.float64).astype(z.dtype)


def _check_targets(targets, n_rows, n_classes) -> np.ndarray:
    t = np.asarray(targets)
    if t.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} targets, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise IndexError("targets must be integer class indices")
        t = t.astype(np.int64)
    if n_rows and (t.min() < 0 or t.max() >= n_classes):
        raise IndexError(f"target out of range [0, {n_classes})")
    return t


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``logsumexp(logits_i) - logits_i[target_i]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    t = _check_targets(targets, n, c)
    rows = np.arange(n)
    lse = logsumexp(logits.data, axis=1)
    per_row = lse.astype(np.float64) - logits.data[rows, t]
    out = np.asarray(per_row.sum() / max(n, 1), dtype=logits.dtype)

    def vjp(g):
        p = softmax(logits.data, axis=1)
        p[rows, t] -= 1
        return (p * (g / max(n, 1)),)

    return _emit(out, (logits,), vjp)


def sigmoid_binary_cross_entropy(logits, targets) -> Tensor:
    """Summed BCE between ``sigmoid(logits)`` and targets in [0, 1]."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"targets {y.shape} vs logits {logits.shape}")
    z = logits.data
    # softplus(z) - y*z, written to avoid overflow
    elem = np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(elem.sum(dtype=np.float64), dtype=logits.dtype)
    return _emit(out, (logits,), lambda g: (g * (_stable_sigmoid(z) - y),))


def logit_scale_gradient_penalty(logits, targets) -> Tensor:
    """Squared derivative of the mean cross-entropy of ``w * logits`` at ``w = 1``.

    With ``p = softmax(logits)`` the derivative is
    ``g = mean_i(sum_c p_ic L_ic - L_i,y_i)``.
    """
    logits = as_tensor(logits)
    n, c = logits.shape
    t = _check_targets(targets, n, c)
    rows = np.arange(n)
    L = logits.data.astype(np.float64)
    p = softmax(L, axis=1)
    expected = (p * L).sum(axis=1)
    g = (expected - L[rows, t]).sum() / max(n, 1)
    out = np.asarray(g * g, dtype=logits.dtype)

    def vjp(up):
        dg = p * (1.0 + L - expected[:, None])
        dg[rows, t] -= 1.0
        return ((up * 2.0 * g / max(n, 1)) * dg).astype(logits.dtype),

    return _emit(out, (logits,), vjp)


def mean_absolute_error(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"target {target.shape} vs prediction {pred.shape}")
    return mean(abs_(sub(pred, target)))


def gaussian_kl(mean_, logvar) -> Tensor:
    """Summed KL(N(mean, exp(logvar)) || N(0, I))."""
    mean_, logvar = as_tensor(mean_), as_tensor(logvar)
    ev = np.exp(logvar.data)
    elem = 0.5 * (ev + mean_.data * mean_.data - 1.0 - logvar.data)
    out = np.asarray(elem.sum(dtype=np.float64), dtype=mean_.dtype)
    return _emit(
        out,
        (mean_, logvar),
        lambda g: (g * mean_.data, g * 0.5 * (ev - 1.0)),
    )


# -- optimisation ------------------------------------------------------------


@dataclass
class Adam:
    """Adam optimizer state; ``step`` updates parameter arrays in place."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params:
                raise ValidationError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise DimensionError(
                    f"gradient {g.shape} does not match parameter {name!r} {params[name].shape}"
                )
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            m = self.first_moment.get(name)
            if m is None:
                m = self.first_moment[name] = np.zeros_like(p)
                self.second_moment[name] = np.zeros_like(p)
            v = self.second_moment[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= (self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


def adam_step(state: Adam, params, grads) -> None:
    state.step(params, grads)


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst_parameter: str | None
    worst_index: tuple[int, ...] | None
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _evaluate(loss_fn, params) -> float:
    value = loss_fn({k: Tensor(v) for k, v in params.items()})
    value = float(np.asarray(value.data if isinstance(value, Tensor) else value))
    if not np.isfinite(value):
        raise NonFiniteError("loss evaluated to a non-finite value")
    return value


def analytic_gradients(loss_fn, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        loss = loss_fn(leaves)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("loss evaluated to a non-finite value")
    grads = tape.backward(loss)
    return {k: grads.get(t, np.zeros_like(t.data)) for k, t in leaves.items()}


def finite_difference_check(
    loss_fn,
    params: dict[str, np.ndarray],
    step: float = 1e-3,
    tolerance: float = 1e-4,
    *,
    max_coords_per_param: int = 20,
    grad_fn=None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` maps a dict of :class:`Tensor` parameters to a scalar tensor.
    ``grad_fn``, when given, replaces the tape-derived gradients (used to
    verify that a wrong gradient is caught).
    """
    if step <= 0:
        raise ValidationError("step must be positive")
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    grads = grad_fn(params) if grad_fn is not None else analytic_gradients(loss_fn, params)
    rng = np.random.default_rng(seed)
    worst, worst_name, worst_idx, checked = 0.0, None, None, 0
    for name in sorted(params):
        p = params[name]
        flat_count = p.size
        if flat_count == 0:
            continue
        k = min(max_coords_per_param, flat_count)
        coords = np.sort(rng.choice(flat_count, size=k, replace=False))
        for flat in coords:
            idx = np.unravel_index(flat, p.shape)
            orig = p[idx].copy()
            p[idx] = orig + step
            up = _evaluate(loss_fn, params)
            p[idx] = orig - step
            down = _evaluate(loss_fn, params)
            p[idx] = orig
            numeric = (up - down) / (2 * step)
            exact = float(grads[name][idx])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            checked += 1
            if err > worst or worst_name is None:
                worst, worst_name, worst_idx = err, name, tuple(int(i) for i in idx)
    return GradCheckReport(worst, tolerance, worst_name, worst_idx, checked)
