"""Dense reverse-mode autodiff on numpy arrays.

A ``Value`` wraps a float64 array and remembers how it was produced. Calling
``backward(loss)`` on a scalar walks the graph in reverse topological order
and accumulates adjoints into every reachable node's ``grad``.

Only the handful of operations the predictor and its losses need are
provided. Broadcasting follows numpy rules for up to 2-D operands.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, TrainingError

CHECKPOINT_FORMAT = "tract-params/1"

_NORM_EPS = 1e-12


class Value:
    __slots__ = ("data", "_grad", "op", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = True, op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self._grad = None
        self.op = op
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable | None = None

    # -- bookkeeping -----------------------------------------------------

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ConfigurationError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Value(op={self.op}, shape={self.data.shape})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(data) -> Value:
    return Value(data, requires_grad=False, op="const")


def _lift(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _make(data: np.ndarray, parents: Sequence[Value], backward: Callable, op: str) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out._grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(op: str, a: Value, b: Value) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Value:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "div")


def tanh(a) -> Value:
    a = _lift(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Value:
    a = _lift(a)
    gate = (a.data > 0).astype(np.float64)
    return _make(a.data * gate, (a,), lambda g: (g * gate,), "relu")


def exp(a) -> Value:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Value:
    a = _lift(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Value:
    a = _lift(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# -- reductions ---------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def vsum(a, axis=None, keepdims=False) -> Value:
    a = _lift(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Value:
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand(g / n, a.shape, axis, keepdims).copy(),), "mean")


def l2norm(a, axis=-1, keepdims=False) -> Value:
    """Euclidean norm along ``axis``. The subgradient at the origin is 0."""
    a = _lift(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = norm if keepdims else np.squeeze(norm, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(norm > 0, g * a.data / safe, 0.0),)

    return _make(np.asarray(out), (a,), backward, "l2norm")


def normalize(a, axis=-1) -> Value:
    """Scale to unit L2 norm along ``axis`` (norms below 1e-12 are clamped)."""
    a = _lift(a)
    norm = np.maximum(np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)), _NORM_EPS)
    out = a.data / norm

    def backward(g):
        proj = (out * g).sum(axis=axis, keepdims=True)
        return ((g - out * proj) / norm,)

    return _make(out, (a,), backward, "normalize")


def logsumexp(a, axis=-1, keepdims=False, mask=None) -> Value:
    """log(sum(exp(a))) along ``axis`` with max subtraction.

    ``mask`` (boolean, same shape as ``a``) restricts the sum to True entries;
    every reduced slice must keep at least one entry.
    """
    a = _lift(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ConfigurationError(f"logsumexp: mask shape {mask.shape} != input shape {x.shape}")
        if not mask.any(axis=axis).all():
            raise ContractError("logsumexp: a reduced slice is fully masked")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    shifted = np.exp(x - m)
    lse = m + np.log(shifted.sum(axis=axis, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x - lse),)

    return _make(np.asarray(out), (a,), backward, "logsumexp")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def dot(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ConfigurationError(f"dot: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        return g * b.data, g * a.data

    return _make(np.asarray(a.data @ b.data), (a, b), backward, "dot")


def transpose(a) -> Value:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ConfigurationError(f"transpose: expected 2-D operand, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


# -- shape plumbing -----------------------------------------------------------


def reshape(a, shape) -> Value:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index) -> Value:
    a = _lift(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ConfigurationError(f"slice: {exc} (shape {a.shape})") from None

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "slice")


def concat(values: Sequence, axis: int = -1) -> Value:
    values = [_lift(v) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        shapes = [v.shape for v in values]
        raise ConfigurationError(f"concat: shapes {shapes} do not conform on axis {axis}") from None
    cuts = np.cumsum([v.data.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, values, backward, "concat")


# -- reverse pass -------------------------------------------------------------


def _topological(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every node reachable from ``loss``.

    Adjoints are summed per call and then added to the stored grads, so a
    second call without ``zero_grad`` doubles every grad.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        node._grad = g.copy() if node._grad is None else node._grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoint[key] = adjoint[key] + pg if key in adjoint else pg


def zero_grad(values: Iterable[Value]) -> None:
    for v in values:
        v.zero_grad()


# -- optimisation -------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is advanced."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter '{name}' at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ConfigurationError(f"adam: grad shape {g.shape} != param shape {params[name].shape} for '{name}'")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# -- verification -------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_components: int
    nonsmooth: bool = False
    worst: tuple[str, tuple] | None = None


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def grad_check(
    build: Callable[[dict[str, Value]], Value],
    params: Mapping[str, np.ndarray],
    h: float = 1e-4,
    tol: float = 1e-4,
    smooth_at: Callable[[Mapping[str, np.ndarray]], bool] | None = None,
    components: int | None = None,
    seed: int = 0,
    perturb: float = 1e-3,
    max_tries: int = 20,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    Relative error per component is ``|a - n| / max(|a|, |n|, 1e-6)``. When
    ``smooth_at`` reports a kink (e.g. a top-k tie), the point is nudged by
    seeded noise of scale ``perturb`` until it is smooth and the report is
    flagged ``nonsmooth``. ``components`` limits the check to a random sample.
    """
    if not 0 < h <= 1e-2:
        raise ContractError(f"grad_check: h must lie in (0, 1e-2], got {h}")
    rng = np.random.default_rng(seed)
    point = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    nonsmooth = False
    if smooth_at is not None:
        tries = 0
        while not smooth_at(point):
            nonsmooth = True
            tries += 1
            if tries > max_tries:
                raise ContractError("grad_check: could not find a smooth point near the input")
            point = {k: v + perturb * rng.standard_normal(v.shape) for k, v in point.items()}

    leaves = {k: Value(v) for k, v in point.items()}
    loss = build(leaves)
    backward(loss)
    analytic = {k: leaves[k].grad for k in leaves}

    def f(name, idx, delta):
        trial = {k: Value(v) for k, v in point.items()}
        trial[name].data[idx] += delta
        return float(build(trial).data)

    indices = [(k, idx) for k, v in point.items() for idx in np.ndindex(v.shape)]
    if components is not None and components < len(indices):
        pick = rng.choice(len(indices), size=components, replace=False)
        indices = [indices[i] for i in sorted(pick)]

    worst_err, worst = 0.0, None
    for name, idx in indices:
        numeric = (f(name, idx, h) - f(name, idx, -h)) / (2.0 * h)
        err = _rel_err(float(analytic[name][idx]), numeric)
        if err > worst_err or worst is None:
            worst_err, worst = err, (name, idx)
    return GradCheckReport(worst_err, worst_err < tol, len(indices), nonsmooth, worst)


# -- checkpoints --------------------------------------------------------------


def save_params(path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": dict(meta or {}),
        "params": {
            name: {"shape": list(arr.shape), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    params = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != math.prod(shape):
            raise ConfigurationError(f"{path}: parameter '{name}' has {values.size} values for shape {shape}")
        params[name] = values.reshape(shape)
    return params, doc["meta"]
