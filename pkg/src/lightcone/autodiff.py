"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation appends a node to a :class:`Graph`. Values are computed
eagerly when the node is created; :func:`forward` replays the recorded graph
with new leaf values and :func:`backward` walks the nodes in reverse order,
accumulating vector-Jacobian products. Nodes are append-only, so insertion
order is already a topological order.

Everything is float64. Broadcasting follows numpy; gradients are summed back
to the shape of each operand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .wrapped_normal import log_r_over_sinh as _log_r_over_sinh


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or infinity."""


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# graph and tensors
# ---------------------------------------------------------------------------


class Graph:
    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def input(self, value, name: str | None = None, requires_grad: bool = True) -> "Tensor":
        return self._append("input", (), {}, np.asarray(value, dtype=np.float64), name, requires_grad)

    def const(self, value) -> "Tensor":
        return self._append("const", (), {}, np.asarray(value, dtype=np.float64), None, False)

    def inputs(self) -> dict[str, "Tensor"]:
        return {n.name: n for n in self.nodes if n.op == "input" and n.name is not None}

    def _append(self, op, inputs, attrs, value, name=None, requires_grad=None):
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        node = Tensor(self, len(self.nodes), op, tuple(inputs), attrs, value, name, requires_grad)
        self.nodes.append(node)
        return node

    def apply(self, op: str, *args: "Tensor", **attrs) -> "Tensor":
        vals = [a.value for a in args]
        value = OPS[op].forward(*vals, **attrs)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite output from '{op}'")
        return self._append(op, [a.index for a in args], attrs, value)


class Tensor:
    __array_priority__ = 1000

    def __init__(self, graph, index, op, inputs, attrs, value, name, requires_grad):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.name = name
        self.requires_grad = requires_grad

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor#{self.index}<{self.op}{label}> shape={self.shape}"

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.graph is not self.graph:
                raise ValueError("tensors belong to different graphs")
            return other
        return self.graph.const(other)

    def __add__(self, o):
        return self.graph.apply("add", self, self._lift(o))

    def __radd__(self, o):
        return self.graph.apply("add", self._lift(o), self)

    def __sub__(self, o):
        return self.graph.apply("sub", self, self._lift(o))

    def __rsub__(self, o):
        return self.graph.apply("sub", self._lift(o), self)

    def __mul__(self, o):
        return self.graph.apply("mul", self, self._lift(o))

    def __rmul__(self, o):
        return self.graph.apply("mul", self._lift(o), self)

    def __truediv__(self, o):
        return self.graph.apply("div", self, self._lift(o))

    def __rtruediv__(self, o):
        return self.graph.apply("div", self._lift(o), self)

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __pow__(self, p):
        return self.graph.apply("pow", self, p=float(p))

    def __matmul__(self, o):
        return self.graph.apply("matmul", self, self._lift(o))

    def __rmatmul__(self, o):
        return self.graph.apply("matmul", self._lift(o), self)

    @property
    def T(self):
        return self.graph.apply("transpose", self)

    def sum(self, axis=None, keepdims=False):
        return self.graph.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.graph.apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.apply("reshape", self, shape=shape)


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Op:
    forward: Callable
    # vjp(g, out, *inputs, **attrs) -> tuple of thunks, one per input
    vjp: Callable


OPS: dict[str, Op] = {}


def _register(name, forward, vjp):
    OPS[name] = Op(forward, vjp)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary(name, fwd, ga, gb):
    def vjp(g, out, a, b):
        return (lambda: unbroadcast(ga(g, out, a, b), a.shape), lambda: unbroadcast(gb(g, out, a, b), b.shape))

    _register(name, fwd, vjp)


def _unary(name, fwd, dfn):
    def vjp(g, out, a, **attrs):
        return (lambda: g * dfn(out, a, **attrs),)

    _register(name, fwd, vjp)


_binary("add", np.add, lambda g, o, a, b: g, lambda g, o, a, b: g)
_binary("sub", np.subtract, lambda g, o, a, b: g, lambda g, o, a, b: -g)
_binary("mul", np.multiply, lambda g, o, a, b: g * b, lambda g, o, a, b: g * a)
_binary("div", np.divide, lambda g, o, a, b: g / b, lambda g, o, a, b: -g * o / b)

_unary("neg", np.negative, lambda o, a: -1.0)
_unary("pow", lambda a, p: a**p, lambda o, a, p: p * a ** (p - 1))
_unary("tanh", np.tanh, lambda o, a: 1.0 - o * o)
_unary("sigmoid", lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)), lambda o, a: o * (1.0 - o))
_unary("exp", np.exp, lambda o, a: o)
_unary("log", np.log, lambda o, a: 1.0 / a)
_unary("sqrt", np.sqrt, lambda o, a: 0.5 / o)
_unary("artanh", np.arctanh, lambda o, a: 1.0 / (1.0 - a * a))
_unary("asinh", np.arcsinh, lambda o, a: 1.0 / np.sqrt(1.0 + a * a))
_unary(
    "softplus",
    lambda a: np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a))),
    lambda o, a: 0.5 * (1.0 + np.tanh(0.5 * a)),
)


def _matmul_vjp(g, out, a, b):
    return (
        lambda: unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape),
        lambda: unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape),
    )


_register("matmul", np.matmul, _matmul_vjp)
_register(
    "transpose",
    lambda a: np.swapaxes(a, -1, -2),
    lambda g, out, a: (lambda: np.swapaxes(g, -1, -2),),
)


def _sum_vjp(g, out, a, axis, keepdims):
    def grad():
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return (grad,)


def _mean_vjp(g, out, a, axis, keepdims):
    n = a.size // max(out.size, 1)
    (grad,) = _sum_vjp(g, out, a, axis, keepdims)
    return (lambda: grad() / n,)


_register("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)
_register("mean", lambda a, axis, keepdims: np.mean(a, axis=axis, keepdims=keepdims), _mean_vjp)
_register("reshape", lambda a, shape: np.reshape(a, shape), lambda g, out, a, shape: (lambda: g.reshape(a.shape),))


# composite nodes -------------------------------------------------------------


def _norm_fwd(a):
    return np.sqrt(np.sum(a * a, axis=-1, keepdims=True))


def _norm_vjp(g, out, a):
    return (lambda: g * a / np.where(out > 0, out, 1.0),)


_register("norm", _norm_fwd, _norm_vjp)


def _expmap0_scale(r, c):
    s = math.sqrt(c)
    small = r < 1e-3
    rs = np.where(small, 1.0, r)
    f = np.where(small, 0.5 - c * r**2 / 24.0, np.tanh(s * rs / 2.0) / (s * rs))
    # f'(r) / r
    half = s * rs / 2.0
    e = np.exp(-2.0 * half)
    sech2 = 4.0 * e / (1.0 + e) ** 2
    direct = (half * sech2 - np.tanh(half)) / (s * rs**3)
    df_r = np.where(small, -c / 12.0 + c * c * r**2 / 60.0, direct)
    return f, df_r


def _expmap0_fwd(u, c):
    r = np.sqrt(np.sum(u * u, axis=-1, keepdims=True))
    f, _ = _expmap0_scale(r, c)
    return f * u


def _expmap0_vjp(g, out, u, c):
    def grad():
        r = np.sqrt(np.sum(u * u, axis=-1, keepdims=True))
        f, df_r = _expmap0_scale(r, c)
        return f * g + df_r * np.sum(u * g, axis=-1, keepdims=True) * u

    return (grad,)


_register("expmap0", _expmap0_fwd, _expmap0_vjp)


def _lros_vjp(g, out, r):
    def grad():
        small = np.abs(r) < 1e-3
        rs = np.where(small, 1.0, r)
        direct = 1.0 / rs - 1.0 / np.tanh(rs)
        return g * np.where(small, -r / 3.0 + r**3 / 45.0, direct)

    return (grad,)


_register("log_r_over_sinh", lambda r: _log_r_over_sinh(r), _lros_vjp)


# ---------------------------------------------------------------------------
# functional front end
# ---------------------------------------------------------------------------


def _un(op):
    def f(x: Tensor, **attrs) -> Tensor:
        return x.graph.apply(op, x, **attrs)

    f.__name__ = op
    return f


tanh = _un("tanh")
sigmoid = _un("sigmoid")
softplus = _un("softplus")
exp = _un("exp")
log = _un("log")
sqrt = _un("sqrt")
artanh = _un("artanh")
asinh = _un("asinh")
norm = _un("norm")
log_r_over_sinh = _un("log_r_over_sinh")


def expmap0(u: Tensor, c: float = 1.0) -> Tensor:
    """Unit-speed exponential map at the ball origin as a single node."""
    return u.graph.apply("expmap0", u, c=float(c))


def mobius_add(x: Tensor, y: Tensor, c: float = 1.0) -> Tensor:
    xy = (x * y).sum(axis=-1, keepdims=True)
    x2 = (x * x).sum(axis=-1, keepdims=True)
    y2 = (y * y).sum(axis=-1, keepdims=True)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + (c * c) * x2 * y2
    return num / den


def expmap(x: Tensor, u: Tensor, c: float = 1.0) -> Tensor:
    return mobius_add(x, expmap0(u, c), c)


# ---------------------------------------------------------------------------
# forward replay / backward
# ---------------------------------------------------------------------------


def forward(graph: Graph, feeds: dict | None = None, outputs=None):
    """Re-evaluate ``graph`` with leaf values replaced from ``feeds``.

    ``feeds`` maps input names (or input tensors) to arrays. Returns the
    values of ``outputs`` (a tensor or list of tensors) if given.
    """
    feeds = feeds or {}
    by_name = {}
    for k, v in feeds.items():
        by_name[k.name if isinstance(k, Tensor) else k] = np.asarray(v, dtype=np.float64)
    for node in graph.nodes:
        if node.op == "input":
            if node.name in by_name:
                new = by_name[node.name]
                if new.shape != node.value.shape:
                    raise ShapeError(f"feed for '{node.name}' has shape {new.shape}, expected {node.value.shape}")
                node.value = new
        elif node.op != "const":
            vals = [graph.nodes[i].value for i in node.inputs]
            node.value = OPS[node.op].forward(*vals, **node.attrs)
            if graph.check_finite and not np.all(np.isfinite(node.value)):
                raise NonFiniteError(f"non-finite output from '{node.op}'")
    if outputs is None:
        return None
    if isinstance(outputs, Tensor):
        return outputs.value
    return [o.value for o in outputs]


@dataclass
class Gradients:
    by_index: dict[int, np.ndarray] = field(default_factory=dict)
    graph: Graph | None = None

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            return self.by_index.get(key.index, np.zeros_like(key.value))
        node = self.graph.inputs()[key]
        return self.by_index.get(node.index, np.zeros_like(node.value))

    def named(self) -> dict[str, np.ndarray]:
        return {name: self[name] for name, node in self.graph.inputs().items() if node.requires_grad}


def backward(graph: Graph, output: Tensor, seed=None) -> Gradients:
    """Accumulate gradients of ``output`` into every node that requires them."""
    if seed is None:
        if output.value.size != 1:
            raise ShapeError("a seed gradient is required for non-scalar outputs")
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {output.index: seed}
    for node in reversed(graph.nodes[: output.index + 1]):
        g = grads.get(node.index)
        if g is None or not node.inputs:
            continue
        parents = [graph.nodes[i] for i in node.inputs]
        thunks = OPS[node.op].vjp(g, node.value, *[p.value for p in parents], **node.attrs)
        for parent, thunk in zip(parents, thunks):
            if not parent.requires_grad:
                continue
            contrib = thunk()
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + contrib
            else:
                grads[parent.index] = contrib
    keep = {i: g for i, g in grads.items() if graph.nodes[i].op == "input"}
    return Gradients(keep, graph)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 5e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    b1, b2 = betas
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            if name in state.m:
                m_new[name], v_new[name] = state.m[name], state.v[name]
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    worst_param: str
    worst_index: tuple
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    n_per_param: int = 5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` returns ``(loss, grads)``. For each parameter up to
    ``n_per_param`` random entries are perturbed by ``+-h``. The relative
    error is ``|ga - gn| / max(|ga|, |gn|, floor)``.
    """
    rng = rng or np.random.default_rng(0)
    _, grads = loss_fn(params)
    per_param = {}
    worst = (-1.0, "", ())
    checked = 0
    for name in sorted(params):
        p = params[name]
        ga_full = grads.get(name, np.zeros_like(p))
        flat = rng.choice(p.size, size=min(n_per_param, p.size), replace=False)
        worst_here = 0.0
        for k in flat:
            idx = np.unravel_index(int(k), p.shape)
            plus = {**params, name: p.copy()}
            minus = {**params, name: p.copy()}
            plus[name][idx] += h
            minus[name][idx] -= h
            gn = (loss_fn(plus)[0] - loss_fn(minus)[0]) / (2 * h)
            ga = float(ga_full[idx])
            err = abs(ga - gn) / max(abs(ga), abs(gn), floor)
            checked += 1
            if err > worst_here:
                worst_here = err
            if err > worst[0]:
                worst = (err, name, tuple(int(i) for i in idx))
        per_param[name] = worst_here
    return GradCheckReport(max(worst[0], 0.0), per_param, worst[1], worst[2], checked)
