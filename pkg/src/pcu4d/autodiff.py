"""Minimal reverse-mode differentiation on numpy arrays, plus Adam.

The tape records tensor-level nodes (matmul, elementwise, gather/scatter,
segment reductions, softmax). Discrete structure (neighbor lists, argmins)
is fixed at forward time, so gradients are exact almost everywhere and the
Chamfer subgradient choice is explicit. Accumulation order is by node id,
which makes training runs bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Node:
    """One recorded tensor with its local gradient rule."""

    __slots__ = ("tape", "id", "value", "parents", "vjp", "is_leaf", "name")

    def __init__(self, tape, nid, value, parents=(), vjp=None,
                 is_leaf=False, name=None):
        self.tape = tape
        self.id = nid
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.is_leaf = is_leaf
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        kind = "leaf" if self.is_leaf else "node"
        return f"<{kind} {self.id} {self.name or ''} shape={np.shape(self.value)}>"


class Tape:
    """Append-only record of one forward computation."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._leaves: list[Node] = []

    def leaf(self, value, name=None) -> Node:
        node = Node(self, len(self._nodes), np.asarray(value, dtype=np.float64),
                    is_leaf=True, name=name)
        self._nodes.append(node)
        self._leaves.append(node)
        return node

    def _record(self, value, parents, vjp) -> Node:
        node = Node(self, len(self._nodes), value, parents=tuple(parents), vjp=vjp)
        self._nodes.append(node)
        return node

    @property
    def leaves(self) -> list:
        return list(self._leaves)

    def backward(self, output: Node) -> dict:
        """Reverse-mode gradients of a scalar output.

        Returns {leaf id: gradient array}; leaves the output does not reach
        get zeros. Raises on non-scalar outputs.
        """
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        if np.ndim(output.value) != 0 and np.size(output.value) != 1:
            raise ValueError("backward requires a scalar output")
        grads: dict = {output.id: np.ones_like(output.value, dtype=np.float64)}
        leaf_grads: dict = {}
        for node in reversed(self._nodes[: output.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.is_leaf:
                leaf_grads[node.id] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        for leaf in self._leaves:
            leaf_grads.setdefault(leaf.id, np.zeros_like(leaf.value))
        return leaf_grads

    def grads_by_name(self, output: Node) -> dict:
        """backward(), keyed by leaf name (named leaves only)."""
        by_id = self.backward(output)
        return {leaf.name: by_id[leaf.id]
                for leaf in self._leaves if leaf.name is not None}


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one argument must be a tape Node")


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to the parent's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b, value, grad_a, grad_b):
    tape = _tape_of(a, b)
    parents, rules = [], []
    if isinstance(a, Node):
        parents.append(a)
        rules.append(grad_a)
    if isinstance(b, Node):
        parents.append(b)
        rules.append(grad_b)

    def vjp(g):
        return tuple(rule(g) for rule in rules)

    return tape._record(value, parents, vjp)


def add(a, b) -> Node:
    av, bv = _val(a), _val(b)
    return _binary(a, b, av + bv,
                   lambda g: _unbroadcast(g, av.shape),
                   lambda g: _unbroadcast(g, bv.shape))


def sub(a, b) -> Node:
    av, bv = _val(a), _val(b)
    return _binary(a, b, av - bv,
                   lambda g: _unbroadcast(g, av.shape),
                   lambda g: _unbroadcast(-g, bv.shape))


def mul(a, b) -> Node:
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv,
                   lambda g: _unbroadcast(g * bv, av.shape),
                   lambda g: _unbroadcast(g * av, bv.shape))


def matmul(a, b) -> Node:
    av, bv = _val(a), _val(b)
    return _binary(a, b, av @ bv,
                   lambda g: g @ bv.T,
                   lambda g: av.T @ g)


def square(a: Node) -> Node:
    return mul(a, a)


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    av = _val(a)
    mask = np.where(av > 0, 1.0, slope)
    return a.tape._record(av * np.where(av > 0, 1.0, slope), (a,),
                          lambda g: (g * mask,))


def reshape(a: Node, shape) -> Node:
    av = _val(a)
    return a.tape._record(av.reshape(shape), (a,),
                          lambda g: (g.reshape(av.shape),))


def concat_cols(parts: list) -> Node:
    tape = _tape_of(*parts)
    values = [_val(p) for p in parts]
    widths = [v.shape[1] for v in values]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate(values, axis=1)
    node_slots = [(i, p) for i, p in enumerate(parts) if isinstance(p, Node)]

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i, _ in node_slots)

    return tape._record(out, [p for _, p in node_slots], vjp)


def gather_rows(a: Node, idx) -> Node:
    av = _val(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return (z,)

    return a.tape._record(av[idx], (a,), vjp)


def segment_sum(a: Node, seg, num: int) -> Node:
    av = _val(a)
    seg = np.asarray(seg, dtype=np.intp)
    out = np.zeros((num,) + av.shape[1:], dtype=np.float64)
    np.add.at(out, seg, av)
    return a.tape._record(out, (a,), lambda g: (g[seg],))


def segment_mean(a: Node, seg, num: int) -> Node:
    """Per-segment mean; empty segments yield zeros."""
    seg = np.asarray(seg, dtype=np.intp)
    counts = np.bincount(seg, minlength=num).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    total = segment_sum(a, seg, num)
    return mul(total, inv.reshape(-1, *([1] * (np.ndim(total.value) - 1))))


def segment_max(a: Node, seg, num: int) -> Node:
    """Per-segment, per-channel max; empty segments yield zeros.

    Gradient flows to the first row attaining the max (ties by row order).
    """
    av = _val(a)
    seg = np.asarray(seg, dtype=np.intp)
    if av.ndim != 2:
        raise ValueError("segment_max expects a 2-D array")
    n_rows, width = av.shape
    out = np.full((num, width), -np.inf)
    np.maximum.at(out, seg, av)
    empty = ~np.isfinite(out[:, 0]) if width else np.zeros(num, bool)
    winner = np.full((num, width), n_rows, dtype=np.intp)
    if n_rows:
        hit = av == out[seg]
        rows = np.repeat(np.arange(n_rows, dtype=np.intp)[:, None], width, axis=1)
        cand = np.where(hit, rows, n_rows)
        np.minimum.at(winner, seg, cand)
    out[empty] = 0.0

    def vjp(g):
        z = np.zeros_like(av)
        valid = winner < n_rows
        rows = winner[valid]
        cols = np.nonzero(valid)[1]
        np.add.at(z, (rows, cols), g[valid])
        return (z,)

    return a.tape._record(out, (a,), vjp)


def segment_softmax(logits: Node, seg, num: int) -> Node:
    """Softmax of a 1-D logit vector within each segment."""
    ev = _val(logits)
    seg = np.asarray(seg, dtype=np.intp)
    if ev.ndim != 1:
        raise ValueError("segment_softmax expects a 1-D array")
    seg_max = np.full(num, -np.inf)
    np.maximum.at(seg_max, seg, ev)
    ex = np.exp(ev - seg_max[seg])
    denom = np.zeros(num)
    np.add.at(denom, seg, ex)
    alpha = ex / denom[seg]

    def vjp(g):
        dot = np.zeros(num)
        np.add.at(dot, seg, alpha * g)
        return (alpha * (g - dot[seg]),)

    return logits.tape._record(alpha, (logits,), vjp)


def sum_all(a: Node) -> Node:
    av = _val(a)
    return a.tape._record(np.asarray(av.sum()), (a,),
                          lambda g: (np.broadcast_to(g, av.shape).copy(),))


def mean_all(a: Node) -> Node:
    av = _val(a)
    size = av.size
    return a.tape._record(np.asarray(av.mean()), (a,),
                          lambda g: (np.broadcast_to(g / size, av.shape).copy(),))


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """Per-parameter moment accumulators and the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState,
              config: AdamConfig, lr: float | None = None) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays.

    state is advanced in place. Raises on non-finite gradients (fail fast).
    """
    lr = config.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return out


class Adam:
    """Stateful convenience wrapper around adam_step."""

    def __init__(self, config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.state = AdamState()

    def step(self, params: dict, grads: dict, lr: float | None = None) -> dict:
        return adam_step(params, grads, self.state, self.config, lr=lr)


@dataclass(frozen=True)
class LrSchedule:
    """Drops the learning rate to 1/10th every 10 epochs.

    mode='step' (the default) holds the rate within each period;
    mode='linear' interpolates between the period endpoints instead.
    """

    base_lr: float = 1e-4
    factor: float = 0.1
    period: int = 10
    mode: str = "step"

    def __post_init__(self):
        if not (0 < self.factor <= 1):
            raise ValueError("factor must be in (0, 1]")
        if self.period < 1:
            raise ValueError("period must be >= 1")


def schedule_step(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    bucket = epoch // schedule.period
    lr = schedule.base_lr * schedule.factor ** bucket
    if schedule.mode == "step":
        return lr
    if schedule.mode == "linear":
        frac = (epoch % schedule.period) / schedule.period
        nxt = schedule.base_lr * schedule.factor ** (bucket + 1)
        return lr + (nxt - lr) * frac
    raise ValueError(f"unknown schedule mode {schedule.mode!r}")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    max_rel_error: float
    rel_errors: np.ndarray
    nonsmooth: np.ndarray  # coordinates excluded as sitting on a kink

    def __str__(self):
        n_bad = int(self.nonsmooth.sum())
        return (f"grad_check: {'PASS' if self.passed else 'FAIL'} "
                f"max_rel={self.max_rel_error:.3e} "
                f"excluded_nonsmooth={n_bad}/{self.rel_errors.size}")


def grad_check(f, point, h: float = 1e-4, tol: float = 1e-3) -> GradCheckReport:
    """Compare f's analytic gradient against central finite differences.

    f maps a flat float array to (scalar value, gradient array). Relative
    error per coordinate is |analytic - numeric| / (|analytic| + |numeric|
    + 1e-12). A coordinate whose probe interval straddles a kink (a
    nearest-neighbor tie, a max switch, a leaky-relu crossing) is flagged
    non-smooth and excluded: a kink is detected when the analytic gradient
    jumps between x-h and x+h, or when the one-sided value differences
    disagree. The jump threshold max(tol/2, 5h) is sized so an undetected
    kink perturbs the central difference by less than the tolerance.
    """
    x = np.asarray(point, dtype=np.float64).copy()
    f0, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    numeric = np.zeros_like(flat)
    nonsmooth = np.zeros(flat.size, dtype=bool)
    jump_tol = max(tol / 2, 5 * h)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp, gp = f(x)
        flat[i] = orig - h
        fm, gm = f(x)
        flat[i] = orig
        fwd = (fp - f0) / h
        bwd = (f0 - fm) / h
        numeric[i] = (fp - fm) / (2 * h)
        gpi = float(np.asarray(gp).reshape(-1)[i])
        gmi = float(np.asarray(gm).reshape(-1)[i])
        grad_jump = abs(gpi - gmi) > jump_tol * (abs(gpi) + abs(gmi) + 1e-12)
        value_kink = abs(fwd - bwd) > 0.1 * (abs(fwd) + abs(bwd)) + 10 * h
        if grad_jump or value_kink:
            nonsmooth[i] = True
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    usable = rel[~nonsmooth]
    max_rel = float(usable.max()) if usable.size else 0.0
    return GradCheckReport(passed=bool(max_rel < tol), max_rel_error=max_rel,
                           rel_errors=rel, nonsmooth=nonsmooth)
