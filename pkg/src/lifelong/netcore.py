"""Forward pass, exact backpropagation and the consolidated gradient step.

The step folds the per-weight quadratic restraint into every update::

    theta <- theta - lr * (dL_t/dtheta + 2 * b * (theta - target))

Masked parameters never receive a gradient entry and are never written.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .consolidation import ConsolidationState
from .errors import ConfigError, DataError, NumericalError, StateError, TopologyError
from .network import INPUT, ColumnarNetwork, ParamId

DEFAULT_LR = 0.05


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray | float:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return 1.0


@dataclass
class ForwardTrace:
    """Cached pre-activations and activations of one forward pass."""

    version: int
    heads: tuple[str, ...]
    entry: str
    pre: dict[str, np.ndarray] = field(default_factory=dict)
    acts: dict[str, np.ndarray] = field(default_factory=dict)


def _needed(net: ColumnarNetwork, head_keys: Iterable[str], entry: str) -> set[str]:
    seen: set[str] = set()
    stack = list(head_keys)
    while stack:
        k = stack.pop()
        if k in seen:
            continue
        seen.add(k)
        if k == entry:
            continue
        if k == INPUT:
            raise TopologyError(f"head depends on the raw input but data enters at {entry}")
        stack.extend(l.src for l in net.incoming(k))
    return seen


def propagate(net: ColumnarNetwork, X: np.ndarray, tasks: Sequence[int],
              entry: str = INPUT) -> ForwardTrace:
    """Evaluate every layer on the path to the heads of ``tasks``.

    ``entry`` names the layer whose activations ``X`` holds; it is the raw
    input by default, or a hidden layer when replaying cached features.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise TopologyError("batch must be a 2-d sample matrix")
    if entry not in net.layers:
        raise TopologyError(f"unknown entry layer {entry}")
    if X.shape[1] != net.layers[entry].width:
        raise TopologyError(f"batch width {X.shape[1]} != layer width {net.layers[entry].width}")
    head_keys = tuple(net.head(t).key for t in tasks)
    needed = _needed(net, head_keys, entry)
    trace = ForwardTrace(net.version, head_keys, entry)
    trace.acts[entry] = X
    n = X.shape[0]
    for key in net.order():
        if key not in needed or key == entry:
            continue
        layer = net.layers[key]
        z = np.broadcast_to(layer.bias, (n, layer.width)).copy()
        for link in net.incoming(key):
            z += trace.acts[link.src] @ link.weights.T
        trace.pre[key] = z
        trace.acts[key] = activate(z, layer.activation)
    return trace


def forward(net: ColumnarNetwork, batch: np.ndarray, head: int,
            entry: str = INPUT) -> tuple[np.ndarray, ForwardTrace]:
    """Logits of one task head for every row of ``batch``."""
    trace = propagate(net, batch, (head,), entry)
    return trace.acts[net.head(head).key], trace


def logits_for(net: ColumnarNetwork, batch: np.ndarray, tasks: Sequence[int],
               entry: str = INPUT) -> dict[int, np.ndarray]:
    trace = propagate(net, batch, tasks, entry)
    return {t: trace.acts[net.head(t).key] for t in tasks}


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.ndim != 1 or len(labels) != logits.shape[0]:
        raise DataError("logits rows must match the number of labels")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"label outside [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def task_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of softmax(logits) against class indices."""
    labels = _check_labels(logits, labels)
    if len(labels) == 0:
        raise DataError("empty batch")
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_grad_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = _check_labels(logits, labels)
    p = np.exp(log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


class Gradient(Mapping):
    """Partial derivatives keyed by :class:`ParamId`, masked entries absent.

    Stored as dense per-group arrays; ``present`` marks which scalars exist.
    """

    def __init__(self, net: ColumnarNetwork, arrays: dict[str, np.ndarray],
                 present: dict[str, np.ndarray]):
        self.net = net
        self.arrays = arrays
        self.present = present
        self._index: dict[ParamId, tuple[str, tuple[int, ...]]] | None = None

    def _build_index(self):
        index = {}
        for name, mask in self.present.items():
            _, rows, cols = self.net.group_ids(name)
            for pos in zip(*np.nonzero(mask)):
                r = int(rows[pos[0]])
                c = int(cols[pos[1]]) if len(pos) > 1 else -1
                pid = ParamId(self.net.group_ids(name)[0], name, r, c)
                index[pid] = (name, tuple(int(p) for p in pos))
        self._index = index

    def __getitem__(self, pid: ParamId) -> float:
        if self._index is None:
            self._build_index()
        name, pos = self._index[pid]
        return float(self.arrays[name][pos])

    def __iter__(self):
        if self._index is None:
            self._build_index()
        return iter(self._index)

    def __len__(self) -> int:
        return int(sum(m.sum() for m in self.present.values()))

    def __add__(self, other: "Gradient") -> "Gradient":
        arrays = {k: v + other.arrays[k] for k, v in self.arrays.items()}
        return Gradient(self.net, arrays, self.present)

    def scaled(self, factor: float) -> "Gradient":
        return Gradient(self.net, {k: v * factor for k, v in self.arrays.items()}, self.present)


def _presence(net: ColumnarNetwork, cstate: ConsolidationState | None) -> dict[str, np.ndarray]:
    groups = net.groups()
    if cstate is None:
        return {k: np.ones(v.shape, dtype=bool) for k, v in groups.items()}
    return {k: ~cstate.masked(k) for k in groups}


def backward_from(net: ColumnarNetwork, trace: ForwardTrace, dlogits: dict[str, np.ndarray],
                  cstate: ConsolidationState | None = None) -> Gradient:
    """Backpropagate given output-layer gradients keyed by head layer key."""
    if trace.version != net.version:
        raise StateError("stale forward trace: parameters changed since it was computed")
    present = _presence(net, cstate)
    arrays = {k: np.zeros(v.shape) for k, v in net.groups().items()}
    upstream: dict[str, np.ndarray] = {}
    for key, d in dlogits.items():
        upstream[key] = upstream[key] + d if key in upstream else d
    for key in reversed(net.order()):
        if key not in upstream or key not in trace.pre:
            continue
        layer = net.layers[key]
        dz = upstream.pop(key) * activation_grad(trace.pre[key], trace.acts[key], layer.activation)
        arrays[key] += dz.sum(axis=0)
        for link in net.incoming(key):
            arrays[link.name] += dz.T @ trace.acts[link.src]
            if link.src in trace.pre:
                back = dz @ link.weights
                upstream[link.src] = upstream[link.src] + back if link.src in upstream else back
    for k in arrays:
        arrays[k][~present[k]] = 0.0
    return Gradient(net, arrays, present)


def backward(net: ColumnarNetwork, trace: ForwardTrace, labels: np.ndarray, head: int,
             cstate: ConsolidationState | None = None) -> Gradient:
    """Gradient of the mean cross-entropy of one head w.r.t. every unmasked parameter."""
    key = net.head(head).key
    if key not in trace.acts:
        raise StateError(f"trace does not cover head {head}")
    return backward_from(net, trace, {key: loss_grad_logits(trace.acts[key], labels)}, cstate)


def joint_logits(trace: ForwardTrace, net: ColumnarNetwork, tasks: Sequence[int]) -> np.ndarray:
    """Concatenate several heads' logits into one label space (single-head view)."""
    return np.concatenate([trace.acts[net.head(t).key] for t in tasks], axis=1)


def backward_joint(net: ColumnarNetwork, trace: ForwardTrace, labels: np.ndarray,
                   tasks: Sequence[int], cstate: ConsolidationState | None = None) -> Gradient:
    """Gradient of cross-entropy over the union of the heads' classes."""
    d = loss_grad_logits(joint_logits(trace, net, tasks), labels)
    out: dict[str, np.ndarray] = {}
    start = 0
    for t in tasks:
        key = net.head(t).key
        w = net.layers[key].width
        out[key] = out[key] + d[:, start:start + w] if key in out else d[:, start:start + w]
        start += w
    return backward_from(net, trace, out, cstate)


def apply_step(net: ColumnarNetwork, grad: Gradient, cstate: ConsolidationState,
               lr: float = DEFAULT_LR) -> ColumnarNetwork:
    """One consolidated SGD step, in place.

    Coordinates whose restraint is stiff for this learning rate
    (``2*lr*b > 1``) take the implicit (proximal) form of the same penalty,
    which has the identical fixed point but cannot overshoot the target.
    """
    if not lr > 0:
        raise ConfigError("learning rate must be positive")
    groups = net.groups()
    for name, g in grad.arrays.items():
        present = grad.present[name]
        if not present.any():
            continue
        if not cstate.covers(name, net):
            raise StateError(f"consolidation state does not cover group {name}")
        theta = groups[name]
        b = cstate.b[name][present]
        target = cstate.target[name][present]
        cur = theta[present]
        moved = cur - lr * g[present]
        k = 2.0 * lr * b
        stiff = k > 1.0
        new = moved - k * (cur - target)
        if stiff.any():
            new[stiff] = (moved[stiff] + k[stiff] * target[stiff]) / (1.0 + k[stiff])
        bad = ~np.isfinite(new)
        if bad.any():
            flat = np.flatnonzero(present)[np.flatnonzero(bad)[0]]
            pos = np.unravel_index(flat, theta.shape)
            column, rows, cols = net.group_ids(name)
            pid = ParamId(column, name, int(rows[pos[0]]), int(cols[pos[1]]) if len(pos) > 1 else -1)
            raise NumericalError(f"non-finite update at {pid}", pid)
        theta[present] = new
    net.touch()
    return net


@dataclass
class LossTerm:
    """One dataset contributing to a training objective.

    With one task the loss is that head's cross-entropy; with several,
    labels index the concatenation of their classes (single-head loss).
    """

    X: np.ndarray
    y: np.ndarray
    tasks: tuple[int, ...]
    entry: str = INPUT

    def gradient(self, net, cstate, idx=None) -> tuple[float, Gradient]:
        X, y = (self.X, self.y) if idx is None else (self.X[idx], self.y[idx])
        trace = propagate(net, X, self.tasks, self.entry)
        if len(self.tasks) == 1:
            logits = trace.acts[net.head(self.tasks[0]).key]
            return task_loss(logits, y), backward(net, trace, y, self.tasks[0], cstate)
        logits = joint_logits(trace, net, self.tasks)
        return task_loss(logits, y), backward_joint(net, trace, y, self.tasks, cstate)


def objective(net: ColumnarNetwork, cstate: ConsolidationState, X: np.ndarray, y: np.ndarray,
              task: int) -> tuple[float, Gradient]:
    """Data loss plus consolidation penalty, with the gradient of the sum."""
    logits, trace = forward(net, X, task)
    grad = backward(net, trace, y, task, cstate)
    for name, g in cstate.penalty_grad(net).items():
        grad.arrays[name] = np.where(grad.present[name], grad.arrays[name] + g, 0.0)
    return task_loss(logits, y) + cstate.penalty(net), grad


Regularizer = Callable[[ColumnarNetwork], tuple[float, dict[str, np.ndarray]]]


def _batches(n: int, batch_size: int | None, rng: np.random.Generator | None) -> list[np.ndarray | None]:
    if batch_size is None or batch_size >= n:
        return [None]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def fit(net: ColumnarNetwork, cstate: ConsolidationState, terms: Sequence[LossTerm],
        epochs: int, lr: float = DEFAULT_LR, batch_size: int | None = None,
        rng: np.random.Generator | None = None, momentum: float = 0.0,
        regularizer: Regularizer | None = None, until: Callable[[], bool] | None = None,
        check_every: int = 10) -> list[float]:
    """Minimise the summed data loss plus the consolidation penalty.

    Full-batch by default. With ``batch_size`` each term is shuffled every
    epoch and the k-th step uses the k-th chunk of every term (cycling for
    shorter terms). ``until`` is polled every ``check_every`` epochs and
    stops training early when it returns True. Returns the total loss seen
    at each epoch run.
    """
    if not terms:
        raise DataError("nothing to train on")
    if momentum and not 0.0 <= momentum < 1.0:
        raise ConfigError("momentum must be in [0, 1)")
    velocity: dict[str, np.ndarray] | None = None
    history = []
    for _ in range(epochs):
        chunks = [_batches(len(t.y), batch_size, rng) for t in terms]
        steps = max(len(c) for c in chunks)
        epoch_loss = 0.0
        for s in range(steps):
            total = 0.0
            grad = None
            for term, ch in zip(terms, chunks):
                value, g = term.gradient(net, cstate, ch[s % len(ch)])
                total += value
                grad = g if grad is None else grad + g
            if regularizer is not None:
                value, extra = regularizer(net)
                total += value
                for k, v in extra.items():
                    grad.arrays[k] = grad.arrays[k] + np.where(grad.present[k], v, 0.0)
            if momentum:
                if velocity is None:
                    velocity = {k: np.zeros_like(v) for k, v in grad.arrays.items()}
                for k, v in grad.arrays.items():
                    velocity[k] = momentum * velocity.get(k, np.zeros_like(v)) + v
                grad = Gradient(net, dict(velocity), grad.present)
            epoch_loss += total + cstate.penalty(net)
            apply_step(net, grad, cstate, lr)
        history.append(epoch_loss / steps)
        if until is not None and len(history) % check_every == 0 and until():
            break
    return history


def predict(net: ColumnarNetwork, X: np.ndarray, task: int) -> np.ndarray:
    logits, _ = forward(net, X, task)
    return logits.argmax(axis=1)


def accuracy(net: ColumnarNetwork, X: np.ndarray, y: np.ndarray, task: int) -> float:
    if len(y) == 0:
        raise DataError("empty evaluation set")
    return float((predict(net, X, task) == np.asarray(y)).mean())
