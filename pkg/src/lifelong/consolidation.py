"""Per-parameter consolidation state and the quadratic restraint penalty.

Each scalar parameter carries a strength ``b >= 0`` (or :data:`MASK`) and a
target value. The training objective is::

    L(theta) = L_t(theta) + sum_i b_i * (theta_i - target_i) ** 2

``MASK`` removes a parameter from updates entirely. Entries can also be
*pinned*: pinned entries keep their value/target through later bulk
freeze/unfreeze edits (used for permanently blocked transfer links).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .errors import ConfigError, UnknownTaskError
from .network import ColumnarNetwork, ParamId

SNAPSHOT = "snapshot"
ZERO = "zero"


class _Mask:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MASK"

    def __reduce__(self):
        return (_Mask, ())


MASK = _Mask()

ConsolidationValue = Union[float, _Mask]


def _as_b(value: ConsolidationValue) -> float:
    if value is MASK:
        return math.inf
    b = float(value)
    if not b >= 0 or math.isinf(b):
        raise ConfigError(f"consolidation value must be finite and >= 0, got {value!r}")
    return b


class ConsolidationState:
    """Consolidation strength, target and mode for every live parameter."""

    def __init__(self, net: ColumnarNetwork | None = None):
        self.b: dict[str, np.ndarray] = {}
        self.target: dict[str, np.ndarray] = {}
        self.zero: dict[str, np.ndarray] = {}
        self.pinned: dict[str, np.ndarray] = {}
        self._ids: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        if net is not None:
            self.sync(net)

    def copy(self) -> "ConsolidationState":
        out = ConsolidationState()
        for attr in ("b", "target", "zero", "pinned"):
            setattr(out, attr, {k: v.copy() for k, v in getattr(self, attr).items()})
        out._ids = dict(self._ids)
        return out

    def sync(self, net: ColumnarNetwork) -> None:
        """Re-align entries with the network after structural edits.

        Surviving scalars keep their entries (matched by node id); new scalars
        start unfrozen (b = 0) with a snapshot of their current value.
        """
        groups = net.groups()
        for name in list(self.b):
            if name not in groups:
                for attr in (self.b, self.target, self.zero, self.pinned, self._ids):
                    del attr[name]
        for name, theta in groups.items():
            _, rows, cols = net.group_ids(name)
            fresh = {
                "b": np.zeros(theta.shape),
                "target": theta.copy(),
                "zero": np.zeros(theta.shape, dtype=bool),
                "pinned": np.zeros(theta.shape, dtype=bool),
            }
            if name in self._ids:
                old_rows, old_cols = self._ids[name]
                if np.array_equal(old_rows, rows) and np.array_equal(old_cols, cols):
                    continue
                r_new, r_old = _match(rows, old_rows)
                if theta.ndim == 1:
                    for attr in fresh:
                        fresh[attr][r_new] = getattr(self, attr)[name][r_old]
                else:
                    c_new, c_old = _match(cols, old_cols)
                    for attr in fresh:
                        fresh[attr][np.ix_(r_new, c_new)] = getattr(self, attr)[name][np.ix_(r_old, c_old)]
            self.b[name] = fresh["b"]
            self.target[name] = fresh["target"]
            self.zero[name] = fresh["zero"]
            self.pinned[name] = fresh["pinned"]
            self._ids[name] = (rows.copy(), cols.copy())

    def covers(self, name: str, net: ColumnarNetwork) -> bool:
        return name in self.b and self.b[name].shape == net.groups()[name].shape

    def masked(self, name: str) -> np.ndarray:
        return np.isinf(self.b[name])

    def value(self, net: ColumnarNetwork, pid: ParamId) -> ConsolidationValue:
        name, pos = _locate(net, pid)
        b = self.b[name][pos]
        return MASK if math.isinf(b) else float(b)

    def target_of(self, net: ColumnarNetwork, pid: ParamId) -> float:
        name, pos = _locate(net, pid)
        return float(self.target[name][pos])

    def assign(self, net: ColumnarNetwork, name: str, value: ConsolidationValue,
               target_mode: str = SNAPSHOT, where: np.ndarray | None = None,
               force: bool = False, pin: bool | None = None) -> int:
        """Set ``value`` on (a subset of) one group; returns how many entries changed."""
        if target_mode not in (SNAPSHOT, ZERO):
            raise ConfigError(f"unknown target mode {target_mode!r}")
        b = _as_b(value)
        theta = net.groups()[name]
        sel = np.ones(theta.shape, dtype=bool) if where is None else np.asarray(where, dtype=bool)
        if not force:
            sel = sel & ~self.pinned[name]
        self.b[name][sel] = b
        self.zero[name][sel] = target_mode == ZERO
        self.target[name][sel] = 0.0 if target_mode == ZERO else theta[sel]
        if pin is not None:
            self.pinned[name][sel] = pin
        return int(sel.sum())

    def penalty(self, net: ColumnarNetwork) -> float:
        """Sum of b * (theta - target)^2 over finite entries."""
        total = 0.0
        for name, theta in net.groups().items():
            b = self.b[name]
            finite = ~np.isinf(b)
            d = theta[finite] - self.target[name][finite]
            total += float(np.sum(b[finite] * d * d))
        return total

    def penalty_grad(self, net: ColumnarNetwork) -> dict[str, np.ndarray]:
        out = {}
        for name, theta in net.groups().items():
            b = np.where(np.isinf(self.b[name]), 0.0, self.b[name])
            out[name] = 2.0 * b * (theta - self.target[name])
        return out

    def count(self, predicate) -> int:
        return int(sum(predicate(v).sum() for v in self.b.values()))


def _match(new_ids: np.ndarray, old_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    common, i_new, i_old = np.intersect1d(new_ids, old_ids, return_indices=True)
    return i_new, i_old


def _locate(net: ColumnarNetwork, pid: ParamId) -> tuple[str, tuple[int, ...]]:
    _, rows, cols = net.group_ids(pid.layer)
    r = int(np.flatnonzero(rows == pid.row)[0])
    if pid.col == -1:
        return pid.layer, (r,)
    return pid.layer, (r, int(np.flatnonzero(cols == pid.col)[0]))


def penalty(net: ColumnarNetwork, cstate: ConsolidationState) -> float:
    return cstate.penalty(net)


@dataclass(frozen=True)
class ParamSelector:
    """Group-level predicate over parameters.

    Every field left as ``None`` is unconstrained. ``columns`` and ``depths``
    refer to the destination layer of a group; ``heads`` picks head layers by
    task id; ``sources`` restricts links by source column (-1 is the input).
    """

    columns: frozenset[int] | None = None
    depths: tuple[int, int] | None = None
    kinds: frozenset[str] | None = None
    heads: frozenset[int] | None = None
    sources: frozenset[int] | None = None
    include_bias: bool = True

    def resolve(self, net: ColumnarNetwork) -> list[str]:
        head_keys = None if self.heads is None else {net.heads[t] for t in self.heads if t in net.heads}
        out = []
        for name in net.groups():
            if name in net.links:
                link = net.links[name]
                dst, src = net.layers[link.dst], net.layers[link.src]
                kind, source = link.kind, src.column
            else:
                if not self.include_bias:
                    continue
                dst = net.layers[name]
                kind = "head" if dst.kind == "head" else "intra"
                source = None
            is_head = dst.kind == "head"
            if self.kinds is not None and kind not in self.kinds:
                continue
            if self.heads is not None and not (is_head and dst.key in head_keys):
                continue
            if self.columns is not None and (is_head or dst.column not in self.columns):
                continue
            if self.depths is not None and (is_head or not self.depths[0] <= dst.depth <= self.depths[1]):
                continue
            if self.sources is not None and (source is None or source not in self.sources):
                continue
            out.append(name)
        return out


def set_consolidation(cstate: ConsolidationState, net: ColumnarNetwork, sel: ParamSelector,
                      value: ConsolidationValue, target_mode: str = SNAPSHOT,
                      force: bool = False) -> int:
    """Apply one value to every selected entry; returns the number updated."""
    return sum(cstate.assign(net, name, value, target_mode, force=force)
               for name in sel.resolve(net))


def owned_selectors(net: ColumnarNetwork, tasks: Iterable[int]) -> list[ParamSelector]:
    """Selectors covering the columns (with incoming links) and heads of ``tasks``."""
    tasks = frozenset(tasks)
    for t in tasks:
        if t not in net.heads:
            raise UnknownTaskError(f"unknown task {t!r}")
    if not tasks:
        return []
    cols = frozenset(c.index for c in net.columns if tasks & set(c.owners))
    return [ParamSelector(columns=cols), ParamSelector(heads=tasks)]


def freeze_tasks(cstate: ConsolidationState, net: ColumnarNetwork, tasks: Iterable[int],
                 level: ConsolidationValue | str = "hard") -> int:
    """Freeze columns, incoming links and heads of ``tasks``.

    ``level`` is ``"hard"`` (MASK) or a finite strength with snapshot targets.
    """
    value = MASK if level in ("hard", MASK) else float(level)
    return sum(set_consolidation(cstate, net, s, value) for s in owned_selectors(net, tasks))


def unfreeze_tasks(cstate: ConsolidationState, net: ColumnarNetwork, tasks: Iterable[int]) -> int:
    return sum(set_consolidation(cstate, net, s, 0.0) for s in owned_selectors(net, tasks))


def unfreeze_all(cstate: ConsolidationState, net: ColumnarNetwork) -> int:
    return set_consolidation(cstate, net, ParamSelector(), 0.0)


def fisher_diagonal(net: ColumnarNetwork, task: int, X: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    """Mean squared per-sample data gradient of one task's loss."""
    from .netcore import backward, forward

    acc = {k: np.zeros(v.shape) for k, v in net.groups().items()}
    for i in range(len(y)):
        _, trace = forward(net, X[i:i + 1], task)
        g = backward(net, trace, y[i:i + 1], task)
        for k, v in g.arrays.items():
            acc[k] += v * v
    return {k: v / max(len(y), 1) for k, v in acc.items()}


def consolidate_fisher(cstate: ConsolidationState, net: ColumnarNetwork, task: int,
                       X: np.ndarray, y: np.ndarray, scale: float = 1.0) -> int:
    """EWC-style plug-in: b = scale * Fisher diagonal on the task's owned params."""
    fisher = fisher_diagonal(net, task, X, y)
    n = 0
    for sel in owned_selectors(net, [task]):
        for name in sel.resolve(net):
            free = ~cstate.pinned[name] & ~cstate.masked(name)
            cstate.b[name][free] = scale * fisher[name][free]
            cstate.zero[name][free] = False
            cstate.target[name][free] = net.groups()[name][free]
            n += int(free.sum())
    return n
