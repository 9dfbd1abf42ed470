"""Dynamic columnar architecture: recruiting, staged growth and node pruning."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .consolidation import MASK, ConsolidationState
from .errors import CapacityError, ConfigError, ConstraintError, DataError
from .network import INPUT, Column, ColumnarNetwork, glorot_uniform
from . import netcore

NodeImportance = dict[tuple[int, str, int], float]


def recruit_column(net: ColumnarNetwork, task: int, widths: Sequence[int], n_classes: int,
                   rng: np.random.Generator, sources: Iterable[int] | str | None = "all",
                   cstate: ConsolidationState | None = None, depth: int | None = None,
                   owners: Iterable[int] | None = None) -> Column:
    """Append a freshly initialised column and a head for ``task``.

    Transfer links (zero-initialised) join hidden layer ``l`` of each source
    column to hidden layer ``l`` of the new column, for every depth both
    columns have. Existing parameters are not touched.
    """
    widths = [int(w) for w in widths]
    if depth is not None and depth != len(widths):
        raise ConfigError(f"depth {depth} does not match {len(widths)} widths")
    if not widths:
        raise ConfigError("a column needs at least one hidden layer")
    if min(widths) < 1:
        raise ConfigError("hidden widths must be >= 1")
    if task in net.heads:
        raise ConfigError(f"task {task} already has a column")
    if sources == "all":
        src_cols = [c for c in net.columns if not c.shared]
    else:
        src_cols = [net.columns[i] for i in (sources or ())]
    col = net.new_column(owners if owners is not None else (task,))
    prev = [INPUT]
    for depth_i, width in enumerate(widths):
        layer = net.add_hidden(col.index, depth_i, width)
        for p in prev:
            net.connect(p, layer.key, glorot_uniform(rng, width, net.layers[p].width), "intra")
        for src in src_cols:
            if depth_i < src.depth:
                for skey in src.layers[depth_i]:
                    net.connect(skey, layer.key, np.zeros((width, net.layers[skey].width)), "transfer")
        prev = [layer.key]
    head = net.add_head(task, col.index, n_classes)
    net.connect(prev[0], head.key, glorot_uniform(rng, n_classes, widths[-1]), "head")
    net.check_dag()
    if cstate is not None:
        cstate.sync(net)
    return col


def column_width(net: ColumnarNetwork, col: Column, depth: int) -> int:
    return sum(net.layers[k].width for k in col.layers[depth])


def staged_expand(net: ColumnarNetwork, task: int, residual: np.ndarray, stage_width: int,
                  rng: np.random.Generator, cstate: ConsolidationState,
                  max_width: int = 64) -> list[str]:
    """Add ``stage_width`` nodes per hidden depth of the task's column.

    New nodes read every node below them; everything that existed before in
    the column (and its head) is masked. Links from new nodes into earlier
    stages start at zero and stay masked, links into the head start at zero
    and are trainable, so the network output is unchanged by the call.
    Returns the new layer keys.
    """
    if residual is None or len(residual) == 0:
        raise DataError("staged expansion needs a non-empty residual set")
    if stage_width < 1:
        raise ConfigError("stage width must be >= 1")
    col = net.column_of(task)
    for d in range(col.depth):
        if column_width(net, col, d) + stage_width > max_width:
            raise CapacityError(f"column {col.index} depth {d} would exceed width {max_width}")
    head = net.head(task)
    cstate.sync(net)
    old_groups = [k for k in _column_groups(net, col)] + [head.key] + [l.name for l in net.incoming(head.key)]
    for name in old_groups:
        cstate.assign(net, name, MASK)
    stage = 1 + max(net.layers[k].stage for keys in col.layers for k in keys)
    new_keys: list[str] = []
    masked_links: list[str] = []
    for d in range(col.depth):
        old_here = list(col.layers[d])
        layer = net.add_hidden(col.index, d, stage_width, stage=stage)
        below = [INPUT] if d == 0 else col.layers[d - 1]
        for p in below:
            net.connect(p, layer.key, glorot_uniform(rng, stage_width, net.layers[p].width), "intra")
        transfer_srcs = []
        for k in old_here:
            transfer_srcs += [l.src for l in net.incoming(k) if l.kind == "transfer" and l.src not in transfer_srcs]
        for s in transfer_srcs:
            net.connect(s, layer.key, glorot_uniform(rng, stage_width, net.layers[s].width), "transfer")
        if d + 1 < col.depth:
            for k in col.layers[d + 1]:
                link = net.connect(layer.key, k, np.zeros((net.layers[k].width, stage_width)), "intra")
                masked_links.append(link.name)
        new_keys.append(layer.key)
    net.connect(new_keys[-1], head.key, np.zeros((head.width, stage_width)), "head")
    net.check_dag()
    cstate.sync(net)
    for name in masked_links:
        cstate.assign(net, name, MASK)
    return new_keys


def _column_groups(net: ColumnarNetwork, col: Column) -> list[str]:
    out = []
    for keys in col.layers:
        for k in keys:
            out.append(k)
            out.extend(l.name for l in net.incoming(k))
    return out


def grow_until_learned(net: ColumnarNetwork, cstate: ConsolidationState, task: int,
                       X: np.ndarray, y: np.ndarray, stage_width: int, rng: np.random.Generator,
                       epochs: int, lr: float, max_stages: int = 5, max_width: int = 64,
                       stop_fraction: float = 0.01, batch_size: int | None = None) -> list[int]:
    """Multi-stage learning: each stage trains new nodes on still-misclassified samples.

    The stage loss is the residual term plus an anchor term over all of the
    task's samples, so new nodes do not undo what earlier stages got right.
    Stops when fewer than ``stop_fraction`` of the samples remain wrong or
    after ``max_stages`` stages. Returns the residual size before each stage.
    """
    sizes = []
    for _ in range(max_stages):
        wrong = netcore.predict(net, X, task) != y
        if wrong.mean() < stop_fraction:
            break
        sizes.append(int(wrong.sum()))
        staged_expand(net, task, X[wrong], stage_width, rng, cstate, max_width)
        terms = [netcore.LossTerm(X[wrong], y[wrong], (task,)), netcore.LossTerm(X, y, (task,))]
        netcore.fit(net, cstate, terms, epochs, lr,
                    batch_size=batch_size, rng=rng)
    return sizes


def hidden_layers(net: ColumnarNetwork, task: int) -> list[str]:
    col = net.column_of(task)
    return [k for keys in col.layers for k in keys]


def compute_importance(net: ColumnarNetwork, task: int, data: np.ndarray) -> NodeImportance:
    """Mean |activation| over ``data`` times the L1 norm of each node's outgoing weights."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise DataError("importance needs a non-empty sample matrix")
    keys = hidden_layers(net, task)
    trace = netcore.propagate(net, data, (task,))
    scores: NodeImportance = {}
    for key in keys:
        layer = net.layers[key]
        if key in trace.acts:
            act = np.abs(trace.acts[key]).mean(axis=0)
        else:
            act = np.abs(netcore.activate(_standalone_pre(net, trace, key), layer.activation)).mean(axis=0)
        out = np.zeros(layer.width)
        for link in net.outgoing(key):
            out += np.abs(link.weights).sum(axis=0)
        for node, s in zip(layer.node_ids, act * out):
            scores[(layer.column, key, int(node))] = float(s)
    return scores


def _standalone_pre(net, trace, key):
    # Layer not on the head path: evaluate it from whatever the trace holds.
    layer = net.layers[key]
    n = next(iter(trace.acts.values())).shape[0]
    z = np.broadcast_to(layer.bias, (n, layer.width)).copy()
    for link in net.incoming(key):
        if link.src not in trace.acts:
            trace.acts[link.src] = netcore.activate(_standalone_pre(net, trace, link.src),
                                                    net.layers[link.src].activation)
        z += trace.acts[link.src] @ link.weights.T
    return z


def transfer_consumed(net: ColumnarNetwork, key: str) -> np.ndarray:
    """Boolean per node of ``key``: feeds a later column through a non-zero link."""
    layer = net.layers[key]
    used = np.zeros(layer.width, dtype=bool)
    for link in net.outgoing(key):
        if link.kind == "transfer":
            used |= (link.weights != 0).any(axis=0)
    return used


def prune_nodes(net: ColumnarNetwork, task: int, keep_fraction: float, importance: NodeImportance,
                cstate: ConsolidationState | None = None, override: bool = False) -> int:
    """Drop the least important nodes of each hidden layer of the task's column.

    Each layer keeps ``ceil(keep_fraction * width)`` nodes. Nodes feeding a
    later column are exempt unless ``override``. Returns the number freed.
    """
    if not 0 < keep_fraction <= 1:
        raise ConfigError("keep_fraction must be in (0, 1]")
    plan: dict[str, list[int]] = {}
    for key in hidden_layers(net, task):
        layer = net.layers[key]
        n_remove = layer.width - math.ceil(keep_fraction * layer.width)
        if n_remove <= 0:
            continue
        try:
            score = np.array([importance[(layer.column, key, int(i))] for i in layer.node_ids])
        except KeyError:
            raise DataError(f"importance does not cover layer {key}") from None
        allowed = np.ones(layer.width, dtype=bool) if override else ~transfer_consumed(net, key)
        cand = np.flatnonzero(allowed)
        if len(cand) < n_remove:
            raise ConstraintError(f"pruning {key} would remove nodes used by later tasks")
        order = cand[np.lexsort((layer.node_ids[cand], score[cand]))]
        plan[key] = [int(layer.node_ids[i]) for i in order[:n_remove]]
    freed = sum(net.remove_nodes(key, ids) for key, ids in plan.items())
    if cstate is not None:
        cstate.sync(net)
    return freed

