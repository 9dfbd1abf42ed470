"""Consolidation policies: the lifelong-learning algorithms built on the core.

:class:`Learner` owns one network, its consolidation state, rehearsal
buffers and accuracy log, and exposes one method per algorithm: learning a
new task (with forward transfer and non-forgetting), overall refinement,
drift adaptation, confusion reduction, graceful forgetting and curriculum
ordering. :class:`RandomNetworkLearner` is the frozen-random-features variant.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import architect, metrics, netcore
from .consolidation import MASK, ZERO, ConsolidationState, unfreeze_all
from .errors import CapacityError, ConfigError, ConstraintError, DataError, StateError
from .network import INPUT, ColumnarNetwork, glorot_uniform
from .tasks import RehearsalBuffer, Split, TaskData, TaskSpec, concat, gen_task

log = logging.getLogger(__name__)

FORGET_MODES = ("prune", "lower_b", "shrink_buffer")


@dataclass
class PolicyConfig:
    """Every knob the policies leave open, with desk-scale defaults."""

    b_large: float = 1e3
    b_small: float = 0.0
    freeze: str = "soft"
    copy_threshold: float = 0.9
    partial_threshold: float = 0.3
    block_threshold: float = 0.0
    transfer: bool = True
    mask_transfer: bool = False
    shared_column: bool = False
    epochs: int = 300
    lr: float = netcore.DEFAULT_LR
    batch_size: int | None = None
    momentum: float = 0.0
    target_accuracy: float | None = None
    width: int = 16
    depth: int = 1
    min_width: int = 2
    max_width: int = 64
    width_decay: float = 1.0
    capacity: int | None = None
    stage_width: int = 4
    max_stages: int = 5
    prune_keep: float | None = None
    accuracy_floor: float = 0.7
    forget_mode: str = "prune"
    forget_b: float = 1.0
    forget_buffer: int = 10
    forget_override: bool = False
    sparsity: float = 1e-3
    sparsity_epochs: int = 100
    confusion_threshold: float = 0.10
    confusion_epochs: int = 300
    confusion_width: int = 8
    drift_error: float = 0.10
    drift_epochs: int = 200
    refine_epochs: int = 100
    rehearsal_size: int = 40
    probe_epochs: int = 50
    probe_lr: float = 5.0
    probe_baselines: int = 3
    skip_rehearsal_steps: bool = False
    freeze_oldest: int = 0
    difficulty_epochs: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.copy_threshold > self.partial_threshold > self.block_threshold:
            raise ConfigError("similarity thresholds must satisfy copy > partial > block")
        if not 0.0 <= self.accuracy_floor <= 1.0:
            raise ConfigError("accuracy_floor must be in [0, 1]")
        if self.target_accuracy is not None and not 0.0 <= self.target_accuracy <= 1.0:
            raise ConfigError("target_accuracy must be in [0, 1]")
        if self.freeze not in ("soft", "hard"):
            raise ConfigError("freeze must be 'soft' or 'hard'")
        if self.forget_mode not in FORGET_MODES:
            raise ConfigError(f"forget_mode must be one of {FORGET_MODES}")
        if self.b_large < 0 or self.b_small < 0:
            raise ConfigError("consolidation values must be >= 0")
        if not self.lr > 0 or self.epochs < 0:
            raise ConfigError("lr must be > 0 and epochs >= 0")
        if self.prune_keep is not None and not 0 < self.prune_keep <= 1:
            raise ConfigError("prune_keep must be in (0, 1]")

    def replace(self, **changes) -> "PolicyConfig":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown policy fields: {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Report:
    """Structured record of one policy operation."""

    op: str
    task: int | None = None
    losses: list[float] = field(default_factory=list)
    accuracy: dict[int, float] = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "task": self.task,
            "epochs": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
            "accuracy": {str(k): v for k, v in self.accuracy.items()},
            "details": _jsonable(self.details),
            "seconds": self.seconds,
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def linear_probe(train: Split, test: Split, n_classes: int, epochs: int, lr: float) -> float:
    """Held-out expected accuracy of a zero-initialised softmax head trained on fixed features.

    Expected accuracy is the mean probability given to the true class. It
    stays graded when any linear readout separates the classes, where the
    argmax accuracy of both probes would sit at 1.
    """
    net = ColumnarNetwork(train.X.shape[1])
    head = net.add_head(0, -1, n_classes)
    net.connect(INPUT, head.key, np.zeros((n_classes, train.X.shape[1])), "head")
    cs = ConsolidationState(net)
    netcore.fit(net, cs, [netcore.LossTerm(train.X, train.y, (0,))], epochs, lr)
    logits, _ = netcore.forward(net, test.X, 0)
    p = np.exp(netcore.log_softmax(logits))
    return float(p[np.arange(len(test.y)), test.y].mean())


def _features(net: ColumnarNetwork, keys: Sequence[str], X: np.ndarray, task: int) -> np.ndarray:
    trace = netcore.propagate(net, X, (task,))
    return np.concatenate([trace.acts[k] for k in keys], axis=1)


def random_features(widths: Sequence[int], X: np.ndarray, rng: np.random.Generator,
                    activation: str = "relu") -> np.ndarray:
    h = X
    for w in widths:
        W = glorot_uniform(rng, w, h.shape[1])
        h = netcore.activate(h @ W.T, activation)
    return h


class Learner:
    """Lifelong learner over a dynamically expanding columnar network.

    Args:
        cfg: policy configuration.
        input_width: feature width of every task.
        seed: seeds weight initialisation, probes and buffers.
    """

    def __init__(self, cfg: PolicyConfig | None = None, input_width: int = 16, seed: int = 0):
        self.cfg = cfg or PolicyConfig()
        self.seed = seed
        self.net = ColumnarNetwork(input_width)
        self.cstate = ConsolidationState(self.net)
        self.rng = np.random.default_rng(seed)
        self.buffers = RehearsalBuffer(self.cfg.rehearsal_size, seed + 1)
        self.data: dict[int, TaskData] = {}
        self.order: list[int] = []
        self.matrix = metrics.AccuracyMatrix()
        self.reports: list[Report] = []
        self.freed = 0
        self.buffer_entry = INPUT

    # -- helpers ---------------------------------------------------------------

    @property
    def tasks(self) -> list[int]:
        return list(self.order)

    def _fit(self, terms, epochs, until=None, regularizer=None, lr=None) -> list[float]:
        cfg = self.cfg
        return netcore.fit(self.net, self.cstate, terms, epochs, lr or cfg.lr, cfg.batch_size,
                           self.rng, cfg.momentum, regularizer=regularizer, until=until)

    def _level(self):
        return MASK if self.cfg.freeze == "hard" else self.cfg.b_large

    def _groups_feeding(self, tasks: Iterable[int]) -> list[str]:
        """Parameter groups that influence the heads of ``tasks``."""
        net = self.net
        self.cstate.sync(net)
        live = [l for l in net.links.values() if not self._dead(l)]
        keys: set[str] = set()
        stack = [net.head(t).key for t in tasks]
        while stack:
            k = stack.pop()
            if k not in keys:
                keys.add(k)
                stack.extend(l.src for l in live if l.dst == k)
        keys.discard(INPUT)
        out = []
        for k in net.order():
            if k in keys:
                out.append(k)
                out.extend(l.name for l in net.incoming(k) if l in live)
        return out

    def _dead(self, link) -> bool:
        # zero, masked and pinned: can never carry signal again
        name = link.name
        return (not link.weights.any() and bool(self.cstate.masked(name).all())
                and bool(self.cstate.pinned[name].all()))

    def _owned_groups(self, tasks: Iterable[int]) -> list[str]:
        tasks = set(tasks)
        cols = {c.index for c in self.net.columns if tasks & set(c.owners)}
        heads = {self.net.head(t).key for t in tasks}
        out = []
        for k in self.net.order():
            layer = self.net.layers[k]
            if (layer.kind == "hidden" and layer.column in cols) or k in heads:
                out.append(k)
                out.extend(l.name for l in self.net.incoming(k))
        return out

    def protect(self, tasks: Iterable[int], level=None) -> int:
        """Freeze everything the heads of ``tasks`` depend on (snapshot targets)."""
        level = self._level() if level is None else level
        self.cstate.sync(self.net)
        return sum(self.cstate.assign(self.net, g, level) for g in self._groups_feeding(tasks))

    def release(self, tasks: Iterable[int], keep: Iterable[int] = ()) -> int:
        """Unfreeze the tasks' own units, then re-protect everything ``keep`` uses."""
        self.cstate.sync(self.net)
        n = sum(self.cstate.assign(self.net, g, self.cfg.b_small) for g in self._owned_groups(tasks))
        keep = list(keep)
        if keep:
            self.protect(keep)
        return n

    def _levels_for_old(self) -> dict[int, object]:
        """Consolidation level per previously learned task (oldest first)."""
        out = {}
        for i, t in enumerate(self.order):
            out[t] = MASK if i < self.cfg.freeze_oldest else self._level()
        return out

    def _protect_all(self, exclude: Iterable[int] = ()) -> None:
        exclude = set(exclude)
        levels = self._levels_for_old()
        # hard levels last so a shared ancestor keeps the strongest setting
        for t in sorted(levels, key=lambda t: levels[t] is MASK):
            if t not in exclude:
                self.protect([t], levels[t])

    def evaluate(self, kind: str, subject: int | None) -> metrics.Event:
        """Record test accuracy (multi- and single-head) on every task so far."""
        tasks = self.tasks
        acc, single, preds = {}, {}, {}
        offset = 0
        for t in tasks:
            test = self.data[t].test
            multi = netcore.predict(self.net, test.X, t)
            glob = metrics.single_head_predictions(self.net, tasks, test.X)
            acc[t] = float((multi == test.y).mean())
            single[t] = float((glob == test.y + offset).mean())
            preds[t] = {"y": test.y.tolist(), "multi": multi.tolist(), "single": glob.tolist(),
                        "offset": offset}
            offset += self.net.head(t).width
        return self.matrix.record(kind, subject, acc, single, preds)

    def test_accuracy(self) -> dict[int, float]:
        return {t: netcore.accuracy(self.net, self.data[t].test.X, self.data[t].test.y, t)
                for t in self.tasks}

    def _accuracy_until(self, task: int, split: Split, target: float | None):
        if target is None:
            return None
        return lambda: netcore.accuracy(self.net, split.X, split.y, task) >= target

    def live_nodes(self) -> int:
        return sum(l.width for l in self.net.layers.values() if l.kind == "hidden")

    # -- similarity ------------------------------------------------------------

    def estimate_similarity(self, earlier: int, new_data: TaskData) -> float:
        """Frozen-feature probe score of how much ``earlier`` helps the new task.

        A fresh head is trained alone on the earlier column's top features
        (held-out expected accuracy ``a``) and on features of untrained random
        columns of the same shape (mean ``a0``); the score is
        ``(a - a0) / (1 - a0)`` clamped to [-1, 1].
        """
        if earlier not in self.net.trained:
            raise StateError(f"task {earlier} has not been trained")
        col = self.net.column_of(earlier)
        keys = col.top()
        train, held = new_data.train, new_data.val
        n_classes = int(max(train.y.max(), held.y.max())) + 1
        cfg = self.cfg
        a = linear_probe(Split(_features(self.net, keys, train.X, earlier), train.y),
                         Split(_features(self.net, keys, held.X, earlier), held.y),
                         n_classes, cfg.probe_epochs, cfg.probe_lr)
        widths = [architect.column_width(self.net, col, d) for d in range(col.depth)]
        both = np.concatenate([train.X, held.X])
        a0 = float(np.mean([
            linear_probe(Split(f[:len(train)], train.y), Split(f[len(train):], held.y),
                         n_classes, cfg.probe_epochs, cfg.probe_lr)
            for f in (random_features(widths, both, np.random.default_rng([self.seed, earlier, i]))
                      for i in range(cfg.probe_baselines))]))
        if a0 >= 1.0:
            return 0.0
        return float(np.clip((a - a0) / (1.0 - a0), -1.0, 1.0))

    def similarity_vector(self, new_data: TaskData) -> dict[int, float]:
        return {t: self.estimate_similarity(t, new_data) for t in self.tasks}

    # -- new tasks ----------------------------------------------------------------

    def _widths(self, simvec: Mapping[int, float]) -> list[int]:
        cfg = self.cfg
        cols = [c for c in self.net.columns if not c.shared]
        depth = cols[0].depth if cols else cfg.depth
        base = cfg.width * cfg.width_decay ** len(cols)
        max_sim = max([0.0] + list(simvec.values()))
        width = max(cfg.min_width, math.ceil(base * (1.0 - max_sim)))
        return [width] * depth

    def _make_room(self, needed: int) -> None:
        """Gracefully forget old tasks (oldest first) until ``needed`` nodes fit."""
        cap = self.cfg.capacity
        if cap is None:
            return
        for t in list(self.order):
            if self.live_nodes() + needed <= cap:
                return
            try:
                self.graceful_forget(t)
            except (ConstraintError, CapacityError) as exc:
                log.info("could not free units from task %s: %s", t, exc)

    def learn_new_task(self, task: int, data: TaskData, n_classes: int | None = None) -> Report:
        """Recruit, initialise from similar tasks, freeze the past, train, optionally prune."""
        t0 = time.perf_counter()
        cfg = self.cfg
        if task in self.net.heads:
            raise ConfigError(f"task {task} has already been learned")
        n_classes = n_classes or int(data.train.y.max()) + 1
        details: dict = {}
        if cfg.shared_column and self.net.columns:
            first = self.order[0]
            if self.net.head(first).width == n_classes:
                self.net.alias_head(task, first)
            else:
                col = self.net.columns[0]
                head = self.net.add_head(task, col.index, n_classes)
                self.net.connect(col.top()[0], head.key,
                                 glorot_uniform(self.rng, n_classes, self.net.layers[col.top()[0]].width), "head")
            self.cstate.sync(self.net)
            unfreeze_all(self.cstate, self.net)
            if cfg.freeze == "soft" and cfg.b_large > 0:
                # every weight is shared, so old tasks can only be held softly
                self.protect(self.order, cfg.b_large)
            details["mode"] = "shared-column"
        else:
            simvec = self.similarity_vector(data) if (cfg.transfer and self.order) else {}
            details["similarity"] = simvec
            widths = self._copy_widths(simvec) or self._widths(simvec)
            self._make_room(sum(widths))
            if cfg.capacity is not None:
                room = cfg.capacity - self.live_nodes()
                if room < len(widths):
                    raise CapacityError(f"no room left for task {task}")
                widths = [min(w, room // len(widths)) for w in widths]
            # per-task init stream: an isolated run of the same task starts from the same column
            init_rng = np.random.default_rng([self.seed, task])
            architect.recruit_column(self.net, task, widths, n_classes, init_rng, "all", self.cstate)
            details["widths"] = widths
            details["transfer"] = self.forward_transfer_init(task, simvec)
            self._protect_all(exclude=[task])
        self.order.append(task)
        self.data[task] = data
        losses = self._fit([netcore.LossTerm(data.train.X, data.train.y, (task,))], cfg.epochs,
                           until=self._accuracy_until(task, data.val, cfg.target_accuracy))
        self.net.trained.add(task)
        if cfg.prune_keep is not None and cfg.prune_keep < 1 and not cfg.shared_column:
            imp = architect.compute_importance(self.net, task, data.train.X)
            details["pruned"] = architect.prune_nodes(self.net, task, cfg.prune_keep, imp, self.cstate)
        self._protect_all()
        self.buffers.update(task, data.train.X, data.train.y)
        ev = self.evaluate("learn", task)
        rep = Report("learn_new_task", task, losses, dict(ev.accuracy), details,
                     time.perf_counter() - t0)
        self.reports.append(rep)
        return rep

    def _copy_source(self, simvec: Mapping[int, float]) -> int | None:
        if not simvec or self.cfg.mask_transfer:
            return None
        best = max(simvec, key=lambda t: (simvec[t], -t))
        return best if simvec[best] >= self.cfg.copy_threshold else None

    def _copy_widths(self, simvec: Mapping[int, float]) -> list[int] | None:
        src = self._copy_source(simvec)
        if src is None:
            return None
        col = self.net.column_of(src)
        if any(len(keys) != 1 for keys in col.layers):
            return None
        return [architect.column_width(self.net, col, d) for d in range(col.depth)]

    def forward_transfer_init(self, task: int, simvec: Mapping[int, float]) -> dict[int, str]:
        """Initialise the new column and its transfer links from similarity scores.

        copy: duplicate the most similar column and head, links open with b_small;
        partial: small random links, b = 0; unrelated: zero links, b = 0;
        blocked (sim <= block threshold, or mask_transfer): zero links, pinned MASK.
        """
        cfg = self.cfg
        net, cs = self.net, self.cstate
        col_k = net.column_of(task)
        modes: dict[int, str] = {}
        src = self._copy_source(simvec)
        for j in self.order:
            links = self._links_between(net.column_of(j).index, col_k.index)
            s = simvec.get(j)
            if cfg.mask_transfer or (s is not None and s <= cfg.block_threshold):
                for link in links:
                    link.weights[...] = 0.0
                cs.sync(net)
                for link in links:
                    cs.assign(net, link.name, MASK, ZERO, force=True, pin=True)
                modes[j] = "blocked"
                continue
            if s is None:
                modes[j] = "none"
                continue
            mode = "unrelated"
            if j == src:
                mode = "copy" if self._copy_column(j, task) else "partial"
                if mode == "partial":
                    log.info("copy from task %s to %s fell back to partial mode", j, task)
            elif s >= cfg.partial_threshold:
                mode = "partial"
            if mode == "partial":
                for link in links:
                    n_out, n_in = link.weights.shape
                    link.weights[...] = 0.1 * glorot_uniform(self.rng, n_out, n_in)
            cs.sync(net)
            b = cfg.b_small
            for link in links:
                cs.assign(net, link.name, b)
            modes[j] = mode
        net.touch()
        return modes

    def _links_between(self, src_col: int, dst_col: int):
        return [l for l in self.net.links.values()
                if l.kind == "transfer" and self.net.layers[l.src].column == src_col
                and self.net.layers[l.dst].column == dst_col]

    def _copy_column(self, src_task: int, dst_task: int) -> bool:
        net = self.net
        a, b = net.column_of(src_task), net.column_of(dst_task)
        ha, hb = net.head(src_task), net.head(dst_task)
        if a.depth != b.depth or ha.width != hb.width:
            return False
        if any(len(k) != 1 for k in a.layers) or any(len(k) != 1 for k in b.layers):
            return False
        for d in range(a.depth):
            la, lb = net.layers[a.layers[d][0]], net.layers[b.layers[d][0]]
            if lb.width < la.width:
                return False
        for d in range(a.depth):
            la, lb = net.layers[a.layers[d][0]], net.layers[b.layers[d][0]]
            wa = la.width
            lb.bias[:wa] = la.bias
            src = INPUT if d == 0 else a.layers[d - 1][0]
            dst = INPUT if d == 0 else b.layers[d - 1][0]
            Wa = net.links[f"{src}>{la.key}"].weights
            Wb = net.links[f"{dst}>{lb.key}"].weights
            Wb[:wa] = 0.0
            Wb[:wa, :Wa.shape[1]] = Wa
        ta, tb = net.layers[a.layers[-1][0]], net.layers[b.layers[-1][0]]
        Ha = net.links[f"{ta.key}>{ha.key}"].weights
        Hb = net.links[f"{tb.key}>{hb.key}"].weights
        Hb[...] = 0.0
        Hb[:, :Ha.shape[1]] = Ha
        hb.bias[...] = ha.bias
        net.touch()
        self.cstate.sync(net)
        return True

    # -- refinement ---------------------------------------------------------------

    def _buffer_terms(self, tasks: Sequence[int]) -> list[netcore.LossTerm]:
        terms = []
        for t in tasks:
            split = self.buffers.get(t)
            if len(split) == 0:
                raise DataError(f"rehearsal buffer for task {t} is empty")
            terms.append(netcore.LossTerm(split.X, split.y, (t,), self.buffer_entry))
        return terms

    def overall_refinement(self, epochs: int | None = None) -> Report:
        """Unfreeze everything (b = 0) and train all tasks jointly on their buffers."""
        t0 = time.perf_counter()
        if not self.order:
            raise StateError("nothing learned yet")
        terms = self._buffer_terms(self.order)
        before = self.test_accuracy()
        self.cstate.sync(self.net)
        unfreeze_all(self.cstate, self.net)
        losses = self._fit(terms, self.cfg.refine_epochs if epochs is None else epochs)
        self._protect_all()
        after = self.test_accuracy()
        ev = self.evaluate("refine", None)
        rep = Report("overall_refinement", None, losses, dict(ev.accuracy),
                     {"before": before, "after": after,
                      "backward_transfer": {t: after[t] - before[t] for t in before}},
                     time.perf_counter() - t0)
        self.reports.append(rep)
        return rep

    # -- drift --------------------------------------------------------------------

    def _drift_phases(self, task: int) -> list[tuple[str, list[str]]]:
        net = self.net
        col = net.column_of(task)
        head = net.head(task).key
        head_groups = [head] + [l.name for l in net.incoming(head)]
        phases = [("head", head_groups)]
        layers = []
        for d in reversed(range(col.depth)):
            for k in col.layers[d]:
                layers += [k] + [l.name for l in net.incoming(k)]
            phases.append(("top" if d == col.depth - 1 else f"depth{d}", head_groups + layers))
        return phases

    def adapt_to_drift(self, task: int, new_data: TaskData) -> Report:
        """Retrain a learned task on new data, unfreezing from the output inwards.

        Phases: head only, then one more hidden depth of the task's column per
        failure, then staged expansion. Units that other tasks depend on stay
        frozen throughout, so other tasks only move within their soft restraint.
        """
        t0 = time.perf_counter()
        cfg = self.cfg
        if task not in self.net.trained:
            raise StateError(f"task {task} has not been learned")
        others = [t for t in self.order if t != task]
        train, val = new_data.train, new_data.val
        before = netcore.accuracy(self.net, val.X, val.y, task)
        phases_run, losses = [], []
        locked = set(self._groups_feeding(others))

        def error():
            return 1.0 - netcore.accuracy(self.net, val.X, val.y, task)

        def ok():
            return error() <= cfg.drift_error

        for name, groups in self._drift_phases(task):
            trainable = [g for g in groups if g not in locked]
            if phases_run and set(trainable) == set(phases_run[-1][1]):
                continue
            self.cstate.sync(self.net)
            for g in self._owned_groups([task]):
                self.cstate.assign(self.net, g, MASK)
            for g in trainable:
                self.cstate.assign(self.net, g, 0.0)
            self._protect_all(exclude=[task])
            losses += self._fit([netcore.LossTerm(train.X, train.y, (task,))], cfg.drift_epochs,
                                until=ok)
            phases_run.append((name, trainable))
            if ok():
                break
        stages = 0
        while not ok() and stages < cfg.max_stages:
            wrong = netcore.predict(self.net, train.X, task) != train.y
            try:
                architect.staged_expand(self.net, task, train.X[wrong], cfg.stage_width, self.rng,
                                        self.cstate, cfg.max_width)
            except (CapacityError, DataError) as exc:
                log.info("drift expansion stopped: %s", exc)
                break
            stages += 1
            head = self.net.head(task).key
            for g in [head] + [l.name for l in self.net.incoming(head)]:
                self.cstate.assign(self.net, g, 0.0)
            self._protect_all(exclude=[task])
            losses += self._fit([netcore.LossTerm(train.X, train.y, (task,))], cfg.drift_epochs,
                                until=ok)
            phases_run.append((f"expand{stages}", []))
        self.protect([task])
        self.data[task] = new_data
        self.buffers.shrink(task, 0)
        self.buffers.limits.pop(task, None)
        self.buffers.update(task, train.X, train.y)
        after = netcore.accuracy(self.net, val.X, val.y, task)
        ev = self.evaluate("drift", task)
        rep = Report("adapt_to_drift", task, losses, dict(ev.accuracy),
                     {"phases": [p for p, _ in phases_run], "expanded_stages": stages,
                      "val_before": before, "val_after": after}, time.perf_counter() - t0)
        self.reports.append(rep)
        return rep

    # -- confusion ----------------------------------------------------------------

    def confusion(self, source: str = "buffer") -> metrics.ConfusionMatrix:
        data = {t: (self.buffers.get(t) if source == "buffer" else self.data[t].test)
                for t in self.order}
        if source == "buffer" and self.buffer_entry != INPUT:
            return self._cached_confusion(data)
        return metrics.evaluate_single_head(self.net, self.order, data)

    def _cached_confusion(self, data):
        classes, offset = metrics._class_space(self.net, self.order)
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for t in self.order:
            split = data[t]
            logits = netcore.logits_for(self.net, split.X, self.order, self.buffer_entry)
            pred = np.concatenate([logits[u] for u in self.order], axis=1).argmax(axis=1)
            np.add.at(counts, (offset[t] + split.y, pred), 1)
        return metrics.ConfusionMatrix(counts, classes)

    def confused_tasks(self, cm: metrics.ConfusionMatrix) -> list[int]:
        rates = cm.task_confusion()
        ts = cm.tasks
        out = set()
        for i, a in enumerate(ts):
            for j, b in enumerate(ts):
                if i != j and rates[i, j] > self.cfg.confusion_threshold:
                    out |= {a, b}
        return [t for t in self.order if t in out]

    def _joint_term(self, tasks: Sequence[int]) -> netcore.LossTerm:
        parts, offset = [], 0
        for t in tasks:
            split = self.buffers.get(t)
            if len(split) == 0:
                raise DataError(f"rehearsal buffer for task {t} is empty")
            parts.append(Split(split.X, split.y + offset))
            offset += self.net.head(t).width
        union = concat(parts)
        return netcore.LossTerm(union.X, union.y, tuple(tasks), self.buffer_entry)

    def reduce_confusion(self) -> Report:
        """Fine-tune the confused tasks on a single-head loss; expand if that is not enough."""
        t0 = time.perf_counter()
        if len(self.order) < 2:
            raise StateError("confusion reduction needs at least two tasks")
        before = self.confusion()
        confused = self.confused_tasks(before)
        details: dict = {"before": before.task_confusion(), "confused": confused,
                         "test_before": self.confusion("test").task_confusion()}
        losses: list[float] = []
        if confused:
            others = [t for t in self.order if t not in confused]
            self.release(confused)
            self._protect_all(exclude=confused)
            term = self._joint_term(confused)
            losses += self._fit([term], self.cfg.confusion_epochs)
            mid = self.confusion()
            details["after_finetune"] = mid.task_confusion()
            if self.confused_tasks(mid) and self.buffer_entry == INPUT:
                details["recruited"] = self._recruit_shared(confused)
                self.release(confused)
                self._protect_all(exclude=confused)
                losses += self._fit([term], self.cfg.confusion_epochs)
            self._protect_all()
            details["others"] = others
        after = self.confusion()
        details["after"] = after.task_confusion()
        details["test_after"] = self.confusion("test").task_confusion()
        ev = self.evaluate("confusion", None)
        rep = Report("reduce_confusion", None, losses, dict(ev.accuracy), details,
                     time.perf_counter() - t0)
        self.reports.append(rep)
        return rep

    def _recruit_shared(self, tasks: Sequence[int]) -> str:
        """Add one shared hidden layer read by every confused head (zero-initialised outputs)."""
        net = self.net
        col = net.new_column(tuple(tasks), shared=True)
        w = self.cfg.confusion_width
        layer = net.add_hidden(col.index, 0, w)
        net.connect(INPUT, layer.key, glorot_uniform(self.rng, w, net.input_width), "intra")
        for t in tasks:
            for k in net.column_of(t).top():
                net.connect(k, layer.key, np.zeros((w, net.layers[k].width)), "transfer")
        for t in tasks:
            head = net.head(t)
            net.connect(layer.key, head.key, np.zeros((head.width, w)), "head")
        net.check_dag()
        self.cstate.sync(net)
        return layer.key

    # -- graceful forgetting ------------------------------------------------------

    def _group_lasso(self, keys: Sequence[str], lam: float):
        net = self.net

        def reg(_net):
            value, grads = 0.0, {}
            for k in keys:
                outs = net.outgoing(k)
                if not outs:
                    continue
                sq = sum((l.weights ** 2).sum(axis=0) for l in outs)
                norm = np.sqrt(sq)
                value += lam * float(norm.sum())
                safe = np.where(norm > 0, norm, 1.0)
                for l in outs:
                    grads[l.name] = grads.get(l.name, 0.0) + lam * l.weights / safe * (norm > 0)
            return value, grads

        return reg

    def graceful_forget(self, task: int, floor: float | None = None) -> Report:
        """Free capacity held by ``task`` while keeping its held-out accuracy >= floor."""
        t0 = time.perf_counter()
        cfg = self.cfg
        floor = cfg.accuracy_floor if floor is None else floor
        if task not in self.net.trained:
            raise StateError(f"task {task} has not been learned")
        details: dict = {"mode": cfg.forget_mode, "floor": floor}
        freed = 0
        losses: list[float] = []
        if cfg.forget_mode == "lower_b":
            self.cstate.sync(self.net)
            for g in self._owned_groups([task]):
                self.cstate.assign(self.net, g, cfg.forget_b)
        elif cfg.forget_mode == "shrink_buffer":
            self.buffers.shrink(task, cfg.forget_buffer)
            details["buffer"] = self.buffers.size(task)
        else:
            freed, losses, extra = self._prune_to_floor(task, floor)
            details.update(extra)
        self.freed += freed
        details["freed"] = freed
        ev = self.evaluate("forget", task)
        rep = Report("graceful_forget", task, losses, dict(ev.accuracy), details,
                     time.perf_counter() - t0)
        self.reports.append(rep)
        return rep

    def _prune_to_floor(self, task, floor):
        cfg = self.cfg
        data = self.data[task]
        val = data.val
        others = [t for t in self.order if t != task]
        self.release([task])
        # only the task's own units move; everything other tasks read is masked
        if others:
            self.protect(others, MASK)
        keys = architect.hidden_layers(self.net, task)
        losses = self._fit([netcore.LossTerm(data.train.X, data.train.y, (task,))],
                           cfg.sparsity_epochs, regularizer=self._group_lasso(keys, cfg.sparsity))
        self._protect_all()
        full = netcore.accuracy(self.net, val.X, val.y, task)
        if full < floor:
            raise ConstraintError(f"task {task} is at {full:.3f} < floor {floor} even unpruned")
        imp = architect.compute_importance(self.net, task, data.train.X)
        widest = max(self.net.layers[k].width for k in keys)
        chosen, chosen_acc = 1.0, full
        for i in range(1, widest + 1):
            frac = i / widest
            trial = self.net.copy()
            try:
                architect.prune_nodes(trial, task, frac, imp, override=cfg.forget_override)
            except ConstraintError:
                continue
            acc = netcore.accuracy(trial, val.X, val.y, task)
            if acc >= floor:
                chosen, chosen_acc = frac, acc
                break
        freed = 0
        if chosen < 1.0:
            freed = architect.prune_nodes(self.net, task, chosen, imp, self.cstate,
                                          override=cfg.forget_override)
        self._protect_all()
        return freed, losses, {"keep_fraction": chosen, "val_unpruned": full, "val_pruned": chosen_acc,
                               "others": others}

    # -- curriculum ---------------------------------------------------------------

    def difficulty(self, spec: TaskSpec, data: TaskData | None = None) -> float:
        """Held-out error of a small fixed-budget probe network trained on the task alone."""
        if spec.difficulty is not None:
            return float(spec.difficulty)
        data = data or gen_task(spec)
        probe = Learner(self.cfg.replace(transfer=False, epochs=self.cfg.difficulty_epochs,
                                         target_accuracy=None, capacity=None, prune_keep=None),
                        self.net.input_width, seed=self.seed + 7)
        probe.learn_new_task(spec.id, data)
        return 1.0 - netcore.accuracy(probe.net, data.val.X, data.val.y, spec.id)

    def run_curriculum(self, pool: Sequence[TaskSpec], order: str = "easy-first") -> Report:
        """Learn a pool of tasks easiest first, reducing confusion after each, then refine."""
        t0 = time.perf_counter()
        datas = {s.id: gen_task(s) for s in pool}
        scores = {s.id: self.difficulty(s, datas[s.id]) for s in pool}
        sign = -1.0 if order == "hard-first" else 1.0
        remaining = sorted(scores, key=lambda t: (sign * scores[t], t))
        done, epochs = [], 0
        while remaining:
            best = remaining.pop(0)
            rep = self.learn_new_task(best, datas[best])
            epochs += len(rep.losses)
            if len(self.order) >= 2 and not self.cfg.skip_rehearsal_steps:
                cm = self.confusion()
                if self.confused_tasks(cm):
                    epochs += len(self.reduce_confusion().losses)
            done.append(best)
        if not self.cfg.skip_rehearsal_steps:
            epochs += len(self.overall_refinement().losses)
        rep = Report("run_curriculum", None, [], self.test_accuracy(),
                     {"order": done, "difficulty": scores, "total_epochs": epochs,
                      "matrix": self.matrix.R}, time.perf_counter() - t0)
        self.reports.append(rep)
        return rep


class RandomNetworkLearner(Learner):
    """Frozen random network; every task only trains its own output head.

    Hidden weights are Gaussian and pinned-masked. ``unfreeze_every`` opens
    one more hidden depth (output side first) after that many tasks.
    Rehearsal buffers hold last-hidden-layer activations while the hidden
    layers are frozen.
    """

    def __init__(self, cfg: PolicyConfig | None = None, input_width: int = 16, seed: int = 0,
                 widths: Sequence[int] = (128,), unfreeze_every: int | None = None):
        super().__init__((cfg or PolicyConfig()).replace(transfer=False), input_width, seed)
        self.unfreeze_every = unfreeze_every
        self.unfrozen_depths = 0
        net = self.net
        col = net.new_column((), shared=True)
        prev = INPUT
        for d, w in enumerate(widths):
            layer = net.add_hidden(col.index, d, w)
            fan_in = net.layers[prev].width
            net.connect(prev, layer.key, self.rng.normal(0.0, 1.0 / np.sqrt(fan_in), (w, fan_in)), "intra")
            prev = layer.key
        self.top = prev
        self.cstate.sync(net)
        for g in net.groups():
            self.cstate.assign(net, g, MASK, force=True, pin=True)
        self.buffer_entry = self.top

    def _owned_groups(self, tasks):
        heads = {self.net.head(t).key for t in tasks}
        return [g for k in heads for g in [k] + [l.name for l in self.net.incoming(k)]]

    def features(self, X: np.ndarray) -> np.ndarray:
        """Last-hidden-layer activations of the random network."""
        h = np.asarray(X, dtype=np.float64)
        for keys in self.net.columns[0].layers:
            layer = self.net.layers[keys[0]]
            z = layer.bias + h @ self.net.incoming(layer.key)[0].weights.T
            h = netcore.activate(z, layer.activation)
        return h

    def learn_new_task(self, task: int, data: TaskData, n_classes: int | None = None) -> Report:
        t0 = time.perf_counter()
        if task in self.net.heads:
            raise ConfigError(f"task {task} has already been learned")
        n_classes = n_classes or int(data.train.y.max()) + 1
        net = self.net
        head = net.add_head(task, 0, n_classes)
        net.connect(self.top, head.key, np.zeros((n_classes, net.layers[self.top].width)), "head")
        self.cstate.sync(net)
        self._protect_all(exclude=[task])
        self.order.append(task)
        self.data[task] = data
        losses = self._fit([netcore.LossTerm(data.train.X, data.train.y, (task,))], self.cfg.epochs,
                           until=self._accuracy_until(task, data.val, self.cfg.target_accuracy))
        net.trained.add(task)
        self._protect_all()
        if self.unfrozen_depths:
            self.buffers.update(task, data.train.X, data.train.y)
        else:
            self.buffers.update(task, self.features(data.train.X), data.train.y)
        if self.unfreeze_every and len(self.order) % self.unfreeze_every == 0:
            self._unfreeze_next_depth()
        ev = self.evaluate("learn", task)
        rep = Report("learn_new_task", task, losses, dict(ev.accuracy), {"mode": "random"},
                     time.perf_counter() - t0)
        self.reports.append(rep)
        return rep

    def _unfreeze_next_depth(self) -> None:
        col = self.net.columns[0]
        d = col.depth - 1 - self.unfrozen_depths
        if d < 0:
            return
        for k in col.layers[d]:
            for g in [k] + [l.name for l in self.net.incoming(k)]:
                self.cstate.assign(self.net, g, 0.0, force=True, pin=False)
        self.unfrozen_depths += 1
        # cached activations are stale once features can move
        self.buffer_entry = INPUT
        raw = {t: self.data[t].train for t in self.order}
        for t in self.order:
            self.buffers.shrink(t, 0)
            self.buffers.limits.pop(t, None)
            self.buffers.update(t, raw[t].X, raw[t].y)


def random_network_mode(cfg: PolicyConfig | None = None, input_width: int = 16, seed: int = 0,
                        widths: Sequence[int] = (128,), unfreeze_every: int | None = None) -> RandomNetworkLearner:
    return RandomNetworkLearner(cfg, input_width, seed, widths, unfreeze_every)
