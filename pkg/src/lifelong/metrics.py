"""Accuracy matrix, forgetting, transfer and single-head confusion."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .network import ColumnarNetwork
from .tasks import Split
from . import netcore


@dataclass
class ConfusionMatrix:
    """Counts C[a, b] of class-a samples predicted as class b.

    Classes of all tasks share one index space; ``classes[i]`` is the
    ``(task, local class)`` pair behind global index ``i``.
    """

    counts: np.ndarray
    classes: list[tuple[int, int]]

    @property
    def tasks(self) -> list[int]:
        out = []
        for t, _ in self.classes:
            if t not in out:
                out.append(t)
        return out

    def _idx(self, task: int) -> np.ndarray:
        return np.array([i for i, (t, _) in enumerate(self.classes) if t == task])

    def block(self, a: int, b: int) -> int:
        return int(self.counts[np.ix_(self._idx(a), self._idx(b))].sum())

    def task_counts(self, task: int) -> int:
        return int(self.counts[self._idx(task)].sum())

    def task_confusion(self) -> np.ndarray:
        """Row-normalised task-level matrix: fraction of task-i samples landing in task j."""
        ts = self.tasks
        out = np.zeros((len(ts), len(ts)))
        for i, a in enumerate(ts):
            n = self.task_counts(a)
            for j, b in enumerate(ts):
                out[i, j] = self.block(a, b) / n if n else 0.0
        return out

    def cross_confusion(self, a: int, b: int) -> float:
        """Share of the two tasks' samples assigned to a class of the other task."""
        n = self.task_counts(a) + self.task_counts(b)
        return (self.block(a, b) + self.block(b, a)) / n if n else 0.0

    def accuracy(self, task: int) -> float:
        idx = self._idx(task)
        n = self.counts[idx].sum()
        return float(self.counts[idx, idx].sum() / n) if n else float("nan")

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "classes": [list(c) for c in self.classes]}


def _class_space(net: ColumnarNetwork, tasks: Sequence[int]) -> tuple[list[tuple[int, int]], dict[int, int]]:
    classes, offset = [], {}
    for t in tasks:
        offset[t] = len(classes)
        classes.extend((t, c) for c in range(net.head(t).width))
    return classes, offset


def single_head_predictions(net: ColumnarNetwork, tasks: Sequence[int], X: np.ndarray) -> np.ndarray:
    """Global class index of the max logit over every listed head."""
    logits = netcore.logits_for(net, X, tasks)
    return np.concatenate([logits[t] for t in tasks], axis=1).argmax(axis=1)


def evaluate_single_head(net: ColumnarNetwork, tasks: Sequence[int],
                         data: Mapping[int, Split]) -> ConfusionMatrix:
    """Joint confusion with task identity withheld from the model."""
    classes, offset = _class_space(net, tasks)
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t in tasks:
        split = data[t]
        pred = single_head_predictions(net, tasks, split.X)
        np.add.at(counts, (offset[t] + split.y, pred), 1)
    return ConfusionMatrix(counts, classes)


def evaluate_multi_head(net: ColumnarNetwork, tasks: Sequence[int],
                        data: Mapping[int, Split]) -> ConfusionMatrix:
    """Block-diagonal confusion where each sample is scored by its own head."""
    classes, offset = _class_space(net, tasks)
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t in tasks:
        split = data[t]
        pred = netcore.predict(net, split.X, t)
        np.add.at(counts, (offset[t] + split.y, offset[t] + pred), 1)
    return ConfusionMatrix(counts, classes)


def confusion_from_predictions(classes: list[tuple[int, int]], labels: Mapping[int, Sequence[int]],
                               preds: Mapping[int, Sequence[int]]) -> ConfusionMatrix:
    """Rebuild a confusion matrix from logged global predictions."""
    offset = {}
    for i, (t, c) in enumerate(classes):
        offset.setdefault(t, i)
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, y in labels.items():
        np.add.at(counts, (offset[t] + np.asarray(y, dtype=np.int64), np.asarray(preds[t], dtype=np.int64)), 1)
    return ConfusionMatrix(counts, classes)


@dataclass
class Event:
    kind: str
    subject: int | None
    accuracy: dict[int, float]
    single_head: dict[int, float] = field(default_factory=dict)
    predictions: dict[int, dict] = field(default_factory=dict)


class AccuracyMatrix:
    """R[i][j]: test accuracy on task j right after event i (NaN before j is seen)."""

    def __init__(self):
        self.tasks: list[int] = []
        self.events: list[Event] = []

    def record(self, kind: str, subject: int | None, accuracy: Mapping[int, float],
               single_head: Mapping[int, float] | None = None,
               predictions: Mapping[int, dict] | None = None) -> Event:
        for t in accuracy:
            if t not in self.tasks:
                self.tasks.append(t)
        ev = Event(kind, subject, dict(accuracy), dict(single_head or {}), dict(predictions or {}))
        self.events.append(ev)
        return ev

    @property
    def R(self) -> np.ndarray:
        out = np.full((len(self.events), len(self.tasks)), np.nan)
        for i, ev in enumerate(self.events):
            for j, t in enumerate(self.tasks):
                if t in ev.accuracy:
                    out[i, j] = ev.accuracy[t]
        return out

    def learned_rows(self) -> dict[int, int]:
        """Row of the event that finished learning each task."""
        rows = {}
        for i, ev in enumerate(self.events):
            if ev.kind == "learn" and ev.subject is not None:
                rows[ev.subject] = i
        return rows

    def forgetting(self) -> dict[int, float]:
        return {t: v for t, v in zip(self.tasks, forgetting(self.R))}

    def transfer(self, baselines: Mapping[int, float]) -> tuple[dict[int, float | None], dict[int, float]]:
        rows = self.learned_rows()
        idx = [rows.get(t, 0) for t in self.tasks]
        base = [baselines.get(t) for t in self.tasks]
        fwd, bwd = transfer_scores(self.R, idx, base)
        return dict(zip(self.tasks, fwd)), dict(zip(self.tasks, bwd))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["event", "kind", "subject"] + [f"task_{t}" for t in self.tasks])
        for i, ev in enumerate(self.events):
            cells = ["" if t not in ev.accuracy else f"{ev.accuracy[t]:.6f}" for t in self.tasks]
            w.writerow([i, ev.kind, "" if ev.subject is None else ev.subject] + cells)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "events": [
                {"kind": e.kind, "subject": e.subject,
                 "accuracy": {str(k): v for k, v in e.accuracy.items()},
                 "single_head": {str(k): v for k, v in e.single_head.items()},
                 "predictions": {str(k): v for k, v in e.predictions.items()}}
                for e in self.events
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        m = cls()
        m.tasks = [int(t) for t in d["tasks"]]
        for e in d["events"]:
            m.events.append(Event(e["kind"], e["subject"],
                                  {int(k): v for k, v in e["accuracy"].items()},
                                  {int(k): v for k, v in e.get("single_head", {}).items()},
                                  {int(k): v for k, v in e.get("predictions", {}).items()}))
        return m

    @classmethod
    def from_predictions(cls, d: dict) -> "AccuracyMatrix":
        """Recompute every accuracy purely from logged labels and predictions."""
        m = cls()
        m.tasks = [int(t) for t in d["tasks"]]
        for e in d["events"]:
            acc, single = {}, {}
            for k, p in e["predictions"].items():
                y = np.asarray(p["y"])
                acc[int(k)] = float((np.asarray(p["multi"]) == y).mean())
                single[int(k)] = float((np.asarray(p["single"]) == y + p["offset"]).mean())
            m.events.append(Event(e["kind"], e["subject"], acc, single, {}))
        return m


def forgetting(R: np.ndarray) -> np.ndarray:
    """Per task: best earlier accuracy minus final accuracy, clamped at 0."""
    R = np.asarray(R, dtype=np.float64)
    out = np.zeros(R.shape[1])
    for j in range(R.shape[1]):
        col = R[:, j][~np.isnan(R[:, j])]
        if len(col) == 0:
            out[j] = np.nan
            continue
        out[j] = max(0.0, float(col[:-1].max() - col[-1])) if len(col) > 1 else 0.0
    return out


def transfer_scores(R: np.ndarray, learned_row: Sequence[int],
                    baselines: Sequence[float | None]) -> tuple[list[float | None], list[float]]:
    """Forward: R[j's row][j] - isolated baseline (None if no baseline).

    Backward: R[last][j] - R[j's row][j].
    """
    R = np.asarray(R, dtype=np.float64)
    fwd, bwd = [], []
    for j, (row, base) in enumerate(zip(learned_row, baselines)):
        own = R[row, j]
        fwd.append(None if base is None else float(own - base))
        bwd.append(float(R[-1, j] - own))
    return fwd, bwd


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
