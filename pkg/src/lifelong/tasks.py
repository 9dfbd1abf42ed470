"""Synthetic task streams and reservoir rehearsal buffers.

All generators are pure functions of a :class:`TaskSpec`: the same spec
always yields byte-identical train/val/test splits. Features live in a fixed
stream width; a task only occupies ``dimension`` consecutive features
starting at ``offset`` and the rest stay zero.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError

KINDS = ("gaussian-blobs", "ring", "xor", "confusable-variant", "shape-raster")
DEFAULT_WIDTH = 16
DEFAULT_SIZES = (600, 200, 200)


class Split(NamedTuple):
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


class TaskData(NamedTuple):
    train: Split
    val: Split
    test: Split


@dataclass(frozen=True)
class TaskSpec:
    """Recipe for one synthetic classification task.

    ``drift`` is the concept-drift magnitude already applied (see
    :func:`apply_drift`); ``nuisance`` translates every class along the third
    task feature and is what makes confusable variants overlap their base.
    """

    id: int
    kind: str = "gaussian-blobs"
    n_classes: int = 2
    dimension: int = 2
    separation: float = 4.0
    noise: float = 0.5
    rotation: float = 0.0
    offset: int = 0
    nuisance: float = 0.0
    drift: float = 0.0
    drift_angle: float = math.pi
    label_perm: tuple[int, ...] | None = None
    seed: int = 0
    sizes: tuple[int, int, int] = DEFAULT_SIZES
    width: int = DEFAULT_WIDTH
    difficulty: float | None = None

    def replace(self, **changes) -> "TaskSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sizes"] = list(self.sizes)
        if self.label_perm is not None:
            d["label_perm"] = list(self.label_perm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        if "sizes" in d:
            d["sizes"] = tuple(d["sizes"])
        if d.get("label_perm") is not None:
            d["label_perm"] = tuple(d["label_perm"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown task fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TaskStream:
    """Ordered task specs plus optional drift events ``(step, magnitude)`` per task."""

    specs: list[TaskSpec]
    drifts: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise ConfigError("task ids must be unique")
        for tid, events in self.drifts.items():
            if tid not in ids:
                raise ConfigError(f"drift for unknown task {tid}")
            for _, m in events:
                if not 0.0 <= m <= 1.0:
                    raise ConfigError("drift magnitude must be in [0, 1]")

    def __iter__(self):
        return iter(self.specs)

    def __len__(self):
        return len(self.specs)

    def get(self, task_id: int) -> TaskSpec:
        for s in self.specs:
            if s.id == task_id:
                return s
        raise KeyError(task_id)


def _validate(spec: TaskSpec) -> None:
    if spec.kind not in KINDS:
        raise ConfigError(f"unknown generator kind {spec.kind!r}")
    if not spec.separation > 0:
        raise ConfigError("separation must be > 0")
    if spec.noise < 0:
        raise ConfigError("noise must be >= 0")
    if spec.n_classes < 2:
        raise ConfigError("a task needs at least two classes")
    if not 0.0 <= spec.drift <= 1.0:
        raise ConfigError("drift magnitude must be in [0, 1]")
    if spec.kind == "shape-raster":
        if spec.n_classes > 4:
            raise ConfigError("shape-raster supports at most 4 classes")
        side = math.isqrt(spec.width - spec.offset)
        if side < 4:
            raise ConfigError("shape-raster needs at least 16 free features")
    else:
        need = max(spec.dimension, 3 if spec.nuisance else 2)
        if spec.offset + need > spec.width:
            raise ConfigError("task features do not fit the stream width")
    if spec.kind == "xor" and spec.n_classes != 2:
        raise ConfigError("xor tasks have exactly two classes")
    if spec.label_perm is not None and sorted(spec.label_perm) != list(range(spec.n_classes)):
        raise ConfigError("label_perm must be a permutation of the classes")


def _balanced_labels(rng: np.random.Generator, n: int, c: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def class_means(spec: TaskSpec) -> np.ndarray:
    """Class centres in the task plane (C x 2), before drift translation.

    Drift rotates the centres by ``drift * drift_angle``, saturating at a
    quarter turn (reached at magnitude 0.5 with the default angle).
    """
    k = np.arange(spec.n_classes)
    turn = min(spec.drift * spec.drift_angle, np.pi / 2)
    angle = 2 * np.pi * k / spec.n_classes + spec.rotation + turn
    return 0.5 * spec.separation * np.stack([np.cos(angle), np.sin(angle)], axis=1)


def _sample(spec: TaskSpec, n: int, rng: np.random.Generator) -> Split:
    y = _balanced_labels(rng, n, spec.n_classes)
    X = np.zeros((n, spec.width))
    if spec.kind == "shape-raster":
        X[:, spec.offset:] = _rasters(spec, y, rng)
        return Split(X, _finish_labels(spec, y))
    d = max(spec.dimension, 3 if spec.nuisance else 2)
    local = rng.normal(0.0, spec.noise, size=(n, d)) if spec.noise else np.zeros((n, d))
    if spec.kind in ("gaussian-blobs", "confusable-variant"):
        local[:, :2] += class_means(spec)[y]
    elif spec.kind == "ring":
        radius = 0.5 * spec.separation * (1 + y)
        theta = rng.uniform(0, 2 * np.pi, n) + spec.rotation
        local[:, 0] += radius * np.cos(theta)
        local[:, 1] += radius * np.sin(theta)
    elif spec.kind == "xor":
        quad = rng.integers(0, 2, size=n)
        sx = np.where(quad == 1, 1.0, -1.0)
        sy = np.where(y == 1, -sx, sx)
        local[:, 0] += 0.5 * spec.separation * sx
        local[:, 1] += 0.5 * spec.separation * sy
    if spec.nuisance:
        local[:, 2] += spec.nuisance
    if spec.drift:
        # translate across the (rotated) class axis; full drift also splits
        # every class in two along that direction and flips one half's labels
        u = class_means(spec)[0] / np.linalg.norm(class_means(spec)[0])
        v = np.array([-u[1], u[0]])
        if spec.drift >= 1.0:
            side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            local[:, :2] += np.outer(side * spec.separation, v)
            y = np.where(side > 0, (y + 1) % spec.n_classes, y)
        else:
            local[:, :2] += spec.drift * spec.separation * v
    X[:, spec.offset:spec.offset + d] = local
    return Split(X, _finish_labels(spec, y))


def _finish_labels(spec: TaskSpec, y: np.ndarray) -> np.ndarray:
    if spec.label_perm is not None:
        y = np.asarray(spec.label_perm)[y]
    return y.astype(np.int64)


def _rasters(spec: TaskSpec, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    side = math.isqrt(spec.width - spec.offset)
    n = len(y)
    img = np.zeros((n, side, side))
    for i, c in enumerate(y):
        r, q = rng.integers(0, side - 2, size=2)
        if c == 0:
            img[i, r + 1, :] = 1.0
        elif c == 1:
            img[i, :, q + 1] = 1.0
        elif c == 2:
            np.fill_diagonal(img[i], 1.0)
        else:
            img[i, r:r + 3, q:q + 3] = 1.0
            img[i, r + 1, q + 1] = 0.0
    img *= 0.5 * spec.separation
    if spec.noise:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    flat = img.reshape(n, -1)
    out = np.zeros((n, spec.width - spec.offset))
    out[:, :flat.shape[1]] = flat
    return out


def split_rng(seed: int, split: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(split)]))


def gen_task(spec: TaskSpec) -> TaskData:
    """Train/val/test splits of a task; each split has its own derived seed."""
    _validate(spec)
    parts = [_sample(spec, n, split_rng(spec.seed, i)) for i, n in enumerate(spec.sizes)]
    return TaskData(*parts)


def gen_confusable_variant(base: TaskSpec, perturbation: float, new_id: int | None = None,
                           far: float | None = None) -> TaskSpec:
    """A new task whose classes sit on top of the base classes.

    The variant keeps the base geometry but is translated along the third task
    feature by ``(1 - perturbation) * far``; small perturbations give a
    distant copy, large ones overlap the base classes almost exactly.
    """
    if not 0.0 < perturbation < 1.0:
        raise ConfigError("perturbation must be in (0, 1)")
    far = 4.0 * base.separation if far is None else far
    return base.replace(
        id=base.id + 1000 if new_id is None else new_id,
        kind="confusable-variant",
        dimension=max(base.dimension, 3),
        nuisance=base.nuisance + (1.0 - perturbation) * far,
        seed=base.seed * 7919 + 17,
    )


def apply_drift(spec: TaskSpec, magnitude: float) -> TaskSpec:
    """Shift a task's distribution; 0 is the identity, 1 re-partitions the labels."""
    if not 0.0 <= magnitude <= 1.0:
        raise ConfigError("drift magnitude must be in [0, 1]")
    if magnitude == 0.0:
        return spec
    return spec.replace(drift=float(magnitude), seed=spec.seed * 104729 + 1)


def write_csv(split: Split, path: str | Path) -> None:
    """Export one split with header ``f0..f{d-1},label``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(split.X.shape[1])] + ["label"])
        for row, label in zip(split.X, split.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_csv(path: str | Path) -> Split:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise DataError(f"{path}: missing f0..fd,label header")
    body = rows[1:]
    X = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), len(rows[0]) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Split(X, y)


class RehearsalBuffer:
    """Per-task bounded reservoir of stored samples (or cached features).

    Args:
        capacity: default per-task size ``K``.
        seed: seed of the buffer's own generator.
    """

    def __init__(self, capacity: int = 40, seed: int = 0):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self._X: dict[int, list[np.ndarray]] = {}
        self._y: dict[int, list[int]] = {}
        self.seen: dict[int, int] = {}
        self.limits: dict[int, int] = {}

    def tasks(self) -> list[int]:
        return list(self._X)

    def limit(self, task: int) -> int:
        return self.limits.get(task, self.capacity)

    def update(self, task: int, X: np.ndarray, y: np.ndarray) -> "RehearsalBuffer":
        """Reservoir-insert samples: after n arrivals each is kept with prob. K/n."""
        xs = self._X.setdefault(task, [])
        ys = self._y.setdefault(task, [])
        k = self.limit(task)
        for row, label in zip(np.asarray(X, dtype=np.float64), np.asarray(y)):
            n = self.seen.get(task, 0)
            if len(xs) < k:
                xs.append(row.copy())
                ys.append(int(label))
            else:
                j = int(self.rng.integers(0, n + 1))
                if j < k:
                    xs[j] = row.copy()
                    ys[j] = int(label)
            self.seen[task] = n + 1
        return self

    def get(self, task: int) -> Split:
        if task not in self._X or not self._X[task]:
            return Split(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
        return Split(np.stack(self._X[task]), np.array(self._y[task], dtype=np.int64))

    def __len__(self):
        return sum(len(v) for v in self._y.values())

    def size(self, task: int) -> int:
        return len(self._y.get(task, ()))

    def shrink(self, task: int, new_capacity: int) -> "RehearsalBuffer":
        """Uniformly down-sample one task's store to exactly ``new_capacity`` items."""
        if new_capacity < 0:
            raise ConfigError("capacity must be >= 0")
        xs, ys = self._X.get(task, []), self._y.get(task, [])
        if len(ys) > new_capacity:
            keep = np.sort(self.rng.choice(len(ys), size=new_capacity, replace=False))
            self._X[task] = [xs[i] for i in keep]
            self._y[task] = [ys[i] for i in keep]
        self.limits[task] = new_capacity
        return self

    def replace(self, task: int, X: np.ndarray, y: np.ndarray) -> None:
        """Overwrite stored rows in place (used to swap samples for cached features)."""
        self._X[task] = [r.copy() for r in np.asarray(X, dtype=np.float64)]
        self._y[task] = [int(v) for v in y]

    def state(self) -> dict:
        return {
            "capacity": self.capacity,
            "rng": self.rng.bit_generator.state,
            "seen": dict(self.seen),
            "limits": dict(self.limits),
            "data": {t: self.get(t) for t in self._X},
        }

    @classmethod
    def from_state(cls, st: dict) -> "RehearsalBuffer":
        buf = cls(st["capacity"])
        buf.rng.bit_generator.state = st["rng"]
        buf.seen = {int(k): int(v) for k, v in st["seen"].items()}
        buf.limits = {int(k): int(v) for k, v in st["limits"].items()}
        for t, split in st["data"].items():
            buf.replace(int(t), split.X, split.y)
        return buf


def buffer_update(buf: RehearsalBuffer, task: int, X: np.ndarray, y: np.ndarray) -> RehearsalBuffer:
    return buf.update(task, X, y)


def concat(splits: Sequence[Split]) -> Split:
    splits = [s for s in splits if len(s)]
    if not splits:
        raise DataError("nothing to concatenate")
    return Split(np.concatenate([s.X for s in splits]), np.concatenate([s.y for s in splits]))
