"""Columnar dense network: layers, links, columns and per-task heads.

A network is a DAG of *layers* (groups of nodes) joined by *links* (weight
matrices). Hidden layers belong to a column and sit at a depth inside it;
staged growth adds further layers at an existing depth rather than resizing
the original ones, so earlier computations are never re-blocked. Heads are
per-task output layers.

Every scalar parameter is addressed by a :class:`ParamId` built from stable
node ids, so deleting a node never causes an id to be reused.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import TopologyError, UnknownTaskError

INPUT = "in"

ACTIVATIONS = ("relu", "tanh", "identity")


class ParamId(NamedTuple):
    """Address of one scalar weight or bias.

    ``layer`` is the parameter group tag: a layer key for biases and a
    ``"src>dst"`` link name for weights. ``col`` is -1 for biases.
    """

    column: int
    layer: str
    row: int
    col: int


@dataclass
class Layer:
    key: str
    kind: str  # "input" | "hidden" | "head"
    column: int
    depth: int
    node_ids: np.ndarray
    bias: np.ndarray | None
    activation: str = "identity"
    stage: int = 0
    task: int | None = None

    @property
    def width(self) -> int:
        return len(self.node_ids)


@dataclass
class Link:
    src: str
    dst: str
    weights: np.ndarray
    kind: str  # "intra" | "transfer" | "head"

    @property
    def name(self) -> str:
        return f"{self.src}>{self.dst}"


@dataclass
class Column:
    index: int
    owners: tuple[int, ...]
    layers: list[list[str]] = field(default_factory=list)  # depth -> stage keys
    next_node: int = 0
    shared: bool = False

    @property
    def depth(self) -> int:
        return len(self.layers)

    def top(self) -> list[str]:
        return list(self.layers[-1])


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def layer_key(column: int, depth: int, stage: int = 0) -> str:
    key = f"c{column}.h{depth}"
    return key if stage == 0 else f"{key}.s{stage}"


def head_key(task: int) -> str:
    return f"head{task}"


class ColumnarNetwork:
    """Dense feed-forward network organised as task columns.

    Args:
        input_width: number of input features shared by every column.
        activation: hidden activation for newly created layers.
    """

    def __init__(self, input_width: int, activation: str = "relu"):
        if input_width < 1:
            raise TopologyError("input width must be >= 1")
        if activation not in ACTIVATIONS:
            raise TopologyError(f"unknown activation {activation!r}")
        self.input_width = int(input_width)
        self.activation = activation
        self.layers: dict[str, Layer] = {
            INPUT: Layer(INPUT, "input", -1, -1, np.arange(input_width, dtype=np.int64), None)
        }
        self.links: dict[str, Link] = {}
        self.columns: list[Column] = []
        self.heads: dict[int, str] = {}
        self.trained: set[int] = set()
        self.version = 0
        self._incoming: dict[str, list[str]] = {INPUT: []}
        self._outgoing: dict[str, list[str]] = {INPUT: []}

    # -- bookkeeping -------------------------------------------------------

    def touch(self) -> None:
        """Mark parameters as changed; invalidates existing forward traces."""
        self.version += 1

    def copy(self) -> "ColumnarNetwork":
        return copy.deepcopy(self)

    def incoming(self, key: str) -> list[Link]:
        return [self.links[n] for n in self._incoming[key]]

    def outgoing(self, key: str) -> list[Link]:
        return [self.links[n] for n in self._outgoing[key]]

    def head(self, task: int) -> Layer:
        try:
            return self.layers[self.heads[task]]
        except KeyError:
            raise UnknownTaskError(f"no head for task {task!r}") from None

    def column_of(self, task: int) -> Column:
        """First column owned by ``task`` (the one it was recruited with)."""
        for col in self.columns:
            if not col.shared and task in col.owners:
                return col
        raise UnknownTaskError(f"no column owned by task {task!r}")

    def task_columns(self, task: int) -> list[Column]:
        return [c for c in self.columns if task in c.owners]

    def order(self) -> list[str]:
        """Topological order of all non-input layers."""
        hidden = [l for l in self.layers.values() if l.kind == "hidden"]
        hidden.sort(key=lambda l: (l.column, l.depth, l.stage))
        heads = sorted((l for l in self.layers.values() if l.kind == "head"), key=lambda l: l.task)
        return [l.key for l in hidden] + [l.key for l in heads]

    def ancestors(self, keys: Iterable[str]) -> set[str]:
        seen: set[str] = set()
        stack = list(keys)
        while stack:
            k = stack.pop()
            if k in seen:
                continue
            seen.add(k)
            stack.extend(self.links[n].src for n in self._incoming[k])
        return seen

    # -- construction ------------------------------------------------------

    def _add_layer(self, layer: Layer) -> None:
        if layer.key in self.layers:
            raise TopologyError(f"layer {layer.key} already exists")
        self.layers[layer.key] = layer
        self._incoming[layer.key] = []
        self._outgoing[layer.key] = []

    def new_column(self, owners: Iterable[int], shared: bool = False) -> Column:
        col = Column(len(self.columns), tuple(owners), shared=shared)
        self.columns.append(col)
        return col

    def add_hidden(self, column: int, depth: int, width: int, stage: int = 0) -> Layer:
        """Create an empty-bias hidden layer of ``width`` fresh nodes."""
        if width < 1:
            raise TopologyError("hidden width must be >= 1")
        col = self.columns[column]
        if depth > col.depth:
            raise TopologyError(f"depth {depth} skips a level in column {column}")
        ids = np.arange(col.next_node, col.next_node + width, dtype=np.int64)
        col.next_node += width
        layer = Layer(layer_key(column, depth, stage), "hidden", column, depth, ids,
                      np.zeros(width), self.activation, stage)
        self._add_layer(layer)
        if depth == col.depth:
            col.layers.append([layer.key])
        else:
            col.layers[depth].append(layer.key)
        self.touch()
        return layer

    def add_head(self, task: int, column: int, n_classes: int) -> Layer:
        if task in self.heads:
            raise TopologyError(f"task {task} already has a head")
        if n_classes < 1:
            raise TopologyError("a head needs at least one class")
        layer = Layer(head_key(task), "head", column, -1,
                      np.arange(n_classes, dtype=np.int64), np.zeros(n_classes), "identity",
                      task=task)
        self._add_layer(layer)
        self.heads[task] = layer.key
        self.touch()
        return layer

    def alias_head(self, task: int, existing: int) -> None:
        """Let ``task`` evaluate through another task's head (shared-output ablation)."""
        self.heads[task] = self.heads[existing]

    def connect(self, src: str, dst: str, weights: np.ndarray, kind: str) -> Link:
        s, d = self.layers[src], self.layers[dst]
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (d.width, s.width):
            raise TopologyError(f"link {src}>{dst}: shape {weights.shape} != {(d.width, s.width)}")
        if not _precedes(s, d):
            raise TopologyError(f"link {src}>{dst} would break the column DAG")
        link = Link(src, dst, weights.copy(), kind)
        if link.name in self.links:
            raise TopologyError(f"link {link.name} already exists")
        self.links[link.name] = link
        self._incoming[dst].append(link.name)
        self._outgoing[src].append(link.name)
        self.touch()
        return link

    def remove_nodes(self, key: str, node_ids: Iterable[int]) -> int:
        """Delete nodes from a hidden layer together with all their weights."""
        layer = self.layers[key]
        if layer.kind != "hidden":
            raise TopologyError("only hidden nodes can be removed")
        drop = np.isin(layer.node_ids, np.fromiter(node_ids, dtype=np.int64))
        if not drop.any():
            return 0
        if drop.all():
            raise TopologyError(f"cannot remove every node of {key}")
        keep = ~drop
        layer.node_ids = layer.node_ids[keep]
        layer.bias = layer.bias[keep]
        for link in self.incoming(key):
            link.weights = link.weights[keep]
        for link in self.outgoing(key):
            link.weights = link.weights[:, keep]
        self.touch()
        return int(drop.sum())

    # -- parameter groups ----------------------------------------------------

    def groups(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by group tag (biases, then links)."""
        out: dict[str, np.ndarray] = {}
        for key in self.order():
            out[key] = self.layers[key].bias
        for name, link in self.links.items():
            out[name] = link.weights
        return out

    def set_group(self, name: str, values: np.ndarray) -> None:
        if name in self.links:
            self.links[name].weights = values
        else:
            self.layers[name].bias = values

    def group_ids(self, name: str) -> tuple[int, np.ndarray, np.ndarray]:
        """(column, row node ids, col node ids) of a group; biases get cols [-1]."""
        if name in self.links:
            link = self.links[name]
            dst, src = self.layers[link.dst], self.layers[link.src]
            return dst.column, dst.node_ids, src.node_ids
        layer = self.layers[name]
        return layer.column, layer.node_ids, np.array([-1], dtype=np.int64)

    def param_ids(self, name: str) -> list[ParamId]:
        column, rows, cols = self.group_ids(name)
        return [ParamId(column, name, int(r), int(c)) for r in rows for c in cols]

    def n_params(self) -> int:
        return int(sum(a.size for a in self.groups().values()))

    def check_dag(self) -> None:
        """Raise if any link points backwards across columns or depths."""
        for link in self.links.values():
            if not _precedes(self.layers[link.src], self.layers[link.dst]):
                raise TopologyError(f"link {link.name} breaks the column DAG")


def _precedes(src: Layer, dst: Layer) -> bool:
    if dst.kind == "input" or src.kind == "head":
        return False
    if src.kind == "input" or dst.kind == "head":
        return True
    if src.column != dst.column:
        return src.column < dst.column
    return src.depth < dst.depth
