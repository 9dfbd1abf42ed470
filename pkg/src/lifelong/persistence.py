"""Versioned binary checkpoints of a learner.

Layout (all integers little-endian)::

    magic    8 bytes  b"LLLCKPT\\0"
    version  u32
    hlen     u64      length of the UTF-8 JSON header
    header   hlen bytes
    payload  concatenated little-endian arrays, offsets given in the header

The header is the learner state as JSON, with every array replaced by
``{"__array__": i}`` pointing at entry ``i`` of ``header["arrays"]``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import metrics, policies
from .consolidation import ConsolidationState
from .errors import DataError
from .network import Column, ColumnarNetwork, Layer
from .tasks import RehearsalBuffer, Split, TaskData

MAGIC = b"LLLCKPT\0"
VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


def _pack(obj, arrays: list[np.ndarray]):
    if isinstance(obj, np.ndarray):
        arrays.append(obj)
        return {"__array__": len(arrays) - 1}
    if isinstance(obj, dict):
        return {"__dict__": [[_pack(k, arrays), _pack(v, arrays)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_pack(v, arrays) for v in obj]}
    if isinstance(obj, list):
        return [_pack(v, arrays) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return {"__float__": repr(obj)}
    return obj


def _unpack(obj, arrays: list[np.ndarray]):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return arrays[obj["__array__"]]
        if "__dict__" in obj:
            return {_unpack(k, arrays): _unpack(v, arrays) for k, v in obj["__dict__"]}
        if "__tuple__" in obj:
            return tuple(_unpack(v, arrays) for v in obj["__tuple__"])
        if "__float__" in obj:
            return float(obj["__float__"])
        raise DataError("malformed checkpoint header")
    if isinstance(obj, list):
        return [_unpack(v, arrays) for v in obj]
    return obj


def dumps(state: dict) -> bytes:
    arrays: list[np.ndarray] = []
    tree = _pack(state, arrays)
    table, chunks, offset = [], [], 0
    for a in arrays:
        kind = {"f": "f8", "i": "i8", "u": "i8", "b": "b1"}[a.dtype.kind]
        raw = np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
        table.append({"dtype": kind, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"state": tree, "arrays": table}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> dict:
    if blob[:8] != MAGIC:
        raise DataError("not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen])
    base = 20 + hlen
    arrays = []
    for e in header["arrays"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        a = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays.append(a.astype(a.dtype.newbyteorder("=")).copy())
    return _unpack(header["state"], arrays)


# -- learner <-> plain state ---------------------------------------------------

def net_state(net: ColumnarNetwork) -> dict:
    return {
        "input_width": net.input_width,
        "activation": net.activation,
        "layers": [{"key": l.key, "kind": l.kind, "column": l.column, "depth": l.depth,
                    "node_ids": l.node_ids, "bias": l.bias, "activation": l.activation,
                    "stage": l.stage, "task": l.task}
                   for l in net.layers.values() if l.kind != "input"],
        "links": [{"src": l.src, "dst": l.dst, "weights": l.weights, "kind": l.kind}
                  for l in net.links.values()],
        "columns": [{"index": c.index, "owners": list(c.owners), "layers": c.layers,
                     "next_node": c.next_node, "shared": c.shared} for c in net.columns],
        "heads": {int(t): k for t, k in net.heads.items()},
        "trained": sorted(net.trained),
        "version": net.version,
    }


def net_from_state(st: dict) -> ColumnarNetwork:
    net = ColumnarNetwork(st["input_width"], st["activation"])
    for c in st["columns"]:
        net.columns.append(Column(c["index"], tuple(c["owners"]), [list(k) for k in c["layers"]],
                                  c["next_node"], c["shared"]))
    for l in st["layers"]:
        net._add_layer(Layer(l["key"], l["kind"], l["column"], l["depth"], l["node_ids"],
                             l["bias"], l["activation"], l["stage"], l["task"]))
    for l in st["links"]:
        net.connect(l["src"], l["dst"], l["weights"], l["kind"])
    net.heads = dict(st["heads"])
    net.trained = set(st["trained"])
    net.version = st["version"]
    return net


def cstate_state(cs: ConsolidationState) -> dict:
    return {"b": cs.b, "target": cs.target, "zero": cs.zero, "pinned": cs.pinned,
            "ids": {k: list(v) for k, v in cs._ids.items()}}


def cstate_from_state(st: dict) -> ConsolidationState:
    cs = ConsolidationState()
    cs.b, cs.target, cs.zero, cs.pinned = (dict(st[k]) for k in ("b", "target", "zero", "pinned"))
    cs._ids = {k: tuple(v) for k, v in st["ids"].items()}
    return cs


def learner_state(learner: policies.Learner) -> dict:
    st = {
        "class": type(learner).__name__,
        "cfg": learner.cfg.to_dict(),
        "seed": learner.seed,
        "net": net_state(learner.net),
        "cstate": cstate_state(learner.cstate),
        "rng": learner.rng.bit_generator.state,
        "buffers": learner.buffers.state(),
        "data": {t: [tuple(s) for s in d] for t, d in learner.data.items()},
        "order": list(learner.order),
        "matrix": learner.matrix.to_dict(),
        "reports": [r.to_dict() for r in learner.reports],
        "freed": learner.freed,
        "buffer_entry": learner.buffer_entry,
    }
    if isinstance(learner, policies.RandomNetworkLearner):
        st["random"] = {"top": learner.top, "unfreeze_every": learner.unfreeze_every,
                        "unfrozen_depths": learner.unfrozen_depths}
    return st


def learner_from_state(st: dict) -> policies.Learner:
    cfg = policies.PolicyConfig(**{k: tuple(v) if isinstance(v, list) else v
                                   for k, v in st["cfg"].items()})
    if st["class"] == "RandomNetworkLearner":
        learner = policies.RandomNetworkLearner.__new__(policies.RandomNetworkLearner)
        policies.Learner.__init__(learner, cfg, st["net"]["input_width"], st["seed"])
        rnd = st["random"]
        learner.top, learner.unfreeze_every = rnd["top"], rnd["unfreeze_every"]
        learner.unfrozen_depths = rnd["unfrozen_depths"]
    else:
        learner = policies.Learner(cfg, st["net"]["input_width"], st["seed"])
    learner.net = net_from_state(st["net"])
    learner.cstate = cstate_from_state(st["cstate"])
    learner.rng.bit_generator.state = st["rng"]
    buf = st["buffers"]
    buf["data"] = {t: Split(*s) for t, s in buf["data"].items()}
    learner.buffers = RehearsalBuffer.from_state(buf)
    learner.data = {int(t): TaskData(*(Split(*s) for s in d)) for t, d in st["data"].items()}
    learner.order = list(st["order"])
    learner.matrix = metrics.AccuracyMatrix.from_dict(st["matrix"])
    learner.reports = [policies.Report(r["op"], r["task"], [], {int(k): v for k, v in r["accuracy"].items()},
                                       r["details"], r["seconds"]) for r in st["reports"]]
    learner.freed = st["freed"]
    learner.buffer_entry = st["buffer_entry"]
    return learner


def save(learner: policies.Learner, path: str | Path, extra: dict | None = None) -> None:
    """Write the checkpoint and a JSON topology sidecar next to it."""
    path = Path(path)
    st = learner_state(learner)
    st["extra"] = extra or {}
    path.write_bytes(dumps(st))
    sidecar = {
        "format": {"magic": MAGIC.decode("latin-1").rstrip("\0"), "version": VERSION,
                   "endianness": "little"},
        "tasks": learner.order,
        "columns": [{"index": c.index, "owners": list(c.owners), "shared": c.shared,
                     "widths": [[learner.net.layers[k].width for k in keys] for keys in c.layers]}
                    for c in learner.net.columns],
        "heads": {str(t): learner.net.layers[k].width for t, k in learner.net.heads.items()},
        "n_params": learner.net.n_params(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load(path: str | Path) -> tuple[policies.Learner, dict]:
    st = loads(Path(path).read_bytes())
    return learner_from_state(st), st.get("extra", {})
