"""Experiment configuration: YAML schema, validation and persona presets.

A config file looks like::

    seed: 0                  # required; no clock-based defaults
    input_width: 16
    preset: resourceful      # optional persona
    mode: columnar           # or "random"
    random: {widths: [128], unfreeze_every: null}
    baselines: false         # train isolated copies for forward transfer
    policy: {epochs: 300, freeze: soft}
    tasks:
      - {id: 0, kind: gaussian-blobs, seed: 1}
      - {id: 1, variant_of: 0, perturbation: 0.8}
      - {id: 2, drift_of: 0, magnitude: 0.2}
    schedule:
      - learn: 0
      - learn: 1
        overrides: {width: 4}
      - confusion
      - refine
      - drift: {task: 0, data: 2}
      - forget: {task: 1, floor: 0.7}
      - curriculum: {tasks: [3, 4], order: easy-first}

Validation errors name the offending field and its line in the file.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .policies import PolicyConfig
from .tasks import TaskSpec, apply_drift, gen_confusable_variant

log = logging.getLogger(__name__)

PRESETS = ("resourceful", "memory-loss", "sleep-deprived", "rain-man", "alzheimers")
STEP_OPS = ("learn", "refine", "confusion", "drift", "forget", "curriculum")
MODES = ("columnar", "random")


def apply_preset(name: str, base: PolicyConfig | None = None) -> dict[str, Any]:
    """Policy overrides that realise one persona."""
    base = base or PolicyConfig()
    if name == "resourceful":
        return {"capacity": None, "b_large": 1e3, "b_small": 0.0, "freeze": "soft"}
    if name == "memory-loss":
        return {"shared_column": True, "width": 8, "capacity": 24, "b_large": 0.1, "b_small": 0.0,
                "freeze": "soft", "prune_keep": 0.5, "accuracy_floor": 0.6, "forget_mode": "prune"}
    if name == "sleep-deprived":
        return {"skip_rehearsal_steps": True, "epochs": base.epochs // 2,
                "refine_epochs": base.refine_epochs // 2,
                "confusion_epochs": base.confusion_epochs // 2,
                "drift_epochs": base.drift_epochs // 2}
    if name == "rain-man":
        return {"freeze": "hard", "mask_transfer": True, "transfer": False}
    if name == "alzheimers":
        return {"capacity": 40, "width_decay": 0.75, "freeze_oldest": 1, "prune_keep": 0.5,
                "accuracy_floor": 0.6}
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


@dataclass
class Step:
    op: str
    args: dict[str, Any] = field(default_factory=dict)
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    seed: int
    tasks: list[TaskSpec]
    schedule: list[Step]
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    input_width: int = 16
    preset: str | None = None
    mode: str = "columnar"
    random_widths: tuple[int, ...] = (128,)
    unfreeze_every: int | None = None
    baselines: bool = False
    source: str | None = None
    raw: dict = field(default_factory=dict)

    def task(self, tid: int) -> TaskSpec:
        for s in self.tasks:
            if s.id == tid:
                return s
        raise ConfigError(f"unknown task {tid}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = dict(self.raw)
        raw["seed"] = seed
        return dataclasses.replace(self, seed=seed, raw=raw)


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=True)
    lines = {}
    for key_node, _ in node.value:
        lines[loader.construct_object(key_node, deep=True)] = key_node.start_mark.line + 1
    return _Mapping(mapping, lines, node.start_mark.line + 1)


class _Mapping(dict):
    def __init__(self, data, lines, line):
        super().__init__(data)
        self.lines = lines
        self.line = line

    def line_of(self, key) -> int:
        return self.lines.get(key, self.line)


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _where(source: str | None, node, key=None) -> str:
    line = node.line_of(key) if isinstance(node, _Mapping) and key is not None else getattr(node, "line", None)
    where = source or "<config>"
    return f"{where}:{line}" if line else where


def _fail(source, node, key, msg) -> ConfigError:
    return ConfigError(f"{_where(source, node, key)}: {key}: {msg}" if key is not None
                       else f"{_where(source, node)}: {msg}")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    return obj


POLICY_FIELDS = {f.name: f for f in dataclasses.fields(PolicyConfig)}
TOP_KEYS = {"seed", "input_width", "preset", "mode", "random", "baselines", "policy", "tasks",
            "schedule"}


def build_policy(raw: dict, preset: str | None, source=None, node=None) -> PolicyConfig:
    """Defaults, then preset, then explicit keys (explicit keys win and are logged)."""
    values: dict[str, Any] = {}
    if preset is not None:
        values.update(apply_preset(preset, PolicyConfig()))
    for k, v in (raw or {}).items():
        if k not in POLICY_FIELDS:
            raise _fail(source, node, k, "unknown policy field")
        if preset is not None and k in values and values[k] != v:
            log.warning("policy field %s=%r overrides preset %s value %r", k, v, preset, values[k])
        values[k] = v
    try:
        return PolicyConfig(**values)
    except (ConfigError, TypeError) as exc:
        raise _fail(source, node, None, f"invalid policy: {exc}") from None


def _task_specs(items, width, source) -> list[TaskSpec]:
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{source or '<config>'}: tasks: must be a non-empty list")
    specs: dict[int, TaskSpec] = {}
    for node in items:
        if not isinstance(node, dict) or "id" not in node:
            raise _fail(source, node, None, "each task needs an 'id'")
        d = dict(node)
        tid = d.pop("id")
        if not isinstance(tid, int):
            raise _fail(source, node, "id", "task ids must be integers")
        if tid in specs:
            raise _fail(source, node, "id", f"duplicate task id {tid}")
        try:
            if "variant_of" in d:
                base = specs[d.pop("variant_of")]
                spec = gen_confusable_variant(base, float(d.pop("perturbation", 0.8)), new_id=tid)
                spec = spec.replace(**d) if d else spec
            elif "drift_of" in d:
                base = specs[d.pop("drift_of")]
                spec = apply_drift(base, float(d.pop("magnitude", 0.0))).replace(id=tid, **d)
            else:
                d.setdefault("width", width)
                spec = TaskSpec.from_dict({"id": tid, **_plain(d)})
        except KeyError as exc:
            raise _fail(source, node, None, f"refers to undeclared task {exc.args[0]}") from None
        except (ConfigError, TypeError, ValueError) as exc:
            raise _fail(source, node, None, str(exc)) from None
        if spec.width != width:
            raise _fail(source, node, "width", f"task width {spec.width} != input_width {width}")
        specs[tid] = spec
    return list(specs.values())


def _steps(items, ids: set[int], source) -> list[Step]:
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{source or '<config>'}: schedule: must be a non-empty list")
    steps = []
    for node in items:
        if isinstance(node, str):
            node_d, op, args = {}, node, {}
        elif isinstance(node, dict):
            ops = [k for k in node if k in STEP_OPS]
            extra = set(node) - set(STEP_OPS) - {"overrides"}
            if len(ops) != 1 or extra:
                raise _fail(source, node, None, f"a step needs exactly one of {STEP_OPS}")
            op, node_d = ops[0], node
            args = node[op]
        else:
            raise ConfigError(f"{source or '<config>'}: schedule: bad step {node!r}")
        if op not in STEP_OPS:
            raise ConfigError(f"{source or '<config>'}: schedule: unknown step {op!r}")
        if op == "learn":
            args = {"task": args} if isinstance(args, int) else args
        elif op in ("refine", "confusion"):
            args = args or {}
        elif op == "curriculum":
            args = {"tasks": args} if isinstance(args, list) else args
        if not isinstance(args, dict):
            raise _fail(source, node_d or None, op, "arguments must be a mapping")
        args = _plain(args)
        refs = list(args.get("tasks", [])) + [args[k] for k in ("task", "data") if k in args]
        for r in refs:
            if r not in ids:
                raise _fail(source, node_d, op, f"schedule references undeclared task {r}")
        if op in ("learn", "drift", "forget") and "task" not in args:
            raise _fail(source, node_d, op, "needs a 'task'")
        if op == "drift" and "data" not in args and "magnitude" not in args:
            raise _fail(source, node_d, op, "needs 'data' (a task id) or 'magnitude'")
        overrides = _plain(node_d.get("overrides", {})) if node_d else {}
        for k in overrides:
            if k not in POLICY_FIELDS:
                raise _fail(source, node_d["overrides"], k, "unknown policy field in overrides")
        steps.append(Step(op, args, overrides))
    return steps


def parse_config(text: str, source: str | None = None, seed: int | None = None,
                 preset: str | None = None) -> ExperimentConfig:
    """Parse and validate a YAML experiment; CLI ``seed``/``preset`` take precedence."""
    try:
        raw = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source or '<config>'}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source or '<config>'}: top level must be a mapping")
    for k in raw:
        if k not in TOP_KEYS:
            raise _fail(source, raw, k, "unknown field")
    if seed is None:
        if "seed" not in raw:
            raise _fail(source, raw, None, "seed: required (no implicit seeds)")
        seed = raw["seed"]
    if not isinstance(seed, int):
        raise _fail(source, raw, "seed", "must be an integer")
    width = raw.get("input_width", 16)
    if not isinstance(width, int) or width < 1:
        raise _fail(source, raw, "input_width", "must be a positive integer")
    preset = preset if preset is not None else raw.get("preset")
    if preset is not None and preset not in PRESETS:
        raise _fail(source, raw, "preset", f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    mode = raw.get("mode", "columnar")
    if mode not in MODES:
        raise _fail(source, raw, "mode", f"must be one of {MODES}")
    rnd = raw.get("random") or {}
    policy_node = raw.get("policy") or {}
    if not isinstance(policy_node, dict):
        raise _fail(source, raw, "policy", "must be a mapping")
    policy = build_policy(dict(policy_node), preset, source, policy_node)
    tasks = _task_specs(raw.get("tasks"), width, source)
    steps = _steps(raw.get("schedule"), {t.id for t in tasks}, source)
    for st in steps:
        if st.overrides:
            try:
                policy.replace(**st.overrides)
            except (ConfigError, TypeError) as exc:
                raise ConfigError(f"{source or '<config>'}: overrides: {exc}") from None
    plain = _plain(raw)
    plain["seed"] = seed
    if preset is not None:
        plain["preset"] = preset
    return ExperimentConfig(seed=seed, tasks=tasks, schedule=steps, policy=policy, input_width=width,
                            preset=preset, mode=mode, random_widths=tuple(rnd.get("widths", (128,))),
                            unfreeze_every=rnd.get("unfreeze_every"),
                            baselines=bool(raw.get("baselines", False)), source=source, raw=plain)


def load_config(path: str | Path, seed: int | None = None, preset: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path), seed, preset)
