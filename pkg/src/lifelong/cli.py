"""Command-line experiment runner.

Subcommands: ``run`` executes a schedule, ``sweep`` repeats it over seeds in
separate processes, ``eval`` scores a checkpoint and ``export-data`` writes
the task splits as CSV. Exit codes: 0 success, 2 config error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from contextlib import contextmanager
from importlib import resources
from pathlib import Path

from . import metrics, netcore, persistence
from .config import ExperimentConfig, PRESETS, Step, load_config
from .errors import ConfigError, LifelongError, NumericalError
from .policies import Learner, RandomNetworkLearner, Report, _jsonable
from .tasks import apply_drift, gen_task, write_csv

log = logging.getLogger("lifelong")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def canonical_config_path() -> Path:
    """Path of the bundled four-task scenario."""
    return Path(str(resources.files("lifelong") / "scenarios" / "canonical.yaml"))


def make_learner(cfg: ExperimentConfig) -> Learner:
    if cfg.mode == "random":
        return RandomNetworkLearner(cfg.policy, cfg.input_width, cfg.seed, cfg.random_widths,
                                    cfg.unfreeze_every)
    return Learner(cfg.policy, cfg.input_width, cfg.seed)


@contextmanager
def _overrides(learner: Learner, overrides: dict):
    saved = learner.cfg
    if overrides:
        learner.cfg = saved.replace(**overrides)
    try:
        yield
    finally:
        learner.cfg = saved


def run_step(learner: Learner, cfg: ExperimentConfig, step: Step, datasets: dict) -> Report:
    """Execute one schedule step on ``learner``."""
    a = step.args
    with _overrides(learner, step.overrides):
        if step.op in ("refine", "confusion") and learner.cfg.skip_rehearsal_steps:
            rep = Report(step.op, None, details={"skipped": True})
            learner.reports.append(rep)
            return rep
        if step.op == "learn":
            return learner.learn_new_task(a["task"], datasets[a["task"]])
        if step.op == "refine":
            return learner.overall_refinement(a.get("epochs"))
        if step.op == "confusion":
            return learner.reduce_confusion()
        if step.op == "drift":
            if "data" in a:
                data = datasets[a["data"]]
            else:
                data = gen_task(apply_drift(cfg.task(a["task"]), float(a["magnitude"])))
            return learner.adapt_to_drift(a["task"], data)
        if step.op == "forget":
            return learner.graceful_forget(a["task"], a.get("floor"))
        if step.op == "curriculum":
            return learner.run_curriculum([cfg.task(t) for t in a["tasks"]],
                                          a.get("order", "easy-first"))
    raise ConfigError(f"unknown step {step.op!r}")


def isolation_baselines(cfg: ExperimentConfig, datasets: dict) -> dict[int, float]:
    """Test accuracy of each learned task trained alone with the same budget and seed."""
    out = {}
    for step in cfg.schedule:
        if step.op != "learn":
            continue
        tid = step.args["task"]
        solo = make_learner(cfg)
        with _overrides(solo, step.overrides):
            solo.learn_new_task(tid, datasets[tid])
        out[tid] = solo.test_accuracy()[tid]
    return out


def summarize(learner: Learner, cfg: ExperimentConfig, baselines: dict[int, float] | None) -> dict:
    steps = [r.to_dict() for r in learner.reports]
    timings = [{"op": s["op"], "task": s["task"], "seconds": s.pop("seconds")} for s in steps]
    fwd, bwd = learner.matrix.transfer(baselines or {})
    single = None
    if learner.order:
        single = metrics.evaluate_single_head(
            learner.net, learner.order, {t: learner.data[t].test for t in learner.order}).to_dict()
    return {
        "status": "ok",
        "seed": cfg.seed,
        "preset": cfg.preset,
        "config": cfg.raw,
        "policy": learner.cfg.to_dict(),
        "steps": steps,
        "accuracy_matrix": learner.matrix.to_dict(),
        "final_accuracy": {str(t): v for t, v in learner.test_accuracy().items()},
        "forgetting": {str(t): v for t, v in learner.matrix.forgetting().items()},
        "forward_transfer": {str(t): v for t, v in fwd.items()},
        "backward_transfer": {str(t): v for t, v in bwd.items()},
        "baselines": {str(t): v for t, v in (baselines or {}).items()},
        "single_head_confusion": single,
        "freed_units": learner.freed,
        "live_units": learner.live_nodes(),
        "timings": timings,
    }


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   hooks=None) -> tuple[Learner, dict]:
    """Run a full schedule; write ``report.json``, ``accuracy.csv`` and a checkpoint.

    A numerical failure still writes a failure report before re-raising.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    datasets = {s.id: gen_task(s) for s in cfg.tasks}
    learner = make_learner(cfg)
    try:
        for i, step in enumerate(cfg.schedule):
            log.info("step %d: %s %s", i, step.op, step.args)
            if hooks:
                hooks(learner, step, "before")
            run_step(learner, cfg, step, datasets)
            if hooks:
                hooks(learner, step, "after")
        baselines = isolation_baselines(cfg, datasets) if cfg.baselines else None
    except NumericalError as exc:
        if out is not None:
            fail = {"status": "numerical-error", "seed": cfg.seed, "config": cfg.raw,
                    "message": str(exc), "param_id": list(exc.param_id) if exc.param_id else None,
                    "steps": [r.to_dict() for r in learner.reports],
                    "accuracy_matrix": learner.matrix.to_dict()}
            (out / "report.json").write_text(json.dumps(_jsonable(fail), indent=2))
        raise
    report = summarize(learner, cfg, baselines)
    if out is not None:
        (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, allow_nan=True))
        (out / "accuracy.csv").write_text(learner.matrix.to_csv())
        persistence.save(learner, out / "checkpoint.bin", {"config": cfg.raw})
    return learner, report


def evaluate_checkpoint(path: str | Path, threads: int = 1) -> dict:
    learner, extra = persistence.load(path)
    tasks = learner.order

    def one(t):
        test = learner.data[t].test
        return t, netcore.accuracy(learner.net, test.X, test.y, t)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        acc = dict(pool.map(one, tasks))
    cm = metrics.evaluate_single_head(learner.net, tasks, {t: learner.data[t].test for t in tasks})
    return {
        "tasks": tasks,
        "multi_head_accuracy": {str(t): acc[t] for t in tasks},
        "single_head_accuracy": {str(t): cm.accuracy(t) for t in tasks},
        "single_head_confusion": cm.to_dict(),
        "forgetting": {str(t): v for t, v in learner.matrix.forgetting().items()},
        "accuracy_matrix_csv": learner.matrix.to_csv(),
        "config": extra.get("config"),
    }


def _sweep_one(args):
    path, seed, preset, out = args
    cfg = load_config(path, seed=seed, preset=preset)
    _, report = run_experiment(cfg, Path(out) / f"seed_{seed}")
    return seed, report["final_accuracy"], report["forgetting"]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lifelong", description="Lifelong-learning experiment runner")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config=True):
        sp.add_argument("--config", required=need_config, help="YAML experiment file ('canonical' for the bundled scenario)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--preset", choices=PRESETS, help="persona preset")
        sp.add_argument("--out-dir", default="out", help="artifact directory")

    common(sub.add_parser("run", help="execute a schedule"))
    sw = sub.add_parser("sweep", help="run one process per seed")
    common(sw)
    sw.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    sw.add_argument("--workers", type=int, default=1)
    ev = sub.add_parser("eval", help="metrics from a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--threads", type=int, default=1, help="evaluation threads")
    common(sub.add_parser("export-data", help="write task splits as CSV"))
    return p


def _config_path(arg: str) -> str:
    return str(canonical_config_path()) if arg == "canonical" else arg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(_config_path(args.config), args.seed, args.preset)
            _, report = run_experiment(cfg, args.out_dir)
            print(json.dumps({"final_accuracy": report["final_accuracy"],
                              "forgetting": report["forgetting"], "out_dir": args.out_dir}))
        elif args.command == "sweep":
            path = _config_path(args.config)
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            load_config(path, seeds[0], args.preset)
            jobs = [(path, s, args.preset, args.out_dir) for s in seeds]
            with ProcessPoolExecutor(max_workers=max(1, args.workers)) as pool:
                results = list(pool.map(_sweep_one, jobs))
            summary = {"seeds": seeds, "runs": {str(s): {"final_accuracy": a, "forgetting": f}
                                                for s, a, f in results}}
            tasks = sorted(results[0][1])
            summary["final_accuracy_mean_std"] = {
                t: metrics.mean_std([r[1][t] for r in results]) for t in tasks}
            Path(args.out_dir).mkdir(parents=True, exist_ok=True)
            (Path(args.out_dir) / "sweep.json").write_text(json.dumps(summary, indent=2))
            print(json.dumps(summary["final_accuracy_mean_std"]))
        elif args.command == "eval":
            print(json.dumps(evaluate_checkpoint(args.checkpoint, args.threads), indent=2))
        elif args.command == "export-data":
            cfg = load_config(_config_path(args.config), args.seed, args.preset)
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            for spec in cfg.tasks:
                for name, split in zip(("train", "val", "test"), gen_task(spec)):
                    write_csv(split, out / f"task{spec.id}_{name}.csv")
            print(json.dumps({"written": len(cfg.tasks) * 3, "out_dir": str(out)}))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (LifelongError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
