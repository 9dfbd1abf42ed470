import json
import logging

import numpy as np
import pytest

from helpers import head_logits, same_logits
from lifelong import cli, persistence
from lifelong.config import PRESETS, apply_preset, load_config, parse_config
from lifelong.errors import ConfigError, DataError
from lifelong.policies import PolicyConfig
from lifelong.tasks import TaskSpec, gen_task, read_csv

MINIMAL = """\
seed: 3
policy:
  epochs: 40
tasks:
  - {id: 0, kind: gaussian-blobs, seed: 1}
schedule:
  - learn: 0
"""

TWO_TASKS = """\
seed: 1
policy: {epochs: 40}
tasks:
  - {id: 0, seed: 1}
  - {id: 1, n_classes: 3, offset: 6, seed: 2}
schedule:
  - learn: 0
  - learn: 1
  - refine
"""


def write(tmp_path, text, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_minimal_run_writes_all_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", write(tmp_path, MINIMAL), "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "ok" and report["seed"] == 3
    assert report["final_accuracy"]["0"] >= 0.9
    assert {t["op"] for t in report["timings"]} == {"learn_new_task"}
    assert (out / "accuracy.csv").read_text().startswith("event,kind,subject,task_0")
    sidecar = json.loads((out / "checkpoint.bin.json").read_text())
    assert sidecar["format"]["endianness"] == "little" and sidecar["tasks"] == [0]
    assert json.loads(capsys.readouterr().out)["out_dir"] == str(out)


@pytest.mark.parametrize("text,line,field", [
    (MINIMAL.replace("epochs: 40", "epochz: 40"), 3, "epochz"),
    (MINIMAL.replace("- learn: 0", "- learn: 7"), 7, "learn"),
    (MINIMAL.replace("seed: 3\n", "seed: 3\ncolour: red\n"), 2, "colour"),
])
def test_config_errors_name_line_and_field(tmp_path, text, line, field):
    with pytest.raises(ConfigError) as err:
        load_config(write(tmp_path, text))
    assert f"exp.yaml:{line}" in str(err.value) and field in str(err.value)


def test_seed_is_required():
    with pytest.raises(ConfigError, match="seed"):
        parse_config(MINIMAL.replace("seed: 3\n", ""))
    assert parse_config(MINIMAL.replace("seed: 3\n", ""), seed=5).seed == 5


def test_bad_config_exits_with_code_2(tmp_path, capsys):
    bad = write(tmp_path, "seed: 0\ntasks: []\nschedule: [refine]\n")
    assert cli.main(["run", "--config", bad, "--out-dir", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG


def test_numerical_failure_exits_with_code_3_and_leaves_a_report(tmp_path):
    text = MINIMAL.replace("epochs: 40", "epochs: 40\n  lr: 1.0e+300")
    out = tmp_path / "out"
    assert cli.main(["run", "--config", write(tmp_path, text), "--out-dir", str(out)]) == cli.EXIT_NUMERICAL
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "numerical-error" and report["param_id"] is not None


def test_unknown_preset_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--config", write(tmp_path, MINIMAL), "--preset", "genius"])
    assert exc.value.code == 2
    with pytest.raises(ConfigError):
        apply_preset("genius")
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "preset: genius\n")


@pytest.mark.parametrize("name", PRESETS)
def test_every_preset_yields_a_valid_policy(name):
    overrides = apply_preset(name)
    cfg = PolicyConfig().replace(**overrides)
    assert all(getattr(cfg, k) == v for k, v in overrides.items())


def test_preset_semantics():
    assert apply_preset("rain-man")["mask_transfer"] and apply_preset("rain-man")["freeze"] == "hard"
    assert apply_preset("memory-loss")["b_large"] < apply_preset("resourceful")["b_large"]
    assert apply_preset("sleep-deprived")["skip_rehearsal_steps"]
    assert apply_preset("sleep-deprived")["epochs"] == PolicyConfig().epochs // 2
    assert apply_preset("alzheimers")["freeze_oldest"] >= 1


def test_explicit_override_beats_preset_and_is_logged(caplog):
    text = MINIMAL.replace("epochs: 40", "epochs: 40\n  freeze: soft")
    with caplog.at_level(logging.WARNING, logger="lifelong"):
        cfg = parse_config(text, preset="rain-man")
    assert cfg.policy.freeze == "soft" and cfg.policy.mask_transfer
    assert any("overrides preset" in r.getMessage() for r in caplog.records)


def test_cli_seed_overrides_file_seed():
    assert parse_config(MINIMAL, seed=11).seed == 11
    assert parse_config(MINIMAL, seed=11).raw["seed"] == 11


def test_sleep_deprived_skips_rehearsal_steps():
    learner, report = cli.run_experiment(parse_config(TWO_TASKS, preset="sleep-deprived"))
    refine = [s for s in report["steps"] if s["op"] == "refine"]
    assert refine and refine[0]["details"] == {"skipped": True}
    # the file's explicit epochs wins; the other budgets are halved
    assert learner.cfg.epochs == 40
    assert learner.cfg.refine_epochs == PolicyConfig().refine_epochs // 2


def test_checkpoint_round_trip_evaluates_bit_identically(tmp_path):
    learner, _ = cli.run_experiment(parse_config(TWO_TASKS), tmp_path)
    loaded, extra = persistence.load(tmp_path / "checkpoint.bin")
    probe = np.random.default_rng(0).normal(size=(100, 16))
    assert same_logits(head_logits(learner.net, probe, [0, 1]), head_logits(loaded.net, probe, [0, 1]))
    np.testing.assert_array_equal(loaded.matrix.R, learner.matrix.R)
    assert extra["config"]["seed"] == 1
    for name in learner.cstate.b:
        assert np.array_equal(loaded.cstate.b[name], learner.cstate.b[name])
    assert np.array_equal(loaded.buffers.get(1).X, learner.buffers.get(1).X)


def test_resumed_checkpoint_continues_like_the_original(tmp_path):
    learner, _ = cli.run_experiment(parse_config(TWO_TASKS), tmp_path)
    loaded, _ = persistence.load(tmp_path / "checkpoint.bin")
    learner.overall_refinement(epochs=3)
    loaded.overall_refinement(epochs=3)
    for name, theta in learner.net.groups().items():
        assert np.array_equal(theta, loaded.net.groups()[name])


def test_corrupt_checkpoint_rejected(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        persistence.load(tmp_path / "bad.bin")
    blob = persistence.dumps({"x": np.arange(3)})
    with pytest.raises(DataError):
        persistence.loads(blob[:8] + b"\x09" + blob[9:])


def test_eval_subcommand_reports_checkpoint_metrics(tmp_path, capsys):
    out = tmp_path / "run"
    cli.main(["run", "--config", write(tmp_path, TWO_TASKS), "--out-dir", str(out)])
    report = json.loads((out / "report.json").read_text())
    capsys.readouterr()
    assert cli.main(["eval", str(out / "checkpoint.bin"), "--threads", "2"]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["multi_head_accuracy"] == report["final_accuracy"]
    assert ev["accuracy_matrix_csv"] == (out / "accuracy.csv").read_text()


def test_export_data_matches_generator(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["export-data", "--config", write(tmp_path, TWO_TASKS), "--out-dir", str(out)]) == 0
    assert len(list(out.glob("*.csv"))) == 6
    split = read_csv(out / "task1_val.csv")
    expected = gen_task(TaskSpec(1, n_classes=3, offset=6, seed=2)).val
    assert np.array_equal(split.X, expected.X) and np.array_equal(split.y, expected.y)


def test_sweep_runs_each_seed_and_summarizes(tmp_path):
    out = tmp_path / "sweep"
    code = cli.main(["sweep", "--config", write(tmp_path, MINIMAL), "--seeds", "0,1",
                     "--out-dir", str(out)])
    assert code == 0
    summary = json.loads((out / "sweep.json").read_text())
    assert summary["seeds"] == [0, 1] and set(summary["runs"]) == {"0", "1"}
    single, _ = cli.run_experiment(load_config(write(tmp_path, MINIMAL), seed=1))
    assert summary["runs"]["1"]["final_accuracy"]["0"] == single.test_accuracy()[0]
    assert (out / "seed_0" / "accuracy.csv").exists()


def test_report_depends_only_on_config_and_seed(tmp_path):
    path = write(tmp_path, TWO_TASKS)
    _, a = cli.run_experiment(load_config(path))
    _, b = cli.run_experiment(load_config(path))
    for r in (a, b):
        r.pop("timings")
        for step in r["steps"]:
            step.pop("seconds", None)
    assert json.dumps(a, sort_keys=True, default=str) == json.dumps(b, sort_keys=True, default=str)


def test_canonical_scenario_parses_and_uses_every_operation():
    cfg = load_config(cli.canonical_config_path())
    assert {s.op for s in cfg.schedule} >= {"learn", "drift", "forget", "confusion", "refine"}
    assert cli.main(["export-data", "--config", "canonical", "--out-dir", "/dev/null/x"]) == 1
