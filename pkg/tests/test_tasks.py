import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import softmax_regression_accuracy, train_column
from lifelong import netcore
from lifelong.errors import ConfigError, DataError
from lifelong.tasks import (RehearsalBuffer, Split, TaskSpec, TaskStream, apply_drift, buffer_update, concat,
                            gen_confusable_variant, gen_task, read_csv, write_csv)


def variant_agreement(p, seed):
    """Share of variant samples a base-only model puts in the matching base class."""
    base = TaskSpec(0, seed=seed, dimension=3)
    net = train_column(gen_task(base), seed=seed)
    test = gen_task(gen_confusable_variant(base, p, new_id=1)).test
    return netcore.accuracy(net, test.X, test.y, 0)


def test_generation_is_deterministic_and_splits_differ():
    spec = TaskSpec(3, kind="ring", n_classes=3, seed=5)
    a, b = gen_task(spec), gen_task(spec)
    for sa, sb in zip(a, b):
        assert sa.X.tobytes() == sb.X.tobytes() and sa.y.tobytes() == sb.y.tobytes()
    assert not np.array_equal(a.train.X[:200], a.val.X)


@pytest.mark.parametrize("kind", ["gaussian-blobs", "ring", "xor", "confusable-variant", "shape-raster"])
def test_every_kind_yields_balanced_finite_samples(kind):
    n_classes = 2 if kind == "xor" else 4
    data = gen_task(TaskSpec(0, kind=kind, n_classes=n_classes, seed=1))
    assert [len(s) for s in data] == [600, 200, 200]
    for split in data:
        assert np.isfinite(split.X).all() and split.X.shape[1] == 16
        assert np.array_equal(np.bincount(split.y), np.full(n_classes, len(split) // n_classes))


@pytest.mark.parametrize("field,value", [("separation", 0.0), ("separation", -1.0), ("noise", -0.1),
                                         ("n_classes", 1), ("kind", "spiral")])
def test_invalid_specs_raise_config_error(field, value):
    with pytest.raises(ConfigError):
        gen_task(TaskSpec(0).replace(**{field: value}))


def test_well_separated_blobs_are_linearly_separable():
    data = gen_task(TaskSpec(0, separation=10, noise=0.1, dimension=2))
    assert softmax_regression_accuracy(data.train, data.test, 2) >= 0.99


def test_rings_defeat_a_linear_probe_but_not_a_small_network():
    data = gen_task(TaskSpec(0, kind="ring", n_classes=4, seed=0))
    assert softmax_regression_accuracy(data.train, data.test, 4) <= 0.70
    net = train_column(data, width=16, epochs=600)
    assert netcore.accuracy(net, data.test.X, data.test.y, 0) >= 0.90


def test_confusable_variant_is_deterministic_and_validated():
    base = TaskSpec(0, seed=2)
    assert gen_confusable_variant(base, 0.5, 4) == gen_confusable_variant(base, 0.5, 4)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            gen_confusable_variant(base, bad)


def test_variant_at_high_perturbation_is_read_as_base_classes():
    assert np.mean([variant_agreement(0.8, s) for s in range(5)]) >= 0.20


def test_confusability_grows_with_perturbation():
    means = [np.mean([variant_agreement(p, s) for s in range(5)]) for p in (0.2, 0.5, 0.8)]
    assert means[0] <= means[1] <= means[2]


def test_distant_variant_is_near_chance_for_base_model():
    assert abs(np.mean([variant_agreement(0.01, s) for s in range(5)]) - 0.5) <= 0.25


def test_zero_drift_is_identity():
    spec = TaskSpec(0, seed=9)
    assert apply_drift(spec, 0.0) is spec
    with pytest.raises(ConfigError):
        apply_drift(spec, 1.5)


def test_mild_drift_hurts_but_does_not_break_a_trained_model():
    base = TaskSpec(0, seed=0)
    data = gen_task(base)
    net = train_column(data)
    before = netcore.accuracy(net, data.test.X, data.test.y, 0)
    drifted = gen_task(apply_drift(base, 0.2)).test
    after = netcore.accuracy(net, drifted.X, drifted.y, 0)
    assert before >= 0.95
    assert 0.60 <= after < before


def test_full_drift_drops_a_trained_model_to_chance():
    base = TaskSpec(0, seed=1)
    net = train_column(gen_task(base))
    drifted = gen_task(apply_drift(base, 1.0)).test
    assert netcore.accuracy(net, drifted.X, drifted.y, 0) <= 0.5


def test_stream_validation():
    with pytest.raises(ConfigError):
        TaskStream([TaskSpec(0), TaskSpec(0)])
    with pytest.raises(ConfigError):
        TaskStream([TaskSpec(0)], {0: [(3, 1.2)]})
    with pytest.raises(ConfigError):
        TaskStream([TaskSpec(0)], {5: [(3, 0.2)]})
    stream = TaskStream([TaskSpec(0), TaskSpec(1)], {1: [(2, 0.3)]})
    assert [s.id for s in stream] == [0, 1] and stream.get(1).id == 1


def test_spec_dict_round_trip():
    spec = TaskSpec(2, kind="ring", label_perm=(1, 0), sizes=(10, 5, 5))
    assert TaskSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        TaskSpec.from_dict({"id": 0, "colour": "red"})


def test_csv_round_trip_is_exact(tmp_path):
    split = gen_task(TaskSpec(0, seed=4, sizes=(20, 5, 5))).train
    write_csv(split, tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == ",".join([f"f{i}" for i in range(16)] + ["label"])
    back = read_csv(tmp_path / "t.csv")
    assert np.array_equal(back.X, split.X) and np.array_equal(back.y, split.y)


def test_csv_without_header_rejected(tmp_path):
    (tmp_path / "bad.csv").write_text("1,2,3\n")
    with pytest.raises(DataError):
        read_csv(tmp_path / "bad.csv")


@given(st.integers(1, 30), st.integers(1, 60))
def test_buffer_never_exceeds_capacity(k, n):
    buf = RehearsalBuffer(k, seed=0)
    buf.update(0, np.arange(n, dtype=float)[:, None], np.zeros(n, dtype=int))
    assert buf.size(0) == min(k, n)
    if n <= k:
        assert np.array_equal(buf.get(0).X[:, 0], np.arange(n))


def test_reservoir_retention_is_uniform():
    n, trials = 10, 10_000
    rng = np.random.default_rng(0)
    kept = np.zeros(n)
    for _ in range(trials):
        buf = RehearsalBuffer(1, seed=int(rng.integers(2**32)))
        for i in range(n):
            buffer_update(buf, 0, np.array([[float(i)]]), np.array([0]))
        kept[int(buf.get(0).X[0, 0])] += 1
    assert np.all(np.abs(kept / trials - 1 / n) <= 0.02)


def test_shrink_gives_exact_size_subset():
    buf = RehearsalBuffer(20, seed=3)
    X = np.arange(20, dtype=float)[:, None]
    buf.update(0, X, np.zeros(20, dtype=int))
    buf.shrink(0, 7)
    got = buf.get(0).X[:, 0]
    assert len(got) == 7 and set(got) <= set(range(20)) and len(set(got)) == 7
    buf.update(0, X + 100, np.zeros(20, dtype=int))
    assert buf.size(0) == 7


def test_buffer_state_round_trip():
    buf = RehearsalBuffer(5, seed=1)
    buf.update(2, np.random.default_rng(0).normal(size=(9, 3)), np.arange(9) % 2)
    clone = RehearsalBuffer.from_state(buf.state())
    more = np.ones((4, 3)), np.zeros(4, dtype=int)
    buf.update(2, *more)
    clone.update(2, *more)
    assert np.array_equal(buf.get(2).X, clone.get(2).X)


def test_concat_and_empty_buffers():
    assert len(RehearsalBuffer(3).get(9)) == 0
    with pytest.raises(DataError):
        concat([Split(np.zeros((0, 2)), np.zeros(0, dtype=int))])
    with pytest.raises(ConfigError):
        RehearsalBuffer(0)
