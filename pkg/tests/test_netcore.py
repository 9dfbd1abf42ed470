import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import finite_difference, max_relative_error, random_cstate, random_net
from lifelong import netcore
from lifelong.consolidation import MASK, ConsolidationState
from lifelong.errors import ConfigError, DataError, NumericalError, StateError, TopologyError
from lifelong.network import INPUT, ColumnarNetwork, ParamId, glorot_uniform


def two_column_net(seed=0):
    rng = np.random.default_rng(seed)
    net = ColumnarNetwork(3)
    net.new_column((0,))
    a = net.add_hidden(0, 0, 4)
    net.connect(INPUT, a.key, rng.normal(size=(4, 3)), "intra")
    h0 = net.add_head(0, 0, 2)
    net.connect(a.key, h0.key, rng.normal(size=(2, 4)), "head")
    net.new_column((1,))
    b = net.add_hidden(1, 0, 5)
    net.connect(INPUT, b.key, rng.normal(size=(5, 3)), "intra")
    net.connect(a.key, b.key, rng.normal(size=(5, 4)), "transfer")
    h1 = net.add_head(1, 1, 3)
    net.connect(b.key, h1.key, rng.normal(size=(3, 5)), "head")
    for layer in net.layers.values():
        if layer.bias is not None:
            layer.bias[...] = rng.normal(size=layer.bias.shape)
    return net


def test_forward_matches_hand_rolled_computation():
    net = two_column_net()
    X = np.random.default_rng(1).normal(size=(7, 3))
    W = {n: l.weights for n, l in net.links.items()}
    b = {k: l.bias for k, l in net.layers.items()}
    relu = lambda z: np.maximum(z, 0)
    a = relu(X @ W["in>c0.h0"].T + b["c0.h0"])
    h = relu(X @ W["in>c1.h0"].T + a @ W["c0.h0>c1.h0"].T + b["c1.h0"])
    expected = h @ W["c1.h0>head1"].T + b["head1"]
    logits, trace = netcore.forward(net, X, 1)
    np.testing.assert_allclose(logits, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(trace.acts["c0.h0"], a, atol=1e-12)


def test_forward_evaluates_only_needed_layers():
    net = two_column_net()
    _, trace = netcore.forward(net, np.ones((2, 3)), 0)
    assert "c1.h0" not in trace.acts


def test_task_loss_matches_scalar_oracle():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    y = np.array([1, 2])
    manual = []
    for row, label in zip(logits, y):
        manual.append(-(row[label] - np.log(sum(np.exp(v) for v in row))))
    assert netcore.task_loss(logits, y) == pytest.approx(np.mean(manual), abs=1e-14)


def test_loss_is_stable_for_large_logits():
    assert np.isfinite(netcore.task_loss(np.array([[1000.0, -1000.0]]), np.array([1])))


@pytest.mark.parametrize("labels", [np.array([0, 3]), np.array([-1, 0]), np.array([0])])
def test_invalid_labels_raise(labels):
    with pytest.raises(DataError):
        netcore.task_loss(np.zeros((2, 3)), labels)


@given(st.integers(0, 10_000))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, n_columns=2, depth=2, max_width=4)
    cs = random_cstate(net, rng)
    X = rng.normal(size=(5, net.input_width))
    y = rng.integers(0, 3, size=5)
    _, grad = netcore.objective(net, cs, X, y, 1)
    fd = finite_difference(net, cs, X, y, 1)
    assert max_relative_error(grad, fd, cs) < 1e-4


def test_joint_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = random_net(rng, n_columns=2, depth=1, max_width=4)
    cs = ConsolidationState(net)
    X = rng.normal(size=(6, net.input_width))
    y = rng.integers(0, 6, size=6)
    term = netcore.LossTerm(X, y, (0, 1))
    value, grad = term.gradient(net, cs)
    h = 1e-6
    for name, theta in net.groups().items():
        for idx in np.ndindex(theta.shape):
            old = theta[idx]
            theta[idx] = old + h
            net.touch()
            up = term.gradient(net, cs)[0]
            theta[idx] = old - h
            net.touch()
            down = term.gradient(net, cs)[0]
            theta[idx] = old
            net.touch()
            fd = (up - down) / (2 * h)
            assert abs(grad.arrays[name][idx] - fd) <= 1e-4 * max(abs(fd), 1e-6)


def test_masked_entries_are_absent_from_gradient():
    net = two_column_net()
    cs = ConsolidationState(net)
    cs.assign(net, "in>c1.h0", MASK)
    _, trace = netcore.forward(net, np.ones((3, 3)), 1)
    grad = netcore.backward(net, trace, np.array([0, 1, 2]), 1, cs)
    assert len(grad) == net.n_params() - net.links["in>c1.h0"].weights.size
    pid = ParamId(1, "in>c1.h0", int(net.layers["c1.h0"].node_ids[0]), 0)
    assert pid not in grad
    assert ParamId(1, "c1.h0", int(net.layers["c1.h0"].node_ids[0]), -1) in grad


def test_stale_trace_is_rejected():
    net = two_column_net()
    _, trace = netcore.forward(net, np.ones((2, 3)), 0)
    net.links["in>c0.h0"].weights[0, 0] += 1.0
    net.touch()
    with pytest.raises(StateError):
        netcore.backward(net, trace, np.array([0, 1]), 0)


def test_unknown_head_raises():
    with pytest.raises(KeyError):
        netcore.forward(two_column_net(), np.ones((1, 3)), 9)


def _single_param_net(theta, g_weight=1.0):
    net = ColumnarNetwork(1)
    net.new_column((0,))
    head = net.add_head(0, 0, 1)
    net.connect(INPUT, head.key, np.array([[theta]]), "head")
    return net


def _grad_for(net, value):
    arrays = {k: np.zeros(v.shape) for k, v in net.groups().items()}
    present = {k: np.ones(v.shape, dtype=bool) for k, v in net.groups().items()}
    arrays["in>head0"][0, 0] = value
    return netcore.Gradient(net, arrays, present)


def test_apply_step_explicit_form():
    net = _single_param_net(1.0)
    cs = ConsolidationState(net)
    cs.assign(net, "in>head0", 2.0)
    cs.target["in>head0"][0, 0] = 0.25
    netcore.apply_step(net, _grad_for(net, 0.5), cs, lr=0.1)
    assert net.links["in>head0"].weights[0, 0] == pytest.approx(1.0 - 0.1 * (0.5 + 2 * 2.0 * 0.75), abs=1e-15)


def test_apply_step_proximal_form_for_stiff_restraint():
    net = _single_param_net(1.0)
    cs = ConsolidationState(net)
    cs.assign(net, "in>head0", 1e3)
    cs.target["in>head0"][0, 0] = 0.0
    lr, g = 0.05, 0.5
    k = 2 * lr * 1e3
    netcore.apply_step(net, _grad_for(net, g), cs, lr=lr)
    assert net.links["in>head0"].weights[0, 0] == pytest.approx((1.0 - lr * g) / (1 + k), abs=1e-15)


@given(st.floats(1e-3, 1e4), st.floats(-3, 3), st.floats(-3, 3))
def test_both_step_forms_share_the_fixed_point(b, g, t):
    lr = 0.05
    star = t - g / (2 * b)
    net = _single_param_net(star)
    cs = ConsolidationState(net)
    cs.assign(net, "in>head0", b)
    cs.target["in>head0"][0, 0] = t
    netcore.apply_step(net, _grad_for(net, g), cs, lr=lr)
    assert net.links["in>head0"].weights[0, 0] == pytest.approx(star, rel=1e-9, abs=1e-9)


def test_stiff_restraint_does_not_diverge():
    net = _single_param_net(1.0)
    cs = ConsolidationState(net)
    cs.assign(net, "in>head0", 1e3)
    cs.target["in>head0"][0, 0] = 0.0
    for _ in range(50):
        netcore.apply_step(net, _grad_for(net, 0.0), cs, lr=0.05)
    assert 0.0 <= net.links["in>head0"].weights[0, 0] < 1e-10


def test_nonfinite_update_reports_parameter():
    net = _single_param_net(1.0)
    cs = ConsolidationState(net)
    with pytest.raises(NumericalError) as err:
        netcore.apply_step(net, _grad_for(net, np.inf), cs, lr=0.1)
    assert err.value.param_id == ParamId(0, "in>head0", 0, 0)


def test_nonpositive_learning_rate_rejected():
    net = _single_param_net(1.0)
    with pytest.raises(ConfigError):
        netcore.apply_step(net, _grad_for(net, 0.0), ConsolidationState(net), lr=0.0)


def test_masked_parameters_never_move_during_fit():
    rng = np.random.default_rng(0)
    net = random_net(rng, activation="relu")
    cs = ConsolidationState(net)
    cs.assign(net, "c0.h0", MASK)
    cs.assign(net, "in>c0.h0", MASK)
    before = {k: v.copy() for k, v in net.groups().items()}
    X, y = rng.normal(size=(20, net.input_width)), rng.integers(0, 3, 20)
    netcore.fit(net, cs, [netcore.LossTerm(X, y, (0,))], 20)
    assert np.array_equal(before["c0.h0"], net.layers["c0.h0"].bias)
    assert np.array_equal(before["in>c0.h0"], net.links["in>c0.h0"].weights)
    assert not np.array_equal(before["c0.h1>head0"], net.links["c0.h1>head0"].weights)


def test_fit_reduces_loss_and_stops_early():
    rng = np.random.default_rng(1)
    net = random_net(rng, n_columns=1, depth=1, max_width=8, activation="relu")
    cs = ConsolidationState(net)
    X = rng.normal(size=(60, net.input_width))
    y = (X[:, 0] > 0).astype(int)
    hist = netcore.fit(net, cs, [netcore.LossTerm(X, y, (0,))], 200, lr=0.2)
    assert hist[-1] < hist[0]
    calls = []
    short = netcore.fit(net, cs, [netcore.LossTerm(X, y, (0,))], 200, until=lambda: calls.append(1) or True,
                        check_every=5)
    assert len(short) == 5 and len(calls) == 1


def test_minibatch_fit_is_deterministic_given_rng():
    rng = np.random.default_rng(2)
    base = random_net(rng, n_columns=1, depth=1, activation="relu")
    X = rng.normal(size=(33, base.input_width))
    y = rng.integers(0, 3, 33)
    out = []
    for _ in range(2):
        net = base.copy()
        netcore.fit(net, ConsolidationState(net), [netcore.LossTerm(X, y, (0,)), netcore.LossTerm(X[:7], y[:7], (0,))],
                    3, batch_size=8, rng=np.random.default_rng(5), momentum=0.5)
        out.append(net.groups())
    assert all(np.array_equal(out[0][k], out[1][k]) for k in out[0])


def test_fit_needs_terms():
    net = two_column_net()
    with pytest.raises(DataError):
        netcore.fit(net, ConsolidationState(net), [], 1)


def test_connect_rejects_bad_shapes_and_cycles():
    net = two_column_net()
    with pytest.raises(TopologyError):
        net.connect("c1.h0", "c0.h0", np.zeros((4, 5)), "transfer")
    net.new_column((2,))
    c = net.add_hidden(2, 0, 2)
    with pytest.raises(TopologyError):
        net.connect(INPUT, c.key, np.zeros((3, 3)), "intra")


def test_node_ids_are_never_reused():
    rng = np.random.default_rng(0)
    net = ColumnarNetwork(2)
    net.new_column((0,))
    layer = net.add_hidden(0, 0, 4)
    net.connect(INPUT, layer.key, glorot_uniform(rng, 4, 2), "intra")
    net.remove_nodes(layer.key, [3])
    extra = net.add_hidden(0, 0, 2, stage=1)
    assert set(extra.node_ids).isdisjoint({0, 1, 2, 3})
