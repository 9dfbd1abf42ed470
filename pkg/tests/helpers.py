"""Shared builders and independent oracles for the test suite."""

import numpy as np

from lifelong import architect, netcore
from lifelong.consolidation import MASK, ConsolidationState
from lifelong.network import ColumnarNetwork


def random_net(rng, n_columns=2, depth=2, max_width=8, input_width=6, n_classes=3,
               activation="tanh", transfer_scale=0.3):
    """Columns with nonzero transfer links so every parameter carries gradient."""
    net = ColumnarNetwork(input_width, activation)
    for t in range(n_columns):
        widths = [int(w) for w in rng.integers(1, max_width + 1, size=depth)]
        architect.recruit_column(net, t, widths, n_classes, rng)
    for link in net.links.values():
        if link.kind == "transfer":
            link.weights[...] = transfer_scale * rng.normal(size=link.weights.shape)
    for layer in net.layers.values():
        if layer.bias is not None:
            layer.bias[...] = 0.1 * rng.normal(size=layer.bias.shape)
    net.touch()
    return net


def random_cstate(net, rng, mask_fraction=0.1, b_scale=0.5):
    cs = ConsolidationState(net)
    for name, theta in net.groups().items():
        cs.b[name][...] = b_scale * rng.random(theta.shape)
        cs.target[name][...] = theta + 0.2 * rng.normal(size=theta.shape)
        cs.b[name][rng.random(theta.shape) < mask_fraction] = np.inf
    return cs


def full_loss(net, cs, X, y, task):
    logits, _ = netcore.forward(net, X, task)
    return netcore.task_loss(logits, y) + cs.penalty(net)


def finite_difference(net, cs, X, y, task, h=1e-6):
    """Central differences of the full loss for every unmasked scalar."""
    out = {}
    for name, theta in net.groups().items():
        fd = np.zeros(theta.shape)
        for idx in np.ndindex(theta.shape):
            if np.isinf(cs.b[name][idx]):
                continue
            old = theta[idx]
            theta[idx] = old + h
            net.touch()
            up = full_loss(net, cs, X, y, task)
            theta[idx] = old - h
            net.touch()
            down = full_loss(net, cs, X, y, task)
            theta[idx] = old
            net.touch()
            fd[idx] = (up - down) / (2 * h)
        out[name] = fd
    return out


def max_relative_error(grad, fd, cs, floor=1e-6):
    worst = 0.0
    for name, g in grad.arrays.items():
        live = ~np.isinf(cs.b[name])
        a, b = g[live], fd[name][live]
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - b) / scale)))
    return worst


def head_logits(net, X, tasks):
    return {t: netcore.logits_for(net, X, [t])[t].copy() for t in tasks}


def same_logits(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def mask_all(net, cs):
    cs.sync(net)
    for name in net.groups():
        cs.assign(net, name, MASK)


def softmax_regression_accuracy(train, test, n_classes, epochs=500, lr=0.5):
    """Test accuracy of a plain multinomial logistic regression (the linear probe oracle)."""
    mu, sd = train.X.mean(0), train.X.std(0) + 1e-9
    Xtr, Xte = (train.X - mu) / sd, (test.X - mu) / sd
    W = np.zeros((Xtr.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[train.y]
    for _ in range(epochs):
        z = Xtr @ W + b
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        err = (p - onehot) / len(Xtr)
        W -= lr * Xtr.T @ err
        b -= lr * err.sum(0)
    return float(np.mean(np.argmax(Xte @ W + b, axis=1) == test.y))


def train_column(data, task=0, width=16, epochs=300, lr=0.1, seed=0, n_classes=None):
    """A single freshly trained column; returns the network."""
    rng = np.random.default_rng(seed)
    net = ColumnarNetwork(data.train.X.shape[1])
    n = n_classes or int(data.train.y.max()) + 1
    architect.recruit_column(net, task, [width], n, rng)
    netcore.fit(net, ConsolidationState(net), [netcore.LossTerm(data.train.X, data.train.y, (task,))],
                epochs, lr)
    return net


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(float)
    if kind == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    return z, np.ones_like(z)


def reference_joint_epoch(net, cs, splits, lr):
    """One full-batch gradient step on the summed per-head cross-entropy.

    Written from scratch (own forward, backward and update) so it can serve
    as an oracle for the engine's joint training. ``splits`` maps task -> Split.
    """
    order = [k for k in net.order() if k != "in"]
    grads = {name: np.zeros(theta.shape) for name, theta in net.groups().items()}
    for task, split in splits.items():
        acts, slopes = {"in": split.X}, {}
        for k in order:
            layer = net.layers[k]
            z = np.tile(layer.bias, (len(split.y), 1))
            for link in net.incoming(k):
                z = z + acts[link.src] @ link.weights.T
            acts[k], slopes[k] = _act(z, layer.activation)
        head = net.heads[task]
        logits = acts[head]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(len(split.y)), split.y] -= 1.0
        upstream = {head: p / len(split.y)}
        for k in reversed(order):
            if k not in upstream:
                continue
            delta = upstream.pop(k) * slopes[k]
            grads[k] += delta.sum(axis=0)
            for link in net.incoming(k):
                grads[link.name] += delta.T @ acts[link.src]
                if link.src != "in":
                    upstream[link.src] = upstream.get(link.src, 0.0) + delta @ link.weights
    out = {}
    for name, theta in net.groups().items():
        free = ~np.isinf(cs.b[name])
        new = theta.copy()
        new[free] -= lr * grads[name][free]
        out[name] = new
    return out
