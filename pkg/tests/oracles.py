"""Independent reference computations used by the tests.

The numeric helpers avoid the vectorized code paths they are used to check.
``plain_sgd`` is the bare optimizer loop built from the (separately checked)
network primitives, used as the reference for the all-mechanisms-off run.
"""
import math

import numpy as np

from ltcil import nn


def loop_forward(layers, x):
    """Nested-loop MLP forward. ``layers`` is a list of (W, b, activation)."""
    out = []
    for row in x:
        a = list(row)
        for w, b, act in layers:
            z = []
            for j in range(w.shape[0]):
                s = b[j]
                for i in range(w.shape[1]):
                    s += w[j, i] * a[i]
                z.append(max(s, 0.0) if act == "relu" else s)
            a = z
        out.append(a)
    return np.array(out)


def explicit_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def explicit_kd(student, teacher, tau, m):
    total = 0.0
    for s_row, t_row in zip(student, teacher):
        q = explicit_softmax([v / tau for v in t_row[:m]])
        p = explicit_softmax([v / tau for v in s_row[:m]])
        total += sum(qi * (math.log(qi) - math.log(pi)) for qi, pi in zip(q, p))
    return tau * tau * total / len(student)


def explicit_weighted_ce(logits, labels, weights):
    num = 0.0
    for row, y, w in zip(logits, labels, weights):
        p = explicit_softmax(list(row))
        num += -w * math.log(p[y])
    return num / sum(weights)


def central_diff(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def entropy_by_summation(counts):
    total = sum(counts)
    if len(counts) == 1:
        return 1.0
    ps = [c / total for c in counts if c > 0]
    return -sum(p * math.log(p) for p in ps) / math.log(len(counts))


def unrolled_ema(grads, beta):
    """Closed form of the EMA after n updates with g_bar_1 = g_1:
    beta^(n-1) g_1 + sum_{k=2..n} (1-beta) beta^(n-k) g_k."""
    n = len(grads)
    out = beta ** (n - 1) * np.asarray(grads[0], dtype=np.float64)
    for k in range(2, n + 1):
        out = out + (1 - beta) * beta ** (n - k) * np.asarray(grads[k - 1], dtype=np.float64)
    return out


def toy_stream():
    """4 classes, 8 samples, two tasks of two classes."""
    rng = np.random.default_rng(42)
    X = rng.normal(size=(8, 3))
    y = np.array([0, 0, 0, 1, 2, 2, 3, 3])
    return [(X[:4], y[:4]), (X[4:], y[4:])]


def plain_sgd(config, tasks):
    """Unweighted CE, no teacher, no GCR: the bare optimizer loop."""
    model = None
    for t, (X, y) in enumerate(tasks):
        init = np.random.default_rng([config.seed, t, 0])
        if model is None:
            model = nn.init_mlp(X.shape[1], config.hidden_sizes, len(np.unique(y)), init)
            offset = 0
        else:
            offset = model.output_dim
            model = nn.expand_head(model, offset + len(np.unique(y)), init)
        cols = offset + np.searchsorted(np.unique(y), y)
        order_rng = np.random.default_rng([config.seed, t, 1])
        for epoch in range(config.epochs_per_task):
            lr = config.base_lr * config.lr_decay ** sum(epoch >= m for m in config.milestones)
            order = order_rng.permutation(len(y))
            for s in range(0, len(y), config.batch_size):
                idx = order[s : s + config.batch_size]
                _, dz = nn.ce_loss_and_grad(nn.forward(model, X[idx]), cols[idx])
                model = nn.sgd_step(model, nn.backward(model, X[idx], dz), lr)
    return model
