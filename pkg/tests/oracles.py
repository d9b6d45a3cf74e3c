"""Independent reference implementations used by several test modules."""

import numpy as np

from socfusion.neural import MlpSpec, mlp_backward, mlp_init
from socfusion.virtual_sensor import ArxParams

LD = np.longdouble


def ld_loss(weights, biases, mean, std, X, Y, loss, readout=None):
    """Batch-mean loss of a ReLU network evaluated in extended precision."""
    h = (X.astype(LD) - mean.astype(LD)) / std.astype(LD)
    for l, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if l < len(weights) - 1:
            h = np.where(h > 0, h, LD(0))
    if readout is not None:
        h = np.sum(h * readout.astype(LD), axis=1, keepdims=True)
    r = h - Y.astype(LD)
    return (np.sum(r * r) if loss == "squared" else np.sum(np.abs(r))) / LD(r.shape[0])


def gradient_check(net, X, Y, loss, readout=None, h=1e-7):
    """Worst relative error between backprop and central differences."""
    _, gw, gb = mlp_backward(net, X, Y, loss, readout)
    ws = [w.astype(LD) for w in net.weights]
    bs = [b.astype(LD) for b in net.biases]
    worst = 0.0
    for params, grads in ((ws, gw), (bs, gb)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + LD(h)
                fp = ld_loss(ws, bs, net.x_mean, net.x_std, X, Y, loss, readout)
                p[idx] = old - LD(h)
                fm = ld_loss(ws, bs, net.x_mean, net.x_std, X, Y, loss, readout)
                p[idx] = old
                fd = float((fp - fm) / (2 * LD(h)))
                err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8)
                worst = max(worst, err)
    return worst


def random_gradient_sweep(n_nets=100, seed=123):
    """Worst gradient error over random small networks, both losses, with a readout."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(n_nets):
        for loss in ("squared", "absolute"):
            sizes = (3, int(rng.integers(2, 6)), int(rng.integers(2, 6)), 2)
            net = mlp_init(MlpSpec(sizes, seed=t))
            for b in net.biases:
                b[:] = rng.normal(0, 0.1, b.shape)
            X = rng.normal(size=(7, 3))
            Y = rng.normal(size=(7, 1))
            R = rng.normal(size=(7, 2))
            worst = max(worst, gradient_check(net, X, Y, loss, R))
    return worst


def arx_simulate(a, b, c, i, M):
    """Raw ARX recursion from zero history: v[k] = -sum a_j v[k-j] + sum b_j i[k-j] + c."""
    n = len(i)
    v = np.zeros(n)
    for k in range(n):
        acc = c
        for j in range(1, M + 1):
            if k - j >= 0:
                acc += -a[j - 1] * v[k - j] + b[j - 1] * i[k - j]
        v[k] = acc
    return v


def stable_arx(rng, M, radius=0.9):
    """Random ARX model with real poles inside ``radius``."""
    poles = rng.uniform(-radius, radius, M)
    a = np.poly(poles)[1:]
    return ArxParams.from_abc(a, rng.normal(0, 0.1, M), rng.normal(0, 0.5))


def simulate_ss(obs, i):
    """Open-loop output of a realized model started from its affine offset."""
    x = obs.d.copy()
    out = np.empty(len(i))
    for k, ik in enumerate(i):
        out[k] = obs.C @ x + obs.e
        x = obs.A @ x + obs.B * ik + obs.d
    return out
