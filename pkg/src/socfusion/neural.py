"""Small feed-forward networks: ReLU hidden layers, linear output.

Inputs are z-scored inside the network.  Training is mini-batch RMSprop
with early stopping on a held-out fraction.  An optional per-example
*readout* vector turns the network output into a scalar prediction
``dot(net(x), readout)``, which is how the parameter-varying ARX map is
fitted against measured voltages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

FORMAT = "socfusion-mlp"
VERSION = 1
LOSSES = ("squared", "absolute")


class TrainingError(RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: Tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        if len(sizes) < 3:
            raise ValueError("need input, at least one hidden layer, and output sizes")
        if min(sizes) < 1:
            raise ValueError("layer sizes must be >= 1")
        object.__setattr__(self, "layer_sizes", sizes)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 100
    rho: float = 0.9
    lr: float = 1e-3
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    eps: float = 1e-8
    batch_size: int = 256
    val_fraction: float = 0.2
    patience: Optional[int] = 20
    loss: str = "squared"
    seed: int = 0
    chronological_split: bool = False

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


@dataclass
class Mlp:
    weights: List[np.ndarray]  # layer l maps (n_l,) -> (n_{l+1},); stored (n_l, n_{l+1})
    biases: List[np.ndarray]
    x_mean: np.ndarray
    x_std: np.ndarray

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        self.x_mean = np.asarray(self.x_mean, dtype=float)
        self.x_std = np.asarray(self.x_std, dtype=float)
        if not self.weights:
            raise ValueError("network needs at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {l}: weight {w.shape} and bias {b.shape} do not match")
            if l and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {l} input size does not chain with layer {l - 1}")
        if self.x_mean.shape != (self.n_in,) or self.x_std.shape != (self.n_in,):
            raise ValueError("standardization vectors must match the input size")
        if np.any(self.x_std <= 0):
            raise ValueError("standardization std entries must be positive")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.n_in,) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.x_mean.copy(), self.x_std.copy())

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "layer_sizes": list(self.layer_sizes),
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError(f"not a {FORMAT} v{VERSION} document")
        sizes = d["layer_sizes"]
        weights = [np.array(w, dtype=float).reshape(sizes[l], sizes[l + 1])
                   for l, w in enumerate(d["weights"])]
        return cls(weights, d["biases"], d["x_mean"], d["x_std"])


def save_mlp(net: Mlp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(net.to_dict(), fh)


def load_mlp(path) -> Mlp:
    with open(path, encoding="utf-8") as fh:
        return Mlp.from_dict(json.load(fh))


def mlp_init(spec: MlpSpec, x_mean=None, x_std=None, output_bias=None,
             zero_output_weights: bool = False) -> Mlp:
    """He-normal hidden layers, LeCun-normal output layer, zero biases."""
    rng = np.random.default_rng(spec.seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        fan_in = sizes[l]
        last = l == len(sizes) - 2
        scale = np.sqrt((1.0 if last else 2.0) / fan_in)
        w = rng.normal(0.0, scale, (sizes[l], sizes[l + 1]))
        if last and zero_output_weights:
            w[:] = 0.0
        weights.append(w)
        biases.append(np.zeros(sizes[l + 1]))
    if output_bias is not None:
        biases[-1] = np.array(output_bias, dtype=float).reshape(sizes[-1])
    mean = np.zeros(sizes[0]) if x_mean is None else x_mean
    std = np.ones(sizes[0]) if x_std is None else x_std
    return Mlp(weights, biases, mean, std)


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Evaluate one input vector."""
    h = np.asarray(x, dtype=float)
    if h.shape != (net.n_in,):
        raise ValueError(f"expected input of length {net.n_in}, got shape {h.shape}")
    h = (h - net.x_mean) / net.x_std
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if l < last:
            h = np.maximum(h, 0.0)
    return h


def mlp_predict(net: Mlp, X) -> np.ndarray:
    """Evaluate a batch (rows are examples)."""
    return _forward(net, np.asarray(X, dtype=float))[-1]


def _forward(net: Mlp, X) -> list:
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ValueError(f"expected batch of shape (n, {net.n_in}), got {X.shape}")
    acts = [(X - net.x_mean) / net.x_std]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ w + b
        acts.append(np.maximum(z, 0.0) if l < last else z)
    return acts


def _backprop(net: Mlp, acts: list, d_out: np.ndarray):
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.weights)
    delta = d_out
    for l in range(len(net.weights) - 1, -1, -1):
        grads_w[l] = acts[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ net.weights[l].T) * (acts[l] > 0)
    return grads_w, grads_b


def _loss_and_grad(pred, y, loss):
    r = pred - y
    n = r.shape[0]
    if loss == "squared":
        return float(np.sum(r * r) / n), 2.0 * r / n
    return float(np.sum(np.abs(r)) / n), np.sign(r) / n


def _prediction(out, readout):
    if readout is None:
        return out
    return np.sum(out * readout, axis=1, keepdims=True)


def mlp_loss(net: Mlp, X, Y, loss: str = "squared", readout=None) -> float:
    X, Y, R = _as_batch(net, X, Y, readout)
    return _loss_and_grad(_prediction(_forward(net, X)[-1], R), Y, loss)[0]


def _as_batch(net, X, Y, readout):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    R = None if readout is None else np.asarray(readout, dtype=float)
    if X.shape[0] != Y.shape[0] or (R is not None and R.shape != (X.shape[0], net.n_out)):
        raise ValueError("inputs, targets and readout disagree on shape")
    return X, Y, R


def mlp_backward(net: Mlp, X, Y, loss: str = "squared", readout=None):
    """Exact gradients of the batch-mean loss.

    Returns ``(loss_value, grads_w, grads_b)``; the absolute-loss subgradient
    at a zero residual is taken as 0.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    X, Y, R = _as_batch(net, X, Y, readout)
    acts = _forward(net, X)
    value, d_pred = _loss_and_grad(_prediction(acts[-1], R), Y, loss)
    d_out = d_pred if R is None else d_pred * R
    gw, gb = _backprop(net, acts, d_out)
    return value, gw, gb


@dataclass
class TrainLog:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)  # index 0 = initial weights
    best_epoch: int = 0
    stopped_early: bool = False


def split_indices(n: int, train: TrainSpec) -> Tuple[np.ndarray, np.ndarray]:
    n_val = max(1, int(round(train.val_fraction * n)))
    if train.chronological_split:
        idx = np.arange(n)
    else:
        idx = np.random.default_rng(train.seed).permutation(n)
    return np.sort(idx[: n - n_val]), np.sort(idx[n - n_val:])


def mlp_train(spec: MlpSpec, train: TrainSpec, inputs, targets, readout=None,
              init: Optional[Mlp] = None) -> Tuple[Mlp, TrainLog]:
    """RMSprop with validation-based early stopping.

    The returned weights are those of the epoch (0 = initialization) with the
    lowest validation loss.  Deterministic given ``spec``, ``train`` and data.
    """
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    R = None if readout is None else np.asarray(readout, dtype=float)
    n = X.shape[0]
    if n < 10:
        raise ValueError(f"need at least 10 examples, got {n}")
    if X.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"inputs have {X.shape[1]} columns, network expects {spec.layer_sizes[0]}")
    n_pred = spec.layer_sizes[-1] if R is None else 1
    if Y.shape != (n, n_pred):
        raise ValueError(f"targets have shape {Y.shape}, expected {(n, n_pred)}")

    tr, va = split_indices(n, train)
    mean = X[tr].mean(axis=0)
    std = X[tr].std(axis=0)
    std[std == 0] = 1.0
    if init is None:
        net = mlp_init(spec, mean, std)
    else:
        net = init.copy()
        net.x_mean, net.x_std = mean, std
    Rtr = None if R is None else R[tr]
    Rva = None if R is None else R[va]

    cache_w = [np.zeros_like(w) for w in net.weights]
    cache_b = [np.zeros_like(b) for b in net.biases]
    rng = np.random.default_rng(train.seed + 1)
    log = TrainLog()
    best = net.copy()
    best_val = mlp_loss(net, X[va], Y[va], train.loss, Rva)
    log.val_loss.append(best_val)
    since_best = 0
    for epoch in range(1, train.epochs + 1):
        lr = train.lr * train.lr_decay ** (epoch - 1)
        order = tr[rng.permutation(tr.size)]
        total = 0.0
        for start in range(0, order.size, train.batch_size):
            b = order[start:start + train.batch_size]
            value, gw, gb = mlp_backward(net, X[b], Y[b], train.loss, None if R is None else R[b])
            total += value * b.size
            for params, grads, cache in ((net.weights, gw, cache_w), (net.biases, gb, cache_b)):
                for p, g, c in zip(params, grads, cache):
                    c *= train.rho
                    c += (1.0 - train.rho) * g * g
                    p -= lr * g / (np.sqrt(c) + train.eps)
        train_loss = total / order.size
        val = mlp_loss(net, X[va], Y[va], train.loss, Rva)
        if not (np.isfinite(train_loss) and np.isfinite(val)):
            raise TrainingError("loss became non-finite", epoch)
        log.train_loss.append(train_loss)
        log.val_loss.append(val)
        if val < best_val:
            best_val, best = val, net.copy()
            log.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if train.patience is not None and since_best >= train.patience:
                log.stopped_early = True
                break
    return best, log
