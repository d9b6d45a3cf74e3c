"""Data-driven SOC virtual sensor.

Model hierarchy
---------------
A general discrete-time cell model ``x[k+1] = f(x[k], i[k])``,
``v[k] = h(x[k], i[k])`` is linearized around SOC equilibria, which gives
local affine models ``x[k+1] = A x + B i + d``, ``v = C x + e`` whose
matrices depend on the operating point.  Written in input/output form
these are affine ARX models whose parameter vector is a function of SOC
(the APV-ARX form).  Nothing in this module evaluates ``f``, ``h`` or
the linearization directly; they only motivate the three steps below.

1. Learn the map SOC -> gamma with a small network (``train_mlpv``) and
   pick ``n_theta`` representative models by k-medoids over the learned
   parameter trace (``select_representatives``).  Each is realized in
   observer canonical form (``arx_to_ss``).
2. Give every local model a Luenberger observer with all poles at one
   real location (``place_observer_gain``) and run the bank on the data
   (``run_observer_bank``).
3. Regress SOC on windows of absolute innovations plus the current sample
   (``train_soc_predictor``).  ``VirtualSensor`` runs steps 2 and 3 online.

Conventions: gamma = [a_M..a_1, b_M..b_1, c] pairs with the regressor
phi[k] = [-v[k-M]..-v[k-1], i[k-M]..i[k-1], 1]; innovations are
eps_j = vhat_j - v and are stored signed.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datamodel import ContractError, TimeSeriesDataset
from .neural import Mlp, MlpSpec, TrainSpec, mlp_forward, mlp_init, mlp_predict, mlp_train

log = logging.getLogger(__name__)

FORMAT = "socfusion-vs"
VERSION = 1
CLAMP = (-0.1, 1.1)


@dataclass(frozen=True)
class ArxParams:
    gamma: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float)
        if g.ndim != 1 or g.size < 3 or g.size % 2 != 1:
            raise ContractError(f"gamma must have odd length 2M+1 >= 3, got {g.size}")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @property
    def order(self) -> int:
        return (self.gamma.size - 1) // 2

    @property
    def a(self) -> np.ndarray:
        """[a_1, ..., a_M]"""
        return self.gamma[: self.order][::-1].copy()

    @property
    def b(self) -> np.ndarray:
        """[b_1, ..., b_M]"""
        m = self.order
        return self.gamma[m: 2 * m][::-1].copy()

    @property
    def c(self) -> float:
        return float(self.gamma[-1])

    @classmethod
    def from_abc(cls, a, b, c) -> "ArxParams":
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(np.concatenate([a[::-1], b[::-1], [float(c)]]))


def arx_regressors(v, i, M: int) -> np.ndarray:
    """Rows phi[k] for k = M..N-1."""
    v = np.asarray(v, dtype=float)
    i = np.asarray(i, dtype=float)
    n = v.shape[0]
    if n <= M:
        raise ContractError(f"need more than M = {M} samples, got {n}")
    rows = n - M
    phi = np.empty((rows, 2 * M + 1))
    for m in range(M):
        phi[:, m] = -v[m: m + rows]
        phi[:, M + m] = i[m: m + rows]
    phi[:, -1] = 1.0
    return phi


def fit_arx_ls(d: TimeSeriesDataset, M: int) -> ArxParams:
    """Single affine ARX model by ordinary least squares."""
    phi = arx_regressors(d.v, d.i, M)
    g, *_ = np.linalg.lstsq(phi, d.v[M:], rcond=None)
    return ArxParams(g)


# --- step 1: parameter-varying ARX map -------------------------------------

def train_mlpv(
    d_tr: TimeSeriesDataset,
    M: int = 4,
    spec: Optional[MlpSpec] = None,
    train: Optional[TrainSpec] = None,
) -> Tuple[Mlp, np.ndarray, np.ndarray]:
    """Fit the network SOC -> gamma through the one-step ARX prediction.

    The network output is read out as ``phi[k] . gamma`` and compared with
    ``v[k]`` under the absolute loss.  Training starts from the global
    least-squares ARX model (output bias) with zero output weights, so the
    first epoch already predicts as well as the best SOC-independent model.

    Returns the network, the parameter trace ``gamma[k]`` for k = M..N-1 and
    the matching SOC values.
    """
    if M < 1:
        raise ContractError("ARX order M must be >= 1")
    if len(d_tr) <= M + 10:
        raise ContractError(f"need more than M + 10 = {M + 10} samples, got {len(d_tr)}")
    soc = d_tr.require_soc()
    n_g = 2 * M + 1
    spec = spec or MlpSpec((1, 50, 50, n_g))
    train = train or TrainSpec(loss="absolute")
    if spec.layer_sizes[0] != 1 or spec.layer_sizes[-1] != n_g:
        raise ContractError(f"M_LPV network must map 1 -> {n_g}, got {spec.layer_sizes}")
    phi = arx_regressors(d_tr.v, d_tr.i, M)
    x = soc[M:, None]
    g0 = fit_arx_ls(d_tr, M).gamma
    init = mlp_init(spec, output_bias=g0, zero_output_weights=True)
    net, _ = mlp_train(spec, train, x, d_tr.v[M:], readout=phi, init=init)
    return net, mlp_predict(net, x), soc[M:].copy()


# --- step 1: representative models -------------------------------------------

def _pairwise(X):
    sq = np.sum(X * X, axis=1)
    D2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D2, 0.0, out=D2)
    np.fill_diagonal(D2, 0.0)
    return np.sqrt(D2)


def kmedoids(X, k: int, seed: int = 0, max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray, float]:
    """Euclidean k-medoids.

    k-means++ seeding, then alternating assignment / per-cluster medoid
    update, then greedy swap refinement until no single swap helps.
    Returns (medoid indices, labels, total distance to nearest medoid).
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"need 1 <= k <= n, got k = {k}, n = {n}")
    D = _pairwise(X)
    rng = np.random.default_rng(seed)
    med = [int(rng.integers(n))]
    for _ in range(1, k):
        dmin = D[:, med].min(axis=1)
        w = dmin**2
        tot = w.sum()
        if tot == 0:
            rest = np.setdiff1d(np.arange(n), med)
            med.append(int(rng.choice(rest)))
        else:
            med.append(int(rng.choice(n, p=w / tot)))
    med = np.array(med)

    def cost(m):
        return float(D[:, m].min(axis=1).sum())

    for _ in range(max_iter):
        labels = np.argmin(D[:, med], axis=1)
        new = med.copy()
        for j in range(k):
            members = np.flatnonzero(labels == j)
            if members.size:
                new[j] = members[np.argmin(D[np.ix_(members, members)].sum(axis=0))]
        if np.array_equal(new, med):
            break
        med = new

    best = cost(med)
    improved = True
    while improved:
        improved = False
        for j in range(k):
            others = np.delete(med, j)
            base = D[:, others].min(axis=1) if others.size else np.full(n, np.inf)
            cand = np.minimum(base[:, None], D).sum(axis=0)
            cand[med] = np.inf
            h = int(np.argmin(cand))
            if cand[h] < best * (1.0 - 1e-12):
                med[j] = h
                best = float(cand[h])
                improved = True
    labels = np.argmin(D[:, med], axis=1)
    return med, labels, cost(med)


def select_representatives(
    gamma_trace,
    soc_trace,
    n_theta: int = 4,
    seed: int = 0,
    max_points: int = 2000,
) -> List[Tuple[ArxParams, float]]:
    """Pick ``n_theta`` medoid parameter vectors, sorted by SOC tag.

    Long traces are thinned to at most ``max_points`` evenly strided rows
    before clustering.  The tag of each model is the mean SOC of the full
    trace rows nearest to it.
    """
    G = np.asarray(gamma_trace, dtype=float)
    s = np.asarray(soc_trace, dtype=float)
    if G.ndim != 2 or G.shape[0] != s.shape[0]:
        raise ContractError("gamma and SOC traces must have matching lengths")
    if G.shape[0] < n_theta:
        raise ContractError(f"trace length {G.shape[0]} < n_theta = {n_theta}")
    stride = max(1, -(-G.shape[0] // max_points))
    Gs = G[::stride]
    n_distinct = np.unique(Gs, axis=0).shape[0]
    if n_distinct < n_theta:
        warnings.warn(f"only {n_distinct} distinct parameter vectors; reducing n_theta from {n_theta}")
        n_theta = n_distinct
    med, _, _ = kmedoids(Gs, n_theta, seed)
    centers = Gs[med]
    d2 = ((G[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    out = []
    for j in range(n_theta):
        members = labels == j
        tag = float(s[members].mean()) if members.any() else float("nan")
        out.append((ArxParams(centers[j]), tag))
    out.sort(key=lambda t: t[1])
    return out


# --- realization and observer design -----------------------------------------

@dataclass(frozen=True)
class LocalObserver:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d: np.ndarray
    e: float = 0.0
    L: Optional[np.ndarray] = None
    soc_tag: float = float("nan")

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        m = A.shape[0]
        if A.shape != (m, m):
            raise ContractError("A must be square")
        for name, arr in (("B", self.B), ("C", self.C), ("d", self.d)):
            a = np.array(arr, dtype=float).reshape(-1)
            if a.shape != (m,):
                raise ContractError(f"{name} must have length {m}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        if self.L is not None:
            L = np.array(self.L, dtype=float).reshape(-1)
            if L.shape != (m,):
                raise ContractError(f"L must have length {m}")
            L.setflags(write=False)
            object.__setattr__(self, "L", L)
        object.__setattr__(self, "e", float(self.e))

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def closed_loop(self) -> np.ndarray:
        if self.L is None:
            raise ContractError("observer gain not set")
        return self.A - np.outer(self.L, self.C)

    def to_dict(self) -> dict:
        return {
            "A": self.A.ravel().tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
            "d": self.d.tolist(), "e": self.e,
            "L": None if self.L is None else self.L.tolist(), "soc_tag": self.soc_tag,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LocalObserver":
        m = len(doc["B"])
        return cls(np.array(doc["A"]).reshape(m, m), doc["B"], doc["C"], doc["d"], doc["e"],
                   doc["L"], doc["soc_tag"])


def observability_matrix(A, C) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    rows = [np.asarray(C, dtype=float).reshape(-1)]
    for _ in range(A.shape[0] - 1):
        rows.append(rows[-1] @ A)
    return np.array(rows)


def _common_roots(a, b, c, tol):
    """Roots of z^M + a_1 z^{M-1} + ... shared by both input channels."""
    M = a.size
    roots = np.roots(np.concatenate([[1.0], a]))
    num = np.concatenate([[0.0], b])  # b_1 z^{M-1} + ... + b_M
    shared = []
    for r in roots:
        scale = np.sum(np.abs(num) * np.abs(r) ** np.arange(M, -1, -1)) + 1e-300
        b_small = abs(np.polyval(num, r)) <= tol * max(scale, 1.0)
        c_small = abs(c) * abs(r) ** (M - 1) <= tol * max(abs(c), 1.0) if M > 1 else c == 0
        if b_small and c_small:
            shared.append(r)
    return shared


def _companion(a, b, c):
    M = a.size
    A = np.zeros((M, M))
    A[:, 0] = -a
    A[np.arange(M - 1), np.arange(1, M)] = 1.0
    C = np.zeros(M)
    C[0] = 1.0
    d = np.zeros(M)
    d[0] = c
    return A, np.array(b, dtype=float), C, d


def arx_to_ss(g: ArxParams, soc_tag: float = float("nan"), tol: float = 1e-8,
              zero_bias: bool = False) -> LocalObserver:
    """Observer canonical realization of an affine ARX model.

    A has first column -[a_1..a_M] and ones on the superdiagonal, C = e_1,
    B = [b_1..b_M] and the affine term enters the first state (d = c e_1,
    e = 0).  Started from x = d with zero input, the realization reproduces
    the ARX recursion run from zero history.  A pole shared by both input
    channels within ``tol`` is divided out and a reduced model is returned.
    """
    a, b, c = g.a, g.b, (0.0 if zero_bias else g.c)
    while True:
        shared = _common_roots(a, b, c, tol)
        if not shared or a.size == 1:
            break
        r = shared[0]
        factor = np.array([1.0, -r.real]) if abs(r.imag) <= tol else np.real(np.poly([r, np.conj(r)]))
        qa, _ = np.polydiv(np.concatenate([[1.0], a]), factor)
        qb, _ = np.polydiv(np.concatenate([[0.0], b]), factor)
        new_m = qa.size - 1
        if new_m < 1:
            break
        warnings.warn(f"pole-zero cancellation at z = {r:.6g}; reducing order {a.size} -> {new_m}")
        a = np.real(qa[1:])
        qb = np.real(qb)
        b = np.concatenate([np.zeros(max(0, new_m - qb.size)), qb])[-new_m:]
    A, B, C, d = _companion(a, b, c)
    O = observability_matrix(A, C)
    if np.linalg.matrix_rank(O) < A.shape[0]:
        raise ContractError("realization is not observable")
    return LocalObserver(A, B, C, d, 0.0, None, soc_tag)


def place_observer_gain(obs: LocalObserver, pole_radius: float = 0.65) -> LocalObserver:
    """Gain putting every eigenvalue of A - L C at ``pole_radius``.

    In observer canonical form A - L C is again a companion matrix whose
    first column is -(a + L), so matching its characteristic polynomial to
    (z - p)^M gives L = t - a with t the coefficients of (z - p)^M.
    """
    A, C = obs.A, obs.C
    M = obs.order
    if np.linalg.matrix_rank(observability_matrix(A, C)) < M:
        raise ContractError("(A, C) is not observable")
    a = _char_coeffs(A, C)
    t = np.poly(np.full(M, float(pole_radius)))[1:]
    return replace(obs, L=t - a)


def _char_coeffs(A, C):
    """Characteristic coefficients [a_1..a_M] of A, read off the first column.

    Only observer canonical pairs (A, C) are accepted.
    """
    M = A.shape[0]
    canon = np.zeros((M, M))
    canon[np.arange(M - 1), np.arange(1, M)] = 1.0
    e1 = np.zeros(M)
    e1[0] = 1.0
    if np.array_equal(A[:, 1:], canon[:, 1:]) and np.array_equal(np.asarray(C), e1):
        return -A[:, 0]
    raise ContractError("gain placement expects an observer canonical realization")


# --- step 2: observer bank -----------------------------------------------------

@dataclass(frozen=True)
class _Bank:
    A: np.ndarray  # (n, M, M)
    B: np.ndarray  # (n, M)
    d: np.ndarray
    L: np.ndarray
    e: np.ndarray  # (n,)

    @classmethod
    def of(cls, observers: Sequence[LocalObserver]) -> "_Bank":
        if not observers:
            raise ContractError("observer bank is empty")
        orders = {o.order for o in observers}
        if len(orders) != 1:
            # pad reduced models to a common order with decoupled zero states
            M = max(orders)
            observers = [_pad(o, M) for o in observers]
        if any(o.L is None for o in observers):
            raise ContractError("every observer needs a gain")
        return cls(
            np.stack([o.A for o in observers]),
            np.stack([o.B for o in observers]),
            np.stack([o.d for o in observers]),
            np.stack([o.L for o in observers]),
            np.array([o.e for o in observers]),
        )

    def step(self, X, i, v):
        """Advance every observer one step; returns (next states, innovations)."""
        eps = X[:, 0] + self.e - v
        Xn = np.einsum("jmn,jn->jm", self.A, X) + self.B * i + self.d - self.L * eps[:, None]
        return Xn, eps


def _pad(o: LocalObserver, M: int) -> LocalObserver:
    m = o.order
    if m == M:
        return o
    A = np.zeros((M, M))
    A[:m, :m] = o.A
    pad = lambda x: np.concatenate([x, np.zeros(M - m)])
    return LocalObserver(A, pad(o.B), pad(o.C), pad(o.d), o.e, pad(o.L), o.soc_tag)


def run_observer_bank(observers: Sequence[LocalObserver], d: TimeSeriesDataset,
                      x0: Optional[np.ndarray] = None) -> np.ndarray:
    """Signed innovations, shape (n_observers, N); states start at zero."""
    bank = _Bank.of(observers)
    n_obs, M = bank.B.shape
    X = np.zeros((n_obs, M)) if x0 is None else np.array(x0, dtype=float).reshape(n_obs, M)
    out = np.empty((n_obs, len(d)))
    for k in range(len(d)):
        X, out[:, k] = bank.step(X, d.i[k], d.v[k])
        if not np.all(np.isfinite(X)):
            raise FloatingPointError(f"observer state became non-finite at step {k}")
    return out


# --- step 3: features and SOC regressor -----------------------------------------

def build_features(innovations, ell: int, k: int) -> np.ndarray:
    """[|eps_1[k]|..|eps_1[k-ell]|, ..., |eps_n[k]|..|eps_n[k-ell]|]"""
    E = np.asarray(innovations, dtype=float)
    if k < ell:
        raise ContractError(f"step {k} has fewer than ell = {ell} past innovations")
    if k >= E.shape[1]:
        raise ContractError(f"step {k} is beyond the innovation record")
    return np.abs(E[:, k - ell: k + 1][:, ::-1]).ravel()


def predictor_inputs(innovations, ell: int, i, v, start: int = 0) -> np.ndarray:
    """Rows [features, i[k], v[k]] for k >= start; missing history is zero."""
    E = np.asarray(innovations, dtype=float)
    n_obs, n = E.shape
    padded = np.concatenate([np.zeros((n_obs, ell)), E], axis=1)
    rows = n - start
    X = np.empty((rows, n_obs * (ell + 1) + 2))
    for lag in range(ell + 1):
        X[:, lag: n_obs * (ell + 1): ell + 1] = np.abs(padded[:, ell + start - lag: ell + n - lag].T)
    X[:, -2] = np.asarray(i, dtype=float)[start:]
    X[:, -1] = np.asarray(v, dtype=float)[start:]
    return X


def train_soc_predictor(
    d_tr: TimeSeriesDataset,
    innovations,
    ell: int = 5,
    spec: Optional[MlpSpec] = None,
    train: Optional[TrainSpec] = None,
    warmup: Optional[int] = None,
) -> Mlp:
    """Squared-loss regression of SOC on innovation windows, current and voltage.

    Steps before ``warmup`` (default ``ell``) are not used as targets.
    """
    E = np.asarray(innovations, dtype=float)
    n_in = E.shape[0] * (ell + 1) + 2
    spec = spec or MlpSpec((n_in, 30, 30, 1))
    train = train or TrainSpec(loss="squared")
    if spec.layer_sizes[0] != n_in or spec.layer_sizes[-1] != 1:
        raise ContractError(f"h_theta must map {n_in} -> 1, got {spec.layer_sizes}")
    start = ell if warmup is None else max(ell, warmup)
    X = predictor_inputs(E, ell, d_tr.i, d_tr.v, start)
    net, _ = mlp_train(spec, train, X, d_tr.require_soc()[start:])
    return net


@dataclass(frozen=True)
class VsConfig:
    M: int = 4
    n_theta: int = 4
    ell: int = 5
    pole_radius: float = 0.65
    zero_bias: bool = False
    mlpv_hidden: Tuple[int, ...] = (50, 50)
    h_hidden: Tuple[int, ...] = (30, 30)
    mlpv_train: TrainSpec = TrainSpec(loss="absolute", lr=1e-4)
    h_train: TrainSpec = TrainSpec(loss="squared", batch_size=32, lr=3e-3, lr_decay=0.95, patience=None)
    cluster_points: int = 2000
    seed: int = 0


class VirtualSensor:
    """Online SOC estimate from (i, v) through the observer bank and h_theta.

    The first ``ell`` outputs use zero-padded innovation history.  Outputs are
    clamped to [-0.1, 1.1]; the unclamped value is kept in ``last_raw``.
    """

    def __init__(self, observers: Sequence[LocalObserver], predictor: Mlp, ell: int):
        self.observers = list(observers)
        self.predictor = predictor
        self.ell = int(ell)
        self._bank = _Bank.of(self.observers)
        n_in = len(self.observers) * (self.ell + 1) + 2
        if predictor.n_in != n_in or predictor.n_out != 1:
            raise ContractError(f"predictor must map {n_in} -> 1, got {predictor.layer_sizes}")
        self.reset()

    @property
    def n_theta(self) -> int:
        return len(self.observers)

    @property
    def M(self) -> int:
        return self._bank.B.shape[1]

    def reset(self) -> None:
        self._x = np.zeros_like(self._bank.B)
        self._window = np.zeros((self.n_theta, self.ell + 1))  # column 0 = newest
        self.last_raw = float("nan")
        self.last_clamped = False

    def step(self, i: float, v: float) -> float:
        self._x, eps = self._bank.step(self._x, i, v)
        if not np.all(np.isfinite(self._x)):
            raise FloatingPointError("observer state became non-finite")
        self._window[:, 1:] = self._window[:, :-1]
        self._window[:, 0] = np.abs(eps)
        return self._emit(np.concatenate([self._window.ravel(), [i, v]]))

    def _emit(self, x) -> float:
        raw = float(mlp_forward(self.predictor, x)[0])
        if not np.isfinite(raw):
            raise FloatingPointError("virtual sensor output is non-finite")
        self.last_raw = raw
        out = min(max(raw, CLAMP[0]), CLAMP[1])
        self.last_clamped = out != raw
        return out

    def predict(self, d: TimeSeriesDataset) -> np.ndarray:
        """Batch equivalent of resetting and streaming ``step`` over ``d``."""
        E = run_observer_bank(self.observers, d)
        X = predictor_inputs(E, self.ell, d.i, d.v)
        out = np.array([self._emit(x) for x in X])
        return out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT, "version": VERSION,
            "M": self.M, "ell": self.ell, "n_theta": self.n_theta,
            "observers": [o.to_dict() for o in self.observers],
            "predictor": self.predictor.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "VirtualSensor":
        if doc.get("format") != FORMAT or doc.get("version") != VERSION:
            raise ValueError(f"not a {FORMAT} v{VERSION} document")
        vs = cls([LocalObserver.from_dict(o) for o in doc["observers"]],
                 Mlp.from_dict(doc["predictor"]), doc["ell"])
        if vs.n_theta != doc["n_theta"]:
            raise ValueError("observer count does not match the header")
        return vs


def vs_step(vs: VirtualSensor, i: float, v: float) -> float:
    return vs.step(i, v)


def save_vs(vs: VirtualSensor, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vs.to_dict(), fh)


def load_vs(path) -> VirtualSensor:
    with open(path, encoding="utf-8") as fh:
        return VirtualSensor.from_dict(json.load(fh))


@dataclass
class VsTrainingReport:
    mlpv: Mlp
    models: List[Tuple[ArxParams, float]]
    innovations: np.ndarray


def train_virtual_sensor(d_tr: TimeSeriesDataset, cfg: VsConfig = VsConfig()) -> Tuple[VirtualSensor, VsTrainingReport]:
    """Steps 1-3 on a training set with reference SOC."""
    n_g = 2 * cfg.M + 1
    mlpv_spec = MlpSpec((1,) + tuple(cfg.mlpv_hidden) + (n_g,), seed=cfg.seed)
    mlpv_train = replace(cfg.mlpv_train, seed=cfg.seed)
    mlpv, gammas, socs = train_mlpv(d_tr, cfg.M, mlpv_spec, mlpv_train)
    models = select_representatives(gammas, socs, cfg.n_theta, cfg.seed, cfg.cluster_points)
    observers = [place_observer_gain(arx_to_ss(g, tag, zero_bias=cfg.zero_bias), cfg.pole_radius)
                 for g, tag in models]
    # innovations come from the selected models, not from the per-step trace
    E = run_observer_bank(observers, d_tr)
    n_in = len(observers) * (cfg.ell + 1) + 2
    h_spec = MlpSpec((n_in,) + tuple(cfg.h_hidden) + (1,), seed=cfg.seed + 1)
    h_train = replace(cfg.h_train, seed=cfg.seed + 1)
    h = train_soc_predictor(d_tr, E, cfg.ell, h_spec, h_train, warmup=max(cfg.M, cfg.ell))
    return VirtualSensor(observers, h, cfg.ell), VsTrainingReport(mlpv, models, E)
