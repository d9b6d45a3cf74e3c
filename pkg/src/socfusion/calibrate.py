"""Calibration of the filter noise levels by surrogate-based global search.

The cost combines the voltage RMSE (normalized by the voltage window), the
SOC RMSE and the SOC total variation of a filter run over a labelled
dataset.  It is minimized over a box in log10 coordinates by a radial-basis
surrogate optimizer.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .datamodel import ContractError, TimeSeriesDataset, rmse, total_variation
from .ekf import EkfConfig, EkfNoise, NumericalError, run_ekf

log = logging.getLogger(__name__)

LOG_HEADER = ("eval", "theta_soc", "theta_ir", "theta_v", "theta_socy", "J", "J1", "J2", "J3")


@dataclass(frozen=True)
class CostWeights:
    w1: float = 0.5
    w2: float = 1.0
    w3: float = 5.0
    v_max: float = 4.2
    v_min: float = 2.5

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ContractError("cost weights must be non-negative")
        if not self.v_max > self.v_min:
            raise ContractError("v_max must exceed v_min")

    def combine(self, j1: float, j2: float, j3: float) -> float:
        return self.w1 * j1 / (self.v_max - self.v_min) + self.w2 * j2 + self.w3 * j3


@dataclass(frozen=True)
class Cost:
    J: float
    J1: float
    J2: float
    J3: float
    error: str = ""


def cost_j(theta: EkfNoise, cfg: EkfConfig, d_tr: TimeSeriesDataset, vs=None, soc_vs=None,
           weights: CostWeights = CostWeights()) -> Cost:
    """Run the configured filter with noise ``theta`` and score it against the reference.

    Filter failures give an infinite cost with the reason in ``error``.
    """
    soc_ref = d_tr.require_soc()
    run_cfg = replace(cfg, noise=theta)
    try:
        tr = run_ekf(run_cfg, d_tr, vs=vs, soc_vs=soc_vs, timing=False)
    except (NumericalError, FloatingPointError, OverflowError, ZeroDivisionError) as exc:
        log.debug("filter failed for %s: %s", theta, exc)
        inf = float("inf")
        return Cost(inf, inf, inf, inf, str(exc))
    j1 = rmse(d_tr.v, tr.v_hat)
    j2 = rmse(soc_ref, tr.soc_hat)
    j3 = total_variation(tr.soc_hat)
    J = weights.combine(j1, j2, j3)
    if not math.isfinite(J):
        return Cost(float("inf"), j1, j2, j3, "non-finite cost")
    return Cost(J, j1, j2, j3)


# --- black-box optimizer --------------------------------------------------------

@dataclass(frozen=True)
class BboProblem:
    lb: Tuple[float, ...] = (1e-6,) * 4
    ub: Tuple[float, ...] = (1.0,) * 4
    budget: int = 100
    seed: int = 0
    log_scale: bool = True
    random_search: bool = False
    explore0: float = 0.3  # initial weight of the distance bonus
    n_starts: int = 12

    def __post_init__(self):
        lb = tuple(float(x) for x in self.lb)
        ub = tuple(float(x) for x in self.ub)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)
        if len(lb) != len(ub) or not lb:
            raise ContractError("bounds must be non-empty and of equal length")
        if any(not l < u for l, u in zip(lb, ub)):
            raise ContractError("lower bounds must be strictly below upper bounds")
        if self.log_scale and min(lb) <= 0:
            raise ContractError("log-scaled search needs positive bounds")
        if self.budget < self.dim + 2:
            raise ContractError(f"budget must be at least dim + 2 = {self.dim + 2}")

    @property
    def dim(self) -> int:
        return len(self.lb)

    def _ends(self):
        lo, hi = np.array(self.lb), np.array(self.ub)
        if self.log_scale:
            return np.log10(lo), np.log10(hi)
        return lo, hi

    def to_theta(self, u) -> np.ndarray:
        """Unit-cube point to parameters, clipped onto the box."""
        lo, hi = self._ends()
        z = lo + np.clip(u, 0.0, 1.0) * (hi - lo)
        th = 10.0**z if self.log_scale else z
        return np.clip(th, self.lb, self.ub)


@dataclass
class BboHistory:
    thetas: List[np.ndarray] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    incumbent: List[float] = field(default_factory=list)

    def add(self, theta, value):
        self.thetas.append(np.array(theta, dtype=float))
        self.values.append(float(value))
        best = self.incumbent[-1] if self.incumbent else float("inf")
        self.incumbent.append(min(best, float(value)))

    def best(self) -> Tuple[np.ndarray, float]:
        k = int(np.argmin(self.values))
        return self.thetas[k], self.values[k]


def _surrogate_values(values):
    f = np.array(values, dtype=float)
    finite = np.isfinite(f)
    if not finite.any():
        return np.zeros_like(f)
    worst = float(np.max(f[finite]))
    f[~finite] = 10.0 * worst if worst > 0 else worst + 10.0 * (abs(worst) + 1.0)
    lo, hi = float(f.min()), float(f.max())
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


class CubicRbf:
    """Cubic radial basis interpolant with a linear polynomial tail.

    Solves the usual saddle-point system by least squares, so coincident
    sites do not break the fit.  Values and gradients are analytic.
    """

    def __init__(self, X, y):
        X = np.asarray(X, dtype=float)
        n, d = X.shape
        r = np.sqrt(np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2))
        P = np.hstack([np.ones((n, 1)), X])
        A = np.zeros((n + d + 1, n + d + 1))
        A[:n, :n] = r**3
        A[:n, n:] = P
        A[n:, :n] = P.T
        rhs = np.concatenate([np.asarray(y, dtype=float), np.zeros(d + 1)])
        sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if not np.all(np.isfinite(sol)):
            raise NumericalError("surrogate system has no finite solution")
        self.X, self.w, self.c = X, sol[:n], sol[n:]

    def __call__(self, u):
        diff = u - self.X
        r = np.sqrt(np.sum(diff * diff, axis=1))
        val = self.w @ r**3 + self.c[0] + self.c[1:] @ u
        grad = 3.0 * (self.w * r) @ diff + self.c[1:]
        return float(val), grad


def bbo_minimize(f: Callable[[np.ndarray], float], prob: BboProblem) -> Tuple[np.ndarray, BboHistory]:
    """Minimize ``f`` over the box with an RBF surrogate.

    A seeded Latin hypercube of max(2 dim, 8) points seeds a cubic RBF
    model (with linear tail) in unit-cube coordinates, refitted after every
    evaluation.  Each further point minimizes the surrogate minus a
    distance-to-data bonus whose weight decays linearly to zero over the
    budget; the acquisition is minimized by L-BFGS-B from several seeded
    starts.  Infinite values are replaced by ten times the worst finite
    value for fitting only.
    """
    d = prob.dim
    rng = np.random.default_rng(prob.seed)
    hist = BboHistory()
    U: List[np.ndarray] = []

    def evaluate(u):
        th = prob.to_theta(u)
        val = float(f(th))
        if math.isnan(val):
            val = float("inf")
        U.append(np.clip(u, 0.0, 1.0))
        hist.add(th, val)

    if prob.random_search:
        for _ in range(prob.budget):
            evaluate(rng.random(d))
        return hist.best()[0], hist

    n0 = min(max(2 * d, 8), prob.budget)
    design = qmc.LatinHypercube(d=d, seed=rng).random(n0)
    for u in design:
        evaluate(u)

    bounds = [(0.0, 1.0)] * d
    while len(hist.values) < prob.budget:
        t = len(hist.values)
        progress = (t - n0) / max(prob.budget - n0, 1)
        weight = prob.explore0 * (1.0 - progress)
        X = np.array(U)
        y = _surrogate_values(hist.values)
        try:
            model = CubicRbf(X, y)
        except (NumericalError, np.linalg.LinAlgError):
            model = CubicRbf(X + rng.normal(0.0, 1e-9, X.shape), y)

        def acq(u):
            diff = u - X
            dist2 = np.sum(diff * diff, axis=1)
            j = int(np.argmin(dist2))
            dist = math.sqrt(dist2[j])
            val, grad = model(u)
            if dist > 0:
                grad = grad - weight * diff[j] / dist
            return val - weight * dist, grad

        order = np.argsort(y)
        starts = [X[j] for j in order[: max(1, prob.n_starts // 3)]]
        starts += list(rng.random((prob.n_starts - len(starts), d)))
        best_u, best_a = None, float("inf")
        for s in starts:
            res = minimize(acq, s, jac=True, method="L-BFGS-B", bounds=bounds)
            if res.fun < best_a:
                best_u, best_a = np.clip(res.x, 0.0, 1.0), float(res.fun)
        if best_u is None or np.min(np.sum((X - best_u) ** 2, axis=1)) < 1e-18:
            # the acquisition landed on a sampled point; jitter it
            base = X[order[0]] if best_u is None else best_u
            best_u = np.clip(base + rng.normal(0.0, 1e-3, d), 0.0, 1.0)
        evaluate(best_u)
    return hist.best()[0], hist


# --- filter calibration -----------------------------------------------------------

def calibrate_filter(
    cfg: EkfConfig,
    d_tr: TimeSeriesDataset,
    vs=None,
    prob: BboProblem = BboProblem(),
    weights: CostWeights = CostWeights(),
    log_path=None,
    soc_vs=None,
    fixed_soc_y: float = 1.0,
) -> Tuple[EkfNoise, List[Tuple[np.ndarray, Cost]]]:
    """Choose the four noise levels minimizing the calibration cost on ``d_tr``.

    In baseline mode the SOC pseudo-measurement level has no effect and is
    held at ``fixed_soc_y``; the search runs over the first three levels.
    The virtual-sensor predictions are computed once and reused by every
    fusion rollout.
    """
    fusion = cfg.mode == "fusion"
    if fusion and soc_vs is None:
        if vs is None:
            raise ContractError("fusion calibration needs a virtual sensor")
        soc_vs = vs.predict(d_tr.without_soc())
    if prob.dim != 4:
        raise ContractError("the calibration box must be 4-dimensional")
    search = prob if fusion else replace(prob, lb=prob.lb[:3], ub=prob.ub[:3])
    records: List[Tuple[np.ndarray, Cost]] = []

    def f(th):
        full = np.append(th, fixed_soc_y) if not fusion else th
        c = cost_j(EkfNoise.from_array(full), cfg, d_tr, soc_vs=soc_vs if fusion else None,
                   weights=weights)
        records.append((full, c))
        return c.J

    best, _ = bbo_minimize(f, search)
    full = np.append(best, fixed_soc_y) if not fusion else best
    if log_path is not None:
        write_calibration_log(records, log_path)
    return EkfNoise.from_array(full), records


def write_calibration_log(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for n, (th, c) in enumerate(records):
            w.writerow([n] + [repr(float(x)) for x in th] + [repr(c.J), repr(c.J1), repr(c.J2), repr(c.J3)])
