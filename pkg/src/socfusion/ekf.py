"""Extended Kalman filter on the Thevenin model, optionally fusing a SOC sensor.

State x = [SOC, i_R1].  Each step predicts with the previous current, then
corrects with the voltage (baseline) or with the voltage and a SOC
pseudo-measurement (fusion).  Covariances use the Joseph form and are
symmetrized after every update.

The parameter curves are evaluated at the estimate clipped to [0, 1]; the
OCV polynomial is continued linearly beyond the ends so an estimate that
overshoots still sees a restoring slope.  The state itself is never clipped.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from .datamodel import ContractError, TimeSeriesDataset
from .simulate import CellParams

MODES = ("baseline", "fusion")
SOC_FLAG = (-0.1, 1.1)
TRACE_HEADER = ("k", "soc_true", "soc_hat", "v", "v_hat", "innov_v", "innov_soc")


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EkfNoise:
    sigma_soc: float
    sigma_ir: float
    sigma_v: float
    sigma_soc_y: float = 1.0

    def __post_init__(self):
        for name in ("sigma_soc", "sigma_ir", "sigma_v", "sigma_soc_y"):
            val = float(getattr(self, name))
            if not val > 0 or not math.isfinite(val):
                raise ContractError(f"{name} must be positive and finite, got {val}")
            object.__setattr__(self, name, val)

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_soc, self.sigma_ir, self.sigma_v, self.sigma_soc_y])

    @classmethod
    def from_array(cls, theta) -> "EkfNoise":
        return cls(*(float(t) for t in theta))


@dataclass(frozen=True)
class EkfState:
    x_hat: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        x = np.array(self.x_hat, dtype=float).reshape(2)
        s = np.array(self.sigma, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(x)):
            raise NumericalError("state estimate is non-finite")
        object.__setattr__(self, "x_hat", x)
        object.__setattr__(self, "sigma", s)


@dataclass(frozen=True)
class EkfConfig:
    params: CellParams
    noise: EkfNoise
    mode: str = "baseline"
    x0: Tuple[float, float] = (0.0, 0.0)
    sigma0: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.5, 0.0), (0.0, 0.001))
    tau_s: float = 1.0
    cross_term: bool = False
    fusion_warmup: int = 0  # steps run in baseline mode before the SOC row is used

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.tau_s > 0:
            raise ContractError("tau_s must be positive")

    def initial_state(self) -> EkfState:
        return EkfState(np.array(self.x0, dtype=float), np.array(self.sigma0, dtype=float))


# --- curves and derivatives ---------------------------------------------------

def ocv_prime(p: CellParams, soc):
    return P.polyval(soc, P.polyder(p.theta_ocv))


def r0_prime(p: CellParams, soc):
    t1, t2, _ = p.theta_r0
    return -t1 * t2 * np.exp(-t2 * np.asarray(soc, dtype=float))


def r1_prime(p: CellParams, soc):
    t1, t2, _ = p.theta_r1
    return -t1 * t2 * np.exp(-t2 * np.asarray(soc, dtype=float))


def tau1_prime(p: CellParams, soc):
    return P.polyval(soc, P.polyder(p.theta_tau1))


class _Curves:
    """Scalar curve evaluation with clipping, shared by every step."""

    def __init__(self, p: CellParams):
        self.ocv_c = p.theta_ocv[::-1]
        self.docv_c = tuple(P.polyder(p.theta_ocv))[::-1]
        self.tau_c = p.theta_tau1[::-1]
        self.dtau_c = tuple(P.polyder(p.theta_tau1))[::-1]
        self.r0 = p.theta_r0
        self.r1 = p.theta_r1
        self.q = p.q_total
        self.eta_c = p.eta_c

    @staticmethod
    def _horner(c, s):
        acc = 0.0
        for x in c:
            acc = acc * s + x
        return acc

    def ocv(self, s):
        """OCV and its slope; linear continuation outside [0, 1]."""
        sc = min(max(s, 0.0), 1.0)
        val = self._horner(self.ocv_c, sc)
        slope = self._horner(self.docv_c, sc) if self.docv_c else 0.0
        return val + slope * (s - sc), slope

    def res(self, theta, s):
        sc = min(max(s, 0.0), 1.0)
        t1, t2, t3 = theta
        e = math.exp(-t2 * sc)
        inside = 1.0 if sc == s else 0.0
        return t1 * e + t3, -t1 * t2 * e * inside

    def tau(self, s):
        sc = min(max(s, 0.0), 1.0)
        inside = 1.0 if sc == s else 0.0
        d = self._horner(self.dtau_c, sc) if self.dtau_c else 0.0
        return self._horner(self.tau_c, sc), d * inside


# --- one filter step ------------------------------------------------------------

def _step(cv: _Curves, cfg: EkfConfig, x, S, i_prev, i_now, v, soc_y):
    """Predict with i_prev, correct with v (and soc_y unless it is None).

    ``x`` is (soc, ir); ``S`` is (s00, s01, s11).  Returns the corrected
    state and covariance, the prior voltage prediction, the innovations and
    the Frobenius norm of the gain.
    """
    n = cfg.noise
    soc, ir = x
    s00, s01, s11 = S
    if i_prev is not None:
        tau, dtau = cv.tau(soc)
        if not tau > 0:
            raise NumericalError(f"tau1 evaluated to {tau} at soc estimate {soc}")
        alpha = math.exp(-cfg.tau_s / tau)
        eta = 1.0 if i_prev >= 0 else cv.eta_c
        f10 = alpha * cfg.tau_s * dtau / (tau * tau) * (ir - i_prev) if cfg.cross_term else 0.0
        soc = soc - cfg.tau_s / cv.q * eta * i_prev
        ir = alpha * ir + (1.0 - alpha) * i_prev
        # F S F' + Q with F = [[1, 0], [f10, alpha]]
        p00 = s00 + n.sigma_soc**2
        p01 = f10 * s00 + alpha * s01
        p11 = f10 * f10 * s00 + 2.0 * f10 * alpha * s01 + alpha * alpha * s11 + n.sigma_ir**2
        s00, s01, s11 = p00, p01, p11

    ocv, docv = cv.ocv(soc)
    r0, dr0 = cv.res(cv.r0, soc)
    r1, dr1 = cv.res(cv.r1, soc)
    v_hat = ocv - r1 * ir - r0 * i_now
    h0 = docv - dr1 * ir - dr0 * i_now
    h1 = -r1
    rv = n.sigma_v**2
    e_v = v - v_hat

    if soc_y is None:
        # scalar measurement
        ph0 = s00 * h0 + s01 * h1
        ph1 = s01 * h0 + s11 * h1
        sv = h0 * ph0 + h1 * ph1 + rv
        if not sv > 0 or not math.isfinite(sv):
            raise NumericalError(f"innovation variance {sv} is not positive")
        k0, k1 = ph0 / sv, ph1 / sv
        soc += k0 * e_v
        ir += k1 * e_v
        # Joseph form: (I - K H) S (I - K H)' + K R K'
        a00, a01 = 1.0 - k0 * h0, -k0 * h1
        a10, a11 = -k1 * h0, 1.0 - k1 * h1
        b00 = a00 * s00 + a01 * s01
        b01 = a00 * s01 + a01 * s11
        b10 = a10 * s00 + a11 * s01
        b11 = a10 * s01 + a11 * s11
        n00 = b00 * a00 + b01 * a01 + k0 * k0 * rv
        n01 = b00 * a10 + b01 * a11 + k0 * k1 * rv
        n10 = b10 * a00 + b11 * a01 + k1 * k0 * rv
        n11 = b10 * a10 + b11 * a11 + k1 * k1 * rv
        gain = math.hypot(k0, k1)
        return (soc, ir), (n00, 0.5 * (n01 + n10), n11), v_hat, e_v, float("nan"), gain

    rs = n.sigma_soc_y**2
    e_s = soc_y - soc
    # H = [[h0, h1], [1, 0]]; PH' columns
    ph00 = s00 * h0 + s01 * h1
    ph10 = s01 * h0 + s11 * h1
    ph01 = s00
    ph11 = s01
    # innovation covariance
    c00 = h0 * ph00 + h1 * ph10 + rv
    c01 = ph00
    c11 = s00 + rs
    det = c00 * c11 - c01 * c01
    if not det > 0 or not math.isfinite(det):
        tr = c00 + c11
        cond = float("inf") if det == 0 else abs(tr * tr / det)
        raise NumericalError(f"innovation covariance is singular (condition estimate {cond:.3g})")
    i00, i01, i11 = c11 / det, -c01 / det, c00 / det
    k00 = ph00 * i00 + ph01 * i01
    k01 = ph00 * i01 + ph01 * i11
    k10 = ph10 * i00 + ph11 * i01
    k11 = ph10 * i01 + ph11 * i11
    soc += k00 * e_v + k01 * e_s
    ir += k10 * e_v + k11 * e_s
    a00, a01 = 1.0 - k00 * h0 - k01, -k00 * h1
    a10, a11 = -k10 * h0 - k11, 1.0 - k10 * h1
    b00 = a00 * s00 + a01 * s01
    b01 = a00 * s01 + a01 * s11
    b10 = a10 * s00 + a11 * s01
    b11 = a10 * s01 + a11 * s11
    n00 = b00 * a00 + b01 * a01 + k00 * k00 * rv + k01 * k01 * rs
    n01 = b00 * a10 + b01 * a11 + k00 * k10 * rv + k01 * k11 * rs
    n10 = b10 * a00 + b11 * a01 + k10 * k00 * rv + k11 * k01 * rs
    n11 = b10 * a10 + b11 * a11 + k10 * k10 * rv + k11 * k11 * rs
    gain = math.sqrt(k00 * k00 + k01 * k01 + k10 * k10 + k11 * k11)
    return (soc, ir), (n00, 0.5 * (n01 + n10), n11), v_hat, e_v, e_s, gain


def ekf_step(state: EkfState, cfg: EkfConfig, i_prev: Optional[float], i_now: float,
             y: Sequence[float]) -> Tuple[EkfState, float, float]:
    """One predictor-corrector step.

    ``y`` is [v] or [v, soc_vs]; a two-element ``y`` requires fusion mode.
    ``i_prev`` of None skips the prediction (first sample).  Returns the
    corrected state, the prior voltage prediction and the corrected SOC.
    """
    y = [float(t) for t in y]
    if len(y) == 2 and cfg.mode != "fusion":
        raise ContractError("a SOC pseudo-measurement needs fusion mode")
    if len(y) not in (1, 2):
        raise ContractError("y must hold [v] or [v, soc_vs]")
    S = state.sigma
    x, Sn, v_hat, *_ = _step(_Curves(cfg.params), cfg, tuple(state.x_hat), (S[0, 0], 0.5 * (S[0, 1] + S[1, 0]), S[1, 1]),
                             None if i_prev is None else float(i_prev), float(i_now), y[0],
                             y[1] if len(y) == 2 else None)
    sig = np.array([[Sn[0], Sn[1]], [Sn[1], Sn[2]]])
    return EkfState(np.array(x), sig), v_hat, x[0]


@dataclass
class EkfTrace:
    soc_hat: np.ndarray
    v_hat: np.ndarray
    innov_v: np.ndarray
    innov_soc: np.ndarray
    gain_norm: np.ndarray
    step_time: np.ndarray
    soc_vs: Optional[np.ndarray] = None
    flagged: int = 0  # steps with the SOC estimate outside [-0.1, 1.1]


def run_ekf(cfg: EkfConfig, d: TimeSeriesDataset, vs=None, soc_vs=None,
            timing: bool = True) -> EkfTrace:
    """Stream the filter over ``d``.

    In fusion mode the pseudo-measurement at step k comes from ``vs.step``
    on (i[k], v[k]) before the correction at k, or from the precomputed
    sequence ``soc_vs``.  The reference SOC column of ``d`` is stripped
    before use.
    """
    d = d.without_soc()
    n = len(d)
    fusion = cfg.mode == "fusion"
    if fusion and vs is None and soc_vs is None:
        raise ContractError("fusion mode needs a virtual sensor or its predictions")
    if soc_vs is not None:
        soc_vs = np.asarray(soc_vs, dtype=float)
        if soc_vs.shape != (n,):
            raise ContractError("precomputed SOC predictions must align with the dataset")
    elif vs is not None:
        vs.reset()
    cv = _Curves(cfg.params)
    i = d.i.tolist()
    v = d.v.tolist()
    x = tuple(float(t) for t in cfg.x0)
    S0 = np.asarray(cfg.sigma0, dtype=float)
    S = (S0[0, 0], 0.5 * (S0[0, 1] + S0[1, 0]), S0[1, 1])
    out = np.empty((n, 5))
    ys = np.full(n, np.nan)
    times = np.zeros(n)
    flagged = 0
    clock = time.perf_counter
    for k in range(n):
        t0 = clock() if timing else 0.0
        y_s = None
        if fusion:
            y_s = vs.step(i[k], v[k]) if soc_vs is None else soc_vs[k]
            ys[k] = y_s
            if k < cfg.fusion_warmup:
                y_s = None
        if k == 0:
            # the initial estimate is reported as is; no correction at k = 0
            soc0, ir0 = x
            ocv, _ = cv.ocv(soc0)
            v_hat = ocv - cv.res(cv.r1, soc0)[0] * ir0 - cv.res(cv.r0, soc0)[0] * i[0]
            res = (x, S, v_hat, v[0] - v_hat, float("nan"), 0.0)
        else:
            res = _step(cv, cfg, x, S, i[k - 1], i[k], v[k], y_s)
        if timing:
            times[k] = clock() - t0
        x, S, v_hat, e_v, e_s, g = res
        if not (math.isfinite(x[0]) and math.isfinite(x[1])):
            raise NumericalError(f"state became non-finite at step {k}")
        if not SOC_FLAG[0] <= x[0] <= SOC_FLAG[1]:
            flagged += 1
        out[k] = (x[0], v_hat, e_v, e_s, g)
    return EkfTrace(out[:, 0].copy(), out[:, 1].copy(), out[:, 2].copy(), out[:, 3].copy(),
                    out[:, 4].copy(), times, ys if fusion else None, flagged)


def write_trace_csv(path, d: TimeSeriesDataset, soc_hat, v_hat=None, innov_v=None,
                    innov_soc=None, soc_true=None) -> None:
    """Per-step trace; blank cells for withheld or undefined values."""
    n = len(d)

    def col(a):
        return [None] * n if a is None else list(np.asarray(a, dtype=float))

    def fmt(x):
        return "" if x is None or not math.isfinite(x) else repr(float(x))

    truth = col(soc_true if soc_true is not None else d.soc)
    cols = [truth, col(soc_hat), list(d.v), col(v_hat), col(innov_v), col(innov_soc)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for k in range(n):
            w.writerow([d.k0 + k] + [fmt(c[k]) for c in cols])
