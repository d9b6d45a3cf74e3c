"""Synthetic ground-truth cell.

A one-RC Thevenin model with SOC-dependent parameters generates the three
experiment classes used downstream: a low-current OCV sweep, impedance
spectra at SOC equilibria, and dynamic current profiles.  Truth-side sensor
noise (``NoiseSpec``) is independent of the filter tuning knobs.
"""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from .datamodel import ContractError, GeisDataset, ImpedancePoint, TimeSeriesDataset, concat

log = logging.getLogger(__name__)

Q_NOMINAL_AH = 4.9
V_MIN = 2.5
V_MAX = 4.2
I_DISCHARGE_MAX = 9.8
I_CHARGE_MAX = 4.9

# Degree-8 fit of a monotone 2.5-4.2 V curve, constant term first.
DEFAULT_THETA_OCV = (
    2.504, 14.076001, -100.124886, 424.782094, -1090.624891,
    1720.132282, -1623.772964, 839.357982, -182.133618,
)
DEFAULT_THETA_R0 = (0.012, 5.0, 0.014)
DEFAULT_THETA_R1 = (0.015, 4.0, 0.008)
DEFAULT_THETA_TAU1 = (6.0, 12.0, -16.0, 8.0)


class ParameterizationError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


def _exp_curve(theta, soc):
    t1, t2, t3 = theta
    return t1 * np.exp(-t2 * np.asarray(soc, dtype=float)) + t3


@dataclass(frozen=True)
class CellParams:
    q_total: float = Q_NOMINAL_AH * 3600.0
    eta_c: float = 0.99
    theta_ocv: Tuple[float, ...] = DEFAULT_THETA_OCV
    theta_r0: Tuple[float, float, float] = DEFAULT_THETA_R0
    theta_r1: Tuple[float, float, float] = DEFAULT_THETA_R1
    theta_tau1: Tuple[float, ...] = DEFAULT_THETA_TAU1
    v_min: float = V_MIN
    v_max: float = V_MAX

    def __post_init__(self):
        for name in ("theta_ocv", "theta_r0", "theta_r1", "theta_tau1"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if not self.q_total > 0:
            raise ParameterizationError(f"q_total must be positive, got {self.q_total}")
        if not 0 < self.eta_c <= 1:
            raise ParameterizationError(f"eta_c must lie in (0, 1], got {self.eta_c}")
        if len(self.theta_r0) != 3 or len(self.theta_r1) != 3:
            raise ParameterizationError("resistance curves take exactly 3 coefficients")
        if not self.v_max > self.v_min:
            raise ParameterizationError("v_max must exceed v_min")

    def ocv(self, soc):
        return P.polyval(soc, self.theta_ocv)

    def r0(self, soc):
        return _exp_curve(self.theta_r0, soc)

    def r1(self, soc):
        return _exp_curve(self.theta_r1, soc)

    def tau1(self, soc):
        return P.polyval(soc, self.theta_tau1)

    def check(self, n_grid: int = 1001, require_monotone_ocv: bool = False) -> None:
        """Raise if R0, R1 or tau1 is non-positive somewhere on [0, 1]."""
        s = np.linspace(0.0, 1.0, n_grid)
        for name in ("r0", "r1", "tau1"):
            if np.any(getattr(self, name)(s) <= 0):
                raise ParameterizationError(f"{name}(soc) must be positive on [0, 1]")
        if require_monotone_ocv and np.any(np.diff(self.ocv(s)) <= 0):
            raise ParameterizationError("OCV(soc) must be strictly increasing on [0, 1]")

    def with_capacity_bias(self, rel: float) -> "CellParams":
        return replace(self, q_total=self.q_total * (1.0 + rel))


def _fmt_array(xs) -> str:
    return ", ".join(repr(float(x)) for x in xs)


def _parse_array(text: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in text.replace("\n", " ").split(",") if x.strip())


def params_to_config(p: CellParams, section: str = "cell") -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp[section] = {
        "q_total": repr(p.q_total),
        "eta_c": repr(p.eta_c),
        "theta_ocv": _fmt_array(p.theta_ocv),
        "theta_r0": _fmt_array(p.theta_r0),
        "theta_r1": _fmt_array(p.theta_r1),
        "theta_tau1": _fmt_array(p.theta_tau1),
        "v_min": repr(p.v_min),
        "v_max": repr(p.v_max),
    }
    return cp


def params_from_section(sec, base: Optional[CellParams] = None) -> CellParams:
    """Build CellParams from a config section; missing keys fall back to ``base``."""
    base = base or CellParams()
    kw = {}
    for key in ("q_total", "eta_c", "v_min", "v_max"):
        if key in sec:
            kw[key] = float(sec[key])
    for key in ("theta_ocv", "theta_r0", "theta_r1", "theta_tau1"):
        if key in sec:
            kw[key] = _parse_array(sec[key])
    return replace(base, **kw)


def save_params(p: CellParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        params_to_config(p).write(fh)


def load_params(path) -> CellParams:
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    if "cell" not in cp:
        raise ParameterizationError(f"{path}: missing [cell] section")
    return params_from_section(cp["cell"])


@dataclass(frozen=True)
class NoiseSpec:
    sigma_v_meas: float = 0.0
    sigma_i_meas: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_v_meas < 0 or self.sigma_i_meas < 0:
            raise ContractError("noise standard deviations must be non-negative")


@dataclass(frozen=True)
class CurrentProfile:
    name: str
    currents: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.currents, dtype=float)
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise ContractError("profile currents must be a finite 1-D sequence")
        c.setflags(write=False)
        object.__setattr__(self, "currents", c)

    def __len__(self):
        return self.currents.shape[0]

    def __add__(self, other: "CurrentProfile") -> "CurrentProfile":
        return CurrentProfile(f"{self.name}+{other.name}", np.concatenate([self.currents, other.currents]))


def constant_profile(current: float, n_steps: int, name: str = "constant") -> CurrentProfile:
    return CurrentProfile(name, np.full(int(n_steps), float(current)))


@dataclass
class _RunResult:
    dataset: TimeSeriesDataset
    stop_reason: str  # "end", "soc", "v_min", "v_max"
    soc_next: float
    ir_next: float


def _run_ecm(p, profile, soc0, ir0, noise, tau_s, stop_at_cutoff) -> _RunResult:
    if not 0.0 <= soc0 <= 1.0:
        raise ContractError(f"soc0 must lie in [0, 1], got {soc0}")
    cur = profile.currents
    n = len(cur)
    rng = np.random.default_rng(noise.seed)
    # draw noise up front so the soc column never depends on the seed
    e_v = rng.normal(0.0, noise.sigma_v_meas, n) if noise.sigma_v_meas > 0 else np.zeros(n)
    e_i = rng.normal(0.0, noise.sigma_i_meas, n) if noise.sigma_i_meas > 0 else np.zeros(n)

    ocv_c = p.theta_ocv[::-1]
    tau_c = p.theta_tau1[::-1]
    a0, b0, c0 = p.theta_r0
    a1, b1, c1 = p.theta_r1
    q, eta_c = p.q_total, p.eta_c

    soc_out = np.empty(n)
    v_out = np.empty(n)
    soc, ir = float(soc0), float(ir0)
    reason = "end"
    k = 0
    for k in range(n):
        if not 0.0 <= soc <= 1.0:
            reason = "soc"
            break
        i = cur[k]
        ocv = 0.0
        for c in ocv_c:
            ocv = ocv * soc + c
        r0 = a0 * math.exp(-b0 * soc) + c0
        r1 = a1 * math.exp(-b1 * soc) + c1
        v = ocv - r1 * ir - r0 * i
        if stop_at_cutoff and (v < p.v_min or v > p.v_max):
            reason = "v_min" if v < p.v_min else "v_max"
            break
        soc_out[k] = soc
        v_out[k] = v
        tau = 0.0
        for c in tau_c:
            tau = tau * soc + c
        if tau <= 0:
            raise ParameterizationError(f"non-positive tau1 = {tau} at soc = {soc} (step {k})")
        alpha = math.exp(-tau_s / tau)
        eta = 1.0 if i >= 0 else eta_c
        soc = soc - tau_s / q * eta * i
        ir = alpha * ir + (1.0 - alpha) * i
    else:
        k = n
    m = k
    v_meas = np.maximum(v_out[:m] + e_v[:m], 0.0)
    d = TimeSeriesDataset(cur[:m] + e_i[:m], v_meas, soc_out[:m], tau_s)
    return _RunResult(d, reason, soc, ir)


def simulate_ecm(
    p: CellParams,
    profile: CurrentProfile,
    soc0: float,
    ir0: float = 0.0,
    noise: NoiseSpec = NoiseSpec(),
    tau_s: float = 1.0,
    stop_at_cutoff: bool = True,
) -> TimeSeriesDataset:
    """Run the discrete Thevenin recursion over ``profile``.

    Stops before the first step whose state SOC leaves [0, 1] or whose
    noiseless terminal voltage falls outside [v_min, v_max].  The ``soc``
    column holds the true trajectory; ``i`` and ``v`` carry sensor noise.
    """
    return _run_ecm(p, profile, soc0, ir0, noise, tau_s, stop_at_cutoff).dataset


def coulomb_count(
    currents: Sequence[float],
    q_total: float,
    eta_c: float,
    soc0: float,
    tau_s: float = 1.0,
    return_flag: bool = False,
):
    """SOC trajectory by current integration, one value per input step.

    Values are not clamped; with ``return_flag`` a second value reports
    whether any of them left [0, 1].
    """
    if not q_total > 0:
        raise ContractError(f"q_total must be positive, got {q_total}")
    cur = np.asarray(currents, dtype=float)
    out = np.empty(cur.shape[0])
    soc = float(soc0)
    for k, i in enumerate(cur):
        out[k] = soc
        eta = 1.0 if i >= 0 else eta_c
        soc = soc - tau_s / q_total * eta * i
    if return_flag:
        return out, bool(np.any((out < 0) | (out > 1)))
    return out


def simulate_lc_ocv(
    p: CellParams,
    c_rate: float = 1.0 / 20.0,
    noise: NoiseSpec = NoiseSpec(),
    tau_s: float = 1.0,
) -> Tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Low-current discharge from full charge to v_min, then charge to v_max.

    The current is exactly Q/h * c_rate (C/20 of a 4.9 Ah cell is 0.245 A,
    which the lab protocol rounds to 250 mA).  The rest between the two legs
    is not simulated; the RC branch is assumed relaxed when charging starts.
    """
    if not c_rate > 0:
        raise ContractError("c_rate must be positive")
    i_mag = p.q_total / 3600.0 * c_rate
    n_max = int(math.ceil(1.2 * p.q_total / (i_mag * tau_s))) + 2
    nd = NoiseSpec(noise.sigma_v_meas, noise.sigma_i_meas, noise.seed)
    dis = _run_ecm(p, constant_profile(i_mag, n_max, "lc_discharge"), 1.0, 0.0, nd, tau_s, True)
    if dis.stop_reason != "v_min":
        raise ProtocolError(f"discharge never reached v_min = {p.v_min} V (stopped on {dis.stop_reason})")
    nc = NoiseSpec(noise.sigma_v_meas, noise.sigma_i_meas, noise.seed + 1)
    soc_start = float(dis.soc_next)
    chg = _run_ecm(p, constant_profile(-i_mag, n_max, "lc_charge"), soc_start, 0.0, nc, tau_s, True)
    if chg.stop_reason != "v_max":
        raise ProtocolError(f"charge never reached v_max = {p.v_max} V (stopped on {chg.stop_reason})")
    return dis.dataset, chg.dataset


def default_geis_omegas(n_points: int = 60, f_max: float = 1e4, per_decade: int = 10) -> np.ndarray:
    """Sweep from f_max downward, ``per_decade`` points per decade, in rad/s."""
    f = f_max * 10.0 ** (-np.arange(n_points) / per_decade)
    return 2.0 * np.pi * f


def linearized_impedance(omega, r0, r1, tau1):
    omega = np.asarray(omega, dtype=float)
    return r0 + r1 / (1.0 + 1j * omega * tau1)


def simulate_geis(
    p: CellParams,
    soc_levels: Sequence[float],
    freqs: Optional[Sequence[float]] = None,
    noise_rel: float = 0.0,
    seed: int = 0,
) -> GeisDataset:
    omegas = default_geis_omegas() if freqs is None else np.asarray(freqs, dtype=float)
    if omegas.size == 0:
        raise ContractError("empty frequency list")
    if np.any(omegas <= 0):
        raise ContractError("frequencies must be positive")
    rng = np.random.default_rng(seed)
    spectra = {}
    for s in soc_levels:
        s = float(s)
        z = linearized_impedance(omegas, float(p.r0(s)), float(p.r1(s)), float(p.tau1(s)))
        if noise_rel > 0:
            z = z * (1.0 + noise_rel * (rng.normal(size=z.shape) + 1j * rng.normal(size=z.shape)))
        spectra[s] = [ImpedancePoint(float(w), complex(zz)) for w, zz in zip(omegas, z)]
    return GeisDataset(spectra)


# --- synthetic drive cycles ------------------------------------------------

# (duration range s, level range as fraction of the bound; negative = regen)
_SEGMENTS = {
    "pulse_urban": [
        ((10, 40), (0.0, 0.0)),
        ((8, 25), (0.15, 0.45)),
        ((4, 12), (0.55, 1.0)),
        ((6, 20), (-0.8, -0.3)),
        ((10, 30), (0.1, 0.3)),
        ((5, 15), (-0.5, -0.2)),
    ],
    "pulse_highway": [
        ((20, 60), (0.3, 0.55)),
        ((10, 30), (0.6, 1.0)),
        ((5, 15), (-0.6, -0.2)),
        ((30, 90), (0.25, 0.45)),
        ((5, 10), (0.0, 0.0)),
    ],
}
_KINDS = ("pulse_urban", "pulse_highway", "mixed")


def gen_profile(
    kind: str,
    n_steps: int,
    i_max: float = I_DISCHARGE_MAX,
    seed: int = 0,
    i_charge_max: float = I_CHARGE_MAX,
    amp_jitter: float = 0.15,
) -> CurrentProfile:
    """Seeded repeating pulse train.

    One base cycle of segments is drawn from the seed and repeated until
    ``n_steps`` samples exist; every repetition rescales each segment's
    amplitude by an independent factor in [1 - amp_jitter, 1 + amp_jitter].
    Discharge is bounded by ``i_max``, regenerative pulses by ``i_charge_max``.
    """
    if kind not in _KINDS:
        raise ContractError(f"unknown profile kind {kind!r}; expected one of {_KINDS}")
    if i_max <= 0 or i_charge_max <= 0:
        raise ContractError("current bounds must be positive")
    rng = np.random.default_rng(seed)
    if kind == "mixed":
        pool = _SEGMENTS["pulse_urban"] + _SEGMENTS["pulse_highway"]
        order = rng.permutation(len(pool))
        template = [pool[j] for j in order]
    else:
        template = list(_SEGMENTS[kind])
    cycle = []
    for (dmin, dmax), (lo, hi) in template:
        dur = int(rng.integers(dmin, dmax + 1))
        level = float(rng.uniform(lo, hi))
        cycle.append((dur, level))

    out = np.empty(int(n_steps))
    pos = 0
    while pos < n_steps:
        for dur, level in cycle:
            if pos >= n_steps:
                break
            amp = level * float(rng.uniform(1.0 - amp_jitter, 1.0 + amp_jitter))
            bound = i_max if amp >= 0 else i_charge_max
            amp = float(np.clip(amp, -1.0, 1.0)) * bound
            stop = min(pos + dur, n_steps)
            out[pos:stop] = amp
            pos = stop
    return CurrentProfile(kind, out)


def simulate_drive(
    p: CellParams,
    kind: str,
    seed: int,
    soc0: float = 0.95,
    noise: NoiseSpec = NoiseSpec(),
    i_max: float = I_DISCHARGE_MAX,
    tau_s: float = 1.0,
) -> TimeSeriesDataset:
    """Apply a drive profile from ``soc0`` until the discharge cut-off."""
    n_max = int(3 * p.q_total / tau_s)
    profile = gen_profile(kind, n_max, i_max, seed)
    run = _run_ecm(p, profile, soc0, 0.0, noise, tau_s, True)
    if run.stop_reason == "end":
        log.warning("profile %s ended before the cell reached a cut-off", kind)
    return run.dataset


def merged_drive(
    p: CellParams,
    kinds: Sequence[str],
    seeds: Sequence[int],
    soc0: float = 0.95,
    noise: NoiseSpec = NoiseSpec(),
    tau_s: float = 1.0,
) -> Tuple[TimeSeriesDataset, list]:
    """Concatenate drive runs; returns the dataset and the seam indices."""
    parts = []
    for n, (kind, seed) in enumerate(zip(kinds, seeds)):
        nz = NoiseSpec(noise.sigma_v_meas, noise.sigma_i_meas, noise.seed + 7919 * (n + 1) + seed)
        parts.append(simulate_drive(p, kind, seed, soc0, nz, tau_s=tau_s))
    seams = list(np.cumsum([len(d) for d in parts])[:-1].astype(int))
    return concat(parts), seams
