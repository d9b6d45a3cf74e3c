"""Recover Thevenin parameters from protocol data.

Capacity and Coulombic efficiency come from the low-current sweep, the OCV
polynomial from a least-squares fit on the merged sweep, and [R0, R1, tau1]
from impedance spectra, first per equilibrium and then as SOC curves.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import least_squares

from .datamodel import ContractError, GeisDataset, ImpedancePoint, TimeSeriesDataset, concat
from .simulate import CellParams, linearized_impedance

log = logging.getLogger(__name__)

N_STARTS = 8
TAU_START_RANGE = (0.1, 1000.0)


class ProtocolViolation(ContractError):
    pass


class ConditioningError(ValueError):
    pass


class FitError(RuntimeError):
    def __init__(self, message, best_residual=float("inf")):
        super().__init__(f"{message} (best residual {best_residual:.3g})")
        self.best_residual = best_residual


@dataclass(frozen=True)
class EquilibriumFit:
    soc_bar: float
    r0: float
    r1: float
    tau1: float
    residual: float
    n_excluded: int = 0

    def __post_init__(self):
        if min(self.r0, self.r1, self.tau1) <= 0:
            raise ContractError("equilibrium parameters must be positive")


@dataclass(frozen=True)
class CurveFit:
    theta_r0: Tuple[float, float, float]
    theta_r1: Tuple[float, float, float]
    theta_tau1: Tuple[float, ...]
    fallback_used: Tuple[bool, bool] = (False, False)


def estimate_capacity(d_d: TimeSeriesDataset) -> float:
    """Total charge (A s) delivered during a full low-current discharge."""
    if len(d_d) == 0:
        raise ProtocolViolation("discharge dataset is empty")
    if np.any(d_d.i <= 0):
        n = int(np.argmax(d_d.i <= 0))
        raise ProtocolViolation(f"discharge dataset has non-positive current at row {n}")
    return float(d_d.tau_s * np.sum(d_d.i))


def estimate_coulombic_eff(d_d: TimeSeriesDataset, d_c: TimeSeriesDataset) -> float:
    if np.any(d_d.i <= 0) or np.any(d_c.i >= 0):
        raise ProtocolViolation("expected discharge-only and charge-only datasets")
    charged = d_c.tau_s * float(np.sum(np.abs(d_c.i)))
    if charged == 0:
        raise ZeroDivisionError("no charge throughput in the charging dataset")
    return float(d_d.tau_s * np.sum(d_d.i)) / charged


def fit_ocv_poly(data, degree: int = 8) -> np.ndarray:
    """Least-squares OCV polynomial in SOC, constant term first.

    ``data`` is a dataset or a sequence of datasets (merged with equal weight).
    """
    if isinstance(data, TimeSeriesDataset):
        d = data
    else:
        d = concat(list(data))
    soc = d.require_soc()
    if np.unique(soc).size < degree + 1:
        raise ContractError(f"need at least {degree + 1} distinct SOC values for degree {degree}")
    V = P.polyvander(soc, degree)
    coef, _, rank, sv = np.linalg.lstsq(V, d.v, rcond=None)
    if rank < degree + 1:
        raise ConditioningError(
            f"design rank {rank} < {degree + 1}; singular values span {sv[0]:.3g} .. {sv[-1]:.3g}"
        )
    return coef


# --- impedance fits ----------------------------------------------------------

def _split_points(points):
    omega = np.array([p.omega for p in points], dtype=float)
    z = np.array([p.z for p in points], dtype=complex)
    keep = z.imag <= 0
    return omega[keep], z[keep], int(np.count_nonzero(~keep))


def _residual(u, omega, z):
    r0, r1, tau = np.exp(u)
    g = linearized_impedance(omega, r0, r1, tau) - z
    return np.concatenate([g.real, g.imag])


def _jacobian(u, omega, z):
    r0, r1, tau = np.exp(u)
    den = 1.0 + 1j * omega * tau
    d_r0 = np.full(omega.shape, r0, dtype=complex)
    d_r1 = r1 / den
    d_tau = -r1 * 1j * omega * tau / den**2
    J = np.stack([d_r0, d_r1, d_tau], axis=1)
    return np.concatenate([J.real, J.imag], axis=0)


def _linear_start(omega, z, tau):
    """Best (R0, R1) for a fixed tau; the model is linear in them."""
    basis = np.stack([np.ones_like(omega, dtype=complex), 1.0 / (1.0 + 1j * omega * tau)], axis=1)
    A = np.concatenate([basis.real, basis.imag])
    b = np.concatenate([z.real, z.imag])
    (r0, r1), *_ = np.linalg.lstsq(A, b, rcond=None)
    floor = 1e-6 * max(np.max(np.abs(z)), 1e-12)
    return max(r0, floor), max(r1, floor)


def fit_impedance(points: Sequence[ImpedancePoint], soc_bar: float = float("nan"),
                  max_nfev: int = 2000) -> EquilibriumFit:
    """Least-squares fit of R0 + R1 / (1 + j w tau1) to one spectrum.

    Points with positive imaginary part are excluded.  Parameters are
    optimized in log space with a Levenberg-Marquardt solver from
    ``N_STARTS`` starts log-spaced in tau1.
    """
    omega, z, n_excluded = _split_points(points)
    if omega.size < 3:
        raise ContractError(f"need >= 3 points with non-positive imaginary part, got {omega.size}")
    # canonical order makes the result independent of the input ordering
    order = np.lexsort((z.imag, z.real, omega))
    omega, z = omega[order], z[order]

    best, best_cost = None, np.inf
    # an exact fit counts as converged even when a parameter is still drifting
    # toward zero in log space (a spectrum without an RC arc)
    exact = 0.5 * omega.size * (1e-10 * float(np.max(np.abs(z)))) ** 2
    for tau0 in np.logspace(*np.log10(TAU_START_RANGE), N_STARTS):
        r0, r1 = _linear_start(omega, z, tau0)
        u0 = np.log([r0, r1, tau0])
        try:
            res = least_squares(_residual, u0, jac=_jacobian, args=(omega, z), method="lm",
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.x)) or (res.status <= 0 and not res.cost <= exact):
            continue
        if res.cost < best_cost:
            best, best_cost = res, res.cost
    if best is None:
        raise FitError(f"impedance fit at soc {soc_bar} failed from every start")
    r0, r1, tau = (float(x) for x in np.exp(best.x))
    rms = float(np.sqrt(2.0 * best_cost / omega.size))
    return EquilibriumFit(soc_bar, r0, r1, tau, rms, n_excluded)


def fit_geis(geis: GeisDataset) -> List[EquilibriumFit]:
    fits = []
    for s in geis.soc_levels:
        f = fit_impedance(geis[s], soc_bar=s)
        if f.n_excluded:
            log.info("soc %.3f: excluded %d points with positive imaginary part", s, f.n_excluded)
        fits.append(f)
    return fits


def _fit_exponential(soc, y, grid=np.linspace(-30.0, 30.0, 601)):
    """theta1 * exp(-theta2 * soc) + theta3 by least squares.

    A grid over theta2 with the linear subproblem solved exactly seeds a
    Levenberg-Marquardt refinement.  If refinement fails the grid optimum is
    returned and the second value is True.
    """
    def linear(t2):
        A = np.stack([np.exp(-t2 * soc), np.ones_like(soc)], axis=1)
        (t1, t3), *_ = np.linalg.lstsq(A, y, rcond=None)
        r = A @ np.array([t1, t3]) - y
        return t1, t3, float(r @ r)

    costs = [linear(t2)[2] for t2 in grid]
    t2 = float(grid[int(np.argmin(costs))])
    t1, t3, c_grid = linear(t2)
    theta0 = np.array([t1, t2, t3])
    scale = max(float(np.max(np.abs(y))), 1e-12)

    def resid(th):
        return (th[0] * np.exp(-th[1] * soc) + th[2] - y) / scale

    def jac(th):
        e = np.exp(-th[1] * soc)
        return np.stack([e, -th[0] * soc * e, np.ones_like(soc)], axis=1) / scale

    try:
        res = least_squares(resid, theta0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=5000)
        ok = res.status > 0 and np.all(np.isfinite(res.x)) and 2 * res.cost * scale**2 <= c_grid * (1 + 1e-9) + 1e-30
    except (ValueError, FloatingPointError):
        ok = False
    if ok:
        return tuple(float(x) for x in res.x), False
    warnings.warn("exponential curve fit did not converge; using grid-search solution")
    return tuple(float(x) for x in theta0), True


def fit_param_curves(fits: Sequence[EquilibriumFit], tau_degree: int = 3) -> CurveFit:
    if len(fits) < 4:
        raise ContractError(f"need >= 4 equilibria, got {len(fits)}")
    soc = np.array([f.soc_bar for f in fits], dtype=float)
    if np.ptp(soc) < 0.5:
        raise ContractError("equilibria must span at least half of the SOC range")
    th_r0, fb0 = _fit_exponential(soc, np.array([f.r0 for f in fits]))
    th_r1, fb1 = _fit_exponential(soc, np.array([f.r1 for f in fits]))
    th_tau = tuple(float(x) for x in P.polyfit(soc, np.array([f.tau1 for f in fits]), tau_degree))
    return CurveFit(th_r0, th_r1, th_tau, (fb0, fb1))


def identify_cell(
    d_d: TimeSeriesDataset,
    d_c: TimeSeriesDataset,
    geis: GeisDataset,
    ocv_degree: int = 8,
    v_min: float = 2.5,
    v_max: float = 4.2,
) -> Tuple[CellParams, List[EquilibriumFit]]:
    """Full identification chain; returns the parameters and per-equilibrium fits."""
    q = estimate_capacity(d_d)
    eta = estimate_coulombic_eff(d_d, d_c)
    theta_ocv = fit_ocv_poly([d_d, d_c], ocv_degree)
    fits = fit_geis(geis)
    curves = fit_param_curves(fits)
    p = CellParams(
        q_total=q,
        eta_c=min(eta, 1.0),
        theta_ocv=tuple(theta_ocv),
        theta_r0=curves.theta_r0,
        theta_r1=curves.theta_r1,
        theta_tau1=curves.theta_tau1,
        v_min=v_min,
        v_max=v_max,
    )
    return p, fits


def write_fit_table(fits: Sequence[EquilibriumFit], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["soc_bar", "r0", "r1", "tau1", "residual"])
        for f in fits:
            w.writerow([repr(f.soc_bar), repr(f.r0), repr(f.r1), repr(f.tau1), repr(f.residual)])
