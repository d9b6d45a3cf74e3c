"""Value types, metric kernels and CSV (de)serialization shared by every stage.

Time series are stored column-wise as read-only numpy arrays; ``Sample``
objects are materialized on demand for callers that want row access.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

TIMESERIES_HEADER = ("k", "i_A", "v_V", "soc")
GEIS_HEADER = ("soc_bar", "omega_rad_s", "re_ohm", "im_ohm")
METRICS_HEADER = ("metric", "value")


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class ParseError(ValueError):
    """Malformed input file. ``line`` is 1-based, header included."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Sample:
    k: int
    i: float
    v: float
    soc: Optional[float] = None

    def __post_init__(self):
        if not self.v >= 0.0:
            raise ContractError(f"terminal voltage must be >= 0, got {self.v}")
        if self.soc is not None and not 0.0 <= self.soc <= 1.0:
            raise ContractError(f"soc must lie in [0, 1], got {self.soc}")


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    """Sampled (current, voltage, reference SOC) triples at a fixed period.

    ``soc`` holds NaN where the reference is absent; ``soc is None`` means the
    whole column was withheld.
    """

    i: np.ndarray
    v: np.ndarray
    soc: Optional[np.ndarray] = None
    tau_s: float = 1.0
    k0: int = 0

    def __post_init__(self):
        i = _readonly(self.i)
        v = _readonly(self.v)
        if i.ndim != 1 or i.shape != v.shape:
            raise ContractError("current and voltage must be 1-D arrays of equal length")
        if not self.tau_s > 0:
            raise ContractError(f"tau_s must be positive, got {self.tau_s}")
        if not (np.all(np.isfinite(i)) and np.all(np.isfinite(v))):
            raise ContractError("current and voltage must be finite")
        if np.any(v < 0):
            raise ContractError("terminal voltage must be >= 0")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "v", v)
        if self.soc is not None:
            soc = _readonly(self.soc)
            if soc.shape != i.shape:
                raise ContractError("soc column length differs from current column")
            present = soc[~np.isnan(soc)]
            if np.any((present < 0) | (present > 1)):
                raise ContractError("soc must lie in [0, 1]")
            object.__setattr__(self, "soc", soc)

    def __len__(self) -> int:
        return self.i.shape[0]

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.k0, self.k0 + len(self))

    @property
    def has_soc(self) -> bool:
        return self.soc is not None and not np.any(np.isnan(self.soc))

    def __getitem__(self, n: int) -> Sample:
        soc = None
        if self.soc is not None and not math.isnan(self.soc[n]):
            soc = float(self.soc[n])
        return Sample(int(self.k0 + n), float(self.i[n]), float(self.v[n]), soc)

    def __iter__(self) -> Iterator[Sample]:
        for n in range(len(self)):
            yield self[n]

    @property
    def samples(self) -> list:
        return list(self)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], tau_s: float = 1.0) -> "TimeSeriesDataset":
        if not samples:
            return cls(np.zeros(0), np.zeros(0), None, tau_s)
        ks = [s.k for s in samples]
        if any(b - a != 1 for a, b in zip(ks, ks[1:])):
            raise ContractError("step indices must increase by exactly 1")
        soc = None
        if any(s.soc is not None for s in samples):
            soc = [np.nan if s.soc is None else s.soc for s in samples]
        return cls([s.i for s in samples], [s.v for s in samples], soc, tau_s, ks[0])

    def without_soc(self) -> "TimeSeriesDataset":
        """Copy with the reference column withheld (deployment view)."""
        return TimeSeriesDataset(self.i, self.v, None, self.tau_s, self.k0)

    def require_soc(self) -> np.ndarray:
        if not self.has_soc:
            raise ContractError("operation needs a complete reference soc column")
        return self.soc

    def slice(self, start: int, stop: Optional[int] = None) -> "TimeSeriesDataset":
        start = range(len(self))[start] if len(self) else 0
        soc = None if self.soc is None else self.soc[start:stop]
        return TimeSeriesDataset(
            self.i[start:stop], self.v[start:stop], soc, self.tau_s, self.k0 + start
        )

    def equals(self, other: "TimeSeriesDataset") -> bool:
        if len(self) != len(other) or self.tau_s != other.tau_s or self.k0 != other.k0:
            return False
        if (self.soc is None) != (other.soc is None):
            return False
        same = np.array_equal(self.i, other.i) and np.array_equal(self.v, other.v)
        if self.soc is not None:
            same = same and np.array_equal(self.soc, other.soc, equal_nan=True)
        return bool(same)


def concat(datasets: Sequence[TimeSeriesDataset]) -> TimeSeriesDataset:
    """Join datasets end to end, renumbering steps from zero."""
    if not datasets:
        raise ContractError("nothing to concatenate")
    tau = datasets[0].tau_s
    if any(d.tau_s != tau for d in datasets):
        raise ContractError("cannot merge datasets with different sampling periods")
    soc = None
    if any(d.soc is not None for d in datasets):
        soc = np.concatenate(
            [d.soc if d.soc is not None else np.full(len(d), np.nan) for d in datasets]
        )
    return TimeSeriesDataset(
        np.concatenate([d.i for d in datasets]),
        np.concatenate([d.v for d in datasets]),
        soc,
        tau,
    )


@dataclass(frozen=True)
class ImpedancePoint:
    omega: float
    z: complex

    def __post_init__(self):
        if not self.omega > 0:
            raise ContractError(f"omega must be positive, got {self.omega}")


@dataclass(frozen=True)
class GeisDataset:
    """Impedance spectra keyed by equilibrium SOC."""

    spectra: dict = field(default_factory=dict)

    def __post_init__(self):
        for soc_bar, points in self.spectra.items():
            if not 0.0 <= soc_bar <= 1.0:
                raise ContractError(f"equilibrium soc {soc_bar} outside [0, 1]")
            if len(points) < 2:
                raise ContractError(f"equilibrium {soc_bar} has fewer than 2 points")

    @property
    def soc_levels(self) -> list:
        return sorted(self.spectra)

    def __getitem__(self, soc_bar: float) -> list:
        return self.spectra[soc_bar]


@dataclass(frozen=True)
class Metrics:
    rmse_v: float
    rmse_soc: float
    tv_soc: float

    def __post_init__(self):
        if min(self.rmse_v, self.rmse_soc, self.tv_soc) < 0:
            raise ContractError("metrics are non-negative by construction")


def rmse(a: Iterable[float], b: Iterable[float]) -> float:
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"rmse needs two 1-D sequences of equal length, got {x.shape} and {y.shape}")
    if x.size == 0:
        raise ContractError("rmse of empty sequences is undefined")
    return float(np.sqrt(np.mean((x - y) ** 2)))


def total_variation(s: Iterable[float]) -> float:
    """Mean absolute step-to-step change."""
    x = np.asarray(s, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ContractError("total variation needs at least two samples")
    return float(np.sum(np.abs(np.diff(x))) / (x.size - 1))


# --- CSV I/O ---------------------------------------------------------------

PathLike = Union[str, Path]


def _fmt(x: float) -> str:
    # repr gives the shortest string that round-trips a double exactly
    return repr(float(x))


def _parse_float(text: str, line: int, column: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: not a number: {text!r}", line) from None
    if not math.isfinite(x):
        raise ParseError(f"column {column!r}: non-finite value {text!r}", line)
    return x


def _check_header(row, expected, line=1):
    if tuple(c.strip() for c in row) != expected:
        raise ParseError(f"expected header {','.join(expected)}, got {','.join(row)}", line)


def write_timeseries_csv(d: TimeSeriesDataset, path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMESERIES_HEADER)
        soc = d.soc
        for n in range(len(d)):
            s = "" if soc is None or math.isnan(soc[n]) else _fmt(soc[n])
            w.writerow([d.k0 + n, _fmt(d.i[n]), _fmt(d.v[n]), s])


def read_timeseries_csv(path: PathLike, tau_s: float = 1.0) -> TimeSeriesDataset:
    ks, cur, volt, soc = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            raise ParseError("empty file", 1)
        _check_header(header, TIMESERIES_HEADER)
        for line, row in enumerate(rows, start=2):
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line)
            try:
                k = int(row[0])
            except ValueError:
                raise ParseError(f"column 'k': not an integer: {row[0]!r}", line) from None
            if ks and k != ks[-1] + 1:
                raise ParseError(f"step index {k} does not follow {ks[-1]}", line)
            ks.append(k)
            cur.append(_parse_float(row[1], line, "i_A"))
            v = _parse_float(row[2], line, "v_V")
            if v < 0:
                raise ParseError(f"negative terminal voltage {v}", line)
            volt.append(v)
            if row[3].strip() == "":
                soc.append(np.nan)
            else:
                s = _parse_float(row[3], line, "soc")
                if not 0.0 <= s <= 1.0:
                    raise ParseError(f"soc {s} outside [0, 1]", line)
                soc.append(s)
    soc_col = None if all(math.isnan(s) for s in soc) else soc
    return TimeSeriesDataset(cur, volt, soc_col, tau_s, ks[0] if ks else 0)


def write_geis_csv(g: GeisDataset, path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GEIS_HEADER)
        for soc_bar in g.soc_levels:
            for p in g[soc_bar]:
                w.writerow([_fmt(soc_bar), _fmt(p.omega), _fmt(p.z.real), _fmt(p.z.imag)])


def read_geis_csv(path: PathLike) -> GeisDataset:
    spectra: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            raise ParseError("empty file", 1)
        _check_header(header, GEIS_HEADER)
        for line, row in enumerate(rows, start=2):
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line)
            soc_bar, omega, re, im = (_parse_float(x, line, c) for x, c in zip(row, GEIS_HEADER))
            if omega <= 0:
                raise ParseError(f"non-positive frequency {omega}", line)
            spectra.setdefault(soc_bar, []).append(ImpedancePoint(omega, complex(re, im)))
    return GeisDataset(spectra)


def write_metrics_csv(metrics: Iterable, path: PathLike) -> None:
    """``metrics`` is an iterable of (name, value) pairs."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for name, value in metrics:
            w.writerow([name, _fmt(value) if isinstance(value, float) else value])


def read_metrics_csv(path: PathLike) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            raise ParseError("empty file", 1)
        _check_header(header, METRICS_HEADER)
        for line, row in enumerate(rows, start=2):
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", line)
            try:
                out[row[0]] = float(row[1])
            except ValueError:
                out[row[0]] = row[1]
    return out


def read_csv(path: PathLike, tau_s: float = 1.0):
    """Read either dataset kind, dispatching on the header line."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    cols = tuple(c.strip() for c in first.split(","))
    if cols == TIMESERIES_HEADER:
        return read_timeseries_csv(path, tau_s)
    if cols == GEIS_HEADER:
        return read_geis_csv(path)
    raise ParseError(
        f"unrecognized header; expected {','.join(TIMESERIES_HEADER)} or {','.join(GEIS_HEADER)}", 1
    )


def write_csv(dataset, path: PathLike) -> None:
    if isinstance(dataset, TimeSeriesDataset):
        write_timeseries_csv(dataset, path)
    elif isinstance(dataset, GeisDataset):
        write_geis_csv(dataset, path)
    else:
        raise TypeError(f"cannot write {type(dataset).__name__} as CSV")
