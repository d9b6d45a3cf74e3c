"""Command-line pipeline: simulate, identify, train-vs, calibrate, evaluate, report.

Every stage reads its inputs from and writes its outputs to one output
directory, so stages can be re-run individually.  ``pipeline`` runs them all.

Exit codes: 0 success, 2 invalid configuration, 3 missing upstream artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .calibrate import BboProblem, CostWeights, calibrate_filter
from .datamodel import (
    ContractError,
    ParseError,
    TimeSeriesDataset,
    concat,
    read_geis_csv,
    read_metrics_csv,
    read_timeseries_csv,
    rmse,
    total_variation,
    write_geis_csv,
    write_metrics_csv,
    write_timeseries_csv,
)
from .ekf import MODES, EkfConfig, EkfNoise, NumericalError, run_ekf, write_trace_csv
from .identify import ConditioningError, FitError, identify_cell, write_fit_table
from .neural import TrainingError
from .simulate import (
    _KINDS,
    CellParams,
    NoiseSpec,
    ParameterizationError,
    ProtocolError,
    load_params,
    merged_drive,
    params_from_section,
    save_params,
    simulate_geis,
    simulate_lc_ocv,
)
from .virtual_sensor import VsConfig, load_vs, save_vs, train_virtual_sensor

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4

METHODS = ("bekf", "vs", "vsf")
EVAL_HEADER = ("method", "rmse", "tv", "median_step_s")

# artifact file names, relative to the output directory
LC_OCV = "lc_ocv.csv"
GEIS = "geis.csv"
TRAIN = "train.csv"
TEST = "test.csv"
SIM_REPORT = "simulate_report.csv"
PARAMS = "params.ini"
FITS = "geis_fits.csv"
VS = "vs.json"
REPORT = "report.csv"


def noise_file(mode: str) -> str:
    return f"noise_{mode}.ini"


def calib_log_file(mode: str) -> str:
    return f"calibration_log_{mode}.csv"


def eval_file(split: str) -> str:
    return f"evaluation_{split}.csv"


def trace_file(method: str) -> str:
    return f"traces_{method}.csv"


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing artifact {path}; run the '{stage}' stage first")
        self.path, self.stage = path, stage


# --- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    out_dir: Path = Path("socfusion_out")
    seed: int = 0
    cell: CellParams = CellParams()
    # synthetic data
    sigma_v: float = 0.005
    sigma_i: float = 0.02
    soc0: float = 0.95
    train_kinds: Tuple[str, ...] = ("pulse_urban", "pulse_highway")
    test_kinds: Tuple[str, ...] = ("mixed", "pulse_urban")
    lc_c_rate: float = 0.05
    geis_levels: int = 10
    geis_noise_rel: float = 0.01
    # identification
    ocv_degree: int = 8
    capacity_bias: float = -0.05
    # virtual sensor
    vs: VsConfig = VsConfig()
    # filter and calibration
    fusion_warmup: int = 5
    cross_term: bool = False
    weights: CostWeights = CostWeights()
    bbo: BboProblem = BboProblem()

    def train_seeds(self) -> Tuple[int, ...]:
        return tuple(self.seed + 11 + n for n in range(len(self.train_kinds)))

    def test_seeds(self) -> Tuple[int, ...]:
        return tuple(self.seed + 21 + n for n in range(len(self.test_kinds)))

    def validate(self) -> "PipelineConfig":
        checks = [
            (self.sigma_v >= 0 and self.sigma_i >= 0, "noise levels must be non-negative"),
            (0 < self.soc0 <= 1, "soc0 must lie in (0, 1]"),
            (0 < self.lc_c_rate <= 2, "lc_c_rate must lie in (0, 2]"),
            (self.geis_levels >= 4, "geis_levels must be at least 4"),
            (self.geis_noise_rel >= 0, "geis_noise_rel must be non-negative"),
            (1 <= self.ocv_degree <= 12, "ocv_degree must lie in [1, 12]"),
            (-0.5 < self.capacity_bias < 0.5, "capacity_bias must lie in (-0.5, 0.5)"),
            (1 <= self.vs.M <= 8, "M must lie in [1, 8]"),
            (self.vs.n_theta >= 1, "n_theta must be positive"),
            (self.vs.ell >= 0, "ell must be non-negative"),
            (0 <= self.vs.pole_radius < 1, "pole_radius must lie in [0, 1)"),
            (self.vs.cluster_points >= self.vs.n_theta, "cluster_points must be at least n_theta"),
            (self.fusion_warmup >= 0, "fusion_warmup must be non-negative"),
            (self.bbo.dim == 4, "calibration bounds need 4 entries"),
        ]
        for kinds in (self.train_kinds, self.test_kinds):
            checks.append((len(kinds) >= 1 and all(k in _KINDS for k in kinds),
                           f"profile kinds must be drawn from {_KINDS}"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in text.replace("\n", " ").split(",") if x.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _words(text: str) -> Tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


_CELL_KEYS = {f.name for f in fields(CellParams)}
_SECTIONS: Dict[str, Dict[str, callable]] = {
    "pipeline": {"out_dir": str, "seed": int},
    "data": {"sigma_v": float, "sigma_i": float, "soc0": float, "train_kinds": _words,
             "test_kinds": _words, "lc_c_rate": float, "geis_levels": int, "geis_noise_rel": float},
    "identify": {"ocv_degree": int, "capacity_bias": float},
    "virtual_sensor": {"M": int, "n_theta": int, "ell": int, "pole_radius": float, "zero_bias": bool,
                       "mlpv_hidden": _ints, "h_hidden": _ints, "mlpv_epochs": int, "mlpv_lr": float,
                       "h_epochs": int, "h_lr": float, "h_lr_decay": float, "h_batch_size": int,
                       "cluster_points": int},
    "ekf": {"fusion_warmup": int, "cross_term": bool},
    "calibration": {"budget": int, "lower": _floats, "upper": _floats,
                    "w1": float, "w2": float, "w3": float},
}


def _read_section(cp: configparser.ConfigParser, name: str) -> dict:
    if name not in cp:
        return {}
    sec, spec, out = cp[name], _SECTIONS[name], {}
    for key in sec:
        # configparser lower-cases keys
        match = {k.lower(): k for k in spec}.get(key)
        if match is None:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        conv = spec[match]
        out[match] = sec.getboolean(key) if conv is bool else conv(sec[key])
    return out


def load_config(path: Optional[str]) -> PipelineConfig:
    """Read an INI file; absent sections and keys keep their defaults."""
    base = PipelineConfig()
    if path is None:
        return base.validate()
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config file {path}")
        unknown = set(cp.sections()) - set(_SECTIONS) - {"cell"}
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        if "cell" in cp:
            extra = set(cp["cell"]) - _CELL_KEYS
            if extra:
                raise ConfigError(f"[cell] unknown keys: {', '.join(sorted(extra))}")
        kw: dict = {}
        pipe = _read_section(cp, "pipeline")
        if "out_dir" in pipe:
            kw["out_dir"] = Path(pipe["out_dir"])
        if "seed" in pipe:
            kw["seed"] = pipe["seed"]
        kw.update(_read_section(cp, "data"))
        kw.update(_read_section(cp, "identify"))
        kw.update(_read_section(cp, "ekf"))
        if "cell" in cp:
            cell = params_from_section(cp["cell"])
            cell.check()
            kw["cell"] = cell
        kw["vs"] = _vs_config(_read_section(cp, "virtual_sensor"), base.vs)
        cal = _read_section(cp, "calibration")
        kw["weights"] = CostWeights(cal.get("w1", 0.5), cal.get("w2", 1.0), cal.get("w3", 5.0))
        kw["bbo"] = BboProblem(cal.get("lower", base.bbo.lb), cal.get("upper", base.bbo.ub),
                               cal.get("budget", base.bbo.budget))
        return replace(base, **kw).validate()
    except (configparser.Error, ValueError, ParameterizationError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


def _vs_config(sec: dict, base: VsConfig) -> VsConfig:
    kw = {k: sec[k] for k in ("M", "n_theta", "ell", "pole_radius", "zero_bias", "cluster_points",
                              "mlpv_hidden", "h_hidden") if k in sec}
    mlpv = base.mlpv_train
    if "mlpv_epochs" in sec:
        mlpv = replace(mlpv, epochs=sec["mlpv_epochs"])
    if "mlpv_lr" in sec:
        mlpv = replace(mlpv, lr=sec["mlpv_lr"])
    h = base.h_train
    for key, attr in (("h_epochs", "epochs"), ("h_lr", "lr"), ("h_lr_decay", "lr_decay"),
                      ("h_batch_size", "batch_size")):
        if key in sec:
            h = replace(h, **{attr: sec[key]})
    return replace(base, mlpv_train=mlpv, h_train=h, **kw)


def apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        kw["out_dir"] = Path(args.out_dir)
    if getattr(args, "budget", None) is not None:
        try:
            kw["bbo"] = replace(cfg.bbo, budget=args.budget)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
    cfg = replace(cfg, **kw)
    # the global seed drives every stochastic component
    return replace(cfg, vs=replace(cfg.vs, seed=cfg.seed), bbo=replace(cfg.bbo, seed=cfg.seed)).validate()


# --- artifact helpers -------------------------------------------------------------

def _need(cfg: PipelineConfig, name: str, stage: str) -> Path:
    path = cfg.out_dir / name
    if not path.is_file():
        raise MissingArtifact(path, stage)
    return path


def save_noise(noise: EkfNoise, path: Path) -> None:
    cp = configparser.ConfigParser()
    cp["noise"] = {k: repr(float(x)) for k, x in
                   zip(("sigma_soc", "sigma_ir", "sigma_v", "sigma_soc_y"), noise.as_array())}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def load_noise(path: Path) -> EkfNoise:
    cp = configparser.ConfigParser()
    cp.read(path, encoding="utf-8")
    sec = cp["noise"]
    return EkfNoise(*(float(sec[k]) for k in ("sigma_soc", "sigma_ir", "sigma_v", "sigma_soc_y")))


def _filter_config(cfg: PipelineConfig, params: CellParams, mode: str,
                   noise: EkfNoise = EkfNoise(1.0, 1.0, 1.0)) -> EkfConfig:
    # the filter runs on the identified model with a deliberately biased capacity
    return EkfConfig(params.with_capacity_bias(cfg.capacity_bias), noise, mode,
                     cross_term=cfg.cross_term, fusion_warmup=cfg.fusion_warmup)


def _split_lc(d: TimeSeriesDataset) -> Tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Split the stored low-current sweep into its discharge and charge legs."""
    charge = np.flatnonzero(d.i < 0)
    if charge.size == 0 or np.any(d.i[: charge[0]] <= 0):
        raise ContractError("low-current file must hold a discharge leg followed by a charge leg")
    k = int(charge[0])
    return d.slice(0, k), d.slice(k, len(d))


# --- stages ---------------------------------------------------------------------

def cmd_simulate(cfg: PipelineConfig) -> None:
    out, p, s = cfg.out_dir, cfg.cell, cfg.seed
    out.mkdir(parents=True, exist_ok=True)
    noise = NoiseSpec(cfg.sigma_v, cfg.sigma_i, s + 1)
    train, seams_tr = merged_drive(p, cfg.train_kinds, cfg.train_seeds(), cfg.soc0, noise)
    test, seams_te = merged_drive(p, cfg.test_kinds, cfg.test_seeds(), cfg.soc0,
                                  replace(noise, seed=s + 2))
    # the low-current sweep carries no current noise
    dd, dc = simulate_lc_ocv(p, cfg.lc_c_rate, NoiseSpec(cfg.sigma_v, 0.0, s + 3))
    geis = simulate_geis(p, np.linspace(0.05, 0.95, cfg.geis_levels), noise_rel=cfg.geis_noise_rel,
                         seed=s + 4)
    write_timeseries_csv(concat([dd, dc]), out / LC_OCV)
    write_geis_csv(geis, out / GEIS)
    write_timeseries_csv(train, out / TRAIN)
    write_timeseries_csv(test, out / TEST)
    save_params(p, out / "true_params.ini")
    rows = [("train_rows", len(train)), ("test_rows", len(test)), ("lc_ocv_rows", len(dd) + len(dc)),
            ("geis_levels", len(geis.soc_levels))]
    for name, d, seams in (("train", train, seams_tr), ("test", test, seams_te)):
        for n, k in enumerate(seams):
            rows.append((f"{name}_seam_{n}", int(k)))
            rows.append((f"{name}_seam_{n}_current_jump", float(d.i[k] - d.i[k - 1])))
    write_metrics_csv(rows, out / SIM_REPORT)
    log.info("simulate: train %d rows, test %d rows", len(train), len(test))


def cmd_identify(cfg: PipelineConfig) -> None:
    lc = read_timeseries_csv(_need(cfg, LC_OCV, "simulate"))
    geis = read_geis_csv(_need(cfg, GEIS, "simulate"))
    dd, dc = _split_lc(lc)
    p_hat, fits = identify_cell(dd, dc, geis, cfg.ocv_degree, cfg.cell.v_min, cfg.cell.v_max)
    save_params(p_hat, cfg.out_dir / PARAMS)
    write_fit_table(fits, cfg.out_dir / FITS)
    log.info("identify: Q = %.1f C, eta = %.5f", p_hat.q_total, p_hat.eta_c)


def cmd_train_vs(cfg: PipelineConfig) -> None:
    train = read_timeseries_csv(_need(cfg, TRAIN, "simulate"))
    vs, _ = train_virtual_sensor(train, cfg.vs)
    save_vs(vs, cfg.out_dir / VS)
    log.info("train-vs: %d observers of order %d", vs.n_theta, vs.M)


def cmd_calibrate(cfg: PipelineConfig, mode: str) -> None:
    train = read_timeseries_csv(_need(cfg, TRAIN, "simulate"))
    params = load_params(_need(cfg, PARAMS, "identify"))
    soc_vs = None
    if mode == "fusion":
        vs = load_vs(_need(cfg, VS, "train-vs"))
        soc_vs = vs.predict(train.without_soc())
    noise, records = calibrate_filter(_filter_config(cfg, params, mode), train, prob=cfg.bbo,
                                      weights=cfg.weights, soc_vs=soc_vs,
                                      log_path=cfg.out_dir / calib_log_file(mode))
    if not np.isfinite(min(c.J for _, c in records)):
        raise NumericalError("every calibration run failed")
    save_noise(noise, cfg.out_dir / noise_file(mode))
    log.info("calibrate %s: %s", mode, noise)


def _stream_vs(vs, d: TimeSeriesDataset) -> Tuple[np.ndarray, np.ndarray]:
    vs.reset()
    out, times = np.empty(len(d)), np.empty(len(d))
    clock = time.perf_counter
    for k, (i, v) in enumerate(zip(d.i.tolist(), d.v.tolist())):
        t0 = clock()
        out[k] = vs.step(i, v)
        times[k] = clock() - t0
    return out, times


def _evaluate_split(cfg, d, params, vs, noises, trace_dir: Optional[Path]):
    """Score the three estimators on ``d``; estimators only see (i, v)."""
    soc_ref = d.require_soc()
    blind = d.without_soc()
    results = {}
    tr_b = run_ekf(_filter_config(cfg, params, "baseline", noises["baseline"]), blind)
    s_vs, t_vs = _stream_vs(vs, blind)
    tr_f = run_ekf(_filter_config(cfg, params, "fusion", noises["fusion"]), blind, vs=vs)
    for method, soc_hat, times in (("bekf", tr_b.soc_hat, tr_b.step_time), ("vs", s_vs, t_vs),
                                   ("vsf", tr_f.soc_hat, tr_f.step_time)):
        # the first step of a filter carries no correction, so it is not timed
        results[method] = (rmse(soc_ref, soc_hat), total_variation(soc_hat), float(np.median(times[1:])))
    if trace_dir is not None:
        write_trace_csv(trace_dir / trace_file("bekf"), blind, tr_b.soc_hat, tr_b.v_hat, tr_b.innov_v,
                        soc_true=soc_ref)
        write_trace_csv(trace_dir / trace_file("vs"), blind, s_vs, soc_true=soc_ref)
        write_trace_csv(trace_dir / trace_file("vsf"), blind, tr_f.soc_hat, tr_f.v_hat, tr_f.innov_v,
                        tr_f.innov_soc, soc_true=soc_ref)
    return results


def write_evaluation(results: dict, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for method in METHODS:
            w.writerow([method] + [repr(float(x)) for x in results[method]])


def read_evaluation(path: Path) -> Dict[str, Tuple[float, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != EVAL_HEADER:
        raise ParseError(f"{path}: unexpected header", 1)
    return {r[0]: tuple(float(x) for x in r[1:]) for r in rows[1:]}


def cmd_evaluate(cfg: PipelineConfig) -> None:
    train = read_timeseries_csv(_need(cfg, TRAIN, "simulate"))
    test = read_timeseries_csv(_need(cfg, TEST, "simulate"))
    params = load_params(_need(cfg, PARAMS, "identify"))
    vs = load_vs(_need(cfg, VS, "train-vs"))
    noises = {m: load_noise(_need(cfg, noise_file(m), f"calibrate --mode {m}")) for m in MODES}
    for split, d, traces in (("train", train, None), ("test", test, cfg.out_dir)):
        res = _evaluate_split(cfg, d, params, vs, noises, traces)
        write_evaluation(res, cfg.out_dir / eval_file(split))
        for m in METHODS:
            log.info("evaluate %s %-4s rmse %.4f tv %.2e step %.1e s", split, m, *res[m])


def cmd_report(cfg: PipelineConfig) -> Dict[str, object]:
    test = read_evaluation(_need(cfg, eval_file("test"), "evaluate"))
    train = read_evaluation(_need(cfg, eval_file("train"), "evaluate"))
    p_hat = load_params(_need(cfg, PARAMS, "identify"))
    rows = []
    for split, res in (("train", train), ("test", test)):
        for m in METHODS:
            for col, x in zip(EVAL_HEADER[1:], res[m]):
                rows.append((f"{split}_{m}_{col}", x))
    (rb, tb, _), (rv, tv, _), (rf, tf, _) = (test[m] for m in METHODS)
    rows += [
        ("test_rmse_order_vs_vsf_bekf", int(rv < rf < rb)),
        ("test_tv_order_vsf_bekf_vs", int(tf < tb < tv)),
        ("test_tv_vsf_over_vs", tf / tv),
        ("identified_q_rel_error", p_hat.q_total / cfg.cell.q_total - 1.0),
        ("identified_eta_error", p_hat.eta_c - cfg.cell.eta_c),
    ]
    grid = np.linspace(0.05, 0.95, 91)
    for name in ("r0", "r1", "tau1"):
        err = np.max(np.abs(getattr(p_hat, name)(grid) / getattr(cfg.cell, name)(grid) - 1.0))
        rows.append((f"identified_{name}_max_rel_error", float(err)))
    for m in MODES:
        path = cfg.out_dir / noise_file(m)
        if path.is_file():
            for k, x in zip(("sigma_soc", "sigma_ir", "sigma_v", "sigma_soc_y"), load_noise(path).as_array()):
                rows.append((f"{m}_{k}", float(x)))
    write_metrics_csv(rows, cfg.out_dir / REPORT)
    for name, value in rows:
        print(f"{name},{value!r}")
    return read_metrics_csv(cfg.out_dir / REPORT)


def cmd_pipeline(cfg: PipelineConfig) -> None:
    cmd_simulate(cfg)
    cmd_identify(cfg)
    cmd_train_vs(cfg)
    for mode in MODES:
        cmd_calibrate(cfg, mode)
    cmd_evaluate(cfg)
    cmd_report(cfg)


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out-dir", help="artifact directory (overrides the config)")
    common.add_argument("--budget", type=int, help="calibration evaluation budget")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="socfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "write the synthetic datasets"),
                       ("identify", "identify the cell model from the low-current and impedance data"),
                       ("train-vs", "train the virtual sensor"),
                       ("evaluate", "score BEKF, VS and VSF on the train and test sets"),
                       ("report", "summarize the evaluation as metric,value rows"),
                       ("pipeline", "run every stage in order")):
        sub.add_parser(name, parents=[common], help=text)
    cal = sub.add_parser("calibrate", parents=[common], help="calibrate the filter noise levels")
    cal.add_argument("--mode", choices=MODES, default="baseline")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, matching the config error code
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stages = {
        "simulate": cmd_simulate, "identify": cmd_identify, "train-vs": cmd_train_vs,
        "evaluate": cmd_evaluate, "report": cmd_report, "pipeline": cmd_pipeline,
        "calibrate": lambda c: cmd_calibrate(c, args.mode),
    }
    try:
        stages[args.command](cfg)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError, TrainingError, FitError, ConditioningError,
            ProtocolError, ParameterizationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ContractError, ParseError) as exc:
        # malformed inputs on disk are treated as configuration problems
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    return run(argv)
