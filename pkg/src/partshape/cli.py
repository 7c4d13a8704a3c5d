"""Command-line interface: ``partshape {fit,test,cv,simulate} --config FILE``.

The configuration is a TOML file. Times, intervals, bandwidths and knots are
given in the data's original units and mapped to [0, 1] internally.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import kernelfit, splinefit
from .infer import (BootstrapError, KernelEngine, Multiplier, SplineEngine, TestSpec, build_plan,
                    run_test, select_tuning)
from .kernelfit import FitError, Kernel
from .longdata import (CsvSchema, DataError, Hypothesis, LongitudinalSample, SchemaError, Shape,
                       ShapeConstraint, load_csv, normalize_domain)
from .qpcore import QpError
from .simlab import INTERVALS, Mode, SimScenario, default_workers, run_power_study

OUT_ENV = "PARTSHAPE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

PRESETS = {
    "null-quick": {"n": 100, "interval": [0.0, 0.5], "R": 25, "B": 100},
    "null": {"n": 500, "interval": [0.0, 0.5], "R": 100, "B": 250},
    "alternative": {"n": 500, "interval": [0.5, 1.0], "R": 100, "B": 250},
}

log = logging.getLogger("partshape")


class ConfigError(ValueError):
    pass


@dataclass
class HypothesisRow:
    name: str
    constraints: list  # (covariate name, shape, (a, b)) in original units


@dataclass
class RunConfig:
    raw: dict
    data: CsvSchema | None = None
    data_path: Path | None = None
    hypotheses: list = field(default_factory=list)
    engines: tuple = ("kernel",)
    B: int = 250
    alpha: float = 0.05
    multiplier: str = "mammen"
    folds: int = 5
    seed: int = 0


def _section(raw, name) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def read_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig(raw)
    data = _section(raw, "data")
    if data:
        try:
            cols = data["covariates"]
            dpath = Path(data["path"])
            cfg.data = CsvSchema(str(data["id"]), str(data["time"]), str(data["response"]),
                                 tuple(str(c) for c in cols), bool(data.get("intercept", False)),
                                 str(data.get("delimiter", ",")),
                                 tuple(float(v) for v in data["domain"]) if "domain" in data else None)
        except KeyError as exc:
            raise ConfigError(f"[data] is missing key {exc}") from None
        cfg.data_path = dpath if dpath.is_absolute() else (path.parent / dpath)
    for k, row in enumerate(raw.get("hypothesis", [])):
        cons = []
        for c in row.get("constraints", []):
            try:
                iv = tuple(float(v) for v in c["interval"])
                Shape.parse(str(c["shape"]))
                cons.append((str(c["covariate"]), str(c["shape"]), iv))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"hypothesis {k}: bad constraint {c!r} ({exc})") from None
        if not cons:
            raise ConfigError(f"hypothesis {k} has no constraints")
        cfg.hypotheses.append(HypothesisRow(str(row.get("name", f"H{k + 1}")), cons))
    run = _section(raw, "run")
    eng = run.get("engines", run.get("engine", "kernel"))
    cfg.engines = tuple([eng] if isinstance(eng, str) else eng)
    for e in cfg.engines:
        if e not in ("kernel", "spline"):
            raise ConfigError(f"unknown engine {e!r}; use 'kernel' or 'spline'")
    cfg.B = int(run.get("B", cfg.B))
    cfg.alpha = float(run.get("alpha", cfg.alpha))
    cfg.multiplier = str(run.get("multiplier", cfg.multiplier))
    cfg.folds = int(run.get("folds", cfg.folds))
    cfg.seed = int(run.get("seed", cfg.seed))
    if cfg.B < 1 or not 0 < cfg.alpha < 1:
        raise ConfigError("[run] needs B >= 1 and 0 < alpha < 1")
    try:
        Multiplier(cfg.multiplier)
    except ValueError:
        raise ConfigError(f"unknown multiplier {cfg.multiplier!r}") from None
    return cfg


def _load(cfg: RunConfig) -> LongitudinalSample:
    if cfg.data is None:
        raise ConfigError("this command needs a [data] section")
    try:
        return load_csv(cfg.data_path, cfg.data)
    except FileNotFoundError:
        raise DataError(f"data file {cfg.data_path} not found") from None


def _hypothesis(row: HypothesisRow, sample: LongitudinalSample) -> Hypothesis:
    lo, hi = sample.domain
    names = list(sample.covariate_names)
    cons = []
    for name, shape, (a, b) in row.constraints:
        if name not in names:
            raise ConfigError(f"{row.name}: unknown covariate {name!r}; known: {names}")
        span = hi - lo
        if a < lo - 1e-9 * span or b > hi + 1e-9 * span or not a < b:
            raise ConfigError(f"{row.name}: interval [{a}, {b}] is not inside the domain [{lo}, {hi}]")
        ua, ub = (min(max((v - lo) / span, 0.0), 1.0) for v in (a, b))
        cons.append(ShapeConstraint(names.index(name), (ua, ub), Shape.parse(shape)))
    return Hypothesis(tuple(cons))


def _engine(cfg: RunConfig, name: str, sample: LongitudinalSample):
    lo, hi = sample.domain
    span = hi - lo
    if name == "kernel":
        sec = _section(cfg.raw, "kernel")
        bw = sec.get("bandwidth", "cv")
        cands = sec.get("candidates")
        try:
            kern = Kernel(sec.get("kernel", "epanechnikov"))
        except ValueError:
            raise ConfigError(f"unknown kernel {sec.get('kernel')!r}") from None
        return KernelEngine(
            None if bw == "cv" else float(bw) / span, kern,
            tuple(float(c) / span for c in cands) if cands else kernelfit.DEFAULT_BANDWIDTHS,
            int(sec.get("grid_size", kernelfit.DEFAULT_GRID_SIZE)))
    sec = _section(cfg.raw, "spline")
    knots = sec.get("knots", "cv")
    names = list(sample.covariate_names)
    per = []
    for cname, ks in _section(sec, "per_covariate").items():
        if cname not in names:
            raise ConfigError(f"[spline.per_covariate]: unknown covariate {cname!r}")
        per.append((names.index(cname), tuple((float(k) - lo) / span for k in ks)))
    return SplineEngine(
        None if knots == "cv" else tuple((float(k) - lo) / span for k in knots), tuple(per),
        tuple(int(c) for c in sec.get("knot_counts", splinefit.DEFAULT_KNOT_COUNTS)),
        str(sec.get("positivity", "knots")),
        int(sec.get("grid_size", kernelfit.DEFAULT_GRID_SIZE)))


def _spec(cfg, hyp, engine) -> TestSpec:
    return TestSpec(hyp, engine, B=cfg.B, alpha=cfg.alpha, seed=cfg.seed,
                    multiplier=cfg.multiplier, cv_folds=cfg.folds)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _tuning_original(engine: dict, sample: LongitudinalSample) -> dict:
    lo, hi = sample.domain
    out = {}
    if "bandwidth" in engine:
        out["bandwidth"] = engine["bandwidth"] * (hi - lo)
    if "knots" in engine:
        out["knots"] = {name: [lo + k * (hi - lo) for k in ks]
                        for name, ks in zip(sample.covariate_names, engine["knots"])}
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(cfg: RunConfig, out: Path) -> list[Path]:
    """Estimate grids (original time units) for each engine and hypothesis row."""
    sample = normalize_domain(_load(cfg))
    rows = cfg.hypotheses or [None]
    written = []
    for name in cfg.engines:
        for row in rows:
            hyp = _hypothesis(row, sample) if row else None
            spec = _spec(cfg, hyp, _engine(cfg, name, sample))  # hyp None: unconstrained only
            spec, cv = select_tuning(sample, spec)
            plan = build_plan(sample, spec)
            theta_t = plan.unconstrained(sample.responses)
            grid = plan.quad_grid if name == "kernel" else np.unique(np.r_[np.linspace(0, 1, 101), plan.quad_grid])
            cols = {"t": sample.to_original(grid)}
            names = sample.covariate_names
            meta = {"engine": plan.metadata(), "tuning_original_units": _tuning_original(plan.metadata(), sample),
                    "domain": list(sample.domain), "n": sample.n, "total_obs": sample.total_obs,
                    "hypothesis": row.name if row else None}
            if cv:
                meta["cv"] = cv
            fits = [("unconstrained", theta_t)]
            if hyp is not None:
                sol = plan.constrained(theta_t)
                slack = plan.projector.A @ sol.x if plan.projector.m else np.zeros(0)
                meta["constraints"] = {"rows": int(plan.projector.m), "active": sol.active_set.tolist(),
                                       "max_violation": float(max(0.0, -slack.min(initial=0.0))),
                                       "kkt_residual": sol.kkt_residual}
                fits.append(("constrained", sol.x))
            scale = 1.0 / (sample.domain[1] - sample.domain[0])
            for label, theta in fits:
                vals = plan.beta_at(theta, grid)
                for j, cname in enumerate(names):
                    cols[f"beta_{cname}_{label}"] = vals[:, j]
                if name == "kernel":
                    d = np.asarray(theta).reshape(plan.grid.size, 2, plan.p)[:, 1, :] * scale
                    for j, cname in enumerate(names):
                        cols[f"dbeta_{cname}_{label}"] = d[:, j]
            stem = f"fit_{name}" + (f"_{row.name}" if row else "")
            cpath = out / f"{stem}.csv"
            with cpath.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(list(cols))
                for r in zip(*cols.values()):
                    w.writerow([repr(float(v)) for v in r])
            written += [cpath, _write_json(out / f"{stem}.json", meta)]
    return written


def cmd_test(cfg: RunConfig, out: Path) -> list[Path]:
    """One bootstrap test per (hypothesis row, engine); p-value table as CSV."""
    if not cfg.hypotheses:
        raise ConfigError("test needs at least one [[hypothesis]] row")
    sample = normalize_domain(_load(cfg))
    results, timing = [], []
    for row in cfg.hypotheses:
        hyp = _hypothesis(row, sample)
        for name in cfg.engines:
            rep = run_test(sample, _spec(cfg, hyp, _engine(cfg, name, sample)))
            d = rep.to_dict(timing=False)
            d.update({"hypothesis": row.name, "engine_name": name,
                      "tuning_original_units": _tuning_original(rep.engine, sample)})
            results.append(d)
            timing.append({"hypothesis": row.name, "engine": name, **rep.timing})
    paths = [_write_json(out / "test_report.json", {"reports": results})]
    table = out / "pvalues.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hypothesis", *cfg.engines])
        for row in cfg.hypotheses:
            w.writerow([row.name, *[next(r["p_value"] for r in results
                                         if r["hypothesis"] == row.name and r["engine_name"] == e)
                                    for e in cfg.engines]])
    paths += [table, _write_json(out / "timing.json", timing)]
    return paths


def cmd_cv(cfg: RunConfig, out: Path) -> list[Path]:
    sample = normalize_domain(_load(cfg))
    lo, hi = sample.domain
    rows = cfg.hypotheses or [None]
    report = []
    for row in rows:
        hyp = _hypothesis(row, sample) if row else None
        entry = {"hypothesis": row.name if row else None}
        for name in cfg.engines:
            eng = _engine(cfg, name, sample)
            if name == "kernel":
                h, errors = kernelfit.select_bandwidth(
                    sample, eng.candidates, cfg.folds, cfg.seed, eng.kernel,
                    kernelfit.make_grid(hyp, size=eng.grid_size))
                entry["kernel"] = {"selected_bandwidth": h * (hi - lo),
                                   "errors": {repr(k * (hi - lo)): v for k, v in errors.items()}}
            else:
                model, count, errors = splinefit.select_knots(sample, hyp, eng.candidates, cfg.folds, cfg.seed)
                entry["spline"] = {"selected_count": count,
                                   "errors": {str(k): v for k, v in errors.items()},
                                   "knots": _tuning_original(model.metadata(), sample)["knots"]}
        report.append(entry)
    return [_write_json(out / "cv.json", {"selections": report})]


def cmd_simulate(cfg: RunConfig, out: Path, threads: int | None) -> list[Path]:
    sec = dict(PRESETS.get(_section(cfg.raw, "simulate").get("preset", ""), {}))
    preset = _section(cfg.raw, "simulate").get("preset")
    if preset and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    sec.update({k: v for k, v in _section(cfg.raw, "simulate").items() if k != "preset"})
    if "scenario" in sec:
        sec["interval"] = INTERVALS[int(sec.pop("scenario")) - 1]
    engines = sec.get("engines", list(cfg.engines))
    written = []
    for name in [engines] if isinstance(engines, str) else engines:
        if name == "kernel":
            ksec = _section(cfg.raw, "kernel")
            bw = ksec.get("bandwidth", "cv")
            eng = KernelEngine(None if bw == "cv" else float(bw))
        elif name == "spline":
            ssec = _section(cfg.raw, "spline")
            kn = ssec.get("knots", "cv")
            eng = SplineEngine(None if kn == "cv" else tuple(float(k) for k in kn))
        else:
            raise ConfigError(f"unknown engine {name!r}")
        try:
            sc = SimScenario(int(sec.get("n", 100)), tuple(sec.get("interval", (0.0, 0.5))), eng,
                             int(sec.get("R", 25)), int(sec.get("B", 100)), Mode(sec.get("mode", "full")),
                             cfg.seed, tuple(float(a) for a in sec.get("alphas", (0.05, 0.1))))
        except ValueError as exc:
            raise ConfigError(f"[simulate]: {exc}") from None
        rep = run_power_study(sc, threads)
        written += list(rep.write(out / f"simulate_{name}"))
    return written


COMMANDS = ("fit", "test", "cv", "simulate")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="partshape", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
        p.add_argument("--threads", type=int, default=None, help="worker cap (default: all CPUs)")
        p.add_argument("--out", default=None, help=f"output directory (or ${OUT_ENV})")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def output_dir(arg, cfg: RunConfig) -> Path:
    out = arg or os.environ.get(OUT_ENV) or cfg.raw.get("output") or "partshape_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        out = output_dir(args.out, cfg)
        if args.command == "fit":
            paths = cmd_fit(cfg, out)
        elif args.command == "test":
            paths = cmd_test(cfg, out)
        elif args.command == "cv":
            paths = cmd_cv(cfg, out)
        else:
            paths = cmd_simulate(cfg, out, args.threads or default_workers())
    except (ConfigError, splinefit.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, QpError, BootstrapError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:  # invalid settings caught by the library's own checks
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
