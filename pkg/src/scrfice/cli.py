"""Command-line interface: ``simulate``, ``analyze`` and ``oracle``.

Every command writes into ``--out DIR`` and finishes with ``manifest.json``
holding the resolved configuration and SHA-256 digests of inputs and
outputs. Exit codes: 0 success, 2 invalid input or configuration, 3 a fit
failed to converge, 4 file I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import ASSUMPTIONS, bounds_report, functionals_from_fit
from .curves import check_grid, default_grid, dumps, write_long_csv
from .design import (BootstrapError, SeparationError, fit_propensity, mahalanobis_match, pair_bootstrap,
                     smd_table)
from .domain import ValidationError
from .io import (InputError, ObservedData, cohort_spec_from_dict, file_digest, load_config, observed_csv,
                 profiles_csv, read_observed_csv, read_profiles_csv)
from .oracle import ESTIMANDS, oracle_estimands
from .rng import resolve_threads
from .sensitivity import sensitivity_analysis, sensitivity_csv
from .simulate import rho_max, scenario_spec, simulate_cohort
from .survfit import EMConvergenceError, FrailtyIllnessDeathFit, em_fit
from .survfit.cox import CoxDivergenceError

log = logging.getLogger("scrfice")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "simulate": {
        "scenario": "scenario-a", "spec": None, "n": 10000, "theta": 1.0, "rho": 0.0, "seed": 0,
        "censoring_rate": None, "threads": 1,
    },
    "analyze": {
        "input": None, "r": 1.0, "grid": 52, "assumptions": list(ASSUMPTIONS), "rho": [0.0, 0.5, 1.0],
        "mc_draws": 2000, "B": 200, "caliper": 0.3, "seed": 0, "threads": 1, "skip_matching": False,
        "ps_only": False, "fast_bootstrap": False, "bootstrap": True, "mesh_points": 300,
        "sensitivity_design": "auto",
    },
    "oracle": {"input": None, "r": 1.0, "grid": 52, "compare": None},
}
# keys that do not change any output
_UNRECORDED = ("threads", "out", "config")


class ConvergenceFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _floats(text: str) -> list:
    try:
        return [float(v) for v in str(text).split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _grid_arg(text: str):
    vals = _floats(text)
    if len(vals) == 1 and "," not in text and float(vals[0]).is_integer() and "." not in text:
        return int(vals[0])
    return vals


def _names(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        file_cfg = load_config(args.config)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in cfg and v is not None:
            cfg[k] = v
    cfg["out"] = args.out
    return cfg


def make_grid(spec, r: float) -> np.ndarray:
    if isinstance(spec, bool):
        raise ValidationError("grid must be a point count or a list of times")
    if isinstance(spec, (int, np.integer)):
        return default_grid(int(spec), r)
    return check_grid(spec, r)


def validate_analyze(cfg: dict) -> None:
    if not 0 < float(cfg["r"]) <= 1:
        raise ValidationError("r must lie in (0, 1]")
    make_grid(cfg["grid"], float(cfg["r"]))
    bad = set(cfg["assumptions"]) - set(ASSUMPTIONS)
    if bad or not cfg["assumptions"]:
        raise ValidationError(f"assumptions must be a non-empty subset of {', '.join(ASSUMPTIONS)}")
    rhos = [float(v) for v in cfg["rho"]]
    if any(not 0 <= v <= 1 for v in rhos):
        raise ValidationError("rho values must lie in [0, 1]")
    if int(cfg["mc_draws"]) < 1:
        raise ValidationError("mc_draws must be >= 1")
    if cfg["bootstrap"] and int(cfg["B"]) < 2:
        raise ValidationError("B must be at least 2")
    if not float(cfg["caliper"]) >= 0:
        raise ValidationError("caliper must be non-negative")
    if int(cfg["threads"]) < 0:
        raise ValidationError("threads must be >= 0 (0 = all cores)")
    if int(cfg["mesh_points"]) < 1:
        raise ValidationError("mesh_points must be positive")
    if cfg["sensitivity_design"] not in ("auto", "crossed", "paired"):
        raise ValidationError("sensitivity_design must be auto, crossed or paired")
    if not cfg["input"]:
        raise ValidationError("--input is required")


def _recorded(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in _UNRECORDED}


class _Writer:
    """Writes files under the output directory and remembers their digests."""

    def __init__(self, out):
        self.dir = Path(out)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise InputError(f"cannot create {out}: {exc.strerror or exc}") from exc
        self.files = []

    def write(self, name: str, text: str) -> None:
        try:
            (self.dir / name).write_text(text)
        except OSError as exc:
            raise InputError(f"cannot write {name}: {exc.strerror or exc}") from exc
        self.files.append(name)

    def manifest(self, command: str, cfg: dict, inputs=()) -> None:
        outputs = file_digest([self.dir / f for f in self.files])
        self.write("manifest.json", dumps({
            "command": command,
            "version": __version__,
            "config": _recorded(cfg),
            "inputs": file_digest(inputs),
            "outputs": {Path(k).name: v for k, v in outputs.items()},
        }) + "\n")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: dict) -> int:
    n, seed = int(cfg["n"]), int(cfg["seed"])
    if n < 1:
        raise ValidationError("n must be >= 1")
    threads = resolve_threads(int(cfg["threads"]))
    censor = None if cfg["censoring_rate"] is None else {"kind": "exponential", "rate": float(cfg["censoring_rate"])}
    if censor is not None and not censor["rate"] > 0:
        raise ValidationError("censoring rate must be positive")
    if cfg["spec"]:
        spec = cohort_spec_from_dict(load_config(cfg["spec"]), n, seed)
        for k in ("scenario", "theta", "rho", "censoring_rate"):
            cfg[k] = None
    else:
        spec = scenario_spec(cfg["scenario"], n, float(cfg["theta"]), float(cfg["rho"]), seed, censoring=censor)
    cohort = simulate_cohort(spec, threads)
    out = _Writer(cfg["out"])
    out.write("observed.csv", observed_csv(ObservedData.from_cohort(cohort)))
    out.write("potential_outcomes.csv", profiles_csv(cohort.profiles, cohort.ids))
    out.manifest("simulate", cfg, [cfg["spec"]] if cfg["spec"] else [])
    log.info("wrote %d subjects to %s", n, cfg["out"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _fit_arms(data: ObservedData, theta_fixed=None) -> FrailtyIllnessDeathFit:
    fits = {}
    for a in (0, 1):
        arm = data.arm(a)
        if len(arm["y1"]) == 0:
            raise ValidationError(f"arm {a} has no subjects")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fits[a] = em_fit(**arm, theta_fixed=None if theta_fixed is None else theta_fixed[a])
    return FrailtyIllnessDeathFit(fits)


def _estimates(fit: FrailtyIllnessDeathFit, rows: np.ndarray, grid, cfg: dict, threads: int):
    """Bounds and sensitivity reports plus a flat ``{key: values}`` map of every estimate."""
    r = float(cfg["r"])
    m0, m1 = fit.arm_model(0), fit.arm_model(1)
    func = functionals_from_fit(m0, m1, rows, grid, r, mesh_points=int(cfg["mesh_points"]))
    brep = bounds_report(func, tuple(cfg["assumptions"]))
    flat = {}
    for a in cfg["assumptions"]:
        lo, up = brep.pi_ios[a]
        flat[("bounds", a, "pi_ios", "", "lower")] = np.array([lo])
        flat[("bounds", a, "pi_ios", "", "upper")] = np.array([up])
        for sc in ("difference", "riskRatio"):
            lo, up, ok = brep.curves[(a, sc)]
            flat[("bounds", a, "fice", sc, "lower")] = np.where(ok, lo, np.nan)
            flat[("bounds", a, "fice", sc, "upper")] = np.where(ok, up, np.nan)
    sreps, skipped = [], []
    hi = rho_max(m0.theta, m1.theta)
    for rho in cfg["rho"]:
        rho = float(rho)
        if rho > hi + 1e-12:
            skipped.append(rho)
            continue
        rep = sensitivity_analysis(m0, m1, rho, rows, grid, r, mc_draws=int(cfg["mc_draws"]), seed=int(cfg["seed"]),
                                   threads=threads, mesh_points=int(cfg["mesh_points"]),
                                   design=cfg["sensitivity_design"])
        sreps.append(rep)
        for name, (v, _) in rep.pi.items():
            flat[("sensitivity", repr(rho), f"pi_{name}", "", "value")] = np.array([v])
        for (est, sc), v in rep.curves.values.items():
            flat[("sensitivity", repr(rho), est, sc, "value")] = v
    return func, brep, sreps, skipped, flat


def _estimates_csv(keys, grid, point, boot) -> str:
    rows = []
    for key in keys:
        block, setting, est, sc, qty = key
        times = [None] if est.startswith("pi_") else grid
        for k, t in enumerate(times):
            se = lo = up = None
            if boot is not None:
                se, lo, up = boot[key][0][k], boot[key][1][k], boot[key][2][k]
            rows.append((block, setting, est, sc, qty, t, point[key][k], se, lo, up))
    return write_long_csv(["block", "setting", "estimand", "scale", "quantity", "t", "point", "se", "ci_lower",
                           "ci_upper"], rows)


def cmd_analyze(cfg: dict) -> int:
    validate_analyze(cfg)
    threads = resolve_threads(int(cfg["threads"]))
    r = float(cfg["r"])
    grid = make_grid(cfg["grid"], r)
    data = read_observed_csv(cfg["input"])
    if len(set(data.treat.tolist())) < 2:
        raise ValidationError("both arms must be present")
    out = _Writer(cfg["out"])
    report = {"config": _recorded(cfg), "status": "ok", "notes": []}

    if cfg["skip_matching"]:
        units = np.arange(len(data))[:, None]
        report["design"] = {"matching": "skipped", "n": len(data)}
    else:
        ps = fit_propensity(data.x, data.treat)
        matched = mahalanobis_match(data.x, data.treat, ps, float(cfg["caliper"]),
                                    "ps" if cfg["ps_only"] else "mahalanobis")
        matched.check(data.treat)
        if len(matched) < 2:
            raise ValidationError("fewer than two matched pairs")
        smd = smd_table(data.x, data.treat, matched, data.names)
        out.write("matched_pairs.csv", matched.to_csv(data.ids))
        out.write("smd.csv", smd.to_csv())
        units = matched.pairs
        report["design"] = {
            "matching": matched.mode, "caliper_sd": matched.caliper_sd, "caliper": matched.caliper,
            "pairs": len(matched), "unmatched": matched.unmatched,
            "propensity": {"coefficients": ps.coefficients, "names": ["intercept", *data.names],
                           "warnings": ps.warnings},
            "smd": {n: {"before": b, "after": a} for n, b, a in zip(smd.names, smd.before, smd.after)},
        }
    sample = data.take(units.ravel())

    try:
        fit = _fit_arms(sample)
    except (EMConvergenceError, CoxDivergenceError) as exc:
        report["status"] = "em_not_converged" if isinstance(exc, EMConvergenceError) else "fit_diverged"
        report["notes"].append(str(exc))
        report["affected"] = ["fits", "bounds", "sensitivity", "bootstrap"]
        out.write("report.json", dumps(report) + "\n")
        out.manifest("analyze", cfg, [cfg["input"]])
        raise ConvergenceFailure(str(exc)) from exc
    out.write("fit.json", fit.to_json() + "\n")
    report["fits"] = {
        str(a): {"theta": f.theta, "loglik": f.loglik, "iterations": f.iterations, "notes": f.notes,
                 "beta": {jk: c.beta for jk, c in f.components.items()}}
        for a, f in fit.arms.items()
    }

    func, brep, sreps, skipped, flat = _estimates(fit, sample.x, grid, cfg, threads)
    for rho in skipped:
        report["notes"].append(f"rho={rho!r} exceeds the largest correlation the fitted variances allow "
                               f"({rho_max(fit.theta0, fit.theta1)!r}); sensitivity block left empty")
    keys = list(flat)
    report["falsification"] = brep.falsification
    report["bounds"] = brep.to_dict()
    blocks = {rep.rho: {"status": "ok", **rep.to_dict()} for rep in sreps}
    for rho in skipped:
        blocks[rho] = {"rho": rho, "status": "inadmissible", "rho_max": rho_max(fit.theta0, fit.theta1)}
    report["sensitivity"] = [blocks[float(rho)] for rho in cfg["rho"]]
    out.write("bounds.csv", brep.to_csv())
    if sreps:
        out.write("sensitivity.csv", sensitivity_csv(sreps))

    boot = None
    if cfg["bootstrap"]:
        theta_fixed = (fit.theta0, fit.theta1) if cfg["fast_bootstrap"] else None
        sizes = [len(flat[k]) for k in keys]

        def statistic(idx):
            if idx is not None and len(idx) == len(units) and np.array_equal(idx, np.arange(len(units))):
                vals = flat
            else:
                sub = data.take(units[idx].ravel())
                f = _fit_arms(sub, theta_fixed)
                # a rho that is inadmissible for this replicate's variances yields NaN
                vals = _estimates(f, sub.x, grid, cfg, 1)[-1]
            return np.concatenate([vals.get(k, np.full(n, np.nan)) for k, n in zip(keys, sizes)])

        try:
            res = pair_bootstrap(len(units), statistic, int(cfg["B"]), int(cfg["seed"]), threads)
        except BootstrapError as exc:
            # point estimates stand; only the intervals are missing
            report["status"] = "bootstrap_failed"
            report["notes"].append(str(exc))
            report["affected"] = ["bootstrap"]
            out.write("estimates.csv", _estimates_csv(keys, grid, flat, None))
            out.write("report.json", dumps(report) + "\n")
            out.manifest("analyze", cfg, [cfg["input"]])
            raise ConvergenceFailure(str(exc)) from exc
        boot, pos = {}, 0
        for k, s in zip(keys, sizes):
            boot[k] = (res.se[pos:pos + s], res.lower[pos:pos + s], res.upper[pos:pos + s])
            pos += s
        report["bootstrap"] = {
            "B": int(cfg["B"]), "failures": res.failures, "errors": res.errors[:10],
            "mode": "fast: theta frozen at the point estimates" if cfg["fast_bootstrap"] else "full",
            "unit": "subject" if cfg["skip_matching"] else "pair",
        }
    out.write("estimates.csv", _estimates_csv(keys, grid, flat, boot))
    out.write("report.json", dumps(report) + "\n")
    out.manifest("analyze", cfg, [cfg["input"]])
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle


def _read_long_csv(path) -> list:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return list(csv.DictReader(io.StringIO(text)))


def compare_to_oracle(oracle, rows: list) -> list:
    """Sup-t gaps between oracle curves and a long-format analysis CSV."""
    if rows and not {"t", "estimand", "scale", "value"} <= set(rows[0]):
        raise ValidationError("comparison file needs columns t, estimand, scale, value")
    groups = {}
    for row in rows:
        key = (row.get("rho", ""), row["estimand"], row["scale"])
        groups.setdefault(key, []).append(row)
    out = []
    for (rho, est, sc), rs in sorted(groups.items()):
        if est not in ESTIMANDS or (est, sc) not in oracle.curves.values:
            continue
        t = np.array([float(x["t"]) for x in rs])
        v = np.array([float(x["value"]) if x["value"] != "" else np.nan for x in rs])
        idx = np.searchsorted(oracle.grid, t)
        ok = (idx < len(oracle.grid))
        ok[ok] = np.isclose(oracle.grid[idx[ok]], t[ok], rtol=0, atol=1e-12)
        if not ok.all():
            raise ValidationError("comparison grid differs from the oracle grid")
        ref = oracle.curve(est, sc)[idx]
        diff = np.abs(v - ref)
        both = np.isfinite(diff)
        out.append((rho, est, sc, float(diff[both].max()) if both.any() else np.nan, int(both.sum())))
    return out


def cmd_oracle(cfg: dict) -> int:
    if not cfg["input"]:
        raise ValidationError("--input is required")
    r = float(cfg["r"])
    if not 0 < r <= 1:
        raise ValidationError("r must lie in (0, 1]")
    grid = make_grid(cfg["grid"], r)
    profiles = read_profiles_csv(cfg["input"])
    rep = oracle_estimands(profiles, grid, r)
    out = _Writer(cfg["out"])
    out.write("oracle.json", rep.to_json() + "\n")
    out.write("oracle.csv", rep.to_csv())
    inputs = [cfg["input"]]
    if cfg["compare"]:
        gaps = compare_to_oracle(rep, _read_long_csv(cfg["compare"]))
        out.write("comparison.csv", write_long_csv(["rho", "estimand", "scale", "sup_gap", "points"], gaps))
        inputs.append(cfg["compare"])
    out.manifest("oracle", cfg, inputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scrfice", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML file with default values for any option")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads (0 = all cores)")

    s = sub.add_parser("simulate", help="simulate a cohort from a scenario or a custom spec")
    common(s)
    s.add_argument("--scenario", choices=["scenario-a", "scenario-b"])
    s.add_argument("--spec", help="YAML cohort specification (overrides --scenario)")
    s.add_argument("--n", type=int)
    s.add_argument("--theta", type=float)
    s.add_argument("--rho", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--censoring-rate", dest="censoring_rate", type=float)

    a = sub.add_parser("analyze", help="matching, fits, bounds, sensitivity and bootstrap")
    common(a)
    a.add_argument("--input", help="observed-data CSV")
    a.add_argument("--r", type=float, help="horizon in (0, 1]")
    a.add_argument("--grid", type=_grid_arg, help="point count or comma-separated times")
    a.add_argument("--assumptions", type=_names)
    a.add_argument("--rho", type=_floats, help="comma-separated cross-world correlations")
    a.add_argument("--mc-draws", dest="mc_draws", type=int)
    a.add_argument("--B", dest="B", type=int, help="bootstrap replicates")
    a.add_argument("--caliper", type=float, help="caliper in SDs of the propensity score")
    a.add_argument("--seed", type=int)
    a.add_argument("--mesh-points", dest="mesh_points", type=int)
    a.add_argument("--sensitivity-design", dest="sensitivity_design", choices=["auto", "crossed", "paired"])
    a.add_argument("--skip-matching", dest="skip_matching", action="store_const", const=True)
    a.add_argument("--ps-only", dest="ps_only", action="store_const", const=True,
                   help="match on the propensity score alone")
    a.add_argument("--fast-bootstrap", dest="fast_bootstrap", action="store_const", const=True,
                   help="freeze frailty variances at the point estimates in replicates")
    a.add_argument("--no-bootstrap", dest="bootstrap", action="store_const", const=False)

    o = sub.add_parser("oracle", help="exact estimands from a potential-outcomes CSV")
    common(o)
    o.add_argument("--input", help="potential-outcomes CSV")
    o.add_argument("--r", type=float)
    o.add_argument("--grid", type=_grid_arg)
    o.add_argument("--compare", help="long-format analysis CSV to compare against")
    return p


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "oracle": cmd_oracle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceFailure, EMConvergenceError, CoxDivergenceError, SeparationError, BootstrapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
