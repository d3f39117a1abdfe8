"""Command-line interface: ``gensmooth {fit,simulate,knots,derive}``.

Exit codes: 0 success, 2 invalid input, 3 fit finished but flagged as not
converged (outputs are still written), 4 file I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .bspline import make_knot_vector
from .cascade import ObservationSet, ProfilingProblem, criterion_F, fit_model
from .knots import KnotSearchConfig, merge_knot_sets, search_knots
from .model import (
    U_PER_HR_TO_MU_PER_MIN,
    GlucoseInsulinModel,
    InputFunctions,
    NaturalParams,
    derived_quantities,
    read_schedule_csv,
)
from .simulate import StudyConfig, run_study

log = logging.getLogger("gensmooth")

EXIT_OK, EXIT_INVALID, EXIT_FLAGGED, EXIT_IO = 0, 2, 3, 4
MCR_RANGE = (7.5, 35.2)
BASAL_RANGE_U_PER_HR = (0.1, 6.0)

COMBINED_COLUMNS = ("time_min", "glucose_mg_dl", "insulin_mU_l")
SERIES_COLUMNS = ("time_min", "value")
CURVES_COLUMNS = ("kind", "time_min", "glucose_mg_dl", "insulin_mU_l")
KNOTS_COLUMNS = ("knot_min",)


class InputError(ValueError):
    """Invalid user input (exit code 2)."""


# ---------------------------------------------------------------------------
# config files


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _strs(text):
    return tuple(v for v in text.replace(",", " ").split() if v)


FIT_KEYS = {
    "data_file": str, "glucose_file": str, "insulin_file": str, "schedule_file": str,
    "meal_times": _floats, "basal_u_per_hr": float, "weight_kg": float, "glucose_basal": float,
    "k_min": int, "k_max": int, "criterion": str, "population": int, "generations": int,
    "min_gap": float, "seed": int, "lam_start": _floats, "dense_points": int,
}

STUDY_KEYS = {
    "theta": _floats, "n_replicates": int, "t_end": float, "n_grid": int, "variance": float,
    "strategies": _strs, "omega": lambda s: tuple(int(v) for v in _floats(s)), "free_k_min": int,
    "free_k_max": int, "knot_population": int, "knot_generations": int, "min_gap": float,
    "meal_times": _floats, "basal_u_per_hr": float, "bolus_rates": _floats, "bolus_minutes": float,
    "x0": _floats, "seed": int, "jobs": int,
}

KNOT_KEYS = {
    "k_min": int, "k_max": int, "criterion": str, "population": int, "generations": int,
    "min_gap": float, "seed": int, "degree": int,
}

DERIVE_KEYS = {
    "b0": float, "b1": float, "b2": float, "c1": float, "c2": float, "weight_kg": float, "glucose_basal": float,
}


def read_config(path, keys: dict) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in keys:
                raise InputError(f"{path}:{lineno}: unknown key {key!r} (allowed: {', '.join(sorted(keys))})")
            if key in out:
                raise InputError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                out[key] = keys[key](val)
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from None
    base = Path(path).parent
    for k in ("data_file", "glucose_file", "insulin_file", "schedule_file"):
        if k in out and not Path(out[k]).is_absolute():
            out[k] = str(base / out[k])
    return out


# ---------------------------------------------------------------------------
# data files


def _read_table(path, required):
    with open(path, newline="") as fh:
        reader = csv.reader(row for row in fh if not row.lstrip().startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not any(c.strip() for c in row):
                continue
            rec = {}
            for name in header:
                i = header.index(name)
                cell = row[i].strip() if i < len(row) else ""
                if cell == "":
                    rec[name] = None
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(f"{path}: row {lineno}, column {name!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise InputError(f"{path}: row {lineno}, column {name!r}: non-finite value")
                rec[name] = v
            if rec.get("time_min") is None:
                raise InputError(f"{path}: row {lineno}, column 'time_min': missing time")
            rows.append(rec)
    return header, rows


def _sorted_series(t, y, what):
    t, y = np.asarray(t, dtype=float), np.asarray(y, dtype=float)
    order = np.argsort(t, kind="stable")
    t, y = t[order], y[order]
    if np.any(np.diff(t) == 0):
        raise InputError(f"{what}: duplicate sampling times")
    return t, y


def read_series(path):
    """Single-state ``time_min,value`` file."""
    _, rows = _read_table(path, SERIES_COLUMNS)
    rows = [r for r in rows if r["value"] is not None]
    if not rows:
        raise InputError(f"{path}: no observations")
    return _sorted_series([r["time_min"] for r in rows], [r["value"] for r in rows], str(path))


def read_combined(path):
    """Combined ``time_min,glucose_mg_dl,insulin_mU_l`` file; blank cells are unobserved."""
    header, rows = _read_table(path, COMBINED_COLUMNS[:2])
    out = []
    for col in COMBINED_COLUMNS[1:]:
        if col not in header:
            out.append(None)
            continue
        sel = [r for r in rows if r[col] is not None]
        out.append(_sorted_series([r["time_min"] for r in sel], [r[col] for r in sel], f"{path} ({col})")
                   if sel else None)
    if out[0] is None:
        raise InputError(f"{path}: column 'glucose_mg_dl' has no observations")
    return out


def read_knots(path):
    """Single-column ``knot_min`` file."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows or [h.strip() for h in rows[0]] != list(KNOTS_COLUMNS):
        raise InputError(f"{path}: expected a single '{KNOTS_COLUMNS[0]}' column")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            out.append(float(row[0]))
        except ValueError:
            raise InputError(f"{path}: row {lineno}, column {KNOTS_COLUMNS[0]!r}: non-numeric value {row[0]!r}") from None
    return np.array(out)


def _write_knots(path, knots):
    with open(path, "w", newline="") as fh:
        fh.write(KNOTS_COLUMNS[0] + "\n")
        for k in knots:
            fh.write(repr(float(k)) + "\n")


# ---------------------------------------------------------------------------
# commands


def _resolve_seed(flag, cfg):
    if flag is not None:
        return int(flag)
    if cfg.get("seed") is not None:
        return int(cfg["seed"])
    seed = int(np.random.SeedSequence().entropy % (2 ** 32))
    log.info("no seed given; using %d", seed)
    return seed


def _knot_config(cfg, seed, k_max_default=60):
    return KnotSearchConfig(
        k_min=cfg.get("k_min", 5), k_max=cfg.get("k_max", k_max_default), criterion=cfg.get("criterion", "aicc"),
        population=cfg.get("population", 40), generations=cfg.get("generations", 60), seed=seed,
        min_gap=cfg.get("min_gap", 5.0), degree=cfg.get("degree", 3),
    )


def _fit_inputs(cfg):
    segments = read_schedule_csv(cfg["schedule_file"]) if "schedule_file" in cfg else ()
    basal = cfg.get("basal_u_per_hr", 0.0) * U_PER_HR_TO_MU_PER_MIN
    return InputFunctions(cfg.get("meal_times", ()), segments, basal)


def _inputs_json(inputs: InputFunctions):
    return {"meal_times": list(inputs.meal_times), "segments": [list(s) for s in inputs.segments],
            "basal_rate_mU_per_min": inputs.basal_rate}


def _load_data(cfg):
    if "data_file" in cfg:
        if "glucose_file" in cfg or "insulin_file" in cfg:
            raise InputError("give either data_file or glucose_file/insulin_file, not both")
        return read_combined(cfg["data_file"])
    if "glucose_file" not in cfg:
        raise InputError("no data: set data_file or glucose_file")
    ins = read_series(cfg["insulin_file"]) if "insulin_file" in cfg else None
    return [read_series(cfg["glucose_file"]), ins]


def cmd_fit(args) -> int:
    cfg = read_config(args.config, FIT_KEYS) if args.config else {}
    for key in ("data_file", "glucose_file", "insulin_file", "schedule_file"):
        val = getattr(args, key, None)
        if val:
            cfg[key] = val
    seed = _resolve_seed(args.seed, cfg)
    series = _load_data(cfg)
    inputs = _fit_inputs(cfg)
    model = GlucoseInsulinModel(inputs)
    observed = [s for s in series if s is not None]
    a = min(float(s[0][0]) for s in observed)
    b = max(float(s[0][-1]) for s in observed)
    if not b > a:
        raise InputError("data must span a positive time interval")
    kcfg = _knot_config(cfg, seed)
    knot_sets = {}
    seeds = np.random.SeedSequence(seed).generate_state(len(series))
    for j, s in enumerate(series):
        if s is None:
            continue
        c = KnotSearchConfig(**{**kcfg.__dict__, "seed": int(seeds[j])})
        knot_sets[model.state_names[j]] = search_knots(s[0], s[1], (a, b), c).knots.interior
    pooled = np.empty(0)
    for ks in knot_sets.values():
        pooled = merge_knot_sets(pooled, ks, kcfg.min_gap)
    kv = make_knot_vector(3, pooled, (a, b))
    obs = ObservationSet.from_arrays([None if s is None else s[0] for s in series],
                                     [None if s is None else s[1] for s in series])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit, problem, starts = fit_model(model, [kv, kv], obs, cfg.get("lam_start"))
    nat = model.to_natural(fit.theta)
    report = {
        "seed": seed,
        "converged": bool(fit.converged),
        "flags": list(fit.flags),
        "warnings": [],
        "domain": [a, b],
        "inputs": _inputs_json(inputs),
        "knots": [float(k) for k in pooled],
        "state_knots": {k: [float(v) for v in ks] for k, ks in knot_sets.items()},
        "weights": problem.obs.weights.tolist(),
        "sigma": [None if not np.isfinite(s) else float(s) for s in starts.sigma],
        "theta": fit.theta.tolist(),
        "theta_natural": nat.as_dict(),
        "lambda": fit.lam.tolist(),
        "criteria": {"H": fit.H, "J": fit.J, "F": fit.F, "penalty": fit.pen.tolist(),
                     "df_terms": {str(k): float(v) for k, v in fit.df_terms.items()}},
        "alpha": fit.alpha.tolist(),
        "data": {"times": [None if t is None else t.tolist() for t in obs.times],
                 "values": [None if y is None else y.tolist() for y in obs.values]},
        "diagnostics": _jsonable(fit.diagnostics),
    }
    if "weight_kg" in cfg:
        try:
            dq = derived_quantities(nat, cfg["weight_kg"], cfg.get("glucose_basal", 80.0))
            report["derived"] = dq.as_dict()
            report["warnings"].extend(_plausibility(dq))
        except ValueError as exc:
            report["warnings"].append(f"derived quantities unavailable: {exc}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(json.dumps(report, indent=2) + "\n")
    _write_curves(out / "curves.csv", fit, obs, cfg.get("dense_points", 721))
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps({"theta": report["theta"], "lambda": report["lambda"], "F": fit.F,
                      "converged": report["converged"]}))
    if not fit.converged:
        print("fit flagged: " + "; ".join(fit.flags), file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _plausibility(dq):
    out = []
    if not MCR_RANGE[0] <= dq.mcr <= MCR_RANGE[1]:
        out.append(f"MCR {dq.mcr:.3g} outside literature range {MCR_RANGE}")
    if not BASAL_RANGE_U_PER_HR[0] <= dq.basal_rate_U_per_hr <= BASAL_RANGE_U_PER_HR[1]:
        out.append(f"basal rate {dq.basal_rate_U_per_hr:.3g} U/hr outside {BASAL_RANGE_U_PER_HR}")
    return out


def _cell(v):
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def _write_curves(path, fit, obs, n_dense):
    t, X = fit.dense_curves(n_dense)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CURVES_COLUMNS) + "\n")
        for ti, row in zip(t, X):
            fh.write(f"fit,{_cell(ti)},{_cell(row[0])},{_cell(row[1])}\n")
        rows = {}
        for j in obs.observed:
            r = obs.values[j] - fit.curves(obs.times[j])[:, j]
            for ti, ri in zip(obs.times[j], r):
                rows.setdefault(float(ti), [None, None])[j] = ri
        for ti in sorted(rows):
            g, i = rows[ti]
            fh.write(f"residual,{_cell(ti)},{_cell(g)},{_cell(i)}\n")


def load_fit(path):
    """Rebuild ``(problem, theta, alpha, lam)`` from a ``fit.json``."""
    rep = json.loads(Path(path).read_text())
    inp = rep["inputs"]
    inputs = InputFunctions(inp["meal_times"], tuple(tuple(s) for s in inp["segments"]), inp["basal_rate_mU_per_min"])
    model = GlucoseInsulinModel(inputs)
    kv = make_knot_vector(3, rep["knots"], tuple(rep["domain"]))
    obs = ObservationSet.from_arrays(rep["data"]["times"], rep["data"]["values"], rep["weights"])
    problem = ProfilingProblem(model, [kv, kv], obs)
    return problem, np.array(rep["theta"]), np.array(rep["alpha"]), np.array(rep["lambda"])


def reevaluate(path) -> dict:
    """H and F recomputed from a saved fit."""
    problem, theta, alpha, lam = load_fit(path)
    crit = criterion_F(problem, lam, theta, alpha)
    return {"H": problem.H(alpha), "F": crit.F}


def cmd_simulate(args) -> int:
    cfg = read_config(args.config, STUDY_KEYS) if args.config else {}
    if args.replicates is not None:
        cfg["n_replicates"] = args.replicates
    if args.strategies:
        cfg["strategies"] = _strs(args.strategies)
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    cfg["seed"] = _resolve_seed(args.seed, cfg)
    config = StudyConfig(**cfg)
    for line in config.header_lines():
        print(line)
    report = run_study(config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "study.csv").write_text(report.to_csv())
    (out / "summary.csv").write_text(report.summary_csv())
    print(f"# fits: {report.n_succeeded} succeeded, {report.n_failed} failed")
    return EXIT_FLAGGED if report.n_failed else EXIT_OK


def cmd_knots(args) -> int:
    out = Path(args.out_dir)
    if args.merge:
        a, b = (read_knots(p) for p in args.merge)
        knots = merge_knot_sets(a, b, args.gap)
    else:
        if not args.data:
            raise InputError("knots needs a data file or --merge A B")
        cfg = read_config(args.config, KNOT_KEYS) if args.config else {}
        if args.gap is not None:
            cfg["min_gap"] = args.gap
        seed = _resolve_seed(args.seed, cfg)
        if args.column:
            header, rows = _read_table(args.data, ("time_min", args.column))
            sel = [r for r in rows if r[args.column] is not None]
            t, y = _sorted_series([r["time_min"] for r in sel], [r[args.column] for r in sel], args.data)
        else:
            t, y = read_series(args.data)
        kcfg = _knot_config(cfg, seed)
        res = search_knots(t, y, (float(t[0]), float(t[-1])), kcfg)
        knots = res.knots.interior
        print(f"# {len(knots)} knots, {kcfg.criterion}={res.value!r}, seed={seed}")
    out.mkdir(parents=True, exist_ok=True)
    _write_knots(out / "knots.csv", knots)
    return EXIT_OK


def cmd_derive(args) -> int:
    if args.fit:
        rep = json.loads(Path(args.fit).read_text())
        nat = rep["theta_natural"]
        params = NaturalParams(nat["b0"], nat["b1"], nat["b2"], nat["c1"], nat["c2"])
        cfg = read_config(args.config, DERIVE_KEYS) if args.config else {}
    else:
        if not args.config:
            raise InputError("derive needs --config or --fit")
        cfg = read_config(args.config, DERIVE_KEYS)
        missing = [k for k in ("b0", "b1", "b2", "c1", "c2") if k not in cfg]
        if missing:
            raise InputError(f"missing parameter(s): {', '.join(missing)}")
        params = NaturalParams(cfg["b0"], cfg["b1"], cfg["b2"], cfg["c1"], cfg["c2"])
    weight = args.weight if args.weight is not None else cfg.get("weight_kg")
    if weight is None:
        raise InputError("body weight is required (--weight or weight_kg)")
    dq = derived_quantities(params, weight, cfg.get("glucose_basal", 80.0))
    result = {"params": params.as_dict(), "weight_kg": weight, "derived": dq.as_dict(), "warnings": _plausibility(dq)}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "derived.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result["derived"]))
    for w in result["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gensmooth", description="Generalized profiling for ODE models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", default=".")

    f = sub.add_parser("fit", help="fit the glucose-insulin model to data")
    common(f)
    f.add_argument("--data", dest="data_file", help="combined time_min,glucose_mg_dl,insulin_mU_l file")
    f.add_argument("--glucose", dest="glucose_file")
    f.add_argument("--insulin", dest="insulin_file")
    f.add_argument("--schedule", dest="schedule_file")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run the simulation study")
    common(s)
    s.add_argument("--jobs", type=int)
    s.add_argument("--replicates", type=int)
    s.add_argument("--strategies", help="comma-separated, e.g. fixed:10,best,free")
    s.set_defaults(func=cmd_simulate)

    k = sub.add_parser("knots", help="free-knot selection for one series")
    common(k)
    k.add_argument("data", nargs="?")
    k.add_argument("--column", help="value column of a combined file")
    k.add_argument("--merge", nargs=2, metavar=("A", "B"), help="pool two knot files instead")
    k.add_argument("--gap", type=float, default=None)
    k.set_defaults(func=cmd_knots)

    d = sub.add_parser("derive", help="MCR and basal requirements from natural parameters")
    common(d)
    d.add_argument("--fit", help="fit.json to take parameters from")
    d.add_argument("--weight", type=float)
    d.set_defaults(func=cmd_derive)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "merge", None) and args.gap is None:
        args.gap = 5.0
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
