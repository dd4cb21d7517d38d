"""Command-line harness: ``stokit <experiment> [flags]``.

Every experiment writes plot-ready CSV tables and/or a JSON summary.  Each
artifact carries the resolved configuration and master seed; the execution
knobs (worker count, output directory) and the wall time only go into the
manifest, so artifacts are byte-identical across reruns and worker counts.
"""

import argparse
import csv
import difflib
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calculus, exit_problems, manifolds, rds
from .closed_form import OUParams, exact_solution, ou_variance
from .config import EXPERIMENTS, ConfigError, RunConfig, parse_config, validate
from .errors import GridRangeError, UnknownModelError, ValidationError
from .integrators import run_ensemble, strong_errors
from .models import circle_manifold, get_model, linear_system
from .moments import energy_balance_residual, lorenz_energy_bound_check, lorenz_error_bound_check
from . import _rng

DEFAULT_X0 = {
    "langevin": (1.0,), "population": (1.0,), "linear_scalar": (1.0,), "harmonic": (1.0, 0.0),
    "oscillator": (1.0, 0.0), "lorenz": (1.0, 1.0, 1.0), "circle_manifold": (1.0, 0.0),
}
DEFAULT_MODEL = {"simulate": "langevin", "order": "population", "moments": "langevin"}
DEFAULT_PARAMS = {"simulate": {"b": 1.0, "a": math.sqrt(2.0)}, "moments": {"b": 1.0, "a": math.sqrt(2.0)}}
RUNTIME_EXIT = 1
USAGE_EXIT = 2


@dataclass
class Result:
    tables: dict = field(default_factory=dict)   # name -> (header, rows)
    summary: dict = field(default_factory=dict)


def list_experiments():
    return tuple(sorted(EXPERIMENTS))


def suggest(name):
    close = difflib.get_close_matches(name, EXPERIMENTS, n=1, cutoff=0.4)
    return close[0] if close else None


# ---------------------------------------------------------------------------
# experiments


def resolve_defaults(cfg):
    """Fill experiment defaults so artifacts embed the complete configuration."""
    kw = {}
    if cfg.experiment in DEFAULT_MODEL and cfg.model is None:
        kw["model"] = DEFAULT_MODEL[cfg.experiment]
        kw["params"] = dict(DEFAULT_PARAMS.get(cfg.experiment, {}))
    if cfg.experiment in ("simulate", "order", "moments") and cfg.x0 is None:
        kw["x0"] = DEFAULT_X0.get(kw.get("model", cfg.model))
    if cfg.experiment == "exit":
        bounds = cfg.bounds or (0.0, 1.0)
        kw["bounds"] = bounds
        if cfg.h is None:
            kw["h"] = (0.005,) if len(bounds) == 2 else (0.02,)
        if cfg.gamma is None:
            kw["gamma"] = "right"
        if cfg.x0 is None:
            kw["x0"] = tuple(0.5 * (bounds[i] + bounds[i + 1]) for i in range(0, len(bounds), 2))
    return cfg.with_overrides(**kw)


def _model(cfg, kind):
    return get_model(cfg.model, **cfg.params)


def _x0(cfg, model):
    x0 = np.asarray(cfg.x0 if cfg.x0 is not None else (0.0,) * model.n, dtype=float)
    if x0.shape != (model.n,):
        raise ValidationError(f"x0 must have {model.n} components for model {model.label}")
    return x0


def _simulate(cfg, seed, workers):
    model = _model(cfg, "simulate")
    x0 = _x0(cfg, model)
    ens = run_ensemble(model, x0, cfg.scheme, cfg.n_paths, 0.0, cfg.t_final, cfg.dt, seed, workers=workers)
    mean, var, se = ens.mean("state"), ens.variance("state"), ens.se("state")
    n = model.n
    header = ["t"] + [f"mean_x{i + 1}" for i in range(n)] + [f"var_x{i + 1}" for i in range(n)] \
        + [f"se_mean_x{i + 1}" for i in range(n)]
    rows = [[t, *mean[k], *var[k], *se[k]] for k, t in enumerate(ens.times)]
    summary = {"model": model.label, "scheme": cfg.scheme, "blowups": ens.blowups,
               "terminal_mean": mean[-1].tolist(), "terminal_variance": var[-1].tolist()}
    if model.label == "langevin":
        p = OUParams(model.params["b"], model.params["a"], 0.0)
        oracle = np.array([ou_variance(p, t) for t in ens.times])
        z = np.abs(var[:, 0] - oracle) / np.maximum(ens.variance_se("state")[:, 0], 1e-300)
        summary["variance_max_z"] = float(z[1:].max())
        summary["variance_violations"] = int(np.sum(z[1:] > 3.0))
    return Result({"moments": (header, rows)}, summary)


def _order(cfg, seed, workers):
    model = _model(cfg, "order")
    x0 = _x0(cfg, model)
    dts = cfg.dts or tuple(2.0 ** -k for k in range(6, 12))
    exact = exact_solution(model, x0)
    cols, slopes = {}, {}
    for scheme in ("em", "milstein"):
        d, rms = strong_errors(model, x0, exact, scheme, dts, cfg.n_paths, cfg.t_final, seed)
        cols[scheme] = rms
        slopes[scheme] = float(np.polyfit(np.log(d), np.log(rms), 1)[0])
    rows = [[dt, cols["em"][i], cols["milstein"][i]] for i, dt in enumerate(d)]
    return Result({"errors": (["dt", "rms_error_em", "rms_error_milstein"], rows)},
                  {"model": model.label, "slope_em": slopes["em"], "slope_milstein": slopes["milstein"]})


def _calculus(cfg, seed, workers):
    reports = calculus.standard_checks(cfg.n_paths, cfg.dt, seed)
    rows = [[r.check, r.lhs, r.rhs, r.se, r.n, r.passed] for r in reports]
    dts = [cfg.dt * f for f in (1, 2, 4, 8, 16)]
    d, gap = calculus.ito_stratonovich_gap_rms(dts, cfg.t_final, min(cfg.n_paths, 2000), seed)
    rate = float(np.polyfit(np.log(d), np.log(gap), 1)[0])
    return Result(
        {"checks": (["check", "lhs", "rhs", "se", "n", "pass"], rows),
         "strat_gap": (["dt", "rms_gap"], [[a, b] for a, b in zip(d, gap)])},
        {"checks": [r.to_record() for r in reports], "strat_gap_rate": rate,
         "all_pass": all(r.passed for r in reports)},
    )


def _moments(cfg, seed, workers):
    model = _model(cfg, "moments")
    x0 = _x0(cfg, model)
    if model.label == "lorenz":
        p = model.params
        res = Result()
        for name, fn in (("energy_bound", lorenz_energy_bound_check), ("error_bound", lorenz_error_bound_check)):
            rep = fn(p["r"], p["s"], p["b"], p["eps"], cfg.n_paths, cfg.t_final, cfg.dt, tuple(x0), seed,
                     workers=workers)
            coef = np.broadcast_to(rep.coefficient, rep.times.shape)
            res.tables[name] = (["t", "lhs", "rhs", "gap", "se", "coefficient"],
                                [list(r) for r in zip(rep.times, rep.lhs, rep.rhs, rep.gap, rep.se, coef)])
            res.summary[name] = rep.summary()
        return res
    ens = run_ensemble(model, x0, cfg.scheme, cfg.n_paths, 0.0, cfg.t_final, cfg.dt, seed, workers=workers)
    series = energy_balance_residual(model, ens)
    rows = [list(r) for r in series.rows()]
    return Result(
        {"energy": (["t", "energy", "drift_term", "noise_term", "residual", "se"], rows)},
        {"model": model.label, "within_3se_fraction": float(series.within().mean())},
    )


def _exit(cfg, seed, workers):
    bounds = cfg.bounds
    axes = [tuple(bounds[i : i + 2]) for i in range(0, len(bounds), 2)]
    d = len(axes)
    domain = exit_problems.Domain(axes, cfg.h, cfg.gamma)
    if cfg.model:
        model = get_model(cfg.model, **cfg.params)
    else:
        model = linear_system(np.zeros((d, d)), np.zeros(d), list(np.eye(d)))
    p = exit_problems.escape_probability(model, domain)
    u = exit_problems.mean_residence_time(model, domain)
    coords = ["x", "y"][:d]
    res = Result({
        "escape_probability": (coords + ["value"], p.rows().tolist()),
        "mean_residence_time": (coords + ["value"], u.rows().tolist()),
    })
    res.summary["average_escape_probability"] = exit_problems.average_escape_probability(p)
    x0 = np.asarray(cfg.x0, dtype=float)
    stats = exit_problems.mc_exit(model, x0, domain, cfg.n_paths, cfg.dt, seed, cfg.bridge_correction,
                                  max(50.0, cfg.t_final), workers)
    res.summary["x0"] = x0.tolist()
    res.summary["mc_exit"] = stats.to_record()
    res.summary["fd_at_x0"] = {"escape_probability": float(p.at(x0)[0]),
                               "mean_residence_time": float(u.at(x0)[0])}
    if cfg.quantile is not None:
        w = exit_problems.predictability_window(model, x0, domain, cfg.quantile, cfg.n_paths, cfg.dt, seed,
                                                bridge_correction=cfg.bridge_correction,
                                                t_max=max(50.0, cfg.t_final), workers=workers)
        res.summary["predictability_window"] = w.to_record()
    return res


def _manifold(cfg, seed, workers):
    model = circle_manifold()
    spec = manifolds.circle_spec()
    th = np.linspace(0.0, 2 * np.pi, 360, endpoint=False)
    pts = np.stack([np.cos(th), np.sin(th)], axis=-1)
    r_mu, r_sigma = manifolds.tangency_residual(model, spec, pts)
    zero = manifolds.extract_zero_set(manifolds.circle_benchmark_surface())
    inv = manifolds.manifold_invariance_mc(model, spec, [1.0, 0.0], cfg.n_paths, cfg.dt, cfg.t_final, seed)
    ctl = manifolds.manifold_invariance_mc(model, manifolds.ellipse_spec(), [1.0, 0.0], cfg.n_paths, cfg.dt,
                                           cfg.t_final, seed)
    return Result(
        {"tangency": (["theta", "x", "y", "r_mu", "r_sigma"],
                      [[a, *p, b, c[0]] for a, p, b, c in zip(th, pts, r_mu, r_sigma)]),
         "zero_set": (["x1", "x2"], zero.points.tolist())},
        {"residuals": [{"point": p.tolist(), "r_mu": float(a), "r_sigma": [float(v) for v in c]}
                       for p, a, c in zip(pts, r_mu, r_sigma)],
         "max_abs_residual": float(max(np.abs(r_mu).max(), np.abs(r_sigma).max())),
         "zero_set_points": len(zero), "zero_set_notice": zero.notice,
         "zero_set_max_abs_G": float(np.abs(spec.G(zero.points)).max()) if len(zero) else None,
         "invariance": inv.to_record(), "control": ctl.to_record()},
    )


def _rds(cfg, seed, workers):
    dts = cfg.dts or tuple(cfg.dt / 2**k for k in range(4))
    seeds = _rng.derive_seeds(seed, 20)
    t, s = 0.5, 0.7
    d, coc, coc_order = rds.cocycle_order(rds.pathwise_linear_solver(-1.0, 1.0), t, s, [1.0], dts, seeds)
    _, sta, sta_order = rds.stationary_orbit_order(1.0, t, dts, seeds)
    var = rds.stationary_variance_check(1.0, _rng.derive_seeds(seed, cfg.n_paths), cfg.dt)
    checks = [{"check": "cocycle", "t": t, "s": s, "dt": float(a), "residual": float(b)} for a, b in zip(d, coc)]
    checks += [{"check": "stationary_orbit", "t": t, "s": 0.0, "dt": float(a), "residual": float(b)}
               for a, b in zip(d, sta)]
    return Result(
        {"residuals": (["dt", "cocycle_residual", "stationary_residual"],
                       [[a, b, c] for a, b, c in zip(d, coc, sta)])},
        {"checks": checks, "cocycle_order": coc_order, "stationary_order": sta_order,
         "stationary_variance": var.to_record()},
    )


REGISTRY = {
    "calculus": _calculus, "exit": _exit, "manifold": _manifold, "moments": _moments,
    "order": _order, "rds": _rds, "simulate": _simulate,
}


# ---------------------------------------------------------------------------
# artifacts


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def artifact_config(cfg, seed):
    """Configuration embedded in artifacts (execution knobs excluded)."""
    d = cfg.to_dict()
    d.pop("workers", None)
    d.pop("out_dir", None)
    d["seed"] = seed
    return d


def render_csv(experiment, table, header, rows, config):
    buf = io.StringIO()
    buf.write(f"# stokit {experiment} {table}\n")
    buf.write(f"# master_seed = {config['seed']}\n")
    buf.write(f"# config = {json.dumps(_jsonable(config), sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def run_experiment(cfg, seed=None, workers=None, environ=None):
    """Run ``cfg.experiment``, write its artifacts and return the manifest."""
    if cfg.experiment not in REGISTRY:
        hint = suggest(cfg.experiment or "")
        raise ValidationError(f"unknown experiment {cfg.experiment!r}" + (f"; did you mean {hint!r}?" if hint else ""))
    validate(cfg)
    cfg = resolve_defaults(cfg)
    seed = cfg.resolved_seed(seed, environ)
    workers = workers or cfg.resolved_workers()
    start = time.perf_counter()
    result = REGISTRY[cfg.experiment](cfg, seed, workers)
    wall = time.perf_counter() - start
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = artifact_config(cfg, seed)
    files = []
    if cfg.format in ("csv", "both"):
        for name, (header, rows) in result.tables.items():
            path = out / f"{cfg.experiment}_{name}.csv"
            path.write_text(render_csv(cfg.experiment, name, header, rows, config))
            files.append(str(path))
    if cfg.format in ("json", "both"):
        doc = {"experiment": cfg.experiment, "master_seed": seed, "config": config,
               "summary": result.summary}
        if cfg.format == "json":
            doc["tables"] = {name: [dict(zip(h, r)) for r in rows] for name, (h, rows) in result.tables.items()}
        path = out / f"{cfg.experiment}.json"
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
        files.append(str(path))
    manifest = {"experiment": cfg.experiment, "files": files, "parameters": _jsonable(config),
                "master_seed": seed, "workers": workers, "wall_time_s": wall}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# argument parsing


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(p):
    p.add_argument("--config", metavar="PATH", help="sectioned key = value configuration file")
    p.add_argument("--seed", type=_u64, help="master seed (overrides STOKIT_SEED and the config)")
    p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--t-final", type=float, dest="t_final", help="final time")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "json", "both"), help="artifact format")
    p.add_argument("--workers", type=int, help="worker threads (default: processor count)")


def build_parser():
    parser = argparse.ArgumentParser(prog="stokit", description="Stochastic dynamics cross-validation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(list_experiments()) + ",list}")
    for name in list_experiments():
        _common(sub.add_parser(name, help=f"run the {name} experiment"))
    sub.add_parser("list", help="print registered experiments")
    return parser


def _config_from_args(args):
    if args.config:
        cfg = parse_config(Path(args.config).read_text())
        if cfg.experiment not in (None, args.command):
            raise ValidationError(f"config is for experiment {cfg.experiment!r}, not {args.command!r}")
    else:
        cfg = RunConfig()
    return cfg.with_overrides(experiment=args.command, n_paths=args.paths, dt=args.dt, t_final=args.t_final,
                              out_dir=args.out, format=args.format, workers=args.workers)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in REGISTRY and argv[0] != "list":
        hint = suggest(argv[0])
        msg = f"stokit: unknown experiment {argv[0]!r}"
        print(msg + (f"; did you mean {hint!r}?" if hint else ""), file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return USAGE_EXIT
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_EXIT if exc.code else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    if args.command == "list":
        print("\n".join(list_experiments()))
        return 0
    try:
        cfg = _config_from_args(args)
        manifest = run_experiment(cfg, seed=args.seed, workers=args.workers)
    except (ConfigError, ValidationError, GridRangeError, UnknownModelError, OSError) as exc:
        errors = getattr(exc, "errors", [str(exc)])
        print(json.dumps({"error": type(exc).__name__, "messages": errors}), file=sys.stderr)
        return USAGE_EXIT
    except Exception as exc:  # runtime failure: diagnostic JSON, exit 1
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "experiment": args.command}),
              file=sys.stderr)
        return RUNTIME_EXIT
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
