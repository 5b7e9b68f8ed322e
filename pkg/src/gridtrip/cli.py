"""Command-line front end: ``gridtrip {simulate,fit,evaluate,report}``.

Exit codes: 0 success, 2 configuration error, 3 file or I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import SwarmConfig, fit_code, mae, set_threads_from_env
from .der_fleet import FleetSpec
from .network import NetworkError, PowerFlowError
from .scenarios import (
    TRACE_COLUMNS,
    TraceFormatError,
    evaluate_models,
    fit_targets,
    generate_suite,
    predict_trace,
    read_traces,
    run_suite,
    write_traces,
)
from .trip_models import (
    CODES,
    SIDES,
    load_params,
    make_default_models,
    model_from_records,
    param_filename,
    params_record,
    save_params,
)

log = logging.getLogger("gridtrip")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

DEFAULTS = dict(suite="in-sample", n_dg=2, seed=0, family="pi", code="all", side="all",
                out=None, traces=None, params=None, dt=1e-3, horizon=5.0, steps=6, faults=5,
                particles=100, iterations=100, fleet=None, fixtures=None)

FIT_MODELS = {"pi": "PI_fit", "dera": "DERAEMO1_fit"}


class ConfigError(Exception):
    pass


def _resolve(args) -> argparse.Namespace:
    """Fill unset flags from ``--config`` and then from :data:`DEFAULTS`."""
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, default in DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, cfg.get(key, default))
    if args.n_dg < 1:
        raise ConfigError("--n-dg must be at least 1")
    if args.code != "all" and args.code not in CODES:
        raise ConfigError(f"--code must be one of {CODES} or 'all'")
    if args.side not in SIDES + ("both", "all"):
        raise ConfigError(f"--side must be one of {SIDES + ('both', 'all')}")
    if args.family not in ("pi", "dera"):
        raise ConfigError("--family must be 'pi' or 'dera'")
    if args.suite.replace("-", "_") not in ("in_sample", "out_of_sample"):
        raise ConfigError("--suite must be 'in-sample' or 'out-of-sample'")
    return args


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} directory not given")
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory {p} does not exist")
    return p


def _load_traces(args):
    traces = read_traces(_require_dir(args.traces, "trace"))
    if not traces:
        raise FileNotFoundError(f"no traces in {args.traces}")
    return traces


def cmd_simulate(args) -> int:
    if args.out is None:
        raise ConfigError("simulate needs --out")
    kind = args.suite.replace("-", "_")
    suite = generate_suite(kind, n_dg=args.n_dg, seed=args.seed, n_steps=args.steps,
                           n_faults=args.faults, horizon=args.horizon, dt=args.dt)
    fleet_spec = FleetSpec.from_json(args.fleet) if args.fleet else None
    traces = run_suite(suite, fleet_spec, args.fixtures)
    out = Path(args.out)
    write_traces(traces, out)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest.update(suite=kind, n_dg=args.n_dg, seed=args.seed, dt=args.dt, horizon=args.horizon,
                    version=__version__)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(traces)} traces ({manifest['n_inverters']} inverters) to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.out is None:
        raise ConfigError("fit needs --out")
    traces = _load_traces(args)
    dt = traces[0].dt
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = SwarmConfig(swarm_size=args.particles, max_iters=args.iterations, seed=args.seed)
    codes = CODES if args.code == "all" else (args.code,)
    if args.family == "dera":
        sides = ("both",)
    else:
        sides = SIDES if args.side in ("all", "both") else (args.side,)
    for code in codes:
        for side in sides:
            res = fit_code(fit_targets(traces, side, code), side, code, args.family, config, dt)
            path = save_params(out / param_filename(args.family, code, side), args.family, code,
                               side, res.params, objective=res.fun, wall_time=res.wall_time,
                               n_iters=res.n_iters, stop_reason=res.stop_reason, seed=res.seed,
                               names=list(res.names), x=[float(v) for v in res.x])
            print(f"{args.family} {code} {side}: objective {res.fun:.6g} "
                  f"({res.wall_time:.1f} s) -> {path}")
    return EXIT_OK


def _load_models(params_dir) -> dict:
    """Default-parameter baselines plus every fitted family found in ``params_dir``."""
    models = make_default_models()
    d = _require_dir(params_dir, "parameter")
    for family, name in FIT_MODELS.items():
        sides = SIDES if family == "pi" else ("both",)
        wanted = [d / param_filename(family, c, s) for c in CODES for s in sides]
        if not any(p.exists() for p in wanted):
            continue
        missing = [p.name for p in wanted if not p.exists()]
        if missing:
            raise FileNotFoundError(f"parameter files missing: {missing}")
        models[name] = model_from_records(name, [load_params(p)[0] for p in wanted])
    if not any(name in models for name in FIT_MODELS.values()):
        raise FileNotFoundError(f"no fitted parameter files in {d}")
    return models


def cmd_evaluate(args) -> int:
    traces = _load_traces(args)
    models = _load_models(args.params)
    report = evaluate_models(traces, models)
    report.config.update(traces=str(args.traces), params=str(args.params))
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.to_json(out / "mae.json")
        (out / "mae.txt").write_text(report.table() + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_mae, plot_scenario

    if args.out is None:
        raise ConfigError("report needs --out")
    traces = _load_traces(args)
    models = _load_models(args.params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, tr in enumerate(traces):
        stem = tr.meta.get("name") or f"trace_{i:03d}"
        preds = {name: predict_trace(m, tr) for name, m in models.items()}
        cols = [tr.columns()] + [w[:, None] for _, w in preds.values()]
        header = list(TRACE_COLUMNS) + [f"pred_{name}" for name in preds]
        np.savetxt(out / f"{stem}.csv", np.hstack(cols), delimiter=",", fmt="%.17g",
                   header=",".join(header), comments="")
        detailed = {c: tr.fraction(c) for c in CODES}
        detailed["weighted"] = tr.weighted
        predicted = {name: {**per, "weighted": w} for name, (per, w) in preds.items()}
        title = f"{stem} ({tr.side}-voltage, MAE " + ", ".join(
            f"{n} {mae(w, tr.weighted):.1f}%" for n, (_, w) in preds.items()) + ")"
        plot_scenario(tr.t, tr.v_ss_filt, detailed, predicted, title, out / f"{stem}.png")
    report = evaluate_models(traces, models)
    report.to_json(out / "mae.json")
    plot_mae(report.mae, out / "mae.png")
    print(report.table())
    print(f"wrote {len(traces)} scenario series and figures to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridtrip", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with default values for any flag")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--fixtures", help="directory with network fixture files")

    sp = sub.add_parser("simulate", help="run a disturbance suite and write traces")
    common(sp)
    sp.add_argument("--suite", choices=["in-sample", "out-of-sample", "in_sample", "out_of_sample"])
    sp.add_argument("--n-dg", dest="n_dg", type=int)
    sp.add_argument("--steps", type=int, help="injection steps per sign")
    sp.add_argument("--faults", type=int, help="number of faults (under-voltage side)")
    sp.add_argument("--dt", type=float)
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--fleet", help="fleet specification JSON")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit tripping models to traces")
    common(sp)
    sp.add_argument("--traces")
    sp.add_argument("--family", choices=["pi", "dera"])
    sp.add_argument("--code", choices=list(CODES) + ["all"])
    sp.add_argument("--side", choices=list(SIDES) + ["both", "all"])
    sp.add_argument("--particles", type=int)
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_fit)

    for name, func, text in (("evaluate", cmd_evaluate, "MAE table of all models"),
                             ("report", cmd_report, "per-scenario series and figures")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--traces")
        sp.add_argument("--params", help="directory with fitted parameter files")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_threads_from_env()
    try:
        return args.func(_resolve(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TraceFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NetworkError, PowerFlowError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
