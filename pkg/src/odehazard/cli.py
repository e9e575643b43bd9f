"""Command-line entry point.

Every subcommand writes its outputs atomically into ``--out`` together with a
``manifest.json`` holding the resolved configuration (usable again with
``--config``), the seed, library versions and the wall time.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, censoring_summary, kaplan_meier, load_dataset, write_dataset
from .inference import Chain, InferenceError, McmcConfig, PriorSpec, fit_mle, run_mcmc
from .models import (
    DegenerateSteadyState,
    HazardResponseParams,
    LogisticModel,
    make_model,
    steady_state,
)
from .ode import IntegrationError
from .predictive import (
    PredictiveError,
    draw_curves,
    equilibrium_summary,
    pointwise_bands,
    predictive_density,
    predictive_hazard,
    predictive_survival,
)
from .simulation import (
    SCENARIO_1,
    SCENARIO_2,
    CoverageError,
    ScenarioConfig,
    administrative_censor,
    build_grid_inverter,
    find_censoring_time,
    run_scenario,
    simulate_times,
)

OUTPUT_ROOT_ENV = "ODEHAZARD_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("odehazard")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument helpers --------------------------------------------------------


def _floats(text: str) -> list:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _pairs(text) -> dict:
    """``name=value,name=value`` to a dict of floats."""
    if isinstance(text, dict):
        return {k: float(v) for k, v in text.items()}
    out = {}
    for item in str(text).split(","):
        if not item.strip():
            continue
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"expected name=value, got {item!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise UsageError(f"bad number in {item!r}") from None
    return out


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:step`` to an inclusive, equally spaced grid."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise UsageError(f"grid must be start:stop:step, got {text!r}")
    try:
        a, b, s = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"grid must be numeric, got {text!r}") from None
    if not (s > 0 and b >= a >= 0):
        raise UsageError("grid needs 0 <= start <= stop and step > 0")
    count = int(np.floor((b - a) / s + 1e-9)) + 1
    return a + s * np.arange(count)


def _prior(args) -> PriorSpec:
    overrides = {}
    for item in args.prior or []:
        name, sep, rest = item.partition("=")
        shape, sep2, scale = rest.partition(":")
        if not (sep and sep2):
            raise UsageError(f"--prior expects name=shape:scale, got {item!r}")
        try:
            overrides[name] = (float(shape), float(scale))
        except ValueError:
            raise UsageError(f"bad prior {item!r}") from None
    try:
        return PriorSpec(args.prior_shape, args.prior_scale, overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _model(args):
    try:
        if args.model == "logistic":
            fixed = {"h0": args.h0} if args.fix_h0 else None
            return LogisticModel(fixed=fixed, rtol=args.rtol, atol=args.atol)
        return make_model(
            args.model,
            h0=args.h0 if args.h0 is not None else 1e-2,
            q0=args.q0,
            free_initial=args.free_initial,
            rtol=args.rtol,
            atol=args.atol,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _model_params(args) -> dict:
    """``--params`` in free-parameter order of the model, plus initial values."""
    vals = _floats(args.params)
    if args.model == "logistic":
        names = ("lambda", "kappa", "h0")
        if len(vals) != 3:
            raise UsageError("logistic --params needs lambda,kappa,h0")
        return dict(zip(names, vals))
    if len(vals) != 4:
        raise UsageError("hazard-response --params needs lambda,kappa,alpha,beta")
    p = dict(zip(("lambda", "kappa", "alpha", "beta"), vals))
    p["h0"] = args.h0 if args.h0 is not None else 1e-2
    p["q0"] = args.q0
    return p


def _seed(args) -> int:
    if args.seed is None:
        args.seed = int.from_bytes(os.urandom(8), "little") >> 1
    return args.seed


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write_rows(path: Path, header, rows):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    os.replace(tmp, path)


def _versions() -> dict:
    import numba
    import scipy

    return {
        "odehazard": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _config_echo(args) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in vars(args).items() if k not in skip}


# -- subcommands -------------------------------------------------------------


def cmd_fit(args, out: Path) -> list:
    ds = load_dataset(args.data, args.time_column, args.status_column)
    model = _model(args)
    init = _pairs(args.init) if args.init else None
    if init is not None and set(init) != set(model.free_names):
        raise UsageError(f"--init must give exactly {list(model.free_names)}")
    if args.method == "mle":
        res = fit_mle(model, ds, init=init, restarts=args.restarts)
        _write_json(out / "mle.json", {**res.as_dict(), "n": ds.n, "events": ds.events})
        return ["mle.json"]
    cfg = McmcConfig(
        iterations=args.iterations,
        burn_in=args.burn_in,
        thinning=args.thinning,
        seed=_seed(args),
        init=init,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    chain = run_mcmc(model, ds, _prior(args), cfg)
    chain.to_csv(out / "chain.csv")
    summary = {
        "parameters": chain.summary(),
        "acceptance": chain.acceptance,
        "draws": len(chain),
        "seed": chain.seed,
        "data": censoring_summary(ds),
    }
    if model.has_response:
        eq = equilibrium_summary(chain)
        summary["equilibrium"] = {k: eq[k] for k in ("p_equilibrium", "n_draws", "n_equilibrium", "n_degenerate")}
    _write_json(out / "summary.json", summary)
    return ["chain.csv", "summary.json"]


def cmd_simulate(args, out: Path) -> list:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    model = _model(args)
    truth = _model_params(args)
    try:
        theta = model.theta_from(truth)
    except KeyError as exc:
        raise UsageError(f"missing parameter {exc}") from None
    if not model.valid(theta):
        raise UsageError("parameters must be positive")
    seed = _seed(args)
    if args.censor_time is not None and args.censor_rate is not None:
        raise UsageError("give at most one of --censor-rate and --censor-time")
    if args.censor_rate is not None:
        if not 0 < args.censor_rate < 1:
            raise UsageError("--censor-rate must lie in (0, 1)")
        c = find_censoring_time(model, theta, args.censor_rate)
    else:
        c = args.censor_time if args.censor_time is not None else float("inf")
    inverter = None
    if model.has_response:
        inverter = build_grid_inverter(model.system(theta), args.t_max, args.step)
    # draws past t_max are censored at c anyway when c < t_max
    truncate = inverter is not None and c < inverter.t_max
    times = simulate_times(model, theta, args.n, np.random.default_rng(seed), inverter, truncate=truncate)
    ds = administrative_censor(times, c)
    write_dataset(ds, out / "dataset.csv")
    info = {"censor_time": c, "truth": truth, **censoring_summary(ds)}
    _write_json(out / "simulation.json", info)
    return ["dataset.csv", "simulation.json"]


def cmd_predict(args, out: Path) -> list:
    model = _model(args)
    path = Path(args.chain)
    if not path.is_file():
        raise DataError(f"no such chain file: {path}")
    try:
        chain = Chain.from_csv(path, model)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from None
    if args.burn:
        chain.draws = chain.draws[args.burn :]
        chain.log_posterior = chain.log_posterior[args.burn :]
    grid = parse_grid(args.grid)
    levels = _floats(args.bands)
    dc = draw_curves(chain, model, grid)
    surv = predictive_survival(chain, model, grid, dc)
    haz = predictive_hazard(chain, model, grid, dc)
    dens = predictive_density(chain, model, grid, dc)
    header = ["time", "survival", "hazard", "density"]
    cols = [grid, surv.estimate, haz.estimate, dens.estimate]
    components = args.component.split(",")
    for comp in components:
        try:
            b = pointwise_bands(chain, model, grid, levels, comp, dc)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        header += [f"{comp}_mean", f"{comp}_median"] + [f"{comp}_q{q:g}" for q in levels]
        cols += [b.mean, b.estimate] + [b.bands[q] for q in levels]
    _write_rows(out / "curves.csv", header, zip(*cols))
    files = ["curves.csv"]
    info = {"draws_used": dc.n_draws, "draws_failed": dc.n_failed, "grid": args.grid, "levels": levels}
    if model.has_response:
        eq = equilibrium_summary(chain)
        info["equilibrium"] = {k: eq[k] for k in ("p_equilibrium", "n_draws", "n_equilibrium", "n_degenerate")}
        if eq["n_equilibrium"]:
            info["equilibrium"]["h_star_mean"] = float(eq["h_star"].mean())
            info["equilibrium"]["q_star_mean"] = float(eq["q_star"].mean())
    _write_json(out / "prediction.json", info)
    files.append("prediction.json")
    return files


def cmd_km(args, out: Path) -> list:
    ds = load_dataset(args.data, args.time_column, args.status_column)
    km = kaplan_meier(ds)
    rows = [(0.0, 1.0)] + list(zip(km.knots, km.values))
    _write_rows(out / "km.csv", ["time", "survival"], rows)
    _write_json(out / "censoring.json", censoring_summary(ds))
    return ["km.csv", "censoring.json"]


def cmd_steady_state(args, out: Path) -> list:
    vals = _floats(args.params)
    if len(vals) != 4:
        raise UsageError("--params needs lambda,kappa,alpha,beta")
    try:
        p = HazardResponseParams(*vals)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ss = steady_state(p)
    res = ss.as_dict()
    _write_json(out / "steady_state.json", res)
    print(json.dumps(res, default=_json_default))
    return ["steady_state.json"]


def cmd_scenario(args, out: Path) -> list:
    base = SCENARIO_1 if args.scenario == 1 else SCENARIO_2
    params = dict(base["params"])
    if args.params:
        params = _model_params(argparse.Namespace(**{**vars(args), "model": base["model"]}))
    try:
        cfg = ScenarioConfig(
            model=base["model"],
            params=params,
            sample_sizes=_ints(args.sizes),
            replications=args.replications,
            censor_rates=_floats(args.rates),
            t_max=args.t_max,
            step=args.step,
            seed=_seed(args),
            iterations=args.iterations,
            burn_in=args.burn_in,
            thinning=args.thinning,
            prior_shape=args.prior_shape,
            prior_scale=args.prior_scale,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    summary = run_scenario(cfg, jobs=args.jobs)
    header = ["n", "rate", "censor_time", "Parameter", "Truth", "Mean", "Median", "SD", "RMSE", "coverage", "replications"]
    rows = [
        (r["n"], r["rate"], r["censor_time"], r["parameter"], r["truth"], r["mean"], r["median"],
         r["sd"], r["rmse"], r["coverage"], r["replications"])
        for r in summary.rows
    ]
    _write_rows(out / "scenario.csv", header, rows)
    reps = []
    for r in sorted(summary.replications, key=lambda r: (r.n, r.rate, r.index)):
        for name in r.mean or {"-": None}:
            reps.append((r.n, r.rate, r.index, int(r.ok), name, r.mean.get(name, ""), r.median.get(name, ""),
                         r.sd.get(name, ""), r.lower.get(name, ""), r.upper.get(name, ""),
                         r.censored_fraction, r.error))
    _write_rows(out / "replications.csv",
                ["n", "rate", "replication", "ok", "parameter", "mean", "median", "sd", "lower", "upper",
                 "censored_fraction", "error"], reps)
    _write_json(out / "scenario.json", {"config": cfg.to_dict(), "failures": summary.failures})
    return ["scenario.csv", "replications.csv", "scenario.json"]


# -- parser ------------------------------------------------------------------


def _add_common(p, seed=False):
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>, else runs/<command>)")
    p.add_argument("--config", help="JSON file of option values; command-line flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if seed:
        p.add_argument("--seed", type=int, help="master random seed (drawn from the OS and recorded if omitted)")


def _add_model(p, required=True):
    p.add_argument("--model", choices=("logistic", "hazard-response"), required=required,
                   help="hazard model")
    p.add_argument("--h0", type=float, default=None,
                   help="initial hazard; fixed for hazard-response unless --free-initial (default 0.01)")
    p.add_argument("--q0", type=float, default=1e-6, help="initial response for hazard-response (default 1e-6)")
    p.add_argument("--free-initial", action="store_true", help="estimate h0 and q0 for hazard-response")
    p.add_argument("--fix-h0", action="store_true", help="logistic only: hold h0 at --h0")
    p.add_argument("--rtol", type=float, default=1e-8, help="solver relative tolerance (default 1e-8)")
    p.add_argument("--atol", type=float, default=1e-10, help="solver absolute tolerance (default 1e-10)")


def _add_prior(p):
    p.add_argument("--prior-shape", type=float, default=2.0, help="default gamma prior shape (default 2)")
    p.add_argument("--prior-scale", type=float, default=2.0, help="default gamma prior scale (default 2)")
    p.add_argument("--prior", action="append", metavar="NAME=SHAPE:SCALE",
                   help="gamma prior for one parameter; repeatable")


def _add_mcmc(p):
    p.add_argument("--iterations", type=int, default=55_000, help="total sampler iterations (default 55000)")
    p.add_argument("--burn-in", type=int, default=5_000, help="discarded iterations (default 5000)")
    p.add_argument("--thinning", type=int, default=50, help="keep every k-th draw (default 50)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="odehazard", description="Hazard models defined by ODE systems.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model by maximum likelihood or MCMC",
                       description="Fit a hazard model to a time,status CSV.")
    _add_common(p, seed=True)
    _add_model(p)
    p.add_argument("--data", required=True, help="CSV with time and status columns")
    p.add_argument("--time-column", default="time", help="name of the time column")
    p.add_argument("--status-column", default="status", help="name of the event indicator column")
    p.add_argument("--method", choices=("mle", "mcmc"), default="mcmc", help="estimation method (default mcmc)")
    p.add_argument("--init", help="starting values name=value,... for the free parameters")
    p.add_argument("--restarts", type=int, default=3, help="Nelder-Mead restarts for mle (default 3)")
    _add_prior(p)
    _add_mcmc(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="simulate a censored dataset",
                       description="Draw survival times from a model and apply administrative censoring.")
    _add_common(p, seed=True)
    _add_model(p)
    p.add_argument("--params", required=True,
                   help="lambda,kappa,h0 (logistic) or lambda,kappa,alpha,beta (hazard-response)")
    p.add_argument("--n", type=int, required=True, help="sample size")
    p.add_argument("--censor-rate", type=float, help="target fraction censored; sets the censoring time")
    p.add_argument("--censor-time", type=float, help="fixed censoring time")
    p.add_argument("--t-max", type=float, default=150.0, help="inversion grid horizon (default 150)")
    p.add_argument("--step", type=float, default=0.001, help="inversion grid step (default 0.001)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", help="posterior-predictive curves from a chain",
                       description="Predictive survival, hazard and density with pointwise bands.")
    _add_common(p)
    _add_model(p)
    p.add_argument("--chain", required=True, help="chain.csv written by fit")
    p.add_argument("--grid", default="0:10:0.05", help="time grid start:stop:step (default 0:10:0.05)")
    p.add_argument("--bands", default="0.025,0.5,0.975", help="band quantile levels (default 0.025,0.5,0.975)")
    p.add_argument("--component", default="hazard",
                   help="comma list of hazard, survival, cumhaz, density, response (default hazard)")
    p.add_argument("--burn", type=int, default=0, help="drop this many leading draws")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("scenario", help="run a simulation study",
                       description="Replicated simulate / censor / MCMC study with summary table.")
    _add_common(p, seed=True)
    p.add_argument("--scenario", type=int, choices=(1, 2), default=1, help="1 logistic, 2 hazard-response")
    p.add_argument("--params", help="override the true parameters (same order as simulate)")
    p.add_argument("--h0", type=float, default=None, help="hazard-response initial hazard (default 0.01)")
    p.add_argument("--q0", type=float, default=1e-6, help="hazard-response initial response (default 1e-6)")
    p.add_argument("--sizes", default="250,500,1000,5000", help="sample sizes (default 250,500,1000,5000)")
    p.add_argument("--rates", default="0.25,0.5", help="censoring rates (default 0.25,0.5)")
    p.add_argument("--replications", type=int, default=25, help="replications per cell (default 25)")
    p.add_argument("--t-max", type=float, default=150.0, help="inversion grid horizon (default 150)")
    p.add_argument("--step", type=float, default=0.001, help="inversion grid step (default 0.001)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    p.add_argument("--prior-shape", type=float, default=2.0, help="gamma prior shape (default 2)")
    p.add_argument("--prior-scale", type=float, default=2.0, help="gamma prior scale (default 2)")
    _add_mcmc(p)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("km", help="Kaplan-Meier estimate",
                       description="Product-limit survival estimate of a time,status CSV.")
    _add_common(p)
    p.add_argument("--data", required=True, help="CSV with time and status columns")
    p.add_argument("--time-column", default="time", help="name of the time column")
    p.add_argument("--status-column", default="status", help="name of the event indicator column")
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("steady-state", help="steady state of the hazard-response system",
                       description="Classify and locate the stationary point for given parameters.")
    _add_common(p)
    p.add_argument("--params", required=True, help="lambda,kappa,alpha,beta")
    p.set_defaults(func=cmd_steady_state)
    return parser


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv``; values from ``--config`` act as defaults for the chosen subcommand."""
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in subparsers), None)
    path = _config_path(argv)
    if command is not None and path is not None and not {"-h", "--help"} & set(argv):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid config JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        raw = {k.replace("-", "_"): v for k, v in raw.items()}
        if raw.pop("command", command) != command:
            raise UsageError("config was written for a different command")
        sub = subparsers[command]
        known = {a.dest for a in sub._actions} - {"help"}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**raw)
        # options supplied by the config are no longer required on the command line
        for action in sub._actions:
            if action.dest in raw:
                action.required = False
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("odehazard: a command is required (see --help)")
    return args


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.time()
    try:
        out = _out_dir(args)
        files = args.func(args, out)
        manifest = {
            "command": args.command,
            "argv": argv,
            "config": {"command": args.command, **_config_echo(args)},
            "seed": getattr(args, "seed", None),
            "versions": _versions(),
            "wall_time_s": round(time.time() - start, 3),
            "outputs": files,
        }
        _write_json(out / "manifest.json", manifest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IntegrationError, InferenceError, PredictiveError, DegenerateSteadyState, CoverageError,
            FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
