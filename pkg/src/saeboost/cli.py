"""Command-line front end: ``saeboost {fit,predict,mse,simulate,tune}``.

Settings come from built-in defaults, then an optional flat ``key = value``
config file (``--config``), then command-line flags; later sources win.
Every command writes fixed file names into the ``--out`` directory and never
writes timestamps, so identical settings and seed give identical files.

Randomness is derived from ``seed`` through named sub-streams:
``boost`` (fit), ``replicate``/``refit`` (mse), ``simulate``/``fit``/``tune``/
``bootstrap`` (simulate) and ``tune`` (tune).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import megb, rebb, simlab
from .core import Hyperparams, Schema, check_compatible, load_census_csv, load_survey_csv, substream

log = logging.getLogger("saeboost")

HYPER_TYPES = {f.name: (int if f.type in ("int", int) else float) for f in fields(Hyperparams)}
HYPER_DEFAULTS = asdict(Hyperparams())

# name -> (converter, default, help); default None means "not set"
OPTIONS = {
    "survey": (str, None, "survey CSV (one row per sampled unit)"),
    "census": (str, None, "census CSV (one row per population unit)"),
    "model": (str, None, "model file (input of predict and mse)"),
    "out": (str, ".", "output directory"),
    "seed": (int, None, "master seed; required by mse and simulate, default 0 elsewhere"),
    "params": (str, None, "hyperparameter file written by the tune command"),
    "area_col": (str, "area", "area id column"),
    "response_col": (str, "y", "response column"),
    "covariates": (str, None, "comma-separated covariate columns"),
    "pi_col": (str, None, "inclusion probability column (optional)"),
    "tol": (float, megb.EmConfig.tol, "EM relative GLL tolerance; inf runs one pass"),
    "iter_max": (int, megb.EmConfig.iter_max, "maximum EM iterations"),
    "b": (int, 100, "bootstrap replicates"),
    "n_jobs": (int, 1, "worker processes for replicates and Monte-Carlo runs"),
    "n_mc": (int, 200, "Monte-Carlo runs"),
    "scenario": (str, "Linear-Normal", "comma-separated scenario names"),
    "estimators": (str, "HT,BHF,MEGB", "comma-separated estimators"),
    "n_areas": (int, 50, "simulated number of areas"),
    "area_size": (int, 1000, "simulated population size per area"),
    "grid": (str, None, "tuning grid, e.g. 'eta:0.01,0.1; max_depth:2,3'"),
}
for _name, _conv in HYPER_TYPES.items():
    OPTIONS[_name] = (_conv, HYPER_DEFAULTS[_name], f"boosting {_name}")

FLAG_ALIASES = {"reg_lambda": ["--lambda"]}


class CliError(Exception):
    pass


def _key(raw: str) -> str:
    return raw.strip().replace("-", "_")


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment line."""
    settings: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            key = _key(key)
            if key not in OPTIONS:
                raise CliError(f"{path}:{lineno}: unknown setting {key!r}")
            settings[key] = value.strip()
    return settings


def _convert(raw: dict[str, str]) -> dict:
    out = {}
    for key, value in raw.items():
        conv = OPTIONS[key][0]
        try:
            out[key] = conv(value)
        except ValueError:
            raise CliError(f"setting {key}: cannot parse {value!r} as {conv.__name__}") from None
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < params file < config file < flags."""
    settings = {k: v[1] for k, v in OPTIONS.items()}
    given = {k: v for k, v in vars(args).items() if k in OPTIONS and v is not None}
    layers = []
    config = getattr(args, "config", None)
    if config:
        layers.append(read_config(config))
    params = given.get("params") or (layers[0].get("params") if layers else None)
    if params:
        hp = read_config(params)
        bad = sorted(set(hp) - set(HYPER_TYPES))
        if bad:
            raise CliError(f"{params}: not a hyperparameter file (unexpected keys {bad})")
        layers.insert(0, hp)
    layers.append(given)
    for layer in layers:
        settings.update(_convert(layer))
    return settings


def hyperparams(s: dict) -> Hyperparams:
    return Hyperparams(**{k: s[k] for k in HYPER_TYPES})


def em_config(s: dict) -> megb.EmConfig:
    return megb.EmConfig(s["tol"], s["iter_max"])


def schema(s: dict, response: bool) -> Schema:
    if not s["covariates"]:
        raise CliError("no covariates given (set 'covariates' or --covariates)")
    covs = tuple(c.strip() for c in s["covariates"].split(",") if c.strip())
    return Schema(s["area_col"], covs, s["response_col"] if response else None, s["pi_col"])


def _need(s: dict, *keys):
    missing = [k for k in keys if s[k] is None]
    if missing:
        raise CliError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _outdir(s: dict) -> Path:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(s: dict) -> int:
    return 0 if s["seed"] is None else s["seed"]


def parse_grid(text: str) -> dict[str, list]:
    """``'eta:0.01,0.1; max_depth:2,3'`` -> ``{'eta': [0.01, 0.1], 'max_depth': [2, 3]}``."""
    grid = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        if ":" not in part:
            raise CliError(f"grid entry {part.strip()!r} is not 'name:v1,v2,...'")
        name, values = part.split(":", 1)
        name = _key(name)
        if name not in HYPER_TYPES:
            raise CliError(f"grid names unknown hyperparameter {name!r}")
        try:
            vals = [HYPER_TYPES[name](v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise CliError(f"grid entry for {name!r} has a non-numeric value") from None
        if not vals:
            raise CliError(f"grid entry for {name!r} is empty")
        grid[name] = vals
    if not grid:
        raise CliError("tuning grid is empty")
    return grid


def _stream_line(seed: int, name: str) -> str:
    ss = substream(seed, name)
    return f"stream.{name}\tentropy={ss.entropy} spawn_key={list(ss.spawn_key)}"


def _write_kv(path: Path, items) -> None:
    with path.open("w") as fh:
        for key, value in items:
            fh.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_fit(s: dict) -> None:
    _need(s, "survey")
    sample = load_survey_csv(s["survey"], schema(s, response=True))
    seed = _seed(s)
    model = megb.fit_megb(sample, hyperparams(s), em_config(s), seed)
    out = _outdir(s)
    with (out / "model.txt").open("w") as fh:
        megb.save_model(model, fh)
    with (out / "fit_report.txt").open("w") as fh:
        fh.write(f"iterations\t{model.iterations}\n")
        fh.write(f"converged\t{str(model.converged).lower()}\n")
        fh.write("gll_trace\t" + ",".join(repr(t) for t in model.trace) + "\n")
        fh.write(f"sigma_eps2\t{model.sigma_eps2!r}\n")
        fh.write(f"sigma_v2\t{model.sigma_v2!r}\n")
        fh.write(f"beta0\t{model.beta0!r}\n")
        fh.write(f"boosting_rounds\t{model.ensemble.n_rounds_used}\n")
        fh.write(f"n_units\t{len(sample)}\n")
        fh.write(f"n_areas\t{sample.D_s}\n")
        fh.write(f"seed\t{seed}\n")
        fh.write(_stream_line(seed, "boost") + "\n")
    log.info("fit: %d EM iterations, converged=%s", model.iterations, model.converged)


def _load_model(s: dict) -> megb.MegbModel:
    _need(s, "model")
    with open(s["model"]) as fh:
        return megb.load_model(fh)


def cmd_predict(s: dict) -> None:
    _need(s, "census")
    model = _load_model(s)
    census = load_census_csv(s["census"], schema(s, response=False))
    if census.p != model.ensemble.n_features:
        raise CliError(f"census has {census.p} covariates, model expects {model.ensemble.n_features}")
    mu = megb.area_means(model, census)
    total = census.N_d * mu
    sampled = set(model.areas)
    with (_outdir(s) / "estimates.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "mu_hat", "total_hat", "in_sample"])
        for area, m, t in zip(census.areas, mu.tolist(), total.tolist()):
            w.writerow([area, repr(m), repr(t), str(area in sampled).lower()])


def cmd_mse(s: dict) -> None:
    _need(s, "survey", "census", "seed")
    model = _load_model(s)
    sample = load_survey_csv(s["survey"], schema(s, response=True))
    census = load_census_csv(s["census"], schema(s, response=False))
    check_compatible(sample, census)
    res = rebb.bootstrap_mse(model, sample, census, s["b"], s["seed"], n_jobs=s["n_jobs"])
    res.write_csv(_outdir(s) / "mse.csv")


def cmd_simulate(s: dict) -> None:
    _need(s, "seed")
    names = [n.strip() for n in s["scenario"].split(",") if n.strip()]
    specs = [simlab.get_scenario(n).scaled(s["n_areas"], s["area_size"]) for n in names]
    estimators = simlab.check_estimators(e.strip() for e in s["estimators"].split(",") if e.strip())
    grid = parse_grid(s["grid"]) if s["grid"] else None
    B = s["b"] if "MEGB" in estimators and s["b"] > 0 else None
    results = []
    for spec in specs:
        res = simlab.run_monte_carlo(spec, estimators, s["n_mc"], s["seed"], B=B,
                                     params=hyperparams(s), em=em_config(s),
                                     n_jobs=s["n_jobs"], tune_grid=grid)
        for run, est, msg in res.failures:
            log.warning("%s run %d: %s failed: %s", spec.name, run, est, msg)
        results.append(res)
    out = _outdir(s)
    simlab.write_long_csv(results, out / "results.csv")
    simlab.write_summary_csv(results, out / "summary.csv")


def cmd_tune(s: dict) -> None:
    _need(s, "survey")
    sample = load_survey_csv(s["survey"], schema(s, response=True))
    grid = parse_grid(s["grid"]) if s["grid"] else megb.DEFAULT_GRID
    steps: list = []
    tuned = megb.tune_sequential(sample, grid, seed=_seed(s), base=hyperparams(s), log_steps=steps)
    out = _outdir(s)
    _write_kv(out / "params.txt", [(k, repr(v)) for k, v in asdict(tuned).items()])
    with (out / "tune_log.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "parameter", "value", "holdout_rmse", "selected"])
        for k, (name, value, score) in enumerate(steps):
            w.writerow([k, name, repr(value), repr(score), str(getattr(tuned, name) == value).lower()])


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "mse": cmd_mse,
            "simulate": cmd_simulate, "tune": cmd_tune}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saeboost", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        for key, (_, default, text) in OPTIONS.items():
            flags = ["--" + key.replace("_", "-")] + FLAG_ALIASES.get(key, [])
            shown = "" if default is None else f" (default: {default})"
            p.add_argument(*flags, dest=key, default=None, help=text + shown)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = resolve(args)
        if not settings["b"] >= 0 or (args.command == "mse" and settings["b"] < 1):
            raise CliError("b must be a positive integer")
        if math.isnan(settings["tol"]):
            raise CliError("tol must be a number")
        COMMANDS[args.command](settings)
    except (CliError, ValueError, OSError, KeyError, rebb.ReplicateError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"saeboost {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
