"""Command-line front end: ``mrp <subcommand> --config run.yaml``.

Every subcommand reads one run configuration (``--config`` or the
``MRP_CONFIG`` environment variable); flags override the document.  Errors
exit with 1 (configuration), 2 (data) or 3 (numerics) and print a JSON
diagnostic on standard error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config, validate
from .errors import ConfigError, DataError, MRPError, NumericError
from .formula import n_effect_parameters, term_table
from .frame import Frame, read_frame_csv
from .infer import FitResult, SampleSet, fit_map, hmc_sample
from .kernels import BACKEND
from .model import Model, read_dataset_csv
from .poststrat import (
    CellPredictions,
    aggregate,
    calibrate,
    combine,
    gender_gap,
    predict_cells,
    read_predictions_csv,
    read_targets_csv,
)
from .synth import SynthSpec, simulate_electorate, simulate_poll, state_targets

log = logging.getLogger("mrp")

KINDS = ("turnout", "preference")

# (file stem, axes) for the report's vote-share and turnout tables
REPORT_AGGREGATES = (
    ("national", ()),
    ("by_state", ("state",)),
    ("by_educ", ("educ",)),
    ("by_age", ("age",)),
    ("by_eth", ("eth",)),
    ("by_gender", ("gender",)),
    ("by_educ_age", ("educ", "age")),
    ("by_state_eth", ("state", "eth")),
    ("by_state_educ", ("state", "educ")),
)
# (file stem, axes, quantity) for the report's gender-gap tables
REPORT_GAPS = (
    ("gender_gap_by_educ_age", ("educ", "age"), "vote_share"),
    ("gender_gap_by_educ", ("educ",), "vote_share"),
    ("gender_gap_by_age", ("age",), "vote_share"),
    ("gender_gap_by_state", ("state",), "vote_share"),
    ("turnout_gender_gap_by_state", ("state",), "turnout_rate"),
)


# ---------------------------------------------------------------------------
# file helpers


def _write(path: Path, text: str, written: list[Path] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    if written is not None:
        written.append(path)
    return path


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fit_path(cfg: RunConfig, kind: str) -> Path:
    return cfg.output_dir / f"fit_{kind}.json"


def _samples_path(cfg: RunConfig, kind: str) -> Path:
    return cfg.output_dir / f"samples_{kind}.npy"


def _resolve(cfg: RunConfig, attr: str, fallback: str) -> Path | None:
    p = getattr(cfg, attr)
    if p is not None:
        return p
    q = cfg.output_dir / fallback
    return q if q.exists() else None


def _load_frame(cfg: RunConfig) -> Frame:
    p = _resolve(cfg, "frame", "frame.csv")
    if p is None:
        raise ConfigError("no frame file configured (and none simulated in the output directory)")
    return read_frame_csv(p, cfg.factors)


def _model(cfg: RunConfig, formulas, kind: str) -> Model:
    return Model(formulas[kind], cfg.factors, cfg.covariates, cfg.center_covariates)


def _axes(spec: str) -> tuple[str, ...]:
    spec = spec.strip()
    if spec in ("", "national", "none"):
        return ()
    return tuple(a.strip() for a in spec.split(",") if a.strip())


def _stem(axes: Sequence[str]) -> str:
    return "_".join(axes) if axes else "national"


# ---------------------------------------------------------------------------
# pipeline steps


def _check(cfg: RunConfig, out) -> dict:
    formulas = validate(cfg)
    for kind, f in formulas.items():
        try:
            rows = term_table(f, cfg.factors)
            n_par = n_effect_parameters(f, cfg.factors)
        except DataError as exc:
            raise ConfigError(f"{kind}_formula: {exc}") from None
        Model(f, cfg.factors, cfg.covariates, cfg.center_covariates)
        print(f"# {kind} model: {len(f.varying)} varying terms, {n_par} effect parameters", file=out)
        for label, card in rows:
            print(f"{label} {card}", file=out)
    if not formulas:
        print("# no formulas configured", file=out)
    for attr, name in (("frame", "frame"), ("turnout_data", "turnout data"), ("preference_data", "preference data")):
        p = getattr(cfg, attr)
        if p is None:
            continue
        if attr == "frame":
            fr = read_frame_csv(p, cfg.factors)
            print(f"# {name}: {len(fr)} cells, population {fr.total_population}", file=out)
        else:
            kind = attr.split("_")[0]
            resp = formulas[kind].response if kind in formulas else None
            d = read_dataset_csv(p, cfg.factors, resp)
            print(f"# {name}: {len(d)} cells, {d.total_trials} respondents", file=out)
    if cfg.targets is not None:
        t = read_targets_csv(cfg.targets)
        print(f"# targets: {len(set(t.share) | set(t.turnout))} states", file=out)
    return formulas


def _simulate(cfg: RunConfig, formulas, written: list[Path]) -> None:
    if not cfg.synth:
        raise ConfigError("config has no 'synth' section")
    raw = dict(cfg.synth)
    raw.setdefault("factors", [{"name": f.name, "levels": list(f.levels)} for f in cfg.factors])
    raw.setdefault("formula", cfg.preference_formula or cfg.turnout_formula)
    raw.setdefault("turnout_formula", cfg.turnout_formula)
    raw.setdefault("truth_seed", cfg.seed)
    raw.setdefault("covariates", cfg.raw.get("covariates"))
    if not raw["formula"]:
        raise ConfigError("synth needs a formula")
    try:
        spec = SynthSpec.from_config(raw)
    except DataError as exc:
        raise ConfigError(f"synth: {exc}") from None
    bundle = simulate_electorate(spec)
    out = cfg.output_dir
    _write(out / "frame.csv", bundle.frame.to_csv(), written)
    _write(out / "truth_cells.csv", bundle.predictions().to_csv(), written)
    lay_p = spec.model("preference").layout
    lay_t = spec.model("turnout").layout
    params = {
        "truth_seed": spec.truth_seed,
        "preference": dict(zip(lay_p.names(), map(float, bundle.u_preference))),
        "turnout": dict(zip(lay_t.names(), map(float, bundle.u_turnout))),
    }
    _write(out / "truth_params.json", json.dumps(params, indent=1) + "\n", written)
    if state_factor_present(bundle.frame, cfg.state_factor):
        _write(out / "targets.csv", state_targets(bundle, cfg.state_factor).to_csv(), written)
    for i, kind in enumerate(KINDS):
        poll = simulate_poll(bundle, spec, cfg.seed + 1 + i, kind)
        _write(out / f"poll_{kind}.csv", poll.to_csv(), written)


def state_factor_present(frame: Frame, name: str) -> bool:
    return name in frame.factor_names


def _fit(cfg: RunConfig, formulas, written: list[Path]) -> list[str]:
    """Fit every configured model; returns kinds that failed to converge."""
    failed = []
    fitted = 0
    for kind in KINDS:
        if kind not in formulas:
            continue
        path = _resolve(cfg, f"{kind}_data", f"poll_{kind}.csv")
        if path is None:
            log.warning("no %s data; skipping the %s model", kind, kind)
            continue
        data = read_dataset_csv(path, cfg.factors, formulas[kind].response)
        model = _model(cfg, formulas, kind)
        res = fit_map(
            data, model, max_iter=cfg.optimizer.max_iter, tol=cfg.optimizer.tol,
            seed=cfg.seed, parameterization=cfg.optimizer.parameterization,
        )
        _write(_fit_path(cfg, kind), json.dumps(res.to_dict(model.layout), indent=1) + "\n", written)
        fitted += 1
        if not res.converged:
            failed.append(kind)
            continue
        if cfg.hmc.enabled:
            s = hmc_sample(
                data, model, cfg.hmc.step_size, cfg.hmc.leapfrog_steps, cfg.hmc.draws,
                cfg.hmc.warmup, seed=cfg.seed, init=res.mode,
                parameterization=cfg.optimizer.parameterization,
            )
            path = _samples_path(cfg, kind)
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, s.draws)
            written.append(path)
            log.info("%s HMC: acceptance %.3f, %d divergent", kind, s.acceptance_rate, s.n_divergent)
    if not fitted:
        raise ConfigError("nothing to fit: configure a formula and its data file")
    return failed


def _load_fit(cfg: RunConfig, kind: str):
    if cfg.hmc.enabled and _samples_path(cfg, kind).exists():
        return SampleSet(np.load(_samples_path(cfg, kind)), float("nan"), cfg.seed)
    p = _fit_path(cfg, kind)
    if not p.exists():
        return None
    try:
        return FitResult.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed fit file {p}: {exc}") from None


def _predict(cfg: RunConfig, formulas, frame: Frame, written: list[Path]) -> CellPredictions:
    parts = {}
    for kind in KINDS:
        if kind not in formulas:
            continue
        fit = _load_fit(cfg, kind)
        if fit is None:
            continue
        model = _model(cfg, formulas, kind)
        if isinstance(fit, FitResult) and fit.mode.shape[0] != model.layout.size:
            raise DataError(f"fit_{kind}.json does not match the configured {kind} formula")
        parts[kind] = predict_cells(fit, frame, model, kind)
    if not parts:
        raise ConfigError("no fits found; run 'mrp fit' first")
    if len(parts) == 2:
        preds = combine(parts["turnout"], parts["preference"], frame)
    else:
        preds = next(iter(parts.values()))
    _write(cfg.output_dir / "predictions.csv", preds.to_csv(), written)
    return preds


def _calibrate(cfg: RunConfig, frame: Frame, preds: CellPredictions, written: list[Path]) -> CellPredictions:
    tpath = _resolve(cfg, "targets", "targets.csv")
    if tpath is None:
        raise ConfigError("no targets file configured")
    targets = read_targets_csv(tpath)
    cal, result = calibrate(
        preds, frame, targets, cfg.state_factor, cfg.calibrate_turnout, cfg.calibrate_preference,
    )
    _write(cfg.output_dir / "calibrated_predictions.csv", cal.to_csv(), written)
    _write(cfg.output_dir / "calibration.csv", result.to_csv(), written)
    return cal


def _weighting(cfg: RunConfig, preds: CellPredictions) -> str:
    if cfg.weighting == "voters" and preds.turnout is None:
        log.warning("no turnout predictions; using population weighting")
        return "population"
    return cfg.weighting


def _aggregate(cfg: RunConfig, frame: Frame, preds: CellPredictions, axes_list, written, subdir=""):
    weighting = _weighting(cfg, preds)
    out = cfg.output_dir / subdir
    has_gender = cfg.gender_factor in frame.factor_names
    for axes in axes_list:
        t = aggregate(preds, frame, axes, weighting)
        _write(out / f"aggregate_{_stem(axes)}.csv", t.to_csv(), written)
        if has_gender and cfg.gender_factor not in axes and preds.preference is not None:
            g = gender_gap(preds, frame, axes, weighting, cfg.gender_factor, cfg.male_level, cfg.female_level)
            _write(out / f"gender_gap_{_stem(axes)}.csv", g.to_csv(), written)


def _report_tables(cfg: RunConfig, frame: Frame, preds: CellPredictions, written) -> None:
    weighting = _weighting(cfg, preds)
    out = cfg.output_dir / "tables"
    names = set(frame.factor_names)
    rename = {"state": cfg.state_factor, "gender": cfg.gender_factor}
    for stem, axes in REPORT_AGGREGATES:
        axes = tuple(rename.get(a, a) for a in axes)
        if set(axes) <= names:
            _write(out / f"{stem}.csv", aggregate(preds, frame, axes, weighting).to_csv(), written)
    if cfg.gender_factor not in names:
        return
    for stem, axes, quantity in REPORT_GAPS:
        axes = tuple(rename.get(a, a) for a in axes)
        if not set(axes) <= names:
            continue
        need = preds.turnout if quantity == "turnout_rate" else preds.preference
        if need is None:
            continue
        g = gender_gap(
            preds, frame, axes, weighting, cfg.gender_factor, cfg.male_level, cfg.female_level, quantity,
        )
        _write(out / f"{stem}.csv", g.to_csv(), written)


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(cfg: RunConfig, args) -> int:
    _check(cfg, sys.stdout)
    print("ok")
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    formulas = validate(cfg, need_inputs=False)
    written: list[Path] = []
    _simulate(cfg, formulas, written)
    _print_written(written)
    return 0


def cmd_fit(cfg: RunConfig, args) -> int:
    formulas = validate(cfg)
    written: list[Path] = []
    failed = _fit(cfg, formulas, written)
    _print_written(written)
    if failed:
        raise NumericError(f"MAP optimisation did not converge for: {', '.join(failed)}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    formulas = validate(cfg)
    written: list[Path] = []
    _predict(cfg, formulas, _load_frame(cfg), written)
    _print_written(written)
    return 0


def _read_preds(cfg: RunConfig, frame: Frame, given: str | None, prefer_calibrated: bool) -> CellPredictions:
    if given:
        p = Path(given)
    else:
        cal = cfg.output_dir / "calibrated_predictions.csv"
        p = cal if prefer_calibrated and cal.exists() else cfg.output_dir / "predictions.csv"
    if not p.exists():
        raise ConfigError(f"predictions file {p} does not exist; run 'mrp predict' first")
    return read_predictions_csv(p, frame)


def cmd_calibrate(cfg: RunConfig, args) -> int:
    validate(cfg)
    frame = _load_frame(cfg)
    written: list[Path] = []
    _calibrate(cfg, frame, _read_preds(cfg, frame, args.input, False), written)
    _print_written(written)
    return 0


def cmd_aggregate(cfg: RunConfig, args) -> int:
    validate(cfg)
    frame = _load_frame(cfg)
    preds = _read_preds(cfg, frame, args.input, True)
    if args.by:
        axes_list = [_axes(b) for b in args.by]
    else:
        axes_list = [tuple(a) for a in cfg.aggregates] or [()]
    written: list[Path] = []
    _aggregate(cfg, frame, preds, axes_list, written)
    _print_written(written)
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    timings = {}
    written: list[Path] = []
    formulas = validate(cfg)
    t0 = time.perf_counter()
    if cfg.synth and cfg.frame is None:
        _simulate(cfg, formulas, written)
        timings["simulate"] = time.perf_counter() - t0
    inputs = [p for p in (cfg.frame, cfg.turnout_data, cfg.preference_data, cfg.targets) if p is not None]
    t0 = time.perf_counter()
    failed = _fit(cfg, formulas, written)
    timings["fit"] = time.perf_counter() - t0
    if failed:
        raise NumericError(f"MAP optimisation did not converge for: {', '.join(failed)}")
    frame = _load_frame(cfg)
    t0 = time.perf_counter()
    preds = _predict(cfg, formulas, frame, written)
    timings["predict"] = time.perf_counter() - t0
    if _resolve(cfg, "targets", "targets.csv") is not None and cfg.state_factor in frame.factor_names:
        t0 = time.perf_counter()
        preds = _calibrate(cfg, frame, preds, written)
        timings["calibrate"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    _report_tables(cfg, frame, preds, written)
    if cfg.aggregates:
        _aggregate(cfg, frame, preds, [tuple(a) for a in cfg.aggregates], written, "tables")
    timings["aggregate"] = time.perf_counter() - t0
    manifest = {
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {str(p): _digest(p) for p in inputs},
        "versions": {
            "mrp": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "kernel_backend": BACKEND,
        },
        "timings_seconds": timings,
        "outputs": {str(p.relative_to(cfg.output_dir)): _digest(p) for p in written},
    }
    _write(cfg.output_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    _print_written(written + [cfg.output_dir / "manifest.json"])
    return 0


def _print_written(paths: Sequence[Path]) -> None:
    for p in paths:
        print(p)


COMMANDS = {
    "check": cmd_check,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "calibrate": cmd_calibrate,
    "aggregate": cmd_aggregate,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="run configuration (default: $MRP_CONFIG)")
    common.add_argument("-o", "--output-dir", help="override output_dir")
    common.add_argument("--seed", type=int, help="override seed")
    common.add_argument("--weighting", choices=("population", "voters"), help="override weighting")
    common.add_argument("--max-iter", type=int, help="override optimizer.max_iter")
    common.add_argument("--tol", type=float, help="override optimizer.tol")
    common.add_argument("--hmc", action=argparse.BooleanOptionalAction, default=None, help="toggle HMC sampling")
    common.add_argument("--no-calibrate-turnout", action="store_true", help="leave turnout uncalibrated")
    common.add_argument("--no-calibrate-preference", action="store_true", help="leave preference uncalibrated")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="mrp", description="Multilevel regression and poststratification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("check", parents=[common], help="validate config, formulas and files; print term tables")
    sub.add_parser("fit", parents=[common], help="fit the turnout and preference models")
    sub.add_parser("predict", parents=[common], help="write per-cell predictions")
    p = sub.add_parser("calibrate", parents=[common], help="shift predictions to match state targets")
    p.add_argument("--input", help="predictions file (default: output_dir/predictions.csv)")
    p = sub.add_parser("aggregate", parents=[common], help="write aggregate and gender-gap tables")
    p.add_argument("--by", action="append", help="comma-separated axes; repeatable; 'national' for none")
    p.add_argument("--input", help="predictions file (default: calibrated, else raw predictions)")
    sub.add_parser("simulate", parents=[common], help="write a synthetic electorate and polls")
    sub.add_parser("report", parents=[common], help="run the whole pipeline and write plot-ready tables")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw["seed"] = args.seed
    if args.weighting:
        cfg.weighting = args.weighting
    if args.max_iter is not None:
        cfg.optimizer.max_iter = args.max_iter
    if args.tol is not None:
        cfg.optimizer.tol = args.tol
    if args.hmc is not None:
        cfg.hmc.enabled = args.hmc
    if args.no_calibrate_turnout:
        cfg.calibrate_turnout = False
    if args.no_calibrate_preference:
        cfg.calibrate_preference = False
    return cfg


def _diagnostic(exc: MRPError) -> str:
    return json.dumps({"error": exc.kind, "exit_code": exc.exit_code, "message": str(exc)})


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except MRPError as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
