"""Command-line orchestration of the full pipeline.

    pgmag synth    --config run.yaml        generate a synthetic dataset
    pgmag train    --config run.yaml        prepare data, train, save model
    pgmag search   --config run.yaml        lambda or alpha grid search
    pgmag prune    --config run.yaml        prune + fine-tune a saved model
    pgmag eval     --config run.yaml        metrics / noise sweep / trace CSVs
    pgmag compare  --config run.yaml        merge eval outputs across runs

Every command reads one YAML run file (strictly validated, unknown keys
rejected), writes data only to files, logs to stderr, and echoes each
output path on stdout.  Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric failure.

All randomness derives from the single config ``seed``: data generation
uses the seed itself, model initialization and shuffling use stage-derived
seeds (stage ids: 1 init/train, 3 noise sweep), so reruns with unchanged
inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import dataset, evaluation, model_io, nn_core, pruning, search, synth
from .dataset import DataBundle, DataError, SplitSpec
from .evaluation import NoiseSweepConfig, VARIANT_LABELS
from .nn_core import Mlp, TrainConfig, TrainingDivergenceError
from .pruning import ElementKind, PruneConfig, PruneScheme
from .search import GridSpec

__all__ = ["main"]

logger = logging.getLogger("pgmag")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

STAGE_TRAIN = 1
STAGE_SWEEP = 3


class ConfigError(ValueError):
    pass


# Recognized run-file structure; leaves are type predicates.
_SCHEMA = {
    "seed": int,
    "out_dir": str,
    "dataset": {
        "source": str,                      # "synth" | "csv"
        "synth": {f: (int, float, str) for f in (
            "n_minutes", "seed", "mean_speed", "speed_sigma", "imf_sigma",
            "mean_temp", "temp_sigma", "mean_density", "density_sigma",
            "mean_pressure", "pressure_sigma", "corr_minutes",
            "coupling_gain", "coupling_lag", "direction_sigma",
            "direction_corr", "ground_relax", "noise_sigma", "gap_fraction",
            "start")},
        "csv": {"data": str, "schema": str},
        "split": {"train_fraction": float, "val_fraction": float},
    },
    "architecture": {"hidden": list},
    "train": {"epochs": int, "batch_size": int, "learning_rate": float,
              "optimizer": str, "loss_threshold": (int, float, type(None))},
    "loss": {"lambda": float, "dt_minutes": float, "physical_units": bool},
    "prune": {"model": str, "kind": str, "ratio": float, "alpha": float,
              "fine_tune_epochs": int, "scheme": str},
    "search": {"parameter": str, "values": list, "folds": int,
               "model": str},
    "eval": {"model": str, "label": str, "noise_levels": list},
    "compare": {"runs": list},
}


def _type_ok(value, expected) -> bool:
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is bool:
        return isinstance(value, bool)
    return isinstance(value, expected)


def _validate(node, schema, path="") -> None:
    if not isinstance(node, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a mapping")
    for key, value in node.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key: {where}")
        expected = schema[key]
        if isinstance(expected, dict):
            _validate(value, expected, where)
        elif not _type_ok(value, expected):
            raise ConfigError(f"config key {where} has wrong type "
                              f"({type(value).__name__})")


def load_run_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if cfg is None:
        cfg = {}
    _validate(cfg, _SCHEMA)
    return cfg


def stage_seed(root_seed: int, stage: int) -> int:
    """Deterministic per-stage seed derived from the run seed."""
    return int(np.random.SeedSequence([root_seed, stage]).generate_state(1)[0])


def _echo(path) -> None:
    print(str(path))


def _require(cfg: dict, section: str) -> dict:
    if section not in cfg:
        raise ConfigError(f"run file needs a {section!r} section for this command")
    return cfg[section]


def _load_bundle(cfg: dict, seed: int) -> DataBundle:
    ds = _require(cfg, "dataset")
    source = ds.get("source", "synth")
    split_cfg = ds.get("split", {})
    spec = SplitSpec(train_fraction=split_cfg.get("train_fraction", 0.8),
                     val_fraction=split_cfg.get("val_fraction", 0.2))
    if source == "synth":
        synth_kwargs = dict(ds.get("synth", {}))
        synth_kwargs.setdefault("seed", seed)
        series = synth.generate(synth.SynthConfig(**synth_kwargs))
    elif source == "csv":
        csv_cfg = ds.get("csv", {})
        if "data" not in csv_cfg or "schema" not in csv_cfg:
            raise ConfigError("dataset.csv needs 'data' and 'schema' paths")
        schema = dataset.load_schema(csv_cfg["schema"])
        series = dataset.ingest_csv(csv_cfg["data"], schema)
        series = dataset.interpolate_gaps(series)
    else:
        raise ConfigError(f"unknown dataset.source {source!r}")
    return dataset.prepare_supervised(series, spec)


def _train_cfg(cfg: dict, seed: int) -> TrainConfig:
    t = cfg.get("train", {})
    return TrainConfig(
        learning_rate=t.get("learning_rate", 1e-3),
        epochs=t.get("epochs", 30),
        batch_size=t.get("batch_size", 64),
        seed=stage_seed(seed, STAGE_TRAIN),
        loss_threshold=t.get("loss_threshold"),
        optimizer=t.get("optimizer", "adam"))


def _loss_cfg(cfg: dict, bundle: DataBundle):
    loss = cfg.get("loss", {})
    lam = loss.get("lambda", 0.0)
    bundle.dt_minutes = loss.get("dt_minutes", 1.0)
    return bundle.loss_config(lam, physical_units=loss.get("physical_units", True))


def _hidden_dims(cfg: dict) -> list[int]:
    hidden = cfg.get("architecture", {}).get("hidden", list(nn_core.DEFAULT_HIDDEN))
    if not all(isinstance(h, int) and h >= 1 for h in hidden):
        raise ConfigError("architecture.hidden must be positive integers")
    return list(hidden)


def cmd_synth(cfg: dict, out_dir: Path, seed: int) -> int:
    synth_kwargs = dict(_require(cfg, "dataset").get("synth", {}))
    synth_kwargs.setdefault("seed", seed)
    scfg = synth.SynthConfig(**synth_kwargs)
    csv_path = out_dir / "dataset.csv"
    schema_path = out_dir / "dataset.schema"
    synth.write_dataset(scfg, csv_path, schema_path)
    _echo(csv_path)
    _echo(schema_path)
    return EXIT_OK


def cmd_train(cfg: dict, out_dir: Path, seed: int) -> int:
    bundle = _load_bundle(cfg, seed)
    train_cfg = _train_cfg(cfg, seed)
    loss_cfg = _loss_cfg(cfg, bundle)
    dims = [bundle.train.features.shape[1], *_hidden_dims(cfg),
            bundle.train.targets.shape[1]]
    model = Mlp.initialize(dims, seed=stage_seed(seed, STAGE_TRAIN))
    logger.info("training %s with lambda=%s for %d epochs",
                dims, loss_cfg.lam, train_cfg.epochs)
    trained, log = nn_core.train(model, bundle.train, loss_cfg, train_cfg,
                                 val_data=bundle.val)
    model_path = out_dir / "model.pgm"
    meta = {"seed": seed, "lambda": loss_cfg.lam, "epochs": train_cfg.epochs,
            "hidden": _hidden_dims(cfg), "prune_scheme": None,
            "prune_ratio": None, "alpha": None}
    model_io.save(trained, {"features": bundle.feature_scaler,
                            "targets": bundle.target_scaler}, meta, model_path)
    log_path = out_dir / "training_log.csv"
    _write_log_csv(log, log_path)
    _echo(model_path)
    _echo(log_path)
    return EXIT_OK


def _write_log_csv(log, path: Path) -> None:
    import csv as _csv
    rows = log.rows()
    cols = ["epoch", "train_l_data", "train_r1", "train_r2", "train_total",
            "val_l_data", "val_r1", "val_r2", "val_total"]
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row.get(c), float)
                        else row.get(c, "") for c in cols])


def cmd_search(cfg: dict, out_dir: Path, seed: int) -> int:
    s = _require(cfg, "search")
    parameter = s.get("parameter", "lambda")
    values = s.get("values")
    grid = (GridSpec(parameter, tuple(values), s.get("folds", 1))
            if values else search.default_grid(parameter))
    bundle = _load_bundle(cfg, seed)
    train_cfg = _train_cfg(cfg, seed)
    if parameter == "lambda":
        result = search.grid_search_lambda(
            bundle, _hidden_dims(cfg), grid, train_cfg,
            physical_units=cfg.get("loss", {}).get("physical_units", True))
    else:
        if "model" not in s:
            raise ConfigError("search.model (a saved model file) is required "
                              "for alpha search")
        model, _, _ = model_io.load(s["model"])
        loss_cfg = _loss_cfg(cfg, bundle)
        prune_cfg = _prune_cfg(cfg)
        result = search.grid_search_alpha(model, bundle, grid, prune_cfg,
                                          loss_cfg, train_cfg)
    table_path = out_dir / f"search_{parameter}.csv"
    result.write_csv(table_path)
    _echo(table_path)
    logger.info("best %s = %s (validation NRMSE %.6f)", parameter,
                result.best_value, result.best_score)
    return EXIT_OK


def _prune_cfg(cfg: dict) -> PruneConfig:
    p = cfg.get("prune", {})
    kind = ElementKind(p.get("kind", "neuron"))
    return PruneConfig(kind=kind, ratio=p.get("ratio", 0.3),
                       alpha=p.get("alpha", 0.0),
                       fine_tune_epochs=p.get("fine_tune_epochs"))


def cmd_prune(cfg: dict, out_dir: Path, seed: int) -> int:
    p = _require(cfg, "prune")
    if "model" not in p:
        raise ConfigError("prune.model (a saved model file) is required")
    model, scalers, meta = model_io.load(p["model"])
    scheme = PruneScheme(p.get("scheme", "standard"))
    bundle = _load_bundle(cfg, seed)
    train_cfg = _train_cfg(cfg, seed)
    trained_lam = meta.get("lambda", 0.0) or 0.0
    loss_cfg = (_loss_cfg(cfg, bundle) if trained_lam > 0
                or scheme is PruneScheme.PHYSICS_GUIDED else None)
    prune_cfg = _prune_cfg(cfg)
    pruned, report = pruning.prune_pipeline(model, bundle, prune_cfg, scheme,
                                            loss_cfg, train_cfg)
    model_path = out_dir / "pruned_model.pgm"
    meta = dict(meta)
    meta.update({"prune_scheme": scheme.value, "prune_ratio": prune_cfg.ratio,
                 "alpha": prune_cfg.alpha,
                 "prune_kind": prune_cfg.kind.value})
    model_io.save(pruned, scalers, meta, model_path)
    report_path = report.write_json(out_dir / "prune_report.json")
    _echo(model_path)
    _echo(report_path)
    return EXIT_OK


def cmd_eval(cfg: dict, out_dir: Path, seed: int) -> int:
    e = _require(cfg, "eval")
    if "model" not in e:
        raise ConfigError("eval.model (a saved model file) is required")
    label = e.get("label")
    if label not in VARIANT_LABELS:
        raise ConfigError(f"eval.label must be one of {VARIANT_LABELS}")
    model, scalers, _ = model_io.load(e["model"])
    if "targets" not in scalers:
        raise DataError("model file carries no target scaler")
    bundle = _load_bundle(cfg, seed)
    report = evaluation.evaluate_variant(model, bundle.test, scalers["targets"],
                                         label, bundle.layout, bundle.dt_minutes)
    levels = e.get("noise_levels")
    sweeps = []
    if levels:
        sweep_cfg = NoiseSweepConfig(levels=tuple(float(x) for x in levels),
                                     seed=stage_seed(seed, STAGE_SWEEP))
        sweeps = [evaluation.noise_sweep(model, bundle.test, scalers["targets"],
                                         sweep_cfg, label, bundle.layout,
                                         bundle.dt_minutes)]
    comparison = evaluation.Comparison([report], sweeps)
    paths = comparison.write(out_dir)
    for pth in paths.values():
        _echo(pth)
    return EXIT_OK


def cmd_compare(cfg: dict, out_dir: Path, seed: int) -> int:
    runs = _require(cfg, "compare").get("runs", [])
    if len(runs) < 2:
        raise ConfigError("compare.runs needs at least two eval output dirs")
    reports, sweeps = [], []
    for run_dir in runs:
        r, s = _read_eval_outputs(Path(run_dir))
        reports.append(r)
        sweeps.extend(s)
    comparison = evaluation.compare_variants(reports, sweeps)
    paths = comparison.write(out_dir)
    for pth in paths.values():
        _echo(pth)
    return EXIT_OK


def _read_eval_outputs(run_dir: Path):
    """Rehydrate a MetricsReport (+ sweep) from one eval output directory."""
    import csv as _csv
    metrics_path = run_dir / "metrics.csv"
    trace_path = run_dir / "trace_dbh_dt.csv"
    if not metrics_path.exists() or not trace_path.exists():
        raise DataError(f"{run_dir} does not contain eval outputs")
    with open(metrics_path, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    if len(rows) != 1:
        raise DataError(f"{metrics_path} must describe exactly one variant")
    row = rows[0]
    label = row["variant"]
    nrmse_by = {k[len("nrmse_"):]: float(v) for k, v in row.items()
                if k.startswith("nrmse_")}
    rmse_by = {k[len("rmse_"):]: float(v) for k, v in row.items()
               if k.startswith("rmse_")}
    with open(trace_path, newline="") as fh:
        r = _csv.reader(fh)
        header = next(r)
        stamps, observed, predicted = [], [], []
        for rec in r:
            stamps.append(rec[0])
            observed.append(float(rec[1]))
            predicted.append(float(rec[2]))
    try:
        times = np.array(stamps, dtype="datetime64[m]")
    except ValueError:
        times = None
    report = evaluation.MetricsReport(
        label=label, rmse=rmse_by, nrmse=nrmse_by,
        r1=float(row["r1"]), r2=float(row["r2"]),
        trace_time=times, trace_observed=np.array(observed),
        trace_predicted=np.array(predicted))
    sweeps = []
    sweep_path = run_dir / "noise_sweep.csv"
    if sweep_path.exists():
        with open(sweep_path, newline="") as fh:
            recs = list(_csv.DictReader(fh))
        levels = [float(r["level"]) for r in recs]
        scores = [float(r["nrmse"]) for r in recs]
        sweeps.append(evaluation.NoiseSweepResult(
            label=label, levels=np.array(levels), nrmse=np.array(scores)))
    return report, sweeps


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "search": cmd_search,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pgmag",
        description="Physics-guided training and compression pipeline for "
                    "ground magnetic perturbation forecasting.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run file")
    parser.add_argument("--out", default=None, help="output directory "
                        "(default: out_dir from the run file, else '.')")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run file seed")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        out_dir = Path(args.out or cfg.get("out_dir", "."))
        out_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_dir, seed)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, model_io.ModelIoError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except TrainingDivergenceError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, pruning.PruneError, search.SearchError) as exc:
        logger.error("error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
