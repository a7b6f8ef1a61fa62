"""Evaluation metrics, the variant comparison, and the noise-robustness sweep.

Metrics are computed in physical units: predictions and observations are
inverse-scaled before any error is formed, and the NRMSE normalizer is the
observed range (max - min) of the channel under evaluation.  Noise is
applied to the normalized model inputs, per feature, scaled by that
feature's standard deviation on the clean normalized test block.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import physics
from .nn_core import Mlp
from .physics import TargetLayout

__all__ = [
    "VARIANT_LABELS",
    "MetricsReport",
    "NoiseSweepConfig",
    "NoiseSweepResult",
    "Comparison",
    "nrmse",
    "evaluate_variant",
    "noise_sweep",
    "compare_variants",
]

#: The eight model variants the comparison tables cover.
VARIANT_LABELS = (
    "std-offline", "pgnn-offline",
    "std+std-neuron", "std+std-weight",
    "pgnn+std-neuron", "pgnn+std-weight",
    "pgnn+pg-neuron", "pgnn+pg-weight",
)


def nrmse(pred, obs) -> float:
    """Root-mean-square error normalized by the observed range."""
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred.shape != obs.shape or obs.size < 2:
        raise ValueError("pred/obs must be equal-length vectors of >= 2 entries")
    span = float(obs.max() - obs.min())
    if span == 0.0:
        raise ValueError("observed values are constant; NRMSE undefined")
    return float(np.sqrt(np.mean((pred - obs) ** 2)) / span)


@dataclass
class MetricsReport:
    """Per-target errors plus test-set physics residuals for one variant."""

    label: str
    rmse: dict[str, float]
    nrmse: dict[str, float]
    r1: float
    r2: float
    trace_time: np.ndarray | None
    trace_observed: np.ndarray
    trace_predicted: np.ndarray

    def __post_init__(self) -> None:
        if self.label not in VARIANT_LABELS:
            raise ValueError(f"unknown variant label {self.label!r}; "
                             f"expected one of {VARIANT_LABELS}")


def evaluate_variant(model: Mlp, test, target_scaler, label: str,
                     layout: TargetLayout | None = None,
                     dt_minutes: float = 1.0,
                     features: np.ndarray | None = None) -> MetricsReport:
    """Full physical-unit evaluation of one model on the test block.

    ``test`` is a normalized SupervisedSet; ``features`` optionally replaces
    its feature matrix (the noise sweep passes perturbed inputs).  The trace
    fields carry the per-timestep observed and predicted horizontal-rate
    channel for downstream comparison files.
    """
    layout = layout or TargetLayout()
    x = test.features if features is None else np.asarray(features, dtype=float)
    pred_norm = model.predict(x)
    pred = target_scaler.inverse(pred_norm)
    obs = target_scaler.inverse(test.targets)

    names = layout.names_by_column()
    rmse_by, nrmse_by = {}, {}
    for col, name in enumerate(names):
        err = pred[:, col] - obs[:, col]
        rmse_by[name] = float(np.sqrt(np.mean(err ** 2)))
        nrmse_by[name] = nrmse(pred[:, col], obs[:, col])
    pred_blocks = [pred[s:e] for s, e in test.segments]
    r1, r2 = physics.pooled_residuals(pred_blocks, layout, dt_minutes)

    col = layout.dbh_dt
    return MetricsReport(label=label, rmse=rmse_by, nrmse=nrmse_by, r1=r1, r2=r2,
                         trace_time=test.timestamps,
                         trace_observed=obs[:, col].copy(),
                         trace_predicted=pred[:, col].copy())


@dataclass(frozen=True)
class NoiseSweepConfig:
    """Additive Gaussian input noise: per-feature sigma = level * feature std
    on the clean normalized test features, one fresh seeded draw per level."""

    levels: tuple[float, ...] = tuple(np.round(np.arange(0.0, 1.01, 0.1), 2))
    seed: int = 0

    def __post_init__(self) -> None:
        lv = tuple(float(x) for x in self.levels)
        if list(lv) != sorted(lv):
            raise ValueError("noise levels must be sorted ascending")
        if lv and not (0.0 <= lv[0] and lv[-1] <= 1.0):
            raise ValueError("noise levels must lie in [0, 1]")
        object.__setattr__(self, "levels", lv)


@dataclass
class NoiseSweepResult:
    label: str
    levels: np.ndarray
    nrmse: np.ndarray  # headline channel, per level


def noise_sweep(model: Mlp, test, target_scaler, cfg: NoiseSweepConfig,
                label: str, layout: TargetLayout | None = None,
                dt_minutes: float = 1.0) -> NoiseSweepResult:
    """Headline-channel NRMSE under increasing input noise.

    Level 0 evaluates the untouched features, so its row reproduces the
    clean evaluation exactly.
    """
    layout = layout or TargetLayout()
    x = np.asarray(test.features, dtype=float)
    feat_std = x.std(axis=0)
    scores = []
    for i, level in enumerate(cfg.levels):
        if level == 0.0:
            xi = x
        else:
            rng = np.random.default_rng(np.random.SeedSequence(
                entropy=cfg.seed, spawn_key=(i,)))
            xi = x + rng.standard_normal(x.shape) * (level * feat_std)
        report = evaluate_variant(model, test, target_scaler, label,
                                  layout, dt_minutes, features=xi)
        scores.append(report.nrmse[physics.TARGET_FIELDS[0]])
    return NoiseSweepResult(label=label, levels=np.asarray(cfg.levels),
                            nrmse=np.asarray(scores))


@dataclass
class Comparison:
    """Merged variant comparison, writable as three CSV tables."""

    reports: list[MetricsReport]
    sweeps: list[NoiseSweepResult] = field(default_factory=list)

    def write(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": out_dir / "metrics.csv",
                 "trace": out_dir / "trace_dbh_dt.csv"}
        names = list(self.reports[0].nrmse.keys())
        with open(paths["metrics"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant"] + [f"nrmse_{n}" for n in names]
                       + [f"rmse_{n}" for n in names] + ["r1", "r2"])
            for r in self.reports:
                w.writerow([r.label] + [repr(r.nrmse[n]) for n in names]
                           + [repr(r.rmse[n]) for n in names]
                           + [repr(r.r1), repr(r.r2)])
        with open(paths["trace"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "observed"] + [r.label for r in self.reports])
            base = self.reports[0]
            for i in range(base.trace_observed.size):
                stamp = (str(base.trace_time[i]) if base.trace_time is not None
                         else str(i))
                w.writerow([stamp, repr(float(base.trace_observed[i]))]
                           + [repr(float(r.trace_predicted[i])) for r in self.reports])
        if self.sweeps:
            paths["sweep"] = out_dir / "noise_sweep.csv"
            with open(paths["sweep"], "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["variant", "level", "nrmse"])
                for s in self.sweeps:
                    for level, score in zip(s.levels, s.nrmse):
                        w.writerow([s.label, repr(float(level)),
                                    repr(float(score))])
        return paths


def compare_variants(reports, sweeps=()) -> Comparison:
    """Merge per-variant reports (plus optional noise sweeps) for output.

    All reports must have been produced on the same test block: the observed
    traces are required to match exactly.
    """
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("comparison needs at least 2 variant reports")
    labels = [r.label for r in reports]
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate variant labels")
    base = reports[0]
    for r in reports[1:]:
        if (r.trace_observed.shape != base.trace_observed.shape
                or not np.array_equal(r.trace_observed, base.trace_observed)):
            raise ValueError(f"variant {r.label!r} was evaluated on a "
                             "different test set")
    return Comparison(reports=reports, sweeps=list(sweeps))
