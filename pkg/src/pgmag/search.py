"""Grid search over the loss weighting (lambda) and the pruning balance
factor (alpha), scored by validation NRMSE on the horizontal-rate channel.

Every candidate runs with identical seeds, so the search tables are
bit-reproducible and candidate runs are independent of one another.  A
candidate whose training diverges is excluded with a warning rather than
aborting the search.  Ties resolve toward the smaller parameter value.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core
from .evaluation import nrmse
from .nn_core import Mlp, TrainConfig, TrainingDivergenceError
from .physics import TARGET_FIELDS
from .pruning import PruneConfig, PruneScheme, prune_pipeline

__all__ = ["GridSpec", "SearchResult", "SearchError",
           "grid_search_lambda", "grid_search_alpha", "default_grid"]


class SearchError(RuntimeError):
    pass


def default_grid(parameter: str) -> "GridSpec":
    """26 evenly spaced candidates on [0, 1] (step 0.04)."""
    return GridSpec(parameter, tuple(np.round(np.linspace(0.0, 1.0, 26), 2)))


@dataclass(frozen=True)
class GridSpec:
    parameter: str              # "lambda" | "alpha"
    values: tuple[float, ...]   # sorted ascending, within [0, 1]
    folds: int = 1

    def __post_init__(self) -> None:
        if self.parameter not in ("lambda", "alpha"):
            raise ValueError(f"unknown search parameter {self.parameter!r}")
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("candidate grid is empty")
        if list(vals) != sorted(vals):
            raise ValueError("candidate values must be sorted ascending")
        if vals[0] < 0 or vals[-1] > 1:
            raise ValueError("candidate values must lie in [0, 1]")
        if self.folds != 1:
            raise ValueError("only a single chronological validation fold is "
                             "supported; shuffled cross-validation folds would "
                             "break the time ordering")
        object.__setattr__(self, "values", vals)


@dataclass
class SearchResult:
    parameter: str
    values: np.ndarray
    scores: np.ndarray                       # NaN marks an excluded candidate
    per_target: dict[str, np.ndarray]
    best_value: float
    best_score: float

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            names = list(self.per_target.keys())
            w.writerow([self.parameter, "score"] + [f"nrmse_{n}" for n in names])
            for i, v in enumerate(self.values):
                w.writerow([repr(float(v)), repr(float(self.scores[i]))]
                           + [repr(float(self.per_target[n][i])) for n in names])
        return path


def _finish(parameter: str, values, scores, per_target) -> SearchResult:
    scores = np.asarray(scores, dtype=float)
    if np.all(np.isnan(scores)):
        raise SearchError("every candidate diverged; nothing to select")
    best_i = int(np.nanargmin(scores))  # first minimum == smallest value on ties
    return SearchResult(parameter=parameter, values=np.asarray(values, dtype=float),
                        scores=scores,
                        per_target={k: np.asarray(v) for k, v in per_target.items()},
                        best_value=float(values[best_i]),
                        best_score=float(scores[best_i]))


def _val_scores(model: Mlp, bundle) -> dict[str, float]:
    pred = bundle.target_scaler.inverse(model.predict(bundle.val.features))
    obs = bundle.target_scaler.inverse(bundle.val.targets)
    names = bundle.layout.names_by_column()
    return {name: nrmse(pred[:, col], obs[:, col])
            for col, name in enumerate(names)}


def grid_search_lambda(bundle, hidden_dims, grid: GridSpec,
                       train_cfg: TrainConfig,
                       physical_units: bool = True) -> SearchResult:
    """Train one physics-guided model per candidate weighting; pick the
    weighting whose validation NRMSE on the horizontal-rate channel is
    lowest.

    Initialization and shuffling seeds are identical across candidates, so a
    candidate of 0 reproduces the unregularized model exactly.
    """
    if grid.parameter != "lambda":
        raise SearchError("grid_search_lambda needs a lambda grid")
    dims = [bundle.train.features.shape[1], *hidden_dims,
            bundle.train.targets.shape[1]]
    scores, per_target = [], {name: [] for name in TARGET_FIELDS}
    for lam in grid.values:
        model = Mlp.initialize(dims, seed=train_cfg.seed)
        loss_cfg = bundle.loss_config(lam, physical_units=physical_units)
        try:
            trained, _ = nn_core.train(model, bundle.train, loss_cfg, train_cfg,
                                       val_data=bundle.val)
        except TrainingDivergenceError as exc:
            warnings.warn(f"lambda={lam} diverged and was excluded: {exc}")
            scores.append(np.nan)
            for name in TARGET_FIELDS:
                per_target[name].append(np.nan)
            continue
        by_target = _val_scores(trained, bundle)
        scores.append(by_target["dbh_dt"])
        for name in TARGET_FIELDS:
            per_target[name].append(by_target[name])
    return _finish("lambda", grid.values, scores, per_target)


def grid_search_alpha(model: Mlp, bundle, grid: GridSpec,
                      prune_cfg: PruneConfig, loss_cfg,
                      train_cfg: TrainConfig) -> SearchResult:
    """Run the physics-guided pruning pipeline once per candidate balance
    factor and pick the one with the lowest post-fine-tune validation NRMSE.

    Run separately per element kind (``prune_cfg.kind``); the model must
    have been trained with the physics loss (``loss_cfg`` is required).
    """
    if grid.parameter != "alpha":
        raise SearchError("grid_search_alpha needs an alpha grid")
    if loss_cfg is None:
        raise SearchError("alpha search applies to physics-guided models only")
    scores, per_target = [], {name: [] for name in TARGET_FIELDS}
    for alpha in grid.values:
        cfg = PruneConfig(kind=prune_cfg.kind, ratio=prune_cfg.ratio,
                          alpha=float(alpha),
                          fine_tune_epochs=prune_cfg.fine_tune_epochs,
                          scoring_rows=prune_cfg.scoring_rows)
        try:
            pruned, _ = prune_pipeline(model, bundle, cfg,
                                       PruneScheme.PHYSICS_GUIDED,
                                       loss_cfg, train_cfg)
        except TrainingDivergenceError as exc:
            warnings.warn(f"alpha={alpha} diverged and was excluded: {exc}")
            scores.append(np.nan)
            for name in TARGET_FIELDS:
                per_target[name].append(np.nan)
            continue
        by_target = _val_scores(pruned, bundle)
        scores.append(by_target["dbh_dt"])
        for name in TARGET_FIELDS:
            per_target[name].append(by_target[name])
    return _finish("alpha", grid.values, scores, per_target)
