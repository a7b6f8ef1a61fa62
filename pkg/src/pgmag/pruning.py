"""Sensitivity pruning of neurons or weights, with an optional
physics-constraint term in the ranking.

Both schemes rank elements by saliency and remove the lowest-scored
fraction, then fine-tune:

  standard        score = S                 (importance only)
  physics-guided  score = S + alpha * C     (importance + constraint violation)

S is the scoring-batch mean of |dL/d(element output)| where L is the same
loss the model was trained with; C is the analogous quantity for the
physics residual sum R1 + R2 alone (independent of the training-time
weighting).  For a neuron the element output is its post-activation; for a
weight the per-sample saliency is |input_activation * d(loss)/d(preact)|,
the magnitude of that sample's contribution to dL/dw.

Neuron pruning is structural (the incoming column, bias, and outgoing row
are deleted); weight pruning masks entries, and masks persist through
fine-tuning.  Output-layer neurons are never prunable.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import nn_core, physics
from .nn_core import Mlp, TrainConfig, forward, backward
from .physics import CompositeLossConfig

__all__ = [
    "ElementKind",
    "PruneScheme",
    "PruneError",
    "ScoreTable",
    "PruneConfig",
    "PruneReport",
    "importance_scores",
    "constraint_scores",
    "combined_scores",
    "select_prunable",
    "apply_prune",
    "fine_tune",
    "prune_pipeline",
]

SCORING_ROWS = 1024  # fixed scoring slice taken from the end of the train split


class ElementKind(Enum):
    NEURON = "neuron"
    WEIGHT = "weight"


class PruneScheme(Enum):
    STANDARD = "standard"
    PHYSICS_GUIDED = "physics_guided"


class PruneError(ValueError):
    pass


@dataclass
class ScoreTable:
    """Per-element scores; ids are (layer, j) for neurons and (layer, i, j)
    for weights, listed in ascending (layer, index) order so that stable
    sorting breaks ties deterministically."""

    kind: ElementKind
    ids: list[tuple[int, ...]]
    importance: np.ndarray
    violation: np.ndarray | None
    combined: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.ids)
        if self.importance.shape != (n,) or self.combined.shape != (n,):
            raise PruneError("score arrays must align with ids")
        if self.violation is not None and self.violation.shape != (n,):
            raise PruneError("violation scores must align with ids")
        for arr in (self.importance, self.combined):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise PruneError("scores must be finite and nonnegative")


@dataclass(frozen=True)
class PruneConfig:
    kind: ElementKind = ElementKind.NEURON
    ratio: float = 0.3
    alpha: float = 0.0
    fine_tune_epochs: int | None = None  # None: 20% of the original epochs
    scoring_rows: int = SCORING_ROWS

    def __post_init__(self) -> None:
        if not 0 <= self.ratio < 1:
            raise ValueError("pruning ratio must lie in [0, 1)")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.scoring_rows < 1:
            raise ValueError("scoring_rows must be >= 1")


@dataclass
class PruneReport:
    scheme: str
    kind: str
    ratio: float
    alpha: float | None
    total_elements: int
    pruned_count: int
    params_before: int
    params_after: int
    active_before: int
    active_after: int
    nrmse_before: float
    nrmse_after: float
    pruned_ids: list[tuple[int, ...]]
    scores: ScoreTable

    def to_json_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("scheme", "kind", "ratio", "alpha", "total_elements",
              "pruned_count", "params_before", "params_after",
              "active_before", "active_after", "nrmse_before", "nrmse_after")}
        d["pruned_ids"] = [list(i) for i in self.pruned_ids]
        d["score_snapshot"] = {
            "ids": [list(i) for i in self.scores.ids],
            "importance": self.scores.importance.tolist(),
            "violation": (None if self.scores.violation is None
                          else self.scores.violation.tolist()),
            "combined": self.scores.combined.tolist(),
        }
        return d

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), indent=2,
                                   sort_keys=True) + "\n")
        return path


def _score_table(model: Mlp, scoring, loss_cfg, kind: ElementKind,
                 physics_only: bool) -> ScoreTable:
    x = np.asarray(scoring.features, dtype=float)
    y = np.asarray(scoring.targets, dtype=float)
    if x.shape[0] == 0:
        raise PruneError("scoring batch is empty")
    traces = [forward(model, x[s:e]) for s, e in scoring.segments]
    preds = [t.outputs for t in traces]
    obs = [y[s:e] for s, e in scoring.segments]
    if physics_only:
        if loss_cfg is None:
            raise PruneError("constraint scores need a physics loss config")
        _, _, grad_blocks = physics.physics_loss_with_grad(preds, loss_cfg)
    elif loss_cfg is None:
        n_entries = x.shape[0] * y.shape[1]
        grad_blocks = [(p - o) * (2.0 / n_entries) for p, o in zip(preds, obs)]
    else:
        _, grad_blocks = physics.composite_loss_with_grad(preds, obs, loss_cfg)
    grads = [backward(model, t, g) for t, g in zip(traces, grad_blocks)]
    n_rows = x.shape[0]

    if kind is ElementKind.NEURON:
        ids, per_layer = [], []
        for l in range(model.n_layers - 1):  # output neurons are never scored
            acc = np.zeros(model.weights[l].shape[1])
            for g in grads:
                acc += np.abs(g.output_grads[l]).sum(axis=0)
            per_layer.append(acc / n_rows)
            ids.extend((l, j) for j in range(per_layer[-1].size))
        s = np.concatenate(per_layer)
        return ScoreTable(ElementKind.NEURON, ids, s, None, s)

    # Weight saliency: mean over samples of |h_in * dL/dz|, the magnitude of
    # each sample's contribution to dL/dw.  Masked entries are not elements.
    ids, flat = [], []
    for l in range(model.n_layers):
        acc = np.zeros_like(model.weights[l])
        for t, g in zip(traces, grads):
            h_in = t.inputs if l == 0 else t.post_activations[l - 1]
            acc += np.abs(h_in).T @ np.abs(g.preact_grads[l])
        s = acc / n_rows
        mask = (np.ones_like(s, dtype=bool) if model.weight_masks is None
                else model.weight_masks[l])
        keep_i, keep_j = np.nonzero(mask)
        ids.extend((l, int(i), int(j)) for i, j in zip(keep_i, keep_j))
        flat.append(s[mask])
    s = np.concatenate(flat)
    return ScoreTable(ElementKind.WEIGHT, ids, s, None, s)


def importance_scores(model: Mlp, scoring, loss_cfg: CompositeLossConfig | None,
                      kind: ElementKind) -> ScoreTable:
    """Batch-mean saliency of each prunable element under the training loss.

    ``scoring`` exposes features/targets/segments (a SupervisedSet slice).
    ``loss_cfg=None`` scores against the plain MSE, matching a model trained
    without the physics terms.
    """
    return _score_table(model, scoring, loss_cfg, kind, physics_only=False)


def constraint_scores(model: Mlp, scoring, loss_cfg: CompositeLossConfig,
                      kind: ElementKind) -> ScoreTable:
    """Saliency against the physics residual sum R1 + R2 alone.

    Independent of the training-time weighting: the residuals are
    differentiated without any lambda factor.
    """
    return _score_table(model, scoring, loss_cfg, kind, physics_only=True)


def combined_scores(importance: ScoreTable, violation: ScoreTable,
                    alpha: float) -> ScoreTable:
    """T = S + alpha * C over an identical element set."""
    if importance.ids != violation.ids or importance.kind is not violation.kind:
        raise PruneError("importance and violation tables cover different elements")
    t = importance.importance + alpha * violation.importance
    return ScoreTable(importance.kind, list(importance.ids),
                      importance.importance.copy(), violation.importance.copy(), t)


def select_prunable(table: ScoreTable, ratio: float) -> list[tuple[int, ...]]:
    """The floor(ratio * total) lowest-scored element ids.

    Ties resolve by ascending (layer, index) order: the table lists elements
    in that order and the argsort is stable.
    """
    if not 0 <= ratio < 1:
        raise PruneError("ratio must lie in [0, 1)")
    k = int(np.floor(ratio * len(table.ids)))
    order = np.argsort(table.combined, kind="stable")
    return [table.ids[i] for i in order[:k]]


def apply_prune(model: Mlp, ids, kind: ElementKind) -> Mlp:
    """Remove the given elements; returns a new model.

    Weight ids become mask zeros (the mask persists through later training);
    neuron ids are removed structurally, shrinking the adjacent weight
    matrices.  Refuses to empty a hidden layer or touch the output layer.
    """
    model = model.copy()
    ids = list(ids)
    if kind is ElementKind.WEIGHT:
        if model.weight_masks is None:
            model.weight_masks = [np.ones_like(w, dtype=bool) for w in model.weights]
        for ident in ids:
            l, i, j = ident
            if not 0 <= l < model.n_layers:
                raise PruneError(f"no such layer: {ident}")
            try:
                model.weight_masks[l][i, j] = False
            except IndexError:
                raise PruneError(f"no such weight: {ident}") from None
        model.enforce_masks()
        return model

    by_layer: dict[int, list[int]] = {}
    for ident in ids:
        l, j = ident
        if not 0 <= l < model.n_layers - 1:
            raise PruneError(f"neuron {ident} is not in a hidden layer")
        if not 0 <= j < model.weights[l].shape[1]:
            raise PruneError(f"no such neuron: {ident}")
        by_layer.setdefault(l, []).append(j)
    for l, js in by_layer.items():
        if len(set(js)) != len(js):
            raise PruneError("duplicate neuron ids")
        if len(js) >= model.weights[l].shape[1]:
            raise PruneError(f"pruning would empty hidden layer {l}")
    for l, js in by_layer.items():
        model.weights[l] = np.delete(model.weights[l], js, axis=1)
        model.biases[l] = np.delete(model.biases[l], js)
        model.weights[l + 1] = np.delete(model.weights[l + 1], js, axis=0)
        if model.weight_masks is not None:
            model.weight_masks[l] = np.delete(model.weight_masks[l], js, axis=1)
            model.weight_masks[l + 1] = np.delete(model.weight_masks[l + 1], js, axis=0)
    model._validate()
    return model


def fine_tune(model: Mlp, data, loss_cfg: CompositeLossConfig | None,
              cfg: TrainConfig, val_data=None):
    """Continue training a pruned model with its original loss.

    Masks are conserved by the optimizer steps; with ``cfg.epochs == 0`` the
    model is returned unchanged.
    """
    return nn_core.train(model, data, loss_cfg, cfg, val_data=val_data)


def _scoring_slice(data, rows: int):
    n = data.n_rows
    return data.slice(max(0, n - rows), n)


def prune_pipeline(model: Mlp, bundle, prune_cfg: PruneConfig,
                   scheme: PruneScheme, loss_cfg: CompositeLossConfig | None,
                   train_cfg: TrainConfig) -> tuple[Mlp, PruneReport]:
    """Score, select, prune, fine-tune; returns the pruned model and report.

    ``bundle`` exposes normalized train/val sets, the target scaler, layout
    and cadence (a dataset DataBundle).  The physics-guided scheme requires
    a physics loss config; a model trained on plain MSE has no residual
    terms to differentiate.
    """
    from .evaluation import nrmse  # local import: evaluation depends on physics only

    if scheme is PruneScheme.PHYSICS_GUIDED and loss_cfg is None:
        raise PruneError("physics-guided pruning requires a physics loss config")
    scoring = _scoring_slice(bundle.train, prune_cfg.scoring_rows)

    def _val_nrmse(m: Mlp) -> float:
        pred = m.predict(bundle.val.features)
        col = bundle.layout.dbh_dt
        pred_phys = bundle.target_scaler.inverse(pred)[:, col]
        obs_phys = bundle.target_scaler.inverse(bundle.val.targets)[:, col]
        return nrmse(pred_phys, obs_phys)

    importance = importance_scores(model, scoring, loss_cfg, prune_cfg.kind)
    if scheme is PruneScheme.PHYSICS_GUIDED:
        violation = constraint_scores(model, scoring, loss_cfg, prune_cfg.kind)
        table = combined_scores(importance, violation, prune_cfg.alpha)
    else:
        table = importance
    ids = select_prunable(table, prune_cfg.ratio)

    nrmse_before = _val_nrmse(model)
    params_before = model.parameter_count()
    active_before = model.active_parameter_count()

    pruned = apply_prune(model, ids, prune_cfg.kind)
    ft_epochs = prune_cfg.fine_tune_epochs
    if ft_epochs is None:
        ft_epochs = max(1, train_cfg.epochs // 5)
    ft_cfg = TrainConfig(learning_rate=train_cfg.learning_rate,
                         epochs=ft_epochs, batch_size=train_cfg.batch_size,
                         seed=train_cfg.seed, optimizer=train_cfg.optimizer)
    pruned, _ = fine_tune(pruned, bundle.train, loss_cfg, ft_cfg,
                          val_data=bundle.val)

    report = PruneReport(
        scheme=scheme.value, kind=prune_cfg.kind.value, ratio=prune_cfg.ratio,
        alpha=prune_cfg.alpha if scheme is PruneScheme.PHYSICS_GUIDED else None,
        total_elements=len(table.ids), pruned_count=len(ids),
        params_before=params_before, params_after=pruned.parameter_count(),
        active_before=active_before, active_after=pruned.active_parameter_count(),
        nrmse_before=nrmse_before, nrmse_after=_val_nrmse(pruned),
        pruned_ids=ids, scores=table)
    return pruned, report
