"""Dense feed-forward regressor with explicit forward/backward passes.

The backward pass retains the loss gradient with respect to every hidden
post-activation and pre-activation, which the pruning schemes consume as
saliency signals.  Weight masks (set by weight pruning) are conserved by
construction: masked weights receive zero gradient, stay exactly 0 through
optimizer updates, and keep zero optimizer moments.

All arithmetic is float64.  Training is deterministic for a fixed seed,
config, and dataset.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import physics
from .physics import CompositeLossConfig, LossBreakdown

__all__ = [
    "LayerSpec",
    "Mlp",
    "ForwardTrace",
    "Gradients",
    "AdamState",
    "TrainConfig",
    "EpochRecord",
    "TrainingLog",
    "TrainingDivergenceError",
    "forward",
    "mse_loss",
    "mse_loss_grad",
    "backward",
    "sgd_step",
    "adam_step",
    "train",
]

DEFAULT_HIDDEN = (30, 30, 30)


class TrainingDivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        msg = f"non-finite loss at epoch {epoch}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str  # "relu" | "identity"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp:
    """Multilayer perceptron: weights[l] has shape (in_dim, out_dim).

    ``weight_masks`` is None until weight pruning creates it; afterwards it
    is a per-layer boolean array where False marks a pruned (permanently
    zero) weight.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 activations: Sequence[str],
                 weight_masks: Sequence[np.ndarray] | None = None):
        self.weights = [np.ascontiguousarray(w, dtype=float) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=float) for b in biases]
        self.activations = list(activations)
        if weight_masks is None:
            self.weight_masks = None
        else:
            self.weight_masks = [np.ascontiguousarray(m, dtype=bool)
                                 for m in weight_masks]
        self._validate()

    def _validate(self) -> None:
        n = len(self.weights)
        if not (len(self.biases) == len(self.activations) == n) or n == 0:
            raise ValueError("weights, biases, activations must align and be nonempty")
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            LayerSpec(w.shape[0], w.shape[1], a)
            if b.shape != (w.shape[1],):
                raise ValueError(f"bias shape mismatch in layer {i}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer dims do not chain at layer {i}")
        if self.weight_masks is not None:
            if len(self.weight_masks) != n:
                raise ValueError("one mask per weight matrix required")
            for w, m in zip(self.weights, self.weight_masks):
                if m.shape != w.shape:
                    raise ValueError("mask shape must match weights")

    @classmethod
    def initialize(cls, dims: Sequence[int], seed: int,
                   hidden_activation: str = "relu") -> "Mlp":
        """He-style uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); zero biases.

        The output layer is linear (identity activation): the regression
        targets are unbounded.
        """
        dims = list(dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        rng = np.random.default_rng(seed)
        weights, biases, acts = [], [], []
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(dims[i], dims[i + 1])))
            biases.append(np.zeros(dims[i + 1]))
            acts.append(hidden_activation if i < len(dims) - 2 else "identity")
        return cls(weights, biases, acts)

    @property
    def layers(self) -> list[LayerSpec]:
        return [LayerSpec(w.shape[0], w.shape[1], a)
                for w, a in zip(self.weights, self.activations)]

    def dims(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights],
                   [b.copy() for b in self.biases],
                   list(self.activations),
                   None if self.weight_masks is None
                   else [m.copy() for m in self.weight_masks])

    def parameter_count(self) -> int:
        """Stored parameters: all weight entries plus biases."""
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def active_parameter_count(self) -> int:
        """Parameters not nulled by a mask."""
        if self.weight_masks is None:
            return self.parameter_count()
        return (sum(int(m.sum()) for m in self.weight_masks)
                + sum(b.size for b in self.biases))

    def enforce_masks(self) -> None:
        if self.weight_masks is not None:
            for w, m in zip(self.weights, self.weight_masks):
                w[~m] = 0.0

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return forward(self, batch).outputs


@dataclass
class ForwardTrace:
    """Per-layer intermediates of one forward pass over a batch."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]   # Z_l = H_{l-1} @ W_l + b_l
    post_activations: list[np.ndarray]  # H_l = act(Z_l); H_last = outputs

    @property
    def outputs(self) -> np.ndarray:
        return self.post_activations[-1]


@dataclass
class Gradients:
    """Reverse-mode gradients of a scalar loss.

    ``output_grads[l]`` is dL/dH_l (per sample, per neuron) and
    ``preact_grads[l]`` is dL/dZ_l; both are retained for every layer so the
    pruning schemes can form per-element saliencies.
    """

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    output_grads: list[np.ndarray]
    preact_grads: list[np.ndarray]


@dataclass
class AdamState:
    """First/second-moment accumulators, one per parameter array."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stable: float = 1e-8

    @classmethod
    def for_model(cls, model: Mlp) -> "AdamState":
        return cls(m_w=[np.zeros_like(w) for w in model.weights],
                   v_w=[np.zeros_like(w) for w in model.weights],
                   m_b=[np.zeros_like(b) for b in model.biases],
                   v_b=[np.zeros_like(b) for b in model.biases])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 45
    batch_size: int = 64
    seed: int = 0
    loss_threshold: float | None = None
    optimizer: str = "adam"  # or "sgd"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown | None


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for r in self.records:
            row = {"epoch": r.epoch,
                   "train_l_data": r.train.l_data, "train_r1": r.train.r1,
                   "train_r2": r.train.r2, "train_total": r.train.total}
            if r.val is not None:
                row.update({"val_l_data": r.val.l_data, "val_r1": r.val.r1,
                            "val_r2": r.val.r2, "val_total": r.val.total})
            out.append(row)
        return out


def forward(model: Mlp, batch: np.ndarray) -> ForwardTrace:
    """Forward pass; batch rows are samples, columns are input features."""
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[0]:
        raise ValueError(
            f"batch must be 2-D with {model.weights[0].shape[0]} columns, "
            f"got shape {x.shape}")
    pre, post = [], []
    h = x
    for w, b, act in zip(model.weights, model.biases, model.activations):
        z = h @ w + b
        h = np.maximum(z, 0.0) if act == "relu" else z
        pre.append(z)
        post.append(h)
    return ForwardTrace(inputs=x, pre_activations=pre, post_activations=post)


def mse_loss(predicted: np.ndarray, observed: np.ndarray) -> float:
    """Mean squared error over all entries."""
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if predicted.shape != observed.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {observed.shape}")
    return float(np.mean((observed - predicted) ** 2))


def mse_loss_grad(predicted: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """d(mse)/d(predicted), entrywise: 2 (pred - obs) / n_entries."""
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if predicted.shape != observed.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {observed.shape}")
    return (predicted - observed) * (2.0 / predicted.size)


def backward(model: Mlp, trace: ForwardTrace,
             loss_grad_wrt_outputs: np.ndarray) -> Gradients:
    """Exact reverse-mode gradients for weights, biases, and neuron outputs.

    The ReLU subgradient at 0 is taken to be 0.  Masked weights receive zero
    gradient so optimizer steps cannot resurrect them.
    """
    g_out = np.asarray(loss_grad_wrt_outputs, dtype=float)
    if g_out.shape != trace.outputs.shape:
        raise ValueError(
            f"upstream gradient shape {g_out.shape} != outputs {trace.outputs.shape}")
    n = model.n_layers
    weight_grads: list[np.ndarray | None] = [None] * n
    bias_grads: list[np.ndarray | None] = [None] * n
    output_grads: list[np.ndarray | None] = [None] * n
    preact_grads: list[np.ndarray | None] = [None] * n

    d_h = g_out
    for l in range(n - 1, -1, -1):
        output_grads[l] = d_h
        if model.activations[l] == "relu":
            d_z = d_h * (trace.pre_activations[l] > 0.0)
        else:
            d_z = d_h
        preact_grads[l] = d_z
        h_in = trace.inputs if l == 0 else trace.post_activations[l - 1]
        dw = h_in.T @ d_z
        if model.weight_masks is not None:
            dw[~model.weight_masks[l]] = 0.0
        weight_grads[l] = dw
        bias_grads[l] = d_z.sum(axis=0)
        if l > 0:
            d_h = d_z @ model.weights[l].T
    return Gradients(weight_grads, bias_grads, output_grads, preact_grads)


def sgd_step(model: Mlp, grads: Gradients, learning_rate: float) -> Mlp:
    """Plain gradient-descent update, in place: w <- w - lr * dL/dw."""
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    for l in range(model.n_layers):
        model.weights[l] -= learning_rate * grads.weight_grads[l]
        model.biases[l] -= learning_rate * grads.bias_grads[l]
    model.enforce_masks()
    return model


def adam_step(model: Mlp, grads: Gradients, state: AdamState,
              learning_rate: float) -> tuple[Mlp, AdamState]:
    """Bias-corrected Adam update, in place on both model and state."""
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for l in range(model.n_layers):
        for p, g, m, v in ((model.weights[l], grads.weight_grads[l],
                            state.m_w[l], state.v_w[l]),
                           (model.biases[l], grads.bias_grads[l],
                            state.m_b[l], state.v_b[l])):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_stable)
    if model.weight_masks is not None:
        for l, mask in enumerate(model.weight_masks):
            model.weights[l][~mask] = 0.0
            state.m_w[l][~mask] = 0.0
            state.v_w[l][~mask] = 0.0
    return model, state


def _contiguous_windows(segments: Sequence[tuple[int, int]],
                        batch_size: int) -> list[tuple[int, int]]:
    """Chop each contiguous segment into consecutive windows of batch_size rows."""
    windows = []
    for start, stop in segments:
        s = start
        while s < stop:
            windows.append((s, min(s + batch_size, stop)))
            s += batch_size
    return windows


def _evaluate(model: Mlp, x: np.ndarray, y: np.ndarray,
              segments: Sequence[tuple[int, int]],
              loss_cfg: CompositeLossConfig | None) -> LossBreakdown:
    preds = [forward(model, x[s:e]).outputs for s, e in segments]
    obs = [y[s:e] for s, e in segments]
    if loss_cfg is None:
        p = np.concatenate(preds) if len(preds) > 1 else preds[0]
        o = np.concatenate(obs) if len(obs) > 1 else obs[0]
        m = mse_loss(p, o)
        return LossBreakdown(m, 0.0, 0.0, m)
    return physics.composite_loss(preds, obs, loss_cfg)


def train(model: Mlp, data, loss_cfg: CompositeLossConfig | None,
          cfg: TrainConfig, val_data=None) -> tuple[Mlp, TrainingLog]:
    """Minibatch training on contiguous time windows.

    ``data`` (and optional ``val_data``) must expose ``features``,
    ``targets`` and ``segments`` (half-open row ranges of contiguous time).
    Minibatches are contiguous windows so the finite differences inside the
    physics residual are well defined; window order is shuffled per epoch
    from ``cfg.seed``.  ``loss_cfg=None`` trains on the plain MSE.

    The input model is not mutated; a trained copy is returned together with
    a per-epoch log of train/validation loss components.
    """
    x = np.asarray(data.features, dtype=float)
    y = np.asarray(data.targets, dtype=float)
    segments = list(data.segments)
    if x.shape[0] == 0:
        raise ValueError("training data is empty")
    if loss_cfg is not None and loss_cfg.lam > 0 and cfg.batch_size < 2:
        raise ValueError("physics residual needs batch_size >= 2 "
                         "(finite differences use consecutive rows)")

    model = model.copy()
    log = TrainingLog()
    if cfg.epochs == 0:
        return model, log

    windows = _contiguous_windows(segments, cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_model(model) if cfg.optimizer == "adam" else None

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        for wi in order:
            s, e = windows[wi]
            trace = forward(model, x[s:e])
            if loss_cfg is None:
                total = mse_loss(trace.outputs, y[s:e])
                g_out = mse_loss_grad(trace.outputs, y[s:e])
            else:
                bd, g_out = physics.composite_loss_with_grad(
                    trace.outputs, y[s:e], loss_cfg)
                total = bd.total
            if not np.isfinite(total):
                raise TrainingDivergenceError(epoch)
            grads = backward(model, trace, g_out)
            if cfg.optimizer == "adam":
                adam_step(model, grads, state, cfg.learning_rate)
            else:
                sgd_step(model, grads, cfg.learning_rate)

        train_bd = _evaluate(model, x, y, segments, loss_cfg)
        val_bd = None
        if val_data is not None:
            val_bd = _evaluate(model, np.asarray(val_data.features, dtype=float),
                               np.asarray(val_data.targets, dtype=float),
                               list(val_data.segments), loss_cfg)
        if not np.isfinite(train_bd.total):
            raise TrainingDivergenceError(epoch, "epoch-end evaluation")
        log.records.append(EpochRecord(epoch, train_bd, val_bd))
        if cfg.loss_threshold is not None and train_bd.total <= cfg.loss_threshold:
            break
    return model, log
