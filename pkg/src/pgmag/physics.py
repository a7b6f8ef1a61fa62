"""Solar wind-magnetosphere coupling relations and the physics-regularized loss.

The composite training objective is

    total = L_data + lam * (R1 + R2),        0 <= lam <= 1

where L_data is the mean squared error pooled over all targets, R1 penalizes
disagreement between the predicted rate of change of the horizontal ground
field and the finite-differenced predicted north/east components, and R2
penalizes departures of the predicted reconnection rate from the coupling
function evaluated on the predicted solar wind state.

Two residual conventions coexist here, deliberately:

* the reporting operations :func:`residual_r1` / :func:`residual_r2` return
  the mean absolute violation in the units of their inputs, which is the
  interpretable diagnostic quoted in evaluation reports;
* the loss terms inside :func:`composite_loss` are means of *squared*,
  nondimensionalized violations.  A mean-absolute penalty has a
  constant-magnitude subgradient, so near the consistent manifold it keeps
  pushing with undiminished force and destroys the data fit for any
  weighting; squaring makes the penalty anneal as violations shrink, like
  the data term it is balanced against.

Both conventions vanish exactly on physics-consistent predictions.  All
gradients are analytic, with the subgradient of |x|-type kinks taken to be
0 at the kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "TargetLayout",
    "CompositeLossConfig",
    "LossBreakdown",
    "TARGET_FIELDS",
    "clock_angle",
    "newell_coupling",
    "coupling_magnitude",
    "residual_r1",
    "residual_r2",
    "pooled_residuals",
    "l_data",
    "composite_loss",
    "composite_loss_grad",
    "composite_loss_with_grad",
    "physics_loss_with_grad",
]

#: Target column names, in default layout order.
TARGET_FIELDS = ("dbh_dt", "b_n", "b_e", "dphi_dt", "v", "bz_imf", "theta")


@dataclass(frozen=True)
class TargetLayout:
    """Column indices of the seven regression targets.

    dbh_dt   rate of change of the horizontal ground field magnitude (nT/min)
    b_n      northward ground field component (nT)
    b_e      eastward ground field component (nT)
    dphi_dt  magnetopause reconnection-rate estimate (coupling units)
    v        solar wind flow speed (km/s)
    bz_imf   north-south IMF component, GSM (nT)
    theta    IMF clock angle (radians)
    """

    dbh_dt: int = 0
    b_n: int = 1
    b_e: int = 2
    dphi_dt: int = 3
    v: int = 4
    bz_imf: int = 5
    theta: int = 6

    def __post_init__(self) -> None:
        if sorted(self.indices()) != list(range(7)):
            raise ValueError("target layout must assign distinct indices covering 0..6")

    def indices(self) -> tuple[int, ...]:
        return (self.dbh_dt, self.b_n, self.b_e, self.dphi_dt,
                self.v, self.bz_imf, self.theta)

    def names_by_column(self) -> tuple[str, ...]:
        """Target field names ordered by column index."""
        out = [""] * 7
        for name, idx in zip(TARGET_FIELDS, self.indices()):
            out[idx] = name
        return tuple(out)


@dataclass(frozen=True)
class CompositeLossConfig:
    """Weighting and column bindings for the physics-regularized loss.

    ``lam`` balances the data and physics terms.  ``target_scale`` and
    ``target_offset`` (both length 7, indexed by target column) lift
    normalized predictions back to physical units before the residuals are
    evaluated: physical = prediction * scale + offset.  When they are None
    the residuals are computed on the predictions as given.

    ``r1_scale`` and ``r2_scale`` are characteristic physical magnitudes
    (the squared range of the rate channel and the range of the coupling
    channel, when built from a fitted scaler) that nondimensionalize each
    violation before it is squared and averaged.  Without them the
    physical-unit residuals sit orders of magnitude above the normalized
    data term and no weighting in [0, 1] can balance the two; dividing by a
    positive constant leaves the zero set of each residual unchanged.
    """

    lam: float
    layout: TargetLayout = field(default_factory=TargetLayout)
    dt_minutes: float = 1.0
    target_scale: np.ndarray | None = None
    target_offset: np.ndarray | None = None
    r1_scale: float = 1.0
    r2_scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.dt_minutes <= 0:
            raise ValueError("dt_minutes must be positive")
        if self.r1_scale <= 0 or self.r2_scale <= 0:
            raise ValueError("residual scales must be positive")
        if (self.target_scale is None) != (self.target_offset is None):
            raise ValueError("target_scale and target_offset must be given together")
        if self.target_scale is not None:
            scale = np.asarray(self.target_scale, dtype=float)
            offset = np.asarray(self.target_offset, dtype=float)
            if scale.shape != (7,) or offset.shape != (7,):
                raise ValueError("target_scale/target_offset must have shape (7,)")
            object.__setattr__(self, "target_scale", scale)
            object.__setattr__(self, "target_offset", offset)


@dataclass(frozen=True)
class LossBreakdown:
    """Components of one composite-loss evaluation: total = l_data + lam*(r1+r2)."""

    l_data: float
    r1: float
    r2: float
    total: float


def clock_angle(b_y, b_z):
    """IMF clock angle: tilt of (B_Y, B_Z) measured from the +Z (north) axis.

    Uses the two-argument arctangent, so the result covers the full
    (-pi, pi] range and B_Z = 0 needs no special casing.  The degenerate
    origin B_Y = B_Z = 0 maps to 0 by convention.
    """
    return np.arctan2(b_y, b_z)


def coupling_magnitude(v, b_z, theta):
    """|V|^(4/3) * |B_Z|^(2/3) * |sin(theta/2)|^(8/3).

    Real-valued continuation of the coupling function: the fractional powers
    are taken on magnitudes, which coincides with the plain expression for
    northward-positive B_Z conventions and keeps the function defined for
    southward IMF and for arbitrary model-predicted values.
    """
    v = np.asarray(v, dtype=float)
    b_z = np.asarray(b_z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return (np.abs(v) ** (4.0 / 3.0)
            * np.abs(b_z) ** (2.0 / 3.0)
            * np.abs(np.sin(theta / 2.0)) ** (8.0 / 3.0))


def newell_coupling(v, b_z, theta):
    """Magnetopause reconnection-rate estimate for solar wind speed V >= 0.

    Maximal for fixed V, B_Z when the IMF points due south (theta = pi);
    zero for due-north IMF or vanishing wind speed.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("solar wind speed must be nonnegative")
    return coupling_magnitude(v, b_z, theta)


def residual_r1(pred_window, layout: TargetLayout | None = None,
                dt_minutes: float = 1.0) -> float:
    """Horizontal-field consistency violation on one contiguous window.

    For each consecutive prediction pair (t, t+1) the north/east rates are
    formed by forward difference over ``dt_minutes`` and compared against the
    squared direct prediction of dbh_dt at t+1; the result is the mean
    absolute violation over the pairs.
    """
    layout = layout or TargetLayout()
    window = np.asarray(pred_window, dtype=float)
    if window.ndim != 2:
        raise ValueError("prediction window must be 2-D")
    if window.shape[0] < 2:
        raise ValueError("contiguous window needs at least 2 rows")
    e = _r1_violations(window, layout, dt_minutes)
    return float(np.mean(np.abs(e)))


def residual_r2(pred_batch, layout: TargetLayout | None = None) -> float:
    """Coupling-function consistency violation, averaged over rows.

    Mean absolute difference between the predicted reconnection rate and the
    coupling magnitude of the predicted (V, B_Z, theta) triple.
    """
    layout = layout or TargetLayout()
    batch = np.asarray(pred_batch, dtype=float)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("prediction batch must be 2-D and nonempty")
    c = _r2_violations(batch, layout)
    return float(np.mean(np.abs(c)))


def l_data(pred, obs) -> float:
    """Mean squared error pooled over all rows and target columns.

    Averaging each target's MSE and then averaging across targets equals a
    single grand mean over the N x K entries, which is what is computed here.
    """
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    return float(np.mean((obs - pred) ** 2))


def composite_loss(pred_windows, obs_windows,
                   cfg: CompositeLossConfig) -> LossBreakdown:
    """Evaluate the composite loss on one or more contiguous prediction blocks.

    ``pred_windows``/``obs_windows`` are a single 2-D array or a sequence of
    2-D arrays; rows within a block are consecutive in time.  R1 pools pairs
    across blocks, R2 and the data term pool rows.
    """
    breakdown, _ = _loss_impl(pred_windows, obs_windows, cfg, want_grad=False)
    return breakdown


def composite_loss_grad(pred_windows, obs_windows, cfg: CompositeLossConfig):
    """Gradient of the composite total with respect to every prediction entry.

    Returns the same structure as ``pred_windows`` (array in, array out;
    sequence in, list out).
    """
    _, grads = _loss_impl(pred_windows, obs_windows, cfg, want_grad=True)
    if isinstance(pred_windows, np.ndarray):
        return grads[0]
    return grads


def composite_loss_with_grad(pred_windows, obs_windows, cfg: CompositeLossConfig):
    """Loss breakdown and gradient in one pass (shared by the training loop)."""
    breakdown, grads = _loss_impl(pred_windows, obs_windows, cfg, want_grad=True)
    if isinstance(pred_windows, np.ndarray):
        return breakdown, grads[0]
    return breakdown, grads


def physics_loss_with_grad(pred_windows, cfg: CompositeLossConfig):
    """The physics penalty R1 + R2 (squared, nondimensionalized) and its
    gradient, without the data term and without lam.

    Used by constraint-violation scoring, which differentiates the physics
    terms alone regardless of the training-time weighting.
    """
    blocks = _as_blocks(pred_windows)
    phys, scale = _lift(blocks, cfg)
    r1, r1_grads = _r1_pooled(phys, cfg, want_grad=True)
    r2, r2_grads = _r2_pooled(phys, cfg, want_grad=True)
    grads = []
    for g1, g2 in zip(r1_grads, r2_grads):
        g = g1 + g2
        if scale is not None:
            g = g * scale
        grads.append(g)
    if isinstance(pred_windows, np.ndarray):
        return float(r1), float(r2), grads[0]
    return float(r1), float(r2), grads


def pooled_residuals(pred_windows, layout: TargetLayout | None = None,
                     dt_minutes: float = 1.0) -> tuple[float, float]:
    """Mean-absolute R1 and R2 pooled over a collection of contiguous blocks.

    Reporting convention (same as :func:`residual_r1` / :func:`residual_r2`):
    absolute violations in input units, pairs and rows pooled across blocks.
    """
    layout = layout or TargetLayout()
    blocks = _as_blocks(pred_windows)
    pairs = [_r1_violations(b, layout, dt_minutes)
             for b in blocks if b.shape[0] >= 2]
    r1 = float(np.mean(np.abs(np.concatenate(pairs)))) if pairs else 0.0
    rows = [_r2_violations(b, layout) for b in blocks if b.shape[0]]
    r2 = float(np.mean(np.abs(np.concatenate(rows)))) if rows else 0.0
    return r1, r2


# ---------------------------------------------------------------------------
# internals

def _as_blocks(x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray):
        if x.ndim != 2:
            raise ValueError("prediction block must be 2-D")
        return [x.astype(float, copy=False)]
    blocks = [np.asarray(b, dtype=float) for b in x]
    if not blocks:
        raise ValueError("need at least one prediction block")
    for b in blocks:
        if b.ndim != 2:
            raise ValueError("every prediction block must be 2-D")
    return blocks


def _lift(blocks: list[np.ndarray], cfg: CompositeLossConfig):
    """Map prediction-scale blocks to physical units; returns (blocks, scale)."""
    if cfg.target_scale is None:
        return blocks, None
    lifted = [b * cfg.target_scale + cfg.target_offset for b in blocks]
    return lifted, cfg.target_scale


def _r1_violations(window: np.ndarray, layout: TargetLayout, dt: float) -> np.ndarray:
    d_n = np.diff(window[:, layout.b_n]) / dt
    d_e = np.diff(window[:, layout.b_e]) / dt
    h = window[1:, layout.dbh_dt]
    return h ** 2 - d_n ** 2 - d_e ** 2


def _r1_pooled(blocks: list[np.ndarray], cfg: CompositeLossConfig,
               want_grad: bool):
    """Mean squared nondimensional violation over all consecutive pairs
    pooled across blocks: mean((e / r1_scale)^2).

    Blocks with fewer than 2 rows contribute no pairs.  With no pairs at all
    the penalty is 0 and the gradient vanishes.
    """
    layout, dt = cfg.layout, cfg.dt_minutes
    n_pairs = sum(max(b.shape[0] - 1, 0) for b in blocks)
    grads = [np.zeros_like(b) for b in blocks] if want_grad else None
    if n_pairs == 0:
        return 0.0, grads
    acc = 0.0
    for bi, b in enumerate(blocks):
        if b.shape[0] < 2:
            continue
        e = _r1_violations(b, layout, dt) / cfg.r1_scale
        acc += float(np.sum(e ** 2))
        if want_grad:
            # d(e^2)/de = 2e, chained through e = (h^2 - dn^2 - de^2)/r1_scale
            w = 2.0 * e / (n_pairs * cfg.r1_scale)
            g = grads[bi]
            h = b[1:, layout.dbh_dt]
            g[1:, layout.dbh_dt] += w * 2.0 * h
            for col in (layout.b_n, layout.b_e):
                d = np.diff(b[:, col]) / dt
                pair = 2.0 * w * d / dt
                g[:-1, col] += pair
                g[1:, col] -= pair
    return acc / n_pairs, grads


def _r2_violations(batch: np.ndarray, layout: TargetLayout) -> np.ndarray:
    return batch[:, layout.dphi_dt] - coupling_magnitude(
        batch[:, layout.v], batch[:, layout.bz_imf], batch[:, layout.theta])


def _r2_pooled(blocks: list[np.ndarray], cfg: CompositeLossConfig,
               want_grad: bool):
    """Mean squared nondimensional violation over rows pooled across blocks:
    mean((c / r2_scale)^2)."""
    layout = cfg.layout
    n_rows = sum(b.shape[0] for b in blocks)
    grads = [np.zeros_like(b) for b in blocks] if want_grad else None
    if n_rows == 0:
        return 0.0, grads
    acc = 0.0
    for bi, b in enumerate(blocks):
        if b.shape[0] == 0:
            continue
        c = _r2_violations(b, layout) / cfg.r2_scale
        acc += float(np.sum(c ** 2))
        if want_grad:
            w = 2.0 * c / (n_rows * cfg.r2_scale)
            v = b[:, layout.v]
            bz = b[:, layout.bz_imf]
            theta = b[:, layout.theta]
            av = np.abs(v)
            abz = np.abs(bz)
            sin_half = np.sin(theta / 2.0)
            q = np.abs(sin_half) ** (8.0 / 3.0)
            v43 = av ** (4.0 / 3.0)
            bz23 = abz ** (2.0 / 3.0)
            dmag_dv = (4.0 / 3.0) * np.sign(v) * av ** (1.0 / 3.0) * bz23 * q
            # |bz|^(2/3) has a singular kink at 0; the subgradient there is 0.
            with np.errstate(divide="ignore", invalid="ignore"):
                dmag_dbz = np.where(
                    abz == 0.0, 0.0,
                    v43 * (2.0 / 3.0) * np.sign(bz) / np.cbrt(abz) * q)
            dmag_dtheta = (v43 * bz23 * (4.0 / 3.0)
                           * np.abs(sin_half) ** (5.0 / 3.0) * np.sign(sin_half)
                           * np.cos(theta / 2.0))
            g = grads[bi]
            g[:, layout.dphi_dt] += w
            g[:, layout.v] -= w * dmag_dv
            g[:, layout.bz_imf] -= w * dmag_dbz
            g[:, layout.theta] -= w * dmag_dtheta
    return acc / n_rows, grads


def _loss_impl(pred_windows, obs_windows, cfg: CompositeLossConfig,
               want_grad: bool):
    pred_blocks = _as_blocks(pred_windows)
    obs_blocks = _as_blocks(obs_windows)
    if len(pred_blocks) != len(obs_blocks):
        raise ValueError("prediction and observation block counts differ")
    for p, o in zip(pred_blocks, obs_blocks):
        if p.shape != o.shape:
            raise ValueError(f"block shape mismatch: {p.shape} vs {o.shape}")
    n_rows = sum(p.shape[0] for p in pred_blocks)
    if n_rows == 0:
        raise ValueError("loss needs at least one row")
    k = pred_blocks[0].shape[1]
    n_entries = n_rows * k

    sq_sum = 0.0
    for p, o in zip(pred_blocks, obs_blocks):
        sq_sum += float(np.sum((o - p) ** 2))
    ld = sq_sum / n_entries

    grads = None
    if want_grad:
        grads = [(p - o) * (2.0 / n_entries) for p, o in zip(pred_blocks, obs_blocks)]

    has_physics_columns = k > max(cfg.layout.indices())
    if cfg.lam == 0.0:
        # Physics terms are reported for diagnostics but contribute neither
        # to the total (exactly: ld + 0.0*(r1+r2) == ld) nor to the gradient.
        r1 = r2 = 0.0
        if has_physics_columns:
            phys, _ = _lift(pred_blocks, cfg)
            r1, _ = _r1_pooled(phys, cfg, want_grad=False)
            r2, _ = _r2_pooled(phys, cfg, want_grad=False)
        return LossBreakdown(ld, float(r1), float(r2), ld), grads
    if not has_physics_columns:
        raise ValueError(
            f"physics residuals need {max(cfg.layout.indices()) + 1} target "
            f"columns, got {k}")

    phys, scale = _lift(pred_blocks, cfg)
    r1, r1_grads = _r1_pooled(phys, cfg, want_grad)
    r2, r2_grads = _r2_pooled(phys, cfg, want_grad)
    total = ld + cfg.lam * (r1 + r2)
    if want_grad:
        for i in range(len(grads)):
            g_phys = r1_grads[i] + r2_grads[i]
            if scale is not None:
                g_phys = g_phys * scale
            grads[i] = grads[i] + cfg.lam * g_phys
    return LossBreakdown(ld, float(r1), float(r2), float(total)), grads
