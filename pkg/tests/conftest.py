"""Shared test fixtures and the finite-difference gradient harness."""

from __future__ import annotations

import numpy as np
import pytest

from pgmag import nn_core, physics
from pgmag.nn_core import Mlp, forward
from pgmag.physics import CompositeLossConfig


def make_contiguous_case(dims, seed, n_rows=14, lam=0.36):
    """Random small network plus a contiguous batch, nudged away from the
    kinks of the physics terms.

    The output biases of the coupling-related columns are offset so the
    predicted speed, IMF B_Z, and clock angle land in ranges where the
    fractional-power factors are smooth; the |x|^(2/3) cusp at B_Z = 0 in
    particular makes central differences unreliable in a ~1e-3 band.
    """
    rng = np.random.default_rng(seed)
    model = Mlp.initialize(dims, seed=int(rng.integers(2 ** 31)))
    layout = physics.TargetLayout()
    if dims[-1] == 7:
        model.biases[-1][layout.v] += 2.0
        model.biases[-1][layout.bz_imf] += 1.2
        model.biases[-1][layout.theta] += 0.9
        model.biases[-1][layout.dbh_dt] += 1.5
    x = rng.uniform(-1.0, 1.0, size=(n_rows, dims[0]))
    y = rng.uniform(-1.0, 1.0, size=(n_rows, dims[-1]))
    if dims[-1] == 7:
        y[:, layout.v] += 2.0
        y[:, layout.bz_imf] += 1.2
        y[:, layout.theta] += 0.9
    cfg = CompositeLossConfig(lam=lam) if dims[-1] == 7 else None
    return model, x, y, cfg


def loss_value(model, x, y, cfg):
    pred = forward(model, x).outputs
    if cfg is None:
        return nn_core.mse_loss(pred, y)
    return physics.composite_loss(pred, y, cfg).total


def analytic_param_grads(model, x, y, cfg):
    trace = forward(model, x)
    if cfg is None:
        g_out = nn_core.mse_loss_grad(trace.outputs, y)
    else:
        g_out = physics.composite_loss_grad(trace.outputs, y, cfg)
    return nn_core.backward(model, trace, g_out)


def max_param_grad_error(model, x, y, cfg, h=1e-6, rel_floor=1e-8):
    """Worst relative error between analytic and central-difference parameter
    gradients.

    Parameters whose two-sided difference is swamped by float cancellation
    (fewer than ~3 significant digits surviving in f(+h) - f(-h)) are
    skipped: there the comparison measures roundoff, not the gradient.
    Masked weights are skipped as well (their gradient is defined as 0).
    """
    grads = analytic_param_grads(model, x, y, cfg)
    base = abs(loss_value(model, x, y, cfg))
    cancel_floor = 1e3 * np.finfo(float).eps * max(base, 1.0)
    worst = 0.0
    checked = skipped = 0
    params = []
    for l in range(model.n_layers):
        params.append((model.weights[l], grads.weight_grads[l],
                       None if model.weight_masks is None else model.weight_masks[l]))
        params.append((model.biases[l], grads.bias_grads[l], None))
    for arr, g, mask in params:
        flat = arr.ravel()
        gflat = g.ravel()
        mflat = None if mask is None else mask.ravel()
        for i in range(flat.size):
            if mflat is not None and not mflat[i]:
                continue
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_value(model, x, y, cfg)
            flat[i] = orig - h
            f_minus = loss_value(model, x, y, cfg)
            flat[i] = orig
            if abs(f_plus - f_minus) < cancel_floor:
                skipped += 1
                continue
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), rel_floor)
            worst = max(worst, rel)
            checked += 1
    assert checked > 0, "every parameter was skipped as flat"
    return worst, checked, skipped


@pytest.fixture(scope="session")
def small_synth_bundle():
    """A small prepared dataset shared by training-level tests."""
    from pgmag import dataset, synth
    cfg = synth.SynthConfig(n_minutes=4000, seed=11)
    return dataset.prepare_supervised(synth.generate(cfg))
