"""Synthetic minute-cadence dataset generator with controllable physics
consistency.

Solar wind and IMF channels follow seeded Ornstein-Uhlenbeck processes; the
ground field components are driven by the coupling value of the generated
wind state, so the horizontal rate target derived one step later is (up to
injected noise) a function of the features visible one minute earlier:

    increment(t -> t+1) = gain * coupling(t - lag + 1) * (cos phi, sin phi)

With zero observation noise the derived targets satisfy the horizontal-rate
and coupling identities exactly (they are derived by those very relations),
and the rate magnitude is perfectly recoverable from the features, making
this a brute-force oracle for the physics residuals and a convenient test
bed where the regularizer provably has signal to exploit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .dataset import CHANNELS, RawSeries, default_schema, write_csv
from .physics import clock_angle, newell_coupling

__all__ = ["SynthConfig", "generate", "write_dataset"]


@dataclass(frozen=True)
class SynthConfig:
    """Process parameters for the generator.

    ``noise_sigma`` scales Gaussian observation noise on the solar wind and
    plasma channels (the satellite-side measurements) relative to each clean
    channel's standard deviation; ``ground_noise_sigma`` does the same for
    the ground magnetometer channels.  With both at 0 the derived targets
    are exactly consistent and fully determined by the features up to the
    small hidden direction wobble.  ``gap_fraction`` marks that fraction of
    interior cells as missing (first and last rows stay complete so
    interpolation needs no trimming).
    """

    n_minutes: int = 50_000
    seed: int = 0
    mean_speed: float = 420.0       # km/s
    speed_sigma: float = 55.0
    imf_sigma: float = 3.5          # nT, per IMF component
    imf_bz_mean: float = 2.0        # nT; northward bias keeps due-south rare
    mean_temp: float = 1.2e5        # K
    temp_sigma: float = 2.0e4
    mean_density: float = 5.0       # n/cm^3
    density_sigma: float = 1.2
    mean_pressure: float = 2.2      # nPa
    pressure_sigma: float = 0.5
    corr_minutes: float = 120.0     # OU autocorrelation time
    coupling_gain: float = 1.5e-3   # nT/min of ground increment per coupling unit
    coupling_lag: int = 1           # minutes between coupling and ground response
    direction_sigma: float = 0.0    # radians, hidden wobble on the increment direction
    direction_corr: float = 90.0
    ground_relax: float = 0.9       # pullback of ground components toward 0
    activity_drift: float = -0.5    # fractional ramp of wind speed / IMF amplitude
    burst_sigma: float = 0.8        # log-scale of storm bursts on the drive
    burst_corr: float = 45.0
    burst_visibility: float = 1.0   # exponent coupling bursts into the density channel
    noise_sigma: float = 0.0        # solar wind / plasma channels
    ground_noise_sigma: float = 0.0
    gap_fraction: float = 0.0
    start: str = "2013-01-01T00:00"

    def __post_init__(self) -> None:
        if self.n_minutes < 100:
            raise ValueError("n_minutes must be >= 100")
        if self.noise_sigma < 0 or self.ground_noise_sigma < 0 \
                or not 0 <= self.gap_fraction < 1:
            raise ValueError("noise sigmas must be >= 0 and gap_fraction in [0, 1)")
        if self.coupling_lag < 1:
            raise ValueError("coupling_lag must be >= 1")
        if self.corr_minutes <= 1 or self.direction_corr <= 1:
            raise ValueError("correlation lengths must exceed 1 minute")


def _ou(rng: np.random.Generator, n: int, mean: float, sigma: float,
        tau: float) -> np.ndarray:
    """Stationary AR(1) discretization of an Ornstein-Uhlenbeck process."""
    a = np.exp(-1.0 / tau)
    step = sigma * np.sqrt(1.0 - a * a)
    e = step * rng.standard_normal(n)
    e[0] = sigma * rng.standard_normal()
    dev = lfilter([1.0], [1.0, -a], e)
    return mean + dev


def generate(cfg: SynthConfig) -> RawSeries:
    """Generate a RawSeries; identical seeds give identical series.

    Gap injection and observation noise draw from independent child streams
    of the seed, so enabling them does not perturb the underlying process.
    """
    root = np.random.SeedSequence(cfg.seed)
    rng_proc, rng_noise, rng_gaps = (np.random.default_rng(s)
                                     for s in root.spawn(3))
    n = cfg.n_minutes

    # Solar activity ramps linearly across the span (a rising-cycle analog);
    # with a chronological split the late, more active regime lands in the
    # test block, so evaluation probes extrapolation beyond the training
    # input range.
    ramp = 1.0 + cfg.activity_drift * (np.arange(n) / max(n - 1, 1) - 0.5)
    v = _ou(rng_proc, n, cfg.mean_speed, cfg.speed_sigma, cfg.corr_minutes) \
        + cfg.mean_speed * (ramp - 1.0)
    bx = _ou(rng_proc, n, 0.0, cfg.imf_sigma, cfg.corr_minutes) * ramp
    by = _ou(rng_proc, n, 0.0, cfg.imf_sigma, cfg.corr_minutes) * ramp
    # Northward-biased B_Z with activity ramping the fluctuation only:
    # southward turnings (the strong-coupling state) are excursions, so the
    # clock angle rarely crosses the +/-pi wrap where a squared-error fit of
    # the angle is ill-posed.
    bz = (_ou(rng_proc, n, 0.0, cfg.imf_sigma, cfg.corr_minutes) * ramp
          + cfg.imf_bz_mean)
    temp = _ou(rng_proc, n, cfg.mean_temp, cfg.temp_sigma, cfg.corr_minutes)
    rho = _ou(rng_proc, n, cfg.mean_density, cfg.density_sigma, cfg.corr_minutes)
    p = _ou(rng_proc, n, cfg.mean_pressure, cfg.pressure_sigma, cfg.corr_minutes)
    bz_geo = _ou(rng_proc, n, 0.0, 12.0, cfg.corr_minutes)
    if np.any(v <= 0):
        raise ValueError("generated wind speed dipped below 0; "
                         "reduce speed_sigma/activity_drift or raise mean_speed")

    theta = clock_angle(by, bz)
    dphi = newell_coupling(v, bz, theta)

    # Ground components: increments driven by the (lagged) coupling value.
    # The increment direction follows the observable IMF clock angle plus a
    # small hidden wobble, so consecutive field levels are predictable from
    # the features and the consistency between the rate target and the level
    # differences carries real signal.  A weak pullback keeps the
    # perturbation bounded.
    phi = theta + _ou(rng_proc, n, 0.0, cfg.direction_sigma, cfg.direction_corr)
    drive = np.empty(n - 1)
    lag = cfg.coupling_lag
    drive[lag - 1:] = cfg.coupling_gain * dphi[:n - lag]
    drive[:lag - 1] = cfg.coupling_gain * dphi[0]
    if cfg.burst_sigma > 0:
        # Lognormal storm bursts modulate the drive.  They leak into the
        # density channel with exponent burst_visibility, so large rate
        # excursions are partly inferable from the plasma state (a storm
        # compression signature) and partly irreducible, which mirrors how
        # sparse and heavy-tailed the real perturbation signal is.
        burst = np.exp(_ou(rng_proc, n, 0.0, cfg.burst_sigma, cfg.burst_corr))
        drive = drive * burst[:-1]
        rho = rho * burst ** cfg.burst_visibility
    d_n = drive * np.cos(phi[:-1])
    d_e = drive * np.sin(phi[:-1])
    b_n = np.empty(n)
    b_e = np.empty(n)
    b_n[0] = b_e[0] = 0.0
    decay = 1.0 - cfg.ground_relax
    b_n[1:] = lfilter([1.0], [1.0, -decay], d_n, zi=[decay * b_n[0]])[0]
    b_e[1:] = lfilter([1.0], [1.0, -decay], d_e, zi=[decay * b_e[0]])[0]

    values = np.column_stack([b_n, b_e, bz_geo, bx, by, bz, temp, rho, v, p])
    assert list(CHANNELS) == ["b_n", "b_e", "bz_geo", "bx_imf", "by_imf",
                              "bz_imf", "temp", "rho", "v", "p"]

    if cfg.noise_sigma > 0 or cfg.ground_noise_sigma > 0:
        ground = np.array([ch in ("b_n", "b_e", "bz_geo") for ch in CHANNELS])
        level = np.where(ground, cfg.ground_noise_sigma, cfg.noise_sigma)
        scale = values.std(axis=0)
        values = values + (level * scale
                           * rng_noise.standard_normal(values.shape))

    gaps = np.zeros(values.shape, dtype=bool)
    if cfg.gap_fraction > 0:
        interior = rng_gaps.random(values.shape) < cfg.gap_fraction
        interior[0, :] = interior[-1, :] = False
        gaps = interior
        values = values.copy()
        values[gaps] = np.nan

    timestamps = (np.datetime64(cfg.start, "m")
                  + np.arange(n).astype("timedelta64[m]"))
    return RawSeries(timestamps, values, gaps)


def write_dataset(cfg: SynthConfig, csv_path, schema_path=None):
    """Generate and persist a dataset in the ingestible CSV format."""
    series = generate(cfg)
    schema = default_schema()
    write_csv(series, csv_path, schema)
    if schema_path is not None:
        from .dataset import write_schema
        write_schema(schema, schema_path)
    return series
