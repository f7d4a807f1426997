"""Synthetic multiscale ensembles: fine-resolution "weather truth" plus
statistically biased coarse "climate model" members.

Fields combine a linear warming trend, seasonal and diurnal cycles and
spatially correlated noise with a power-law spectrum. Four variables mimic
(temperature, wind speed, humidity, pressure) roles via a fixed cross-variable
correlation; wind and humidity are clipped at zero. Member biases are
time-stationary (mean offset, variance inflation, spectral tilt, correlation
shrinkage) except for a seasonal phase shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import (
    DAYS_PER_YEAR,
    HOURS_PER_DAY,
    STEPS_PER_DAY,
    DownsampleSpec,
    GridField,
    coarsen,
)

VAR_NAMES = ("temperature", "wind_speed", "humidity", "pressure")

# pairwise correlation of the latent noise across the four variables
VAR_CORR = np.array([
    [1.0, 0.5, 0.6, -0.4],
    [0.5, 1.0, 0.3, -0.2],
    [0.6, 0.3, 1.0, -0.3],
    [-0.4, -0.2, -0.3, 1.0],
])

# per-variable phase offsets (fraction of a cycle) for the seasonal/diurnal terms
SEASON_PHASE = np.array([0.0, 0.2, 0.05, 0.5])
DIURNAL_PHASE = np.array([0.0, 0.25, 0.6, 0.35])

_CLIP_AT_ZERO = (1, 2)  # wind speed, humidity

_FINE_STREAM = 0
_MEMBER_STREAM = 1


@dataclass
class BiasSpec:
    """Stationary statistical bias applied to coarse ensemble members."""

    mean_offset: float = 0.0       # in normalized units (sigma of the noise)
    var_scale: float = 1.0         # multiplies noise variance
    spectral_tilt: float = 0.0     # added to the spectral slope
    season_phase_days: float = 0.0
    corr_shrink: float = 0.0       # blends the variable correlation toward identity

    def __post_init__(self):
        if self.var_scale <= 0:
            raise ValueError("var_scale must be positive")
        if not 0.0 <= self.corr_shrink <= 1.0:
            raise ValueError("corr_shrink must lie in [0, 1]")


@dataclass
class SynthConfig:
    nx: int = 16
    ny: int = 16
    steps_per_day: int = STEPS_PER_DAY
    n_days: int = 2 * DAYS_PER_YEAR
    n_members: int = 2
    spectral_slope: float = 2.0
    seasonal_amp: float = 1.0
    diurnal_amp: float = 0.3
    trend_per_year: float = 0.0
    noise_amp: float = 1.0
    noise_ar1: float = 0.0   # step-to-step noise persistence (weather memory)
    bias: BiasSpec = field(default_factory=BiasSpec)
    rng_seed: int = 0
    spatial_factor: int = 4
    var_bases: tuple = (288.0, 5.0, 0.008, 101325.0)
    var_scales: tuple = (3.0, 1.5, 0.002, 300.0)

    def __post_init__(self):
        if min(self.seasonal_amp, self.diurnal_amp, self.noise_amp) < 0:
            raise ValueError("amplitudes must be non-negative")
        if not 0.0 <= self.noise_ar1 < 1.0:
            raise ValueError("noise_ar1 must lie in [0, 1)")
        if self.nx % self.spatial_factor or self.ny % self.spatial_factor:
            raise ValueError("fine grid must be divisible by the spatial factor")
        if HOURS_PER_DAY % self.steps_per_day:
            raise ValueError("steps_per_day must divide 24")

    @property
    def dt_hours(self):
        return HOURS_PER_DAY // self.steps_per_day

    @property
    def n_steps(self):
        return self.n_days * self.steps_per_day

    @property
    def downsample(self):
        return DownsampleSpec(self.spatial_factor, self.steps_per_day)

    def grid_coords(self):
        lon = np.linspace(0.0, 24.0, self.nx, endpoint=False)
        lat = np.linspace(25.0, 49.0, self.ny, endpoint=False) + 24.0 / (2 * self.ny)
        return lon, lat


@dataclass
class SynthPair:
    fine_truth: GridField
    coarse_biased: list
    coarse_truth: GridField


def _spectral_filter(nx, ny, slope):
    """rfft2 filter with power spectrum ~ k^(-slope), unit pixel variance."""
    kx = np.fft.fftfreq(nx) * nx
    ky = np.fft.rfftfreq(ny) * ny
    k = np.sqrt(kx[:, None] ** 2 + ky[None, :] ** 2)
    with np.errstate(divide="ignore"):
        h = np.where(k > 0, k ** (-slope / 2.0), 0.0)
    # unit-variance normalization accounting for the real-FFT symmetry weights
    weights = np.full_like(h, 2.0)
    weights[:, 0] = 1.0
    if ny % 2 == 0:
        weights[:, -1] = 1.0
    power = (weights * h ** 2).sum() / (nx * ny)
    return h / np.sqrt(power) if power > 0 else h


def _correlated_noise(rng, n_steps, nx, ny, slope, corr_chol, ar1=0.0,
                      chunk_steps=2048):
    """[T, nx, ny, 4] noise: power-law spatial spectrum, cross-variable mixing,
    optional AR(1) persistence in time (stationary unit variance)."""
    h = _spectral_filter(nx, ny, slope)
    out = np.empty((n_steps, nx, ny, len(corr_chol)))
    for lo in range(0, n_steps, chunk_steps):
        hi = min(lo + chunk_steps, n_steps)
        white = rng.standard_normal((hi - lo, len(corr_chol), nx, ny))
        filtered = np.fft.irfft2(np.fft.rfft2(white) * h, s=(nx, ny))
        out[lo:hi] = np.einsum("vw,twxy->txyv", corr_chol, filtered)
    if ar1 > 0.0:
        innov = np.sqrt(1.0 - ar1 ** 2)
        for t in range(1, n_steps):
            out[t] = ar1 * out[t - 1] + innov * out[t]
    return out


def _structured_signal(cfg: SynthConfig, season_phase_days=0.0):
    """Trend + seasonal + diurnal component, [T, V] in normalized units."""
    hours = np.arange(cfg.n_steps, dtype=np.float64) * cfg.dt_hours
    years = hours / (HOURS_PER_DAY * DAYS_PER_YEAR)
    doy = (hours / HOURS_PER_DAY + season_phase_days) / DAYS_PER_YEAR
    hod = hours / HOURS_PER_DAY
    trend = cfg.trend_per_year * years
    # cosine phase: orthogonal to the linear trend over complete cycles
    seasonal = cfg.seasonal_amp * np.cos(2 * np.pi * (doy[:, None] + SEASON_PHASE[None, :]))
    diurnal = cfg.diurnal_amp * np.cos(2 * np.pi * (hod[:, None] + DIURNAL_PHASE[None, :]))
    return trend[:, None] + seasonal + diurnal


def _assemble(cfg: SynthConfig, structured, noise, mean_offset=0.0):
    z = structured[:, None, None, :] + noise + mean_offset
    bases = np.asarray(cfg.var_bases)
    scales = np.asarray(cfg.var_scales)
    data = bases + scales * z
    for v in _CLIP_AT_ZERO:
        np.maximum(data[..., v], 0.0, out=data[..., v])
    return data


def _member_corr_chol(shrink):
    corr = (1.0 - shrink) * VAR_CORR + shrink * np.eye(len(VAR_CORR))
    return np.linalg.cholesky(corr)


def gen_fine_ensemble(cfg: SynthConfig) -> GridField:
    """Fine-resolution truth series; deterministic given cfg.rng_seed."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.rng_seed, _FINE_STREAM)))
    noise = cfg.noise_amp * _correlated_noise(
        rng, cfg.n_steps, cfg.nx, cfg.ny, cfg.spectral_slope,
        np.linalg.cholesky(VAR_CORR), ar1=cfg.noise_ar1)
    data = _assemble(cfg, _structured_signal(cfg), noise)
    lon, lat = cfg.grid_coords()
    return GridField(data, 0, cfg.dt_hours, lon, lat, VAR_NAMES, member_id="truth")


def gen_biased_coarse_ensemble(cfg: SynthConfig, fine: GridField) -> list:
    """Independent biased coarse members covering the same calendar as `fine`.

    Members are freshly sampled (no pairing with the truth); the truth field is
    used only for calendar alignment.
    """
    members = []
    bias = cfg.bias
    chol = _member_corr_chol(bias.corr_shrink)
    structured = _structured_signal(cfg, season_phase_days=bias.season_phase_days)
    for idx in range(cfg.n_members):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.rng_seed, _MEMBER_STREAM, idx)))
        noise = cfg.noise_amp * np.sqrt(bias.var_scale) * _correlated_noise(
            rng, cfg.n_steps, cfg.nx, cfg.ny, cfg.spectral_slope + bias.spectral_tilt,
            chol, ar1=cfg.noise_ar1)
        data = _assemble(cfg, structured, noise, mean_offset=bias.mean_offset)
        lon, lat = cfg.grid_coords()
        member_fine = GridField(data, fine.time0, cfg.dt_hours, lon, lat, VAR_NAMES,
                                member_id=f"m{idx:03d}")
        members.append(coarsen(member_fine, cfg.downsample))
    return members


def make_synth_pair(cfg: SynthConfig) -> SynthPair:
    fine = gen_fine_ensemble(cfg)
    return SynthPair(
        fine_truth=fine,
        coarse_biased=gen_biased_coarse_ensemble(cfg, fine),
        coarse_truth=coarsen(fine, cfg.downsample),
    )
