"""Derived physical variables, distributional metrics and compound-event
statistics used to compare downscaled ensembles against reference data.

All distribution metrics compare a set of predicted samples against a set of
reference samples per pixel and average over pixels; sample counts on the two
sides may differ.
"""

from __future__ import annotations

import warnings

import numpy as np

# barotropic surface-pressure constants
LAPSE_RATE = 0.0065        # K/m
MOLAR_MASS_AIR = 0.02896   # kg/mol
GRAVITY = 9.8              # m/s^2
GAS_CONSTANT = 8.31447     # J/mol/K

# heat-index advisory thresholds (Kelvin): caution, extreme caution, danger,
# extreme danger
HEAT_ADVISORY_LEVELS = {
    "caution": 300.0,
    "extreme_caution": 305.0,
    "danger": 312.6,
    "extreme_danger": 325.0,
}


# ---------------------------------------------------------------------------
# Derived variables
# ---------------------------------------------------------------------------

def surface_pressure(p0, t, z_s):
    """Pressure at surface height z_s (m) from sea-level pressure p0 (Pa), barotropic."""
    t = np.asarray(t, dtype=np.float64)
    if (t <= 0).any():
        raise ValueError("temperature must be positive (Kelvin)")
    exponent = GRAVITY * MOLAR_MASS_AIR / (GAS_CONSTANT * LAPSE_RATE)
    return p0 * (1.0 - LAPSE_RATE * z_s / (t + LAPSE_RATE * z_s)) ** exponent


def saturation_vapor_pressure(t):
    """August-Roche-Magnus saturation vapor pressure in hPa; t in Kelvin."""
    t = np.asarray(t, dtype=np.float64)
    return 6.112 * np.exp(17.67 * (t - 273.15) / (t - 29.65))


def relative_humidity(q, t, p, clip=False):
    """Relative humidity (percent) from specific humidity q (kg/kg), t (K), p (Pa).

    The saturation pressure constant is in hPa, so p is converted to hPa
    before forming the vapor pressure. The raw ratio is returned; pass
    clip=True to cap at 100 for reporting.
    """
    q = np.asarray(q, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if (q < 0).any() or (q >= 1).any():
        raise ValueError("specific humidity must lie in [0, 1)")
    if (t <= 29.65).any():
        raise ValueError("temperature out of range for the Magnus formula")
    p_hpa = np.asarray(p, dtype=np.float64) / 100.0
    e = q * p_hpa / (0.622 + 0.378 * q)
    rh = e / saturation_vapor_pressure(t) * 100.0
    return np.minimum(rh, 100.0) if clip else rh


def heat_index(t, rh):
    """NOAA heat index; t in Kelvin, rh in percent. Fahrenheit internally.

    The regression with its two adjustment terms is evaluated first; where the
    result falls below 80 F the simple formula replaces it.
    """
    t = np.asarray(t, dtype=np.float64)
    rh = np.asarray(rh, dtype=np.float64)
    if (rh < 0).any() or (rh > 100).any():
        raise ValueError("relative humidity must lie in [0, 100]")
    tf = (t - 273.15) * 1.8 + 32.0
    hi = (-42.379 + 2.04901523 * tf + 10.14333127 * rh
          - 0.22475541 * tf * rh - 0.00683787 * tf ** 2 - 0.05481717 * rh ** 2
          + 0.00122874 * tf ** 2 * rh + 0.00085282 * tf * rh ** 2
          - 0.00000199 * tf ** 2 * rh ** 2)
    low_rh = (rh < 13.0) & (tf > 80.0) & (tf < 112.0)
    hi = np.where(low_rh,
                  hi - (13.0 - rh) / 4.0 * np.sqrt(np.maximum(17.0 - np.abs(tf - 95.0), 0.0)
                                                   / 17.0),
                  hi)
    high_rh = (rh > 85.0) & (tf > 80.0) & (tf < 87.0)
    hi = np.where(high_rh, hi + (rh - 85.0) * (87.0 - tf) / 50.0, hi)
    simple = 0.5 * (tf + 61.0 + (tf - 68.0) * 1.2 + 0.094 * rh)
    hi = np.where(hi < 80.0, simple, hi)
    return (hi - 32.0) / 1.8 + 273.15


def heat_advisory_exceedance(hi, level="danger"):
    """Fraction of samples whose heat index exceeds an advisory threshold."""
    return (np.asarray(hi) > HEAT_ADVISORY_LEVELS[level]).mean(axis=0)


# ---------------------------------------------------------------------------
# Pointwise distribution metrics
# ---------------------------------------------------------------------------

def _flatten_samples(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None]
    return x.reshape(x.shape[0], -1)


def mab(pred, ref):
    """Mean absolute difference between per-pixel sample means."""
    p = _flatten_samples(pred)
    r = _flatten_samples(ref)
    if p.size == 0 or r.size == 0:
        raise ValueError("empty sample set")
    return float(np.abs(p.mean(axis=0) - r.mean(axis=0)).mean())


def _w1_single(a, b):
    """1-D Wasserstein distance via the CDF-difference integral on the union support."""
    grid = np.sort(np.concatenate([a, b]))
    cdf_a = np.searchsorted(np.sort(a), grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(np.sort(b), grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * np.diff(grid)))


def wasserstein1(pred, ref):
    """Per-pixel 1-D Wasserstein-1 distance, averaged over pixels."""
    p = _flatten_samples(pred)
    r = _flatten_samples(ref)
    if p.shape[0] == 0 or r.shape[0] == 0:
        raise ValueError("empty sample set")
    if p.shape[1] != r.shape[1]:
        raise ValueError("pred and ref must share the pixel grid")
    return float(np.mean([_w1_single(p[:, d], r[:, d]) for d in range(p.shape[1])]))


def percentile_mae(pred, ref, p):
    """Absolute difference of the p-th percentile (linear interpolation), pixel mean."""
    if not 0.0 < p < 100.0:
        raise ValueError("percentile must lie in (0, 100)")
    a = _flatten_samples(pred)
    b = _flatten_samples(ref)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    return float(np.abs(np.percentile(a, p, axis=0) - np.percentile(b, p, axis=0)).mean())


# ---------------------------------------------------------------------------
# Correlation diagnostics
# ---------------------------------------------------------------------------

def correlation_matrix(series_map, center, box):
    """Pearson correlation of the centre pixel's series with each neighbor.

    series_map: [T, NX, NY]; box: half-width of the neighborhood. Neighbors
    with zero variance yield NaN entries. The centre entry is exactly one by
    definition.
    """
    t, nx, ny = series_map.shape
    if t < 3:
        raise ValueError("need at least 3 time samples")
    ci, cj = center
    if not (box <= ci < nx - box and box <= cj < ny - box):
        raise ValueError("neighborhood box exceeds the grid")
    c = series_map[:, ci, cj]
    c_anom = c - c.mean()
    c_norm = np.sqrt((c_anom ** 2).sum())
    size = 2 * box + 1
    out = np.full((size, size), np.nan)
    for di in range(-box, box + 1):
        for dj in range(-box, box + 1):
            if di == 0 and dj == 0:
                out[box, box] = 1.0
                continue
            n = series_map[:, ci + di, cj + dj]
            n_anom = n - n.mean()
            n_norm = np.sqrt((n_anom ** 2).sum())
            if c_norm == 0.0 or n_norm == 0.0:
                continue
            out[box + di, box + dj] = float((c_anom * n_anom).sum() / (c_norm * n_norm))
    return out


def spatial_corr_error(pred_map, ref_map, center, box):
    """Frobenius norm of the correlation-matrix difference around one location.

    Entries undefined on either side (zero-variance series) are excluded and
    reported through a warning.
    """
    p = correlation_matrix(pred_map, center, box)
    r = correlation_matrix(ref_map, center, box)
    valid = np.isfinite(p) & np.isfinite(r)
    excluded = int((~valid).sum())
    if excluded:
        warnings.warn(f"spatial_corr_error: {excluded} zero-variance entries excluded",
                      stacklevel=2)
    return float(np.sqrt(((p[valid] - r[valid]) ** 2).sum()))


def temporal_psd(series, t_phys):
    """Periodogram |X(f_k)|^2 / T over positive frequencies, mean removed."""
    series = np.asarray(series, dtype=np.float64)
    x = series - series.mean(axis=-1, keepdims=True)
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2 / t_phys
    return spec[..., 1:]


def temporal_psd_error(pred, ref, t_phys, floor=1e-30):
    """Mean |log ratio| between member-averaged periodograms.

    pred, ref: [members, T] ensembles of equal series length.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if pred.shape[-1] != ref.shape[-1]:
        raise ValueError("series lengths must match")
    p = np.maximum(temporal_psd(pred, t_phys).mean(axis=0), floor)
    r = np.maximum(temporal_psd(ref, t_phys).mean(axis=0), floor)
    return float(np.abs(np.log(p) - np.log(r)).mean())


# ---------------------------------------------------------------------------
# Compound events
# ---------------------------------------------------------------------------

def heat_streak_prob(tmax, clim_mean, h, delta):
    """Probability of a day belonging to an h-day span of exceedances.

    tmax: [N] daily maxima; clim_mean: scalar or [N] climatological baseline.
    Counts unique days inside any window of h consecutive days all exceeding
    clim_mean + delta.
    """
    tmax = np.asarray(tmax, dtype=np.float64)
    n = tmax.shape[0]
    if h < 1 or n < h:
        return 0.0
    exceed = tmax > np.asarray(clim_mean) + delta
    window_full = np.convolve(exceed.astype(np.int64), np.ones(h, dtype=np.int64),
                              mode="valid") == h
    member = np.zeros(n, dtype=bool)
    for k in range(h):
        member[k: k + window_full.size] |= window_full
    return float(member.sum() / n)
