"""Gridded-field container, file I/O, climatology and the fixed resampling operators.

Fields are dense float64 arrays of shape [T, NX, NY, V] (time, longitude,
latitude, variable) with uniform integer-hour timestamps. The synthetic
calendar uses 360-day years and a bi-hourly base cadence (12 steps per day).
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HOURS_PER_DAY = 24
DAYS_PER_YEAR = 360
STEPS_PER_DAY = 12  # bi-hourly base cadence
FINE_DT_HOURS = HOURS_PER_DAY // STEPS_PER_DAY

STD_FLOOR = 1e-6

NPY_MAGIC = b"\x93NUMPY"


class GridFormatError(Exception):
    """Raised when an array file or its sidecar manifest is malformed."""


@dataclass
class GridField:
    """Dense [T, NX, NY, V] array with coordinate metadata."""

    data: np.ndarray
    time0: int            # hours since epoch of the first step
    dt_hours: int
    lon: np.ndarray       # [NX] degrees
    lat: np.ndarray       # [NY] degrees
    var_names: tuple
    member_id: str | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.var_names = tuple(self.var_names)
        if self.data.ndim != 4:
            raise ValueError(f"expected 4-axis [T, NX, NY, V] data, got shape {self.data.shape}")
        t, nx, ny, nv = self.data.shape
        if len(self.lon) != nx or len(self.lat) != ny or len(self.var_names) != nv:
            raise ValueError(
                f"coordinate lengths ({len(self.lon)}, {len(self.lat)}, {len(self.var_names)}) "
                f"do not match data shape {self.data.shape}"
            )
        if int(self.dt_hours) <= 0:
            raise ValueError("dt_hours must be a positive integer")
        self.time0 = int(self.time0)
        self.dt_hours = int(self.dt_hours)
        if not np.isfinite(self.data).all():
            raise ValueError("field data contains non-finite values")

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_times(self):
        return self.data.shape[0]

    @property
    def time_coords(self):
        return self.time0 + self.dt_hours * np.arange(self.n_times, dtype=np.int64)

    def with_data(self, data):
        return replace(self, data=data)

    def time_slice(self, start, stop):
        """Restrict to timestamps in [start, stop) hours."""
        times = self.time_coords
        mask = (times >= start) & (times < stop)
        idx = np.nonzero(mask)[0]
        if idx.size == 0:
            raise ValueError(f"time range [{start}, {stop}) selects no steps")
        return replace(self, data=self.data[idx], time0=int(times[idx[0]]))


def day_of_year(times):
    return (np.asarray(times) // HOURS_PER_DAY) % DAYS_PER_YEAR


def hour_of_day(times):
    return np.asarray(times) % HOURS_PER_DAY


@dataclass
class DownsampleSpec:
    """Fixed downsampling map: spatial block mean plus daily time mean."""

    spatial_factor: int = 4
    temporal_window: int = STEPS_PER_DAY

    def __post_init__(self):
        if self.spatial_factor < 1 or self.temporal_window < 1:
            raise ValueError("downsample factors must be >= 1")


@dataclass
class Climatology:
    """Per-(day-of-year bucket, time-of-day bucket) pixel mean/std tables.

    Groups never observed when fitting are marked invalid; looking one up
    raises, so out-of-season application fails loudly.
    """

    doy_buckets: int
    tod_buckets: int
    mean: np.ndarray  # [G, NX, NY, V] with G = doy_buckets * tod_buckets
    std: np.ndarray
    valid: np.ndarray | None = None  # [G] bool; None means fully populated

    @property
    def n_groups(self):
        return self.doy_buckets * self.tod_buckets

    def group_index(self, times):
        doy_b = (day_of_year(times) * self.doy_buckets) // DAYS_PER_YEAR
        tod_b = (hour_of_day(times) * self.tod_buckets) // HOURS_PER_DAY
        return doy_b * self.tod_buckets + tod_b

    def _checked_index(self, times):
        gid = self.group_index(times)
        if self.valid is not None and not self.valid[gid].all():
            missing = np.unique(np.asarray(gid)[~self.valid[gid]])
            raise ValueError(f"missing climatology group(s) {missing.tolist()}")
        return gid

    def lookup_mean(self, times):
        return self.mean[self._checked_index(times)]

    def lookup_std(self, times):
        return self.std[self._checked_index(times)]


@dataclass
class EnsembleStats:
    """Date-agnostic per-pixel mean/std of one source over the training period."""

    mean: np.ndarray  # [NX, NY, V]
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if not (self.std > 0).all():
            raise ValueError("std must be strictly positive")


# ---------------------------------------------------------------------------
# File I/O: NPY v1.0 payload + JSON sidecar manifest
# ---------------------------------------------------------------------------

def _sidecar_path(path):
    return Path(str(path) + ".json")


def write_array(fld: GridField, path) -> None:
    """Write the payload as little-endian float64 NPY v1.0 plus a JSON sidecar."""
    path = Path(path)
    data = np.ascontiguousarray(fld.data, dtype="<f8")
    if not np.isfinite(data).all():
        raise ValueError("refusing to write non-finite data")
    with open(path, "wb") as f:
        np.lib.format.write_array(f, data, version=(1, 0))
    manifest = {
        "time0": int(fld.time0),
        "dt_hours": int(fld.dt_hours),
        "lon": [float(v) for v in fld.lon],
        "lat": [float(v) for v in fld.lat],
        "var_names": list(fld.var_names),
        "member_id": fld.member_id,
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def read_array(path) -> GridField:
    """Read a field written by :func:`write_array`, validating the format."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(6)
        if magic != NPY_MAGIC:
            raise GridFormatError(f"{path}: bad magic bytes {magic!r}")
        version = f.read(2)
        if version != b"\x01\x00":
            raise GridFormatError(f"{path}: unsupported NPY version {version!r}")
        (hlen,) = struct.unpack("<H", f.read(2))
        try:
            header = ast.literal_eval(f.read(hlen).decode("latin1"))
        except (SyntaxError, ValueError) as exc:
            raise GridFormatError(f"{path}: unparseable NPY header") from exc
        if header.get("descr") != "<f8" or header.get("fortran_order"):
            raise GridFormatError(f"{path}: expected little-endian float64 C-order payload")
        shape = tuple(header.get("shape", ()))
        count = int(np.prod(shape)) if shape else 0
        data = np.fromfile(f, dtype="<f8", count=count)
        if data.size != count:
            raise GridFormatError(f"{path}: truncated payload")
        data = data.reshape(shape)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise GridFormatError(f"missing sidecar manifest {sidecar}")
    with open(sidecar, encoding="utf-8") as f:
        manifest = json.load(f)
    try:
        return GridField(
            data=data,
            time0=manifest["time0"],
            dt_hours=manifest["dt_hours"],
            lon=np.array(manifest["lon"], dtype=np.float64),
            lat=np.array(manifest["lat"], dtype=np.float64),
            var_names=tuple(manifest["var_names"]),
            member_id=manifest.get("member_id"),
        )
    except KeyError as exc:
        raise GridFormatError(f"{sidecar}: missing manifest key {exc}") from exc
    except ValueError as exc:
        raise GridFormatError(f"{path}: payload/manifest mismatch: {exc}") from exc


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def compute_climatology(fields, grouping, std_floor=STD_FLOOR) -> Climatology:
    """Grouped per-pixel sample mean and population std over one or more fields.

    Every observed group must receive at least two samples; groups outside the
    data's calendar coverage are marked invalid.
    """
    if isinstance(fields, GridField):
        fields = [fields]
    if not fields:
        raise ValueError("no fields given")
    doy_buckets, tod_buckets = grouping
    n_groups = doy_buckets * tod_buckets
    ref = fields[0]
    pix_shape = ref.data.shape[1:]
    counts = np.zeros(n_groups, dtype=np.int64)
    sums = np.zeros((n_groups,) + pix_shape)
    sqsums = np.zeros((n_groups,) + pix_shape)
    probe = Climatology(doy_buckets, tod_buckets,
                        np.zeros((n_groups,) + pix_shape), np.ones((n_groups,) + pix_shape))
    for fld in fields:
        if fld.data.shape[1:] != pix_shape:
            raise ValueError("all fields must share the same grid")
        gid = probe.group_index(fld.time_coords)
        counts += np.bincount(gid, minlength=n_groups)
        np.add.at(sums, gid, fld.data)
        np.add.at(sqsums, gid, fld.data ** 2)
    if (counts == 1).any():
        bad = int(np.nonzero(counts == 1)[0][0])
        raise ValueError(f"climatology group {bad} has a single sample (need >= 2)")
    valid = counts >= 2
    if not valid.any():
        raise ValueError("no climatology group received any samples")
    safe = np.maximum(counts, 1)[:, None, None, None]
    mean = sums / safe
    var = sqsums / safe - mean ** 2
    std = np.maximum(np.sqrt(np.maximum(var, 0.0)), std_floor)
    return Climatology(doy_buckets, tod_buckets, mean, std,
                       valid=None if valid.all() else valid)


def compute_ensemble_stats(fld: GridField, time_range=None, std_floor=STD_FLOOR) -> EnsembleStats:
    """Date-agnostic per-pixel mean/std; restricted to [start, stop) hours if given."""
    if time_range is not None:
        fld = fld.time_slice(*time_range)
    mean = fld.data.mean(axis=0)
    std = fld.data.std(axis=0)
    return EnsembleStats(mean=mean, std=np.maximum(std, std_floor))


def normalize(fld: GridField, stats: EnsembleStats) -> GridField:
    if fld.data.shape[1:] != stats.mean.shape:
        raise ValueError(f"stats shape {stats.mean.shape} does not match field {fld.data.shape}")
    return fld.with_data((fld.data - stats.mean) / stats.std)


def denormalize(fld: GridField, stats: EnsembleStats) -> GridField:
    if fld.data.shape[1:] != stats.mean.shape:
        raise ValueError(f"stats shape {stats.mean.shape} does not match field {fld.data.shape}")
    return fld.with_data(fld.data * stats.std + stats.mean)


# ---------------------------------------------------------------------------
# Resampling operators (array level)
# ---------------------------------------------------------------------------

def block_mean_space(data, factor):
    """Spatial block mean over factor x factor cells; data [T, NX, NY, V]."""
    if factor == 1:
        return data.copy()
    t, nx, ny, nv = data.shape
    if nx % factor or ny % factor:
        raise ValueError(f"grid {nx}x{ny} not divisible by spatial factor {factor}")
    return data.reshape(t, nx // factor, factor, ny // factor, factor, nv).mean(axis=(2, 4))


def window_mean_time(data, window):
    """Mean over consecutive windows of `window` steps; data [T, ...]."""
    if window == 1:
        return data.copy()
    t = data.shape[0]
    if t % window:
        raise ValueError(f"series length {t} not divisible by temporal window {window}")
    return data.reshape((t // window, window) + data.shape[1:]).mean(axis=1)


def _catmull_rom_matrix(n_coarse, factor):
    """[n_fine, n_coarse] interpolation matrix, Catmull-Rom with linear edge extrapolation.

    Rows sum to one (constants exact) and the kernel reproduces linear ramps
    exactly, including at the boundary via the extrapolated pad taps.
    """
    n_fine = n_coarse * factor
    if n_coarse == 1:
        return np.ones((n_fine, 1))
    w = np.zeros((n_fine, n_coarse + 4))  # 2-tap linear-extrapolation pad per side
    for i in range(n_fine):
        s = (i + 0.5) / factor - 0.5
        base = int(np.floor(s))
        p = s - base
        w0 = -0.5 * p**3 + p**2 - 0.5 * p
        w1 = 1.5 * p**3 - 2.5 * p**2 + 1.0
        w2 = -1.5 * p**3 + 2.0 * p**2 + 0.5 * p
        w3 = 0.5 * p**3 - 0.5 * p**2
        w[i, base + 1: base + 5] = (w0, w1, w2, w3)
    # Fold the pad taps back: pad[-k] = p0 - k (p1 - p0), pad[n-1+k] = p[n-1] + k (p[n-1] - p[n-2])
    mat = w[:, 2: 2 + n_coarse].copy()
    mat[:, 0] += 2.0 * w[:, 1] + 3.0 * w[:, 0]
    mat[:, 1] += -1.0 * w[:, 1] - 2.0 * w[:, 0]
    mat[:, -1] += 2.0 * w[:, n_coarse + 2] + 3.0 * w[:, n_coarse + 3]
    mat[:, -2] += -1.0 * w[:, n_coarse + 2] - 2.0 * w[:, n_coarse + 3]
    return mat


def cubic_upsample_space(data, factor):
    """Separable bicubic (Catmull-Rom) upsampling by `factor`; data [T, NX, NY, V]."""
    if factor == 1:
        return data.copy()
    _, nx, ny, _ = data.shape
    wx = _catmull_rom_matrix(nx, factor)
    wy = _catmull_rom_matrix(ny, factor)
    out = np.einsum("ic,tcjv->tijv", wx, data)
    return np.einsum("jd,tidv->tijv", wy, out)


def repeat_time(data, window):
    """Replicate each step `window` times along the time axis."""
    if window == 1:
        return data.copy()
    return np.repeat(data, window, axis=0)


def coarsen(fld: GridField, spec: DownsampleSpec) -> GridField:
    """The fixed downsampling map: spatial block mean then temporal window mean."""
    data = window_mean_time(block_mean_space(fld.data, spec.spatial_factor), spec.temporal_window)
    f = spec.spatial_factor
    lon = fld.lon.reshape(-1, f).mean(axis=1)
    lat = fld.lat.reshape(-1, f).mean(axis=1)
    return GridField(data, fld.time0, fld.dt_hours * spec.temporal_window,
                     lon, lat, fld.var_names, fld.member_id)


def interp_upsample(fld: GridField, spec: DownsampleSpec) -> GridField:
    """Deterministic upsampling: bicubic in space, nearest (replication) in time."""
    data = repeat_time(cubic_upsample_space(fld.data, spec.spatial_factor), spec.temporal_window)
    f = spec.spatial_factor
    if f > 1:
        dlon = (fld.lon[1] - fld.lon[0]) / f if len(fld.lon) > 1 else 1.0
        dlat = (fld.lat[1] - fld.lat[0]) / f if len(fld.lat) > 1 else 1.0
        lon = fld.lon[0] + dlon * (np.arange(len(fld.lon) * f) - (f - 1) / 2.0)
        lat = fld.lat[0] + dlat * (np.arange(len(fld.lat) * f) - (f - 1) / 2.0)
    else:
        lon, lat = fld.lon, fld.lat
    if fld.dt_hours % spec.temporal_window:
        raise ValueError("coarse dt not divisible by temporal window")
    return GridField(data, fld.time0, fld.dt_hours // spec.temporal_window,
                     lon, lat, fld.var_names, fld.member_id)


def zonal_weighted_rolling_mean(fld: GridField, lat_band, window_steps):
    """cos(lat)-weighted spatial mean inside a latitude band, boxcar-filtered in time.

    Returns (times, values [T', V]) cropped by half a window on each side.
    """
    lo, hi = lat_band
    sel = np.nonzero((fld.lat >= lo) & (fld.lat <= hi))[0]
    if sel.size == 0:
        raise ValueError(f"latitude band [{lo}, {hi}] selects no rows")
    w = np.cos(np.deg2rad(fld.lat[sel]))
    w = w / w.sum()
    series = np.einsum("txyv,y->tv", fld.data[:, :, sel, :], w) / fld.data.shape[1]
    t = series.shape[0]
    if window_steps > t:
        raise ValueError(f"rolling window {window_steps} longer than series length {t}")
    kernel = np.full(window_steps, 1.0 / window_steps)
    out = np.stack([np.convolve(series[:, v], kernel, mode="valid")
                    for v in range(series.shape[1])], axis=1)
    times = fld.time_coords[(window_steps - 1) // 2:][: out.shape[0]]
    return times, out
