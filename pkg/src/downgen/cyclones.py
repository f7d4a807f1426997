"""Sea-level-pressure cyclone detection, track linking and track density.

Candidates are strict local SLP minima with a closed contour (pressure rises
by a threshold within a fixed great-circle radius); nearby minima are merged
keeping the deeper one. Candidates are linked greedily across 6-hourly
snapshots, tolerating bounded gaps, and tracks must satisfy duration, wind
and elevation criteria.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def great_circle_distance(lon1, lat1, lon2, lat2):
    """Central angle between two points, in degrees."""
    phi1, phi2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dlmb = np.deg2rad(np.asarray(lon2) - np.asarray(lon1))
    cosang = np.sin(phi1) * np.sin(phi2) + np.cos(phi1) * np.cos(phi2) * np.cos(dlmb)
    return np.rad2deg(np.arccos(np.clip(cosang, -1.0, 1.0)))


@dataclass
class DetectionConfig:
    contour_delta: float = 240.0     # Pa rise required within contour_radius
    contour_radius: float = 4.0      # great-circle degrees
    contour_ring_width: float = 1.0  # annulus thickness checked at the radius
    merge_radius: float = 2.0
    wind_threshold: float = 10.0     # m/s
    wind_radius: float = 2.0         # wind maximum searched within this radius
    min_valid_snapshots: int = 8     # wind + elevation criterion
    elevation_max: float = 100.0     # m
    min_duration_hours: float = 54.0
    max_gap_hours: float = 24.0
    max_step_distance: float = 8.0   # linking distance, great-circle degrees


@dataclass
class CycloneTrack:
    times: list = field(default_factory=list)      # hours
    lons: list = field(default_factory=list)
    lats: list = field(default_factory=list)
    slp_min: list = field(default_factory=list)    # Pa
    wind_max: list = field(default_factory=list)   # m/s
    elevation: list = field(default_factory=list)  # m

    def __len__(self):
        return len(self.times)

    @property
    def duration_hours(self):
        return self.times[-1] - self.times[0]


def _local_minima(slp2d):
    """Strict minima over the 8-neighborhood; boundary ring excluded."""
    c = slp2d[1:-1, 1:-1]
    smaller = np.ones_like(c, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            smaller &= c < slp2d[1 + di: slp2d.shape[0] - 1 + di,
                                 1 + dj: slp2d.shape[1] - 1 + dj]
    ii, jj = np.nonzero(smaller)
    return list(zip(ii + 1, jj + 1))


def find_candidates(slp2d, lon, lat, cfg: DetectionConfig):
    """Closed-contour minima at one snapshot, merged within merge_radius.

    Returns a list of (i, j, slp) sorted by depth (deepest first).
    """
    lon2d = lon[:, None]
    lat2d = lat[None, :]
    passed = []
    for i, j in _local_minima(slp2d):
        dist = great_circle_distance(lon[i], lat[j], lon2d, lat2d)
        ring = (dist > cfg.contour_radius - cfg.contour_ring_width) \
            & (dist <= cfg.contour_radius)
        if not ring.any():
            continue  # contour leaves the domain; cannot be verified closed
        if slp2d[ring].min() - slp2d[i, j] >= cfg.contour_delta:
            passed.append((i, j, float(slp2d[i, j])))
    passed.sort(key=lambda c: (c[2], c[0], c[1]))
    merged = []
    for i, j, p in passed:
        close = any(great_circle_distance(lon[i], lat[j], lon[mi], lat[mj])
                    <= cfg.merge_radius for mi, mj, _ in merged)
        if not close:
            merged.append((i, j, p))
    return merged


def detect_cyclones(slp, wind, elevation, lon, lat, times, cfg=None):
    """Detect cyclone tracks from [T, NX, NY] SLP/wind snapshots.

    times are hours (typically 6-hourly); elevation is a static [NX, NY] map.
    Returns tracks satisfying every criterion; an empty list is valid.
    """
    if cfg is None:
        cfg = DetectionConfig()
    slp = np.asarray(slp, dtype=np.float64)
    wind = np.asarray(wind, dtype=np.float64)
    elevation = np.asarray(elevation, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    lon2d = lon[:, None]
    lat2d = lat[None, :]

    open_tracks = []
    done_tracks = []
    for t_idx, t in enumerate(times):
        candidates = find_candidates(slp[t_idx], lon, lat, cfg)
        still_open = []
        for track in open_tracks:
            if t - track.times[-1] <= cfg.max_gap_hours:
                still_open.append(track)
            else:
                done_tracks.append(track)
        open_tracks = still_open
        taken = set()
        # deepest candidates claim the nearest track first (deterministic order)
        for i, j, p in candidates:
            best = None
            best_dist = cfg.max_step_distance
            for k, track in enumerate(open_tracks):
                if k in taken:
                    continue
                d = great_circle_distance(lon[i], lat[j], track.lons[-1], track.lats[-1])
                if d <= best_dist:
                    best = k
                    best_dist = d
            dist = great_circle_distance(lon[i], lat[j], lon2d, lat2d)
            wmax = float(wind[t_idx][dist <= cfg.wind_radius].max())
            elev = float(elevation[i, j])
            if best is None:
                track = CycloneTrack()
                open_tracks.append(track)
            else:
                taken.add(best)
                track = open_tracks[best]
            track.times.append(int(t))
            track.lons.append(float(lon[i]))
            track.lats.append(float(lat[j]))
            track.slp_min.append(p)
            track.wind_max.append(wmax)
            track.elevation.append(elev)
    done_tracks.extend(open_tracks)

    kept = []
    for track in done_tracks:
        if track.duration_hours < cfg.min_duration_hours:
            continue
        ok = sum(1 for w, e in zip(track.wind_max, track.elevation)
                 if w > cfg.wind_threshold and e < cfg.elevation_max)
        if ok < cfg.min_valid_snapshots:
            continue
        kept.append(track)
    return kept


def cyclone_density(tracks, lon, lat, sigma=1.0):
    """Sum of unit-mass Gaussians (std sigma great-circle degrees) over track points."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    out = np.zeros((lon.size, lat.size))
    lon2d = lon[:, None]
    lat2d = lat[None, :]
    for track in tracks:
        for plon, plat in zip(track.lons, track.lats):
            d = great_circle_distance(plon, plat, lon2d, lat2d)
            out += np.exp(-0.5 * (d / sigma) ** 2) / (2.0 * np.pi * sigma ** 2)
    return out
