"""Pipeline configuration: INI sections with typed keys, strict validation.

Unknown sections or keys are rejected. `--set section.key=value` overrides are
applied after the file parse; the resolved configuration is persisted next to
every run's outputs so results can be reproduced from it alone.
"""

from __future__ import annotations

import configparser
from pathlib import Path


class ConfigError(Exception):
    """Invalid configuration (unknown key, bad value); exit status 2."""


def _levels(text):
    out = tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    if not out:
        raise ValueError("empty level list")
    return out


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "pipeline": {
        "rng_seed": (int, 0),
    },
    "synth": {
        "nx": (int, 8),
        "ny": (int, 8),
        "n_days": (int, 240),
        "train_days": (int, 180),
        "n_members": (int, 2),
        "spatial_factor": (int, 4),
        "spectral_slope": (float, 2.0),
        "seasonal_amp": (float, 1.0),
        "diurnal_amp": (float, 0.3),
        "trend_per_year": (float, 0.0),
        "noise_amp": (float, 0.6),
        "noise_ar1": (float, 0.6),
        "bias_mean_offset": (float, 0.5),
        "bias_var_scale": (float, 1.2),
        "bias_spectral_tilt": (float, 0.0),
        "bias_season_phase_days": (float, 0.0),
        "bias_corr_shrink": (float, 0.3),
    },
    "debias": {
        "steps": (int, 400),
        "chunks_per_batch": (int, 4),
        "chunk_len_days": (int, 8),
        "season_window_days": (int, 15),
        "peak_lr": (float, 2e-3),
        "end_lr": (float, 1e-6),
        "warmup_steps": (int, 60),
        "clip_norm": (float, 0.6),
        "levels": (_levels, (16, 32, 64)),
        "transport_steps": (int, 100),
    },
    "sr": {
        "steps": (int, 300),
        "batch": (int, 4),
        "window_days": (int, 3),
        "p_uncond": (float, 0.15),
        "peak_lr": (float, 2e-3),
        "end_lr": (float, 1e-6),
        "warmup_steps": (int, 50),
        "clip_norm": (float, 0.6),
        "levels": (_levels, (16, 32, 64)),
        "doy_buckets": (int, 40),
        "sigma_min": (float, 1e-4),
        "sigma_max": (float, 80.0),
        "n_grid": (int, 256),
        "schedule_kind": (str, "edm"),
    },
    "sample": {
        "guidance": (float, 1.0),
        "length_days": (int, 9),
        "windows": (int, 4),
        "start_day": (int, 0),   # offset into the evaluation period
        "member": (str, "m000"),
    },
    "baseline": {
        "qm_doy_buckets": (int, 1),
        "fine_clim_doy_buckets": (int, 12),
    },
    "evaluate": {
        "percentile": (float, 99.0),
        "heat_streak_h": (int, 3),
        "heat_streak_delta": (float, 0.5),
        "derived": (_bool, True),
        "psd": (_bool, True),
        "streaks": (_bool, True),
        "cyclones": (_bool, False),
        "plots": (_bool, False),
    },
}


def default_config():
    return {sec: {k: default for k, (_, default) in keys.items()}
            for sec, keys in SCHEMA.items()}


def parse_config(path) -> dict:
    """Parse an INI file against the schema; missing keys take defaults."""
    cfg = default_config()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            _apply(cfg, section, key, raw)
    return cfg


def _apply(cfg, section, key, raw):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    parse, _ = SCHEMA[section][key]
    try:
        cfg[section][key] = parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc


def apply_overrides(cfg, overrides):
    """Overrides in `section.key=value` form, applied in order."""
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw.strip())
    return cfg


def write_resolved(cfg, path):
    path = Path(path)
    lines = []
    for section in SCHEMA:
        lines.append(f"[{section}]")
        for key in SCHEMA[section]:
            val = cfg[section][key]
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
