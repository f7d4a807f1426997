"""Conditioned function approximators for the velocity field and the denoiser.

Both nets share a small 3-level convolutional U-net (channels 16/32/64,
3x3 kernels, stride-2 down, nearest-up + conv, skip connections). Scalar
conditioning (flow time / noise level) enters through a Fourier embedding
followed by per-block FiLM modulation; gridded conditioning is concatenated
as input channels. Everything is float64 with hand-written gradients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class DivergenceError(RuntimeError):
    """Raised when a forward pass or training step produces non-finite values."""


@dataclass
class ArchConfig:
    """Descriptor for one U-net instance."""

    in_channels: int          # gridded input channels after concatenation
    out_channels: int
    levels: tuple = (16, 32, 64)
    kernel: int = 3
    embed_freqs: int = 16     # K Fourier frequencies
    embed_dim: int = 32
    cond_vec_dim: int = 0     # pooled conditioning vector length (0 = unused)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["levels"] = tuple(d["levels"])
        return cls(**d)


def truncated_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) redrawn until inside +-bound*std."""
    out = rng.standard_normal(shape) * std
    mask = np.abs(out) > bound * std
    while mask.any():
        out[mask] = rng.standard_normal(mask.sum()) * std
        mask = np.abs(out) > bound * std
    return out


def _conv_init(rng, k, cin, cout, zero=False):
    if zero:
        return {"w": np.zeros((k, k, cin, cout)), "b": np.zeros(cout)}
    return {"w": truncated_normal(rng, (k, k, cin, cout)), "b": np.zeros(cout)}


def _dense_init(rng, nin, nout, zero=False):
    if zero:
        return {"w": np.zeros((nin, nout)), "b": np.zeros(nout)}
    return {"w": truncated_normal(rng, (nin, nout)), "b": np.zeros(nout)}


def init_params(rng, arch: ArchConfig) -> dict:
    """Flat name -> array parameter store for one U-net.

    Hidden layers are truncated-normal; the final conv and all FiLM dense
    layers are zero-initialized so the network is exactly zero (and FiLM the
    identity) at the start of training.
    """
    p = {}
    k = arch.kernel
    two_k = 2 * arch.embed_freqs

    def put(prefix, d):
        for key, val in d.items():
            p[f"{prefix}/{key}"] = val

    put("embed/dense0", _dense_init(rng, two_k, arch.embed_dim))
    put("embed/dense1", _dense_init(rng, arch.embed_dim, arch.embed_dim))
    if arch.cond_vec_dim:
        put("cond_vec/dense", _dense_init(rng, arch.cond_vec_dim, arch.embed_dim))

    chans = arch.levels
    put("in/conv", _conv_init(rng, k, arch.in_channels, chans[0]))
    for i, c in enumerate(chans):
        if i > 0:
            put(f"down{i}/conv", _conv_init(rng, k, chans[i - 1], c))
        put(f"res{i}/conv1", _conv_init(rng, k, c, c))
        put(f"res{i}/conv2", _conv_init(rng, k, c, c))
        put(f"res{i}/film_scale", _dense_init(rng, arch.embed_dim, c, zero=True))
        put(f"res{i}/film_shift", _dense_init(rng, arch.embed_dim, c, zero=True))
    for i in range(len(chans) - 1, 0, -1):
        put(f"up{i}/conv", _conv_init(rng, k, chans[i], chans[i - 1]))
        put(f"ures{i - 1}/conv1", _conv_init(rng, k, chans[i - 1], chans[i - 1]))
        put(f"ures{i - 1}/conv2", _conv_init(rng, k, chans[i - 1], chans[i - 1]))
        put(f"ures{i - 1}/film_scale", _dense_init(rng, arch.embed_dim, chans[i - 1], zero=True))
        put(f"ures{i - 1}/film_shift", _dense_init(rng, arch.embed_dim, chans[i - 1], zero=True))
    put("out/conv", _conv_init(rng, k, chans[0], arch.out_channels, zero=True))
    return p


def as_leaves(params) -> dict:
    """Wrap each parameter array in a leaf Tensor (one tape per loss call)."""
    return {k: Tensor(v) for k, v in params.items()}


def collect_grads(leaves, params) -> dict:
    return {k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(params[k]))
            for k in params}


# ---------------------------------------------------------------------------
# Conditioning pathways
# ---------------------------------------------------------------------------

def fourier_features(s, n_freqs):
    """Pre-dense embedding [B, 2K]: cos then sin of log-spaced frequencies in [1, 1e4]."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    freqs = np.logspace(0.0, 4.0, n_freqs)
    angles = s[:, None] * freqs[None, :]
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=1)


def fourier_embed(leaves, s, arch: ArchConfig) -> Tensor:
    """Fourier features followed by two dense layers with SiLU between them."""
    feats = Tensor(fourier_features(s, arch.embed_freqs))
    h = ad.silu(ad.dense(feats, leaves["embed/dense0/w"], leaves["embed/dense0/b"]))
    return ad.dense(h, leaves["embed/dense1/w"], leaves["embed/dense1/b"])


def film(x: Tensor, embed: Tensor, leaves, prefix) -> Tensor:
    """(1 + Dense(e)) * x + Dense(e), per channel; identity at zero init."""
    scale = ad.dense(embed, leaves[f"{prefix}/film_scale/w"], leaves[f"{prefix}/film_scale/b"])
    shift = ad.dense(embed, leaves[f"{prefix}/film_shift/w"], leaves[f"{prefix}/film_shift/b"])
    b, c = scale.shape
    scale = ad.reshape(scale, (b, 1, 1, c))
    shift = ad.reshape(shift, (b, 1, 1, c))
    return x * (scale + 1.0) + shift


def _resblock(h, embed, leaves, prefix):
    t = ad.silu(h)
    t = ad.conv2d(t, leaves[f"{prefix}/conv1/w"], leaves[f"{prefix}/conv1/b"])
    t = film(t, embed, leaves, prefix)
    t = ad.silu(t)
    t = ad.conv2d(t, leaves[f"{prefix}/conv2/w"], leaves[f"{prefix}/conv2/b"])
    return h + t


def unet_forward(leaves, x: Tensor, embed: Tensor, arch: ArchConfig) -> Tensor:
    """3-level conv U-net with FiLM conditioning at every residual block."""
    n = len(arch.levels)
    h = ad.conv2d(x, leaves["in/conv/w"], leaves["in/conv/b"])
    skips = []
    for i in range(n):
        if i > 0:
            h = ad.conv2d(h, leaves[f"down{i}/conv/w"], leaves[f"down{i}/conv/b"], stride=2)
        h = _resblock(h, embed, leaves, f"res{i}")
        if i < n - 1:
            skips.append(h)
    for i in range(n - 1, 0, -1):
        h = ad.upsample2(h)
        h = ad.conv2d(h, leaves[f"up{i}/conv/w"], leaves[f"up{i}/conv/b"])
        h = h + skips[i - 1]
        h = _resblock(h, embed, leaves, f"ures{i - 1}")
    return ad.conv2d(h, leaves["out/conv/w"], leaves["out/conv/b"])


# ---------------------------------------------------------------------------
# Velocity field (bias-correction stage)
# ---------------------------------------------------------------------------

def velocity_arch(n_vars, levels=(16, 32, 64)) -> ArchConfig:
    # gridded input: state + member mean + member std fields
    return ArchConfig(in_channels=3 * n_vars, out_channels=n_vars,
                      levels=levels, cond_vec_dim=2 * n_vars)


def velocity_forward(leaves, yhat, tau, stat_mean, stat_std, arch: ArchConfig) -> Tensor:
    """v(yhat, tau; member stats). All array arguments are plain numpy.

    yhat: [B, H, W, V]; tau: [B]; stat_mean/stat_std: [B, H, W, V] member
    statistics, injected both as channels and as a pooled FiLM embedding term.
    """
    x = Tensor(np.concatenate([yhat, stat_mean, stat_std], axis=-1))
    embed = fourier_embed(leaves, tau, arch)
    pooled = np.concatenate([stat_mean.mean(axis=(1, 2)), stat_std.mean(axis=(1, 2))], axis=1)
    cond = ad.dense(Tensor(pooled), leaves["cond_vec/dense/w"], leaves["cond_vec/dense/b"])
    out = unet_forward(leaves, x, embed + cond, arch)
    if not np.isfinite(out.data).all():
        raise DivergenceError("velocity network produced non-finite activations")
    return out


# ---------------------------------------------------------------------------
# Preconditioned denoiser (super-resolution stage)
# ---------------------------------------------------------------------------

def denoiser_arch(n_vars, window_steps, levels=(16, 32, 64)) -> ArchConfig:
    # window time is folded into channels: noisy residual + interpolated conditioning
    c = window_steps * n_vars
    return ArchConfig(in_channels=2 * c, out_channels=c, levels=levels)


def precond_coeffs(sigma):
    """Denoiser preconditioning coefficients for noise level sigma (> 0)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma <= 0).any():
        raise ValueError("noise level must be positive")
    c_skip = 1.0 / (1.0 + sigma ** 2)
    c_out = sigma / np.sqrt(1.0 + sigma ** 2)
    c_in = 1.0 / np.sqrt(1.0 + sigma ** 2)
    c_noise = 0.25 * np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def _fold_time(a):
    """[B, T, H, W, V] -> [B, H, W, T*V]."""
    b, t, h, w, v = a.shape
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1, 4)).reshape(b, h, w, t * v)


def _unfold_time(x: Tensor, t, v) -> Tensor:
    b, h, w, _ = x.shape
    return ad.transpose(ad.reshape(x, (b, h, w, t, v)), (0, 3, 1, 2, 4))


def denoiser_forward(leaves, z, sigma, cond, arch: ArchConfig) -> Tensor:
    """Preconditioned denoiser D(z, sigma, cond).

    z: [B, T, H, W, V] noisy residual window; sigma: [B]; cond: interpolated
    conditioning of the same shape as z, or None for the null (zero) input.
    Returns a tensor shaped like z.
    """
    b, t, h, w, v = z.shape
    c_skip, c_out, c_in, c_noise = precond_coeffs(sigma)
    zf = _fold_time(z)
    cf = np.zeros_like(zf) if cond is None else _fold_time(cond)
    x = Tensor(np.concatenate([c_in[:, None, None, None] * zf, cf], axis=-1))
    embed = fourier_embed(leaves, c_noise, arch)
    raw = unet_forward(leaves, x, embed, arch)
    out = Tensor(c_skip[:, None, None, None] * zf) + Tensor(c_out[:, None, None, None]) * raw
    if not np.isfinite(out.data).all():
        raise DivergenceError("denoiser produced non-finite activations")
    return _unfold_time(out, t, v)


# ---------------------------------------------------------------------------
# Checkpoints: one NPY per tensor plus a JSON manifest
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt_dir, arrays: dict, meta: dict) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(arrays):
        fname = name.replace("/", "__") + ".npy"
        with open(ckpt_dir / fname, "wb") as f:
            np.lib.format.write_array(f, np.ascontiguousarray(arrays[name], dtype="<f8"),
                                      version=(1, 0))
        index[name] = {"file": fname, "shape": list(arrays[name].shape)}
    manifest = {"tensors": index, "meta": meta}
    with open(ckpt_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    arrays = {}
    for name, entry in manifest["tensors"].items():
        with open(ckpt_dir / entry["file"], "rb") as f:
            arr = np.lib.format.read_array(f)
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, "
                             f"manifest says {entry['shape']}")
        arrays[name] = arr
    return arrays, manifest["meta"]
