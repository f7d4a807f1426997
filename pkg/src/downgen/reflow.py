"""Bias-correction stage: seasonal coupling, flow-matching training and the
ODE transport that maps biased coarse members onto the debiased distribution.

Training regresses a velocity field onto straight-line displacements between
coupled (member, target) snapshot pairs, both sides normalized by their own
training-period statistics. The transport map integrates the learned ODE with
fixed-step RK4 and denormalizes with the target statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .grid import DAYS_PER_YEAR, EnsembleStats, GridField, compute_ensemble_stats, day_of_year
from .nets import (
    ArchConfig,
    DivergenceError,
    as_leaves,
    collect_grads,
    init_params,
    load_checkpoint,
    save_checkpoint,
    velocity_arch,
    velocity_forward,
)
from .optim import OptimizerState, Schedule, adam_step

_TRAIN_STREAM = 2


@dataclass
class CouplingConfig:
    chunk_len_days: int = 8
    season_window_days: int = 15
    tau_min: float = 1e-3


@dataclass
class ReflowTrainConfig:
    steps: int = 2000
    chunks_per_batch: int = 4
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    peak_lr: float = 1e-3
    end_lr: float = 1e-6
    warmup_steps: int = 100
    clip_norm: float = 0.6
    levels: tuple = (16, 32, 64)
    seed: int = 0


@dataclass
class ReflowModel:
    params: dict
    arch: ArchConfig
    member_stats: dict           # member_id -> EnsembleStats
    target_stats: EnsembleStats


@dataclass
class CouplingBatch:
    """Normalized snapshot pairs plus per-sample member statistic fields."""

    y0: np.ndarray         # [B, NX, NY, V] biased member snapshots (normalized)
    y1: np.ndarray         # [B, NX, NY, V] target snapshots (normalized)
    stat_mean: np.ndarray  # [B, NX, NY, V] member mean, in target-normalized units
    stat_std: np.ndarray   # [B, NX, NY, V] member std relative to the target's


def _conditioning_fields(stats: EnsembleStats, target_stats: EnsembleStats):
    """Member statistics as dimensionless conditioning fields.

    The raw mean/std can sit far from zero (pressure-scale values); expressing
    them relative to the target statistics keeps network inputs O(1).
    """
    mean_cond = (stats.mean - target_stats.mean) / target_stats.std
    std_cond = stats.std / target_stats.std
    return mean_cond, std_cond


def _doy_distance(a, b):
    d = np.abs(a - b)
    return np.minimum(d, DAYS_PER_YEAR - d)


def sample_coupling(members, member_stats, target, target_stats,
                    cfg: CouplingConfig, rng, n_chunks) -> CouplingBatch:
    """Draw contiguous chunk pairs with matching season (day-of-year window).

    Pairing is independent within the season window: no trajectory alignment
    between member and target is assumed. Members are sampled uniformly.
    """
    chunk = cfg.chunk_len_days
    target_doy = day_of_year(target.time_coords)
    n_target = target.n_times
    if n_target < chunk:
        raise ValueError("target series shorter than one chunk")
    y0_parts, y1_parts, mean_parts, std_parts = [], [], [], []
    for _ in range(n_chunks):
        m = int(rng.integers(len(members)))
        member = members[m]
        stats = member_stats[member.member_id]
        i0 = int(rng.integers(member.n_times - chunk + 1))
        doy0 = day_of_year(member.time_coords[i0])
        starts = np.arange(n_target - chunk + 1)
        valid = starts[_doy_distance(target_doy[starts], doy0) <= cfg.season_window_days]
        if valid.size == 0:
            raise ValueError(
                f"no target chunk within {cfg.season_window_days} days of day-of-year {doy0}")
        j0 = int(rng.choice(valid))
        y0_parts.append((member.data[i0: i0 + chunk] - stats.mean) / stats.std)
        y1_parts.append((target.data[j0: j0 + chunk] - target_stats.mean) / target_stats.std)
        mean_cond, std_cond = _conditioning_fields(stats, target_stats)
        mean_parts.append(np.broadcast_to(mean_cond, y0_parts[-1].shape))
        std_parts.append(np.broadcast_to(std_cond, y0_parts[-1].shape))
    return CouplingBatch(
        y0=np.concatenate(y0_parts),
        y1=np.concatenate(y1_parts),
        stat_mean=np.concatenate(mean_parts),
        stat_std=np.concatenate(std_parts),
    )


def reflow_loss(params, arch: ArchConfig, batch: CouplingBatch, tau):
    """Mean squared residual between displacement (y1 - y0) and the velocity.

    tau: [B] interpolation times in (0, 1). Returns (loss value, grads dict).
    """
    t = tau[:, None, None, None]
    y_tau = t * batch.y1 + (1.0 - t) * batch.y0
    leaves = as_leaves(params)
    v = velocity_forward(leaves, y_tau, tau, batch.stat_mean, batch.stat_std, arch)
    target = Tensor(batch.y1 - batch.y0)
    loss = ad.mean(ad.square(v - target))
    if not np.isfinite(loss.data):
        raise DivergenceError("non-finite flow-matching loss")
    backward(loss)
    return float(loss.data), collect_grads(leaves, params)


def integrate_velocity(model: ReflowModel, yhat0, stat_mean, stat_std,
                       n_steps=100, t0=0.0, t1=1.0):
    """Fixed-step RK4 for dy/dtau = v(y, tau) in normalized coordinates.

    yhat0: [B, NX, NY, V]. Set t0=1, t1=0 to integrate the flow backwards.
    """
    leaves = as_leaves(model.params)
    h = (t1 - t0) / n_steps
    y = yhat0.copy()
    b = y.shape[0]

    def vel(state, t):
        out = velocity_forward(leaves, state, np.full(b, t), stat_mean, stat_std,
                               model.arch).data
        return out

    for i in range(n_steps):
        t = t0 + i * h
        k1 = vel(y, t)
        k2 = vel(y + 0.5 * h * k1, t + 0.5 * h)
        k3 = vel(y + 0.5 * h * k2, t + 0.5 * h)
        k4 = vel(y + h * k3, t + h)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(y).all():
            raise DivergenceError(f"non-finite state during transport at step {i}")
    return y


def transport(model: ReflowModel, y: GridField, member_id, n_steps=100) -> GridField:
    """Debias a member series: normalize, integrate the flow 0 -> 1, denormalize."""
    if member_id not in model.member_stats:
        raise KeyError(f"no statistics for member {member_id!r}")
    stats = model.member_stats[member_id]
    yhat = (y.data - stats.mean) / stats.std
    shape = yhat.shape
    mean_cond, std_cond = _conditioning_fields(stats, model.target_stats)
    mean_f = np.broadcast_to(mean_cond, shape)
    std_f = np.broadcast_to(std_cond, shape)
    out = integrate_velocity(model, yhat, mean_f, std_f, n_steps=n_steps)
    data = out * model.target_stats.std + model.target_stats.mean
    return y.with_data(data)


def train_reflow(members, target, cfg: ReflowTrainConfig, out_dir=None):
    """Train the velocity field on training-period member/target series.

    Returns (ReflowModel, log) where log is a list of (step, loss, lr) rows.
    When out_dir is given, writes a checkpoint and the loss curve CSV there.
    """
    if not members:
        raise ValueError("empty training ensemble")
    member_stats = {m.member_id: compute_ensemble_stats(m) for m in members}
    target_stats = compute_ensemble_stats(target)
    n_vars = target.data.shape[-1]
    arch = velocity_arch(n_vars, levels=cfg.levels)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _TRAIN_STREAM)))
    params = init_params(rng, arch)
    state = OptimizerState(
        Schedule(peak_lr=cfg.peak_lr, end_lr=cfg.end_lr,
                 warmup_steps=cfg.warmup_steps, total_steps=cfg.steps),
        clip_norm=cfg.clip_norm)
    model = ReflowModel(params, arch, member_stats, target_stats)
    log = []
    batch_size = cfg.chunks_per_batch * cfg.coupling.chunk_len_days
    for step in range(cfg.steps):
        batch = sample_coupling(members, member_stats, target, target_stats,
                                cfg.coupling, rng, cfg.chunks_per_batch)
        tau = rng.uniform(cfg.coupling.tau_min, 1.0 - cfg.coupling.tau_min, batch_size)
        loss, grads = reflow_loss(params, arch, batch, tau)
        lr = adam_step(params, state, grads)
        log.append((step, loss, lr))
    if out_dir is not None:
        save_reflow(model, out_dir, opt_state=state)
        write_loss_log(Path(out_dir) / "loss.csv", log)
    return model, log


def write_loss_log(path, log):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "lr"])
        for step, loss, lr in log:
            writer.writerow([step, repr(loss), repr(lr)])


def save_reflow(model: ReflowModel, ckpt_dir, opt_state=None) -> None:
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    for mid, stats in model.member_stats.items():
        arrays[f"member_stats/{mid}/mean"] = stats.mean
        arrays[f"member_stats/{mid}/std"] = stats.std
    arrays["target_stats/mean"] = model.target_stats.mean
    arrays["target_stats/std"] = model.target_stats.std
    meta = {"kind": "reflow", "arch": model.arch.to_json(),
            "members": sorted(model.member_stats), "step": 0}
    if opt_state is not None:
        meta["step"] = opt_state.step
        for k, v in opt_state.m.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in opt_state.v.items():
            arrays[f"adam_v/{k}"] = v
    save_checkpoint(ckpt_dir, arrays, meta)


def load_reflow(ckpt_dir) -> ReflowModel:
    arrays, meta = load_checkpoint(ckpt_dir)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    member_stats = {}
    for mid in meta["members"]:
        member_stats[mid] = EnsembleStats(arrays[f"member_stats/{mid}/mean"],
                                          arrays[f"member_stats/{mid}/std"])
    target_stats = EnsembleStats(arrays["target_stats/mean"], arrays["target_stats/std"])
    return ReflowModel(params, ArchConfig.from_json(meta["arch"]), member_stats, target_stats)
