"""Supervised training with multistep unrolls and a horizon curriculum.

Loss is the halved MSE ``L = 1/(2 D N T_s) * sum |s - s*|^2`` and its
normaliser is the same quantity between consecutive ground-truth states
(the "natural skip"), so a predictor that copies the last observed state
scores exactly 1 when both are taken over the same transitions.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .diffcore import AdamState, ParameterError, PoisonedGradientError, Tape, Tensor, adam_step, concat, mse, reshape, scale
from .model import SwarmNet, SwarmNetConfig, check_finite

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "horizon", "train_L", "train_Lnorm", "val_L", "val_Lnorm", "seconds"]


class HorizonTooLongError(ValueError):
    def __init__(self, horizon, max_horizon):
        super().__init__(f"horizon {horizon} needs more steps than available; max feasible horizon is {max_horizon}")
        self.horizon = horizon
        self.max_horizon = max_horizon


class NormalizationUndefinedError(ZeroDivisionError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, detail=""):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.batch = batch


class TrainConfigError(ValueError):
    pass


@dataclass
class LossReport:
    L: float
    L_bar: float
    horizon: int
    steps: int

    @property
    def L_norm(self):
        if not self.L_bar > 0:
            raise NormalizationUndefinedError("natural skip is zero; normalised loss undefined")
        return self.L / self.L_bar


@dataclass
class CurriculumSchedule:
    start: int = 1
    max_horizon: int = 10
    epochs_per_increment: int = 1

    def horizon(self, epoch):
        return min(self.max_horizon, self.start + epoch // self.epochs_per_increment)

    @classmethod
    def linear(cls, epochs, start=1, max_horizon=10):
        """Horizon +1 every floor(epochs / number-of-horizons) epochs, so the
        top horizon is always reached when there are enough epochs."""
        stages = max_horizon - start + 1
        return cls(start, max_horizon, max(1, epochs // stages))


@dataclass
class TrainRunConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    curriculum: bool = True
    start_horizon: int = 1
    max_horizon: int = 10
    epochs_per_increment: int | None = None
    fixed_horizon: int = 1
    windows_per_episode: int | None = None
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ParameterError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size must be >= 1 and epochs >= 0")

    def schedule(self):
        if not self.curriculum:
            return CurriculumSchedule(self.fixed_horizon, self.fixed_horizon, 1)
        if self.epochs_per_increment is not None:
            return CurriculumSchedule(self.start_horizon, self.max_horizon, self.epochs_per_increment)
        return CurriculumSchedule.linear(self.epochs, self.start_horizon, self.max_horizon)

    @property
    def top_horizon(self):
        return self.max_horizon if self.curriculum else self.fixed_horizon

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ParameterError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# -- losses ------------------------------------------------------------------

def loss_eq4(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ParameterError(f"prediction {pred.shape} vs truth {truth.shape}")
    return 0.5 * float(np.mean((pred - truth) ** 2))


def loss_tensor(pred, truth):
    """Differentiable Eq.-4 loss (halved MSE)."""
    return scale(mse(pred, truth), 0.5)


def natural_skip(states):
    """Halved MSE between consecutive states of a ``[T, N, D]`` episode."""
    states = np.asarray(states, dtype=np.float64)
    if states.shape[0] < 2:
        raise ParameterError("natural skip needs at least two time steps")
    value = 0.5 * float(np.mean(np.diff(states, axis=0) ** 2))
    if value == 0.0:
        raise NormalizationUndefinedError("stationary episode: natural skip is zero")
    return value


def matched_skip(truth, previous):
    """Natural skip restricted to the transitions ``previous -> truth``."""
    return loss_eq4(previous, truth)


# -- windows and unrolling ------------------------------------------------------

def max_horizon(T, window):
    return T - window


def window_starts(T, window, horizon):
    if horizon < 1:
        raise ParameterError(f"horizon must be >= 1, got {horizon}")
    last = T - window - horizon
    if last < 0:
        raise HorizonTooLongError(horizon, max_horizon(T, window))
    return np.arange(last + 1)


def episode_windows(states, window, horizon=1, starts=None):
    """State windows ``[K, T_w, N, D]`` and targets ``[K, h, N, D]``."""
    states = np.asarray(states)
    if starts is None:
        starts = window_starts(states.shape[0], window, horizon)
    idx = starts[:, None] + np.arange(window)
    tgt = starts[:, None] + window + np.arange(horizon)
    return states[idx], states[tgt]


def stack_windows(states, context, window, horizon=1):
    """Windows with context appended per step, ``[K, T_w, N, D + d_c]``, plus targets.

    Window k covers steps k .. k+T_w-1 and its j-th target is step k+T_w-1+j.
    """
    windows, targets = episode_windows(states, window, horizon)
    K, Tw, N, _ = windows.shape
    ctx = np.broadcast_to(np.asarray(context, dtype=windows.dtype), (K, Tw, N, len(context)))
    return np.concatenate([windows, ctx], axis=-1), targets


def multistep_unroll(model, windows, context, horizon, dropout=None, rng=None,
                     noise_sigma=0.0, noise_rng=None, trace=None):
    """Autoregressive ``horizon``-step prediction ``[B, h, N, D]``.

    Each prediction is appended to the window and the oldest step dropped;
    later steps consume earlier predictions, never ground truth.  Under an
    active tape gradients flow through the whole unroll.
    """
    if horizon < 1:
        raise ParameterError(f"horizon must be >= 1, got {horizon}")
    window = windows if isinstance(windows, Tensor) else Tensor(windows)
    B, Tw, N, D = window.shape
    preds = []
    for _ in range(horizon):
        inp = window
        if noise_sigma > 0:
            inp = window + noise_rng.normal(0.0, noise_sigma, size=window.shape).astype(np.float32)
        if trace is not None:
            trace.append(np.array(inp.data))
        nxt = model.predict_next(inp, context, dropout=dropout, rng=rng)
        step = reshape(nxt, (B, 1, N, D))
        preds.append(step)
        window = concat([window[:, 1:], step], axis=1) if Tw > 1 else step
    return concat(preds, axis=1) if horizon > 1 else preds[0]


# -- training --------------------------------------------------------------------

def _stack_episodes(episodes):
    shapes = {ep.states.shape for ep in episodes}
    dims = {len(ep.encoded) for ep in episodes}
    if len(shapes) != 1 or len(dims) != 1:
        raise TrainConfigError(f"episodes must share shape and context size, got {shapes} / {dims}")
    states = np.stack([ep.states for ep in episodes])
    ctx = np.stack([ep.encoded for ep in episodes])
    return states, ctx


def normalization_stats(states, ctx):
    """Per-channel (shift, scale) for states+context and per-channel one-step delta scale."""
    D = states.shape[-1]
    flat = states.reshape(-1, D).astype(np.float64)
    full_shift = list(flat.mean(0)) + list(ctx.astype(np.float64).mean(0))
    std = list(flat.std(0)) + list(ctx.astype(np.float64).std(0))
    full_scale = [s if s > 1e-6 else 1.0 for s in std]
    deltas = np.diff(states.astype(np.float64), axis=1).reshape(-1, D)
    dstd = deltas.std(0)
    delta_scale = [float(s) if s > 1e-6 else 1.0 for s in dstd]
    return [float(v) for v in full_shift], [float(v) for v in full_scale], delta_scale


def split_episodes(n, val_fraction, seed):
    """Seeded (train, validation) index split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _choose_starts(T, window, horizon, limit, rng):
    starts = window_starts(T, window, horizon)
    if limit is not None and limit < len(starts):
        starts = np.sort(rng.choice(starts, size=limit, replace=False))
    return starts


def _batch(states, ctx, starts, window, horizon):
    """Windows, targets, per-window context and last observed state for a set of episodes."""
    E, T, N, D = states.shape
    idx = starts[:, None] + np.arange(window)                  # [K, T_w]
    tgt = starts[:, None] + window + np.arange(horizon)        # [K, h]
    win = states[:, idx].reshape(-1, window, N, D)
    targets = states[:, tgt].reshape(-1, horizon, N, D)
    prev = states[:, tgt - 1].reshape(-1, horizon, N, D)
    c = np.repeat(ctx, len(starts), axis=0)
    return win, targets, c, prev


def _per_episode_losses(pred, targets, prev, n_episodes):
    pred = pred.reshape(n_episodes, -1).astype(np.float64)
    targets = targets.reshape(n_episodes, -1).astype(np.float64)
    prev = prev.reshape(n_episodes, -1).astype(np.float64)
    L = 0.5 * np.mean((pred - targets) ** 2, axis=1)
    L_bar = 0.5 * np.mean((prev - targets) ** 2, axis=1)
    return L, L_bar


def evaluate_loss(model, states, ctx, horizon, starts=None, batch_episodes=64):
    """Mean raw L and mean matched L_norm over episodes at a fixed horizon (no dropout)."""
    T = states.shape[1]
    if starts is None:
        starts = window_starts(T, model.window, horizon)
    Ls, norms = [], []
    for b in range(0, len(states), batch_episodes):
        s, c = states[b:b + batch_episodes], ctx[b:b + batch_episodes]
        win, targets, cw, prev = _batch(s, c, starts, model.window, horizon)
        pred = multistep_unroll(model, win, cw, horizon).data
        L, L_bar = _per_episode_losses(pred, targets, prev, len(s))
        Ls.append(L)
        norms.append(L / np.where(L_bar > 0, L_bar, np.nan))
    return float(np.mean(np.concatenate(Ls))), float(np.nanmean(np.concatenate(norms)))


@dataclass
class TrainResult:
    model: SwarmNet
    log: list
    best_epoch: int
    best_val_Lnorm: float


def _resolve_model_cfg(model_cfg, states, ctx, run_cfg):
    cfg = SwarmNetConfig.from_dict(model_cfg.to_dict())
    if states.shape[-1] != cfg.state_dim or ctx.shape[-1] != cfg.context_dim:
        raise TrainConfigError(
            f"dataset has D={states.shape[-1]}, d_c={ctx.shape[-1]} but model expects "
            f"D={cfg.state_dim}, d_c={cfg.context_dim}")
    if run_cfg.normalize and cfg.input_shift is None:
        cfg.input_shift, cfg.input_scale, cfg.delta_scale = normalization_stats(states, ctx)
    return cfg


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train(episodes, model_cfg=None, run_cfg=None, log_path=None, checkpoint_path=None, provenance=None):
    """Train a SwarmNet on ``episodes``; returns the best-validation model.

    Validation is always measured at the top horizon of the run (the
    curriculum maximum, or the fixed horizon), so epochs stay comparable
    while the training horizon grows.
    """
    model_cfg = model_cfg or SwarmNetConfig()
    run_cfg = run_cfg or TrainRunConfig()
    states, ctx = _stack_episodes(episodes)
    T = states.shape[1]
    window = model_cfg.window
    top = run_cfg.top_horizon
    if T < window + top:
        raise HorizonTooLongError(top, max_horizon(T, window))

    train_idx, val_idx = split_episodes(len(states), run_cfg.val_fraction, run_cfg.seed)
    cfg = _resolve_model_cfg(model_cfg, states[train_idx], ctx[train_idx], run_cfg)
    model = SwarmNet(cfg, provenance=provenance)
    schedule = run_cfg.schedule()
    opt = AdamState(lr=run_cfg.lr, beta1=run_cfg.beta1, beta2=run_cfg.beta2, eps=run_cfg.eps)
    params = model.parameters()

    seeds = np.random.SeedSequence(run_cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1]) if cfg.dropout > 0 else None
    val_starts = _choose_starts(T, window, top, run_cfg.windows_per_episode, np.random.default_rng(seeds[2]))

    rows, best_val, best_epoch, best = [], np.inf, -1, model.snapshot()
    for epoch in range(run_cfg.epochs):
        t0 = time.perf_counter()
        horizon = schedule.horizon(epoch)
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        ep_L, ep_norm = [], []
        for b in range(0, len(order), run_cfg.batch_size):
            chosen = order[b:b + run_cfg.batch_size]
            starts = _choose_starts(T, window, horizon, run_cfg.windows_per_episode, shuffle_rng)
            win, targets, cw, prev = _batch(states[chosen], ctx[chosen], starts, window, horizon)
            model.zero_grad()
            with Tape() as tape:
                pred = multistep_unroll(model, win, cw, horizon, rng=dropout_rng)
                loss = loss_tensor(pred, targets)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, b // run_cfg.batch_size)
            tape.backward(loss)
            try:
                adam_step(params, [p.grad for p in params], opt)
            except PoisonedGradientError as err:
                raise TrainingDivergedError(epoch, b // run_cfg.batch_size, str(err)) from err
            L, L_bar = _per_episode_losses(pred.data, targets, prev, len(chosen))
            tape.clear()
            ep_L.append(L)
            ep_norm.append(L / np.where(L_bar > 0, L_bar, np.nan))
        check_finite(model.params)
        if len(val_idx):
            val_L, val_norm = evaluate_loss(model, states[val_idx], ctx[val_idx], top, val_starts)
        else:
            val_L = val_norm = float("nan")
        row = {
            "epoch": epoch,
            "horizon": horizon,
            "train_L": float(np.mean(np.concatenate(ep_L))),
            "train_Lnorm": float(np.nanmean(np.concatenate(ep_norm))),
            "val_L": val_L,
            "val_Lnorm": val_norm,
            "seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        log.info("epoch %d h=%d train_Lnorm=%.4f val_Lnorm=%.4f (%.1fs)", epoch, horizon,
                 row["train_Lnorm"], val_norm, row["seconds"])
        score = val_norm if np.isfinite(val_norm) else row["train_Lnorm"]
        if score < best_val:
            best_val, best_epoch, best = score, epoch, model.snapshot()
    model.restore(best)
    if log_path is not None:
        write_log(log_path, rows)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return TrainResult(model, rows, best_epoch, float(best_val))


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def initial_train_lnorm(model, episodes, horizon=1):
    """Matched L_norm of an untrained model over every feasible window."""
    states, ctx = _stack_episodes(episodes)
    return evaluate_loss(model, states, ctx, horizon)[1]

