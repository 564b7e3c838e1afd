"""Inference with a trained model: long-horizon prediction, stochastic
sampling with test-time dropout and input noise, and closed-loop control
of a point-mass "clone" swarm."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .diffcore import ParameterError
from .model import check_finite
from .trainer import multistep_unroll


class RolloutConfigError(ValueError):
    pass


class RolloutDivergedError(FloatingPointError):
    def __init__(self, step, detail=""):
        super().__init__(f"closed-loop rollout diverged at step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass
class NoiseConfig:
    dropout: float = 0.1
    sigma: float = 0.0
    samples: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        if self.samples < 1:
            raise ParameterError(f"samples must be >= 1, got {self.samples}")


@dataclass
class RolloutResult:
    predicted: np.ndarray               # [h, N, D]
    mode: str = "deterministic"
    samples: np.ndarray | None = None   # [S, h, N, D]
    dispersion: np.ndarray | None = None  # [h, N, D]


def _check_inputs(model, seed_window, context):
    seed_window = np.asarray(seed_window, dtype=np.float32)
    cfg = model.cfg
    if seed_window.ndim != 3 or seed_window.shape[0] != cfg.window or seed_window.shape[2] != cfg.state_dim:
        raise RolloutConfigError(
            f"seed window has shape {seed_window.shape}, model expects "
            f"({cfg.window}, N, {cfg.state_dim})")
    context = np.asarray(context, dtype=np.float32).reshape(-1)
    if context.shape[0] != cfg.context_dim:
        raise RolloutConfigError(f"context has {context.shape[0]} entries, model expects {cfg.context_dim}")
    return seed_window, context


def predict(model, seed_window, context, horizon):
    """Deterministic ``horizon``-step rollout from a ``[T_w, N, D]`` seed window."""
    seed_window, context = _check_inputs(model, seed_window, context)
    check_finite(model.params)
    pred = multistep_unroll(model, seed_window[None], context[None], horizon).data[0]
    return RolloutResult(pred)


def sample_plus(model, seed_window, context, horizon, noise):
    """``noise.samples`` stochastic rollouts with fresh dropout masks per forward
    and Gaussian perception noise on every input dimension of the state window."""
    seed_window, context = _check_inputs(model, seed_window, context)
    check_finite(model.params)
    S = noise.samples
    if noise.dropout == 0 and noise.sigma == 0 and S > 1:
        warnings.warn("dropout=0 and sigma=0: all stochastic samples will be identical", stacklevel=2)
    drop_seq, noise_seq = np.random.SeedSequence(noise.seed).spawn(2)
    drop_rng = np.random.default_rng(drop_seq) if noise.dropout > 0 else None
    noise_rng = np.random.default_rng(noise_seq)
    windows = np.repeat(seed_window[None], S, axis=0)
    ctx = np.repeat(context[None], S, axis=0)
    samples = multistep_unroll(model, windows, ctx, horizon, dropout=noise.dropout, rng=drop_rng,
                               noise_sigma=noise.sigma, noise_rng=noise_rng).data
    # deviations from one sample keep identical samples at exactly zero spread
    dispersion = (samples - samples[:1]).astype(np.float64).std(axis=0)
    return RolloutResult(samples.mean(axis=0), "stochastic", samples, dispersion)


def positional_dispersion(result, step):
    """Mean over agents of the x/y standard deviation at ``step``."""
    return float(result.dispersion[step, :, :2].mean())


@dataclass
class MarginalHistograms:
    step: int
    edges: np.ndarray   # [N, 2, bins + 1]
    masses: np.ndarray  # [N, 2, bins]


def marginal_histograms(samples, step, bins=20, min_samples=30):
    """Normalised per-agent histograms of x and y across samples at one step."""
    samples = np.asarray(samples)
    if samples.ndim != 4:
        raise ParameterError(f"samples must be [S, h, N, D], got {samples.shape}")
    S, h, N, _ = samples.shape
    if S < min_samples:
        raise ParameterError(f"need at least {min_samples} samples for histograms, got {S}")
    if not 0 <= step < h:
        raise IndexError(f"step {step} outside horizon {h}")
    edges = np.empty((N, 2, bins + 1))
    masses = np.empty((N, 2, bins))
    for i in range(N):
        for axis in range(2):
            values = samples[:, step, i, axis].astype(np.float64)
            counts, e = np.histogram(values, bins=bins)
            edges[i, axis] = e
            masses[i, axis] = counts / counts.sum()
    return MarginalHistograms(step, edges, masses)


def bimodality_coefficient(values):
    """Sarle's bimodality coefficient; above 5/9 suggests more than one mode."""
    from scipy.stats import kurtosis, skew

    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    if n < 4 or np.all(x == x[0]):
        return 0.0
    g = skew(x, bias=False)
    k = kurtosis(x, bias=False)
    return float((g * g + 1) / (k + 3 * (n - 1) ** 2 / ((n - 2) * (n - 3))))


UNIFORM_BIMODALITY = 5.0 / 9.0


def clone_swarm(model, initial_states, context, steps, dt=0.1, max_speed=np.inf,
                arena=10.0, trace=None):
    """Drive a point-mass swarm with the model's predicted velocities.

    At every control step the model sees a window of *realised* plant
    states (the initial state replicated T_w times to start), its predicted
    next velocity becomes each agent's command, and the plant integrates
    ``position += command * dt``.  Returns ``[steps + 1, N, 4]``.
    """
    initial = np.asarray(initial_states, dtype=np.float32)
    cfg = model.cfg
    if initial.ndim != 2 or initial.shape[1] != cfg.state_dim:
        raise RolloutConfigError(f"initial states {initial.shape} do not match model D={cfg.state_dim}")
    context = np.asarray(context, dtype=np.float32).reshape(1, -1)
    if context.shape[1] != cfg.context_dim:
        raise RolloutConfigError(f"context has {context.shape[1]} entries, model expects {cfg.context_dim}")
    check_finite(model.params)
    history = [initial] * model.window
    out = [initial]
    for t in range(1, steps + 1):
        window = np.stack(history[-model.window:])[None]
        if trace is not None:
            trace.append(window[0].copy())
        pred = model.predict_next(window, context).data[0]
        command = pred[:, 2:4].astype(np.float64)
        speed = np.linalg.norm(command, axis=1, keepdims=True)
        if np.isfinite(max_speed):
            command = np.where(speed > max_speed, command * max_speed / np.maximum(speed, 1e-12), command)
        pos = out[-1][:, :2].astype(np.float64) + command * dt
        if not np.all(np.isfinite(pos)) or np.abs(pos).max() > 5 * arena:
            raise RolloutDivergedError(t, "agent left 5x arena bounds")
        state = np.concatenate([pos, command], axis=1).astype(np.float32)
        out.append(state)
        history.append(state)
    return np.stack(out)


# -- files -------------------------------------------------------------------

def write_rollout_csv(path, trajectories):
    """``trajectories`` is ``[h, N, 4]`` (one run) or ``[S, h, N, 4]``."""
    arr = np.asarray(trajectories)
    if arr.ndim == 3:
        arr = arr[None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "step", "agent", "px", "py", "vx", "vy"])
        for s in range(arr.shape[0]):
            for t in range(arr.shape[1]):
                for i in range(arr.shape[2]):
                    w.writerow([s, t, i] + [repr(float(v)) for v in arr[s, t, i]])


def read_rollout_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    rows = np.atleast_2d(rows)
    S, h, N = (int(rows[:, k].max()) + 1 for k in range(3))
    out = np.zeros((S, h, N, 4), dtype=np.float32)
    idx = rows[:, :3].astype(int)
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = rows[:, 3:]
    return out


def write_histogram_csv(path, hist):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "axis", "bin_lo", "bin_hi", "mass"])
        N, _, bins = hist.masses.shape
        for i in range(N):
            for axis, label in enumerate("xy"):
                for b in range(bins):
                    w.writerow([i, label, repr(float(hist.edges[i, axis, b])),
                                repr(float(hist.edges[i, axis, b + 1])), repr(float(hist.masses[i, axis, b]))])
