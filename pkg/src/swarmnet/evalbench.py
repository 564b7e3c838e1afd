"""Desk-scale versions of the prediction-accuracy experiments: horizon
losses per dataset, component ablations, training-set-size sweeps, and SVG
trajectory plots.

Reported L_norm uses the natural skip of the whole test episode.  Spreads
are sample standard deviations (ddof=1) across test episodes.  Every report
carries a copy-last-state calibration row normalised over the matched
transitions, which must read exactly 1.
"""

from __future__ import annotations

import csv
import html
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import binomtest

from .model import SwarmNetConfig, canonical_json
from .swarmgen import ContextSpec
from .trainer import HorizonTooLongError, NormalizationUndefinedError, TrainRunConfig, multistep_unroll, natural_skip, train

REPORT_COLUMNS = ["dataset", "variant", "horizon", "seed", "L", "Lnorm_mean", "Lnorm_std", "episodes", "seconds"]
CALIBRATION_VARIANT = "copy-baseline(matched)"

# model-config / run-config overrides approximating each ablation row
VARIANTS = {
    "decoder": ({"temporal_encoder": "markov", "use_context": False}, {"curriculum": False}),
    "decoder_context": ({"temporal_encoder": "markov", "use_context": True}, {"curriculum": False}),
    "decoder_conv1d": ({"temporal_encoder": "conv1d", "use_context": False}, {"curriculum": False}),
    "decoder_conv1d_context": ({"temporal_encoder": "conv1d", "use_context": True}, {"curriculum": False}),
    "swarmnet_context": ({"temporal_encoder": "conv1d", "use_context": True}, {"curriculum": True}),
    "swarmnet": ({"temporal_encoder": "conv1d", "use_context": False}, {"curriculum": True}),
}
TABLE2_VARIANTS = ["decoder", "decoder_context", "decoder_conv1d", "decoder_conv1d_context", "swarmnet_context"]


class CopyBaseline:
    """Pseudo-model that repeats the last observed state."""

    def __init__(self, window=7):
        self.window = window

    def rollout(self, windows, context, horizon):
        return np.repeat(np.asarray(windows)[:, -1:], horizon, axis=1)


def rollout_batch(predictor, windows, context, horizon):
    if hasattr(predictor, "rollout"):
        return predictor.rollout(windows, context, horizon)
    return multistep_unroll(predictor, windows, context, horizon).data


@dataclass
class EvalReport:
    dataset: str
    variant: str
    horizons: list
    L_mean: list
    Lnorm_mean: list
    Lnorm_std: list
    Lnorm_matched_mean: list
    episodes: int
    seconds: float
    seed: int = 0
    note: str = ""
    per_episode: dict = field(default_factory=dict, repr=False)
    per_episode_matched: dict = field(default_factory=dict, repr=False)

    def at(self, horizon):
        k = self.horizons.index(horizon)
        return {"L": self.L_mean[k], "Lnorm_mean": self.Lnorm_mean[k], "Lnorm_std": self.Lnorm_std[k],
                "Lnorm_matched": self.Lnorm_matched_mean[k]}

    def rows(self):
        return [{
            "dataset": self.dataset, "variant": self.variant, "horizon": h, "seed": self.seed,
            "L": self.L_mean[k], "Lnorm_mean": self.Lnorm_mean[k], "Lnorm_std": self.Lnorm_std[k],
            "episodes": self.episodes, "seconds": self.seconds,
        } for k, h in enumerate(self.horizons)]


def _std(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def evaluate(predictor, episodes, horizons=(5, 40), dataset="", variant="swarmnet", seed=0,
             context_steps=None, batch=256):
    """Seed each test episode with its first ``context_steps`` states, unroll
    to the largest horizon and score every prefix horizon against ground truth.

    ``context_steps`` defaults to the predictor's window; pass a common value
    to score models with different windows on the same target steps.
    """
    t0 = time.perf_counter()
    horizons = sorted(int(h) for h in horizons)
    window = predictor.window
    start = window if context_steps is None else context_steps
    if start < window:
        raise ValueError(f"context_steps={start} shorter than model window {window}")
    states = np.stack([ep.states for ep in episodes])
    ctx = np.stack([ep.encoded for ep in episodes])
    E, T = states.shape[:2]
    top = horizons[-1]
    if start + top > T:
        raise HorizonTooLongError(top, T - start)
    preds = np.concatenate([
        rollout_batch(predictor, states[b:b + batch, start - window:start], ctx[b:b + batch], top)
        for b in range(0, E, batch)
    ])
    skips = []
    for s in states:
        try:
            skips.append(natural_skip(s))
        except NormalizationUndefinedError:
            skips.append(np.nan)
    skips = np.asarray(skips)
    out = {"L": [], "Lnorm_mean": [], "Lnorm_std": [], "Lnorm_matched": []}
    per_episode, per_episode_matched = {}, {}
    for h in horizons:
        truth = states[:, start:start + h].astype(np.float64)
        L = 0.5 * np.mean((preds[:, :h] - truth) ** 2, axis=(1, 2, 3))
        matched = 0.5 * np.mean((states[:, start - 1:start - 1 + h] - truth) ** 2, axis=(1, 2, 3))
        norm = L[np.isfinite(skips)] / skips[np.isfinite(skips)]
        with np.errstate(divide="ignore", invalid="ignore"):
            norm_m = L / matched
        out["L"].append(float(L.mean()))
        out["Lnorm_mean"].append(float(norm.mean()) if len(norm) else float("nan"))
        out["Lnorm_std"].append(_std(norm))
        out["Lnorm_matched"].append(float(np.nanmean(norm_m)))
        per_episode[h] = norm
        per_episode_matched[h] = norm_m
    note = "" if np.all(np.isfinite(skips)) else f"{int(np.sum(~np.isfinite(skips)))} stationary episodes excluded from Lnorm"
    return EvalReport(dataset, variant, horizons, out["L"], out["Lnorm_mean"], out["Lnorm_std"],
                      out["Lnorm_matched"], E, time.perf_counter() - t0, seed, note, per_episode,
                      per_episode_matched)


def calibration(episodes, dataset="", window=7):
    """Copy-last-state at h=1 normalised over the matched transition (reads 1)."""
    rep = evaluate(CopyBaseline(window), episodes, [1], dataset, CALIBRATION_VARIANT)
    ratio = rep.per_episode_matched[1]
    ratio = ratio[np.isfinite(ratio)]
    rep.Lnorm_mean = [float(ratio.mean())]
    rep.Lnorm_std = [_std(ratio)]
    return rep


def write_report_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_report_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(reports):
    """Plain-text table: one row per report, one column per horizon."""
    horizons = sorted({h for r in reports for h in r.horizons})
    head = f"{'dataset':<10}{'variant':<26}{'seed':>5}" + "".join(f"{f'h={h}':>22}" for h in horizons)
    lines = [head, "-" * len(head)]
    for r in reports:
        cells = []
        for h in horizons:
            if h in r.horizons:
                v = r.at(h)
                cells.append(f"{v['Lnorm_mean']:>12.4g} ± {v['Lnorm_std']:<7.3g}")
            else:
                cells.append(f"{'':>22}")
        lines.append(f"{r.dataset:<10}{r.variant:<26}{r.seed:>5}" + "".join(cells) + (f"  [{r.note}]" if r.note else ""))
    return "\n".join(lines)


def variant_configs(name, model_cfg, run_cfg):
    model_over, run_over = VARIANTS[name]
    return replace(model_cfg, **model_over), replace(run_cfg, **run_over)


def _failed(dataset, variant, horizons, seed, exc):
    nan = [float("nan")] * len(horizons)
    return EvalReport(dataset, variant, list(horizons), nan, nan, nan, nan, 0, 0.0, seed,
                      f"failed: {type(exc).__name__}: {exc}")


def _train_and_eval(train_eps, test_eps, model_cfg, run_cfg, horizons, dataset, variant, seed, context_steps):
    t0 = time.perf_counter()
    try:
        result = train(train_eps, model_cfg, run_cfg)
        rep = evaluate(result.model, test_eps, horizons, dataset, variant, seed, context_steps)
    except (ArithmeticError, ValueError) as exc:
        return _failed(dataset, variant, horizons, seed, exc)
    rep.seconds = time.perf_counter() - t0
    return rep


def _run_cells(cells, jobs):
    if jobs <= 1:
        return [fn(*args) for fn, args in cells]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *args) for fn, args in cells]
        return [f.result() for f in futures]


def ablation_suite(train_eps, test_eps, variants=None, model_cfg=None, run_cfg=None,
                   horizons=(5, 40), dataset="boids", seeds=(0,), jobs=1):
    """Train every variant with identical seeds, splits and epochs; one report per (variant, seed).

    All variants are scored on the same target steps (after the longest
    window), so markov and conv1d rows compare like with like.
    """
    variants = list(variants or TABLE2_VARIANTS)
    model_cfg = model_cfg or SwarmNetConfig()
    run_cfg = run_cfg or TrainRunConfig()
    context_steps = max(replace(model_cfg, temporal_encoder="conv1d").window, model_cfg.window)
    cells = []
    for name in variants:
        for seed in seeds:
            mc, rc = variant_configs(name, model_cfg, run_cfg)
            mc, rc = replace(mc, init_seed=seed), replace(rc, seed=seed)
            cells.append((_train_and_eval, (train_eps, test_eps, mc, rc, horizons, dataset, name, seed, context_steps)))
    reports = _run_cells(cells, jobs)
    return [calibration(test_eps, dataset, context_steps)] + reports


@dataclass
class SweepSpec:
    sizes: list
    horizons: list = field(default_factory=lambda: [1, 5, 10, 20, 40])
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        if not self.sizes or any(s <= 0 for s in self.sizes) or list(self.sizes) != sorted(self.sizes):
            raise ValueError(f"sweep sizes must be positive and ascending, got {self.sizes}")


def sample_size_sweep(spec, make_episodes, test_eps, model_cfg=None, run_cfg=None, dataset="boids", jobs=1):
    """One trained model per (size, seed); ``make_episodes(count, seed)`` supplies training data."""
    model_cfg = model_cfg or SwarmNetConfig()
    run_cfg = run_cfg or TrainRunConfig()
    cells = []
    for size in spec.sizes:
        for seed in spec.seeds:
            eps = make_episodes(size, seed)
            mc, rc = replace(model_cfg, init_seed=seed), replace(run_cfg, seed=seed)
            cells.append((_train_and_eval, (eps, test_eps, mc, rc, spec.horizons, dataset, f"n={size}", seed, None)))
    return _run_cells(cells, jobs)


def sign_test(wins, trials):
    """One-sided binomial sign test p-value for ``wins`` successes out of ``trials``."""
    return float(binomtest(wins, trials, 0.5, alternative="greater").pvalue)


# -- SVG plotting ----------------------------------------------------------------

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"]


def _points(xs, ys, tx, ty):
    return " ".join(f"{tx(x):.2f},{ty(y):.2f}" for x, y in zip(xs, ys))


def plot_trajectories(truth, context, path, prediction=None, samples=None, title="",
                      start_step=0, provenance=None, size=600):
    """Write an SVG with dashed gray ground truth, per-agent arrow chains for
    the prediction, faint sample traces (stochastic mode), obstacles as
    black circles and the goal as a star-shaped marker."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim != 3 or truth.shape[2] < 2:
        raise ValueError(f"ground truth must be [T, N, >=2], got {truth.shape}")
    if not isinstance(context, ContextSpec):
        context = ContextSpec.from_encoded(context)
    N = truth.shape[1]
    pts = [truth[..., :2].reshape(-1, 2)]
    if prediction is not None and len(prediction):
        prediction = np.asarray(prediction, dtype=np.float64)
        pts.append(prediction[..., :2].reshape(-1, 2))
    if samples is not None:
        samples = np.asarray(samples, dtype=np.float64)
        pts.append(samples[..., :2].reshape(-1, 2))
    for (cx, cy), r in context.obstacles:
        pts.append(np.array([[cx - r, cy - r], [cx + r, cy + r]]))
    if context.goal is not None:
        pts.append(np.array([context.goal]))
    allp = np.concatenate(pts)
    lo, hi = allp.min(0), allp.max(0)
    span = max(float((hi - lo).max()), 1e-6) * 1.1
    mid = (lo + hi) / 2
    margin, plot = 40, size - 80

    def tx(x):
        return margin + (x - mid[0] + span / 2) / span * plot

    def ty(y):
        return margin + (mid[1] + span / 2 - y) / span * plot

    def scale(r):
        return r / span * plot

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * ((N + 3) // 4)}" '
           f'viewBox="0 0 {size} {size + 20 * ((N + 3) // 4)}">']
    if provenance is not None:
        out.append(f"<metadata>{html.escape(canonical_json(provenance))}</metadata>")
    out.append("<defs>")
    for i in range(N):
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<marker id="arrow{i}" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="5" '
                   f'markerHeight="5" orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="{c}"/></marker>')
    out.append("</defs>")
    out.append(f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>')
    if title:
        out.append(f'<text x="{size / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="16">{html.escape(title)}</text>')
    for (cx, cy), r in context.obstacles:
        out.append(f'<circle class="obstacle" cx="{tx(cx):.2f}" cy="{ty(cy):.2f}" r="{scale(r):.2f}" fill="black"/>')
    if context.goal is not None:
        gx, gy = tx(context.goal[0]), ty(context.goal[1])
        out.append(f'<path class="goal" d="M{gx - 7:.2f},{gy - 7:.2f} L{gx + 7:.2f},{gy + 7:.2f} '
                   f'M{gx - 7:.2f},{gy + 7:.2f} L{gx + 7:.2f},{gy - 7:.2f}" stroke="black" stroke-width="3"/>')
    if samples is not None:
        for i in range(N):
            c = PALETTE[i % len(PALETTE)]
            for s in range(samples.shape[0]):
                out.append(f'<polyline class="sample" points="{_points(samples[s, :, i, 0], samples[s, :, i, 1], tx, ty)}" '
                           f'fill="none" stroke="{c}" stroke-opacity="0.12" stroke-width="1"/>')
    for i in range(N):
        out.append(f'<polyline class="truth" points="{_points(truth[:, i, 0], truth[:, i, 1], tx, ty)}" '
                   f'fill="none" stroke="#888888" stroke-dasharray="5,4" stroke-width="1.5"/>')
    if prediction is not None and len(prediction):
        for i in range(N):
            c = PALETTE[i % len(PALETTE)]
            chain = np.concatenate([truth[start_step:start_step + 1, i, :2], prediction[:, i, :2]]) \
                if 0 <= start_step < len(truth) else prediction[:, i, :2]
            for a, b in zip(chain[:-1], chain[1:]):
                out.append(f'<line class="pred" x1="{tx(a[0]):.2f}" y1="{ty(a[1]):.2f}" x2="{tx(b[0]):.2f}" '
                           f'y2="{ty(b[1]):.2f}" stroke="{c}" stroke-width="1.5" marker-end="url(#arrow{i})"/>')
    if prediction is not None and len(prediction) or samples is not None:
        for i in range(N):
            c = PALETTE[i % len(PALETTE)]
            x, y = 20 + 140 * (i % 4), size + 14 + 20 * (i // 4)
            out.append(f'<g class="legend"><rect x="{x}" y="{y - 10}" width="12" height="12" fill="{c}"/>'
                       f'<text x="{x + 18}" y="{y}" font-family="sans-serif" font-size="12">agent {i}</text></g>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text
