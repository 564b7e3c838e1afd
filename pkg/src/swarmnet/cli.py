"""Command-line entry point.

Precedence for every setting: explicit flag, then config file, then
built-in default.  The global seed comes from ``--seed``, else the
``SWARMNET_SEED`` environment variable, else the config file.  Every output
path is taken relative to ``--out-dir``.

Exit codes: 0 success, 1 I/O or unreadable artifact, 2 usage or
configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import evalbench, rollout, swarmgen, trainer
from .config import ConfigError, RunConfig
from .model import CheckpointError, SwarmNet, canonical_json

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SIDECAR_SUFFIX = ".config.json"


class UsageError(ValueError):
    pass


# -- provenance ------------------------------------------------------------------

def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(command, cfg, params, inputs=()):
    """Resolved config plus command parameters and input digests (by file name)."""
    return {
        "command": command,
        "config": cfg.to_dict(),
        "params": params,
        "inputs": {Path(p).name: file_digest(p) for p in inputs},
    }


def write_sidecar(path, prov):
    Path(str(path) + SIDECAR_SUFFIX).write_text(canonical_json(prov) + "\n")


def read_sidecar(path):
    import json

    return json.loads(Path(str(path) + SIDECAR_SUFFIX).read_text())


# -- helpers ------------------------------------------------------------------------

def _ints(text):
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _resolve_seed(args, file_seed):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SWARMNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SWARMNET_SEED must be an integer, got {env!r}")
    return file_seed


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    seed = _resolve_seed(args, None)
    if seed is not None:
        cfg = cfg.with_overrides(train={"seed": seed}, model={"init_seed": seed}, noise={"seed": seed})
    return cfg


def _out(args, name):
    path = Path(args.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_dataset(path):
    return swarmgen.read_dataset(path)


def _load_checkpoint(path):
    return SwarmNet.load(path)


def _episode(episodes, index):
    if not 0 <= index < len(episodes):
        raise UsageError(f"episode index {index} outside dataset of {len(episodes)} episodes")
    return episodes[index]


def _check_dims(model, ep):
    cfg = model.cfg
    if ep.states.shape[2] != cfg.state_dim or len(ep.encoded) != cfg.context_dim:
        raise UsageError(
            f"dimension mismatch: data has states {ep.states.shape} and context ({len(ep.encoded)},), "
            f"checkpoint expects state_dim={cfg.state_dim} and context_dim={cfg.context_dim}")


def _dataset_tag(episodes):
    return episodes[0].model_tag if episodes else ""


# -- commands ----------------------------------------------------------------------

def cmd_generate(args):
    cfg = load_config(args)
    sim = {"N": args.agents, "T": args.steps}
    cfg = cfg.with_overrides(sim=sim)
    seed = _resolve_seed(args, 0)
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    path = _out(args, args.out)
    episodes = swarmgen.make_dataset(args.model, cfg.sim, args.episodes, seed, path)
    write_sidecar(path, provenance("generate", cfg, {"model": args.model, "episodes": args.episodes, "seed": seed}))
    ep = episodes[0]
    print(f"wrote {path}: episodes={len(episodes)} T={ep.T} N={ep.N} d_c={len(ep.encoded)} "
          f"bytes={path.stat().st_size}")


def _train_cfg(args, cfg, episodes):
    train_over = {
        "epochs": args.epochs,
        "max_horizon": args.max_horizon,
        "windows_per_episode": args.windows_per_episode,
        "batch_size": args.batch_size,
    }
    if args.no_curriculum:
        train_over["curriculum"] = False
    model_over = {"context_dim": len(episodes[0].encoded), "state_dim": episodes[0].states.shape[2]}
    if args.encoder:
        model_over["temporal_encoder"] = args.encoder
    if args.no_context:
        model_over["use_context"] = False
    return cfg.with_overrides(train=train_over, model=model_over)


def cmd_train(args):
    cfg = load_config(args)
    episodes = _load_dataset(args.data)
    cfg = _train_cfg(args, cfg, episodes)
    ckpt, log_path = _out(args, args.out_checkpoint), _out(args, args.log)
    prov = provenance("train", cfg, {}, [args.data])
    result = trainer.train(episodes, cfg.model, cfg.train, log_path, ckpt, prov)
    write_sidecar(log_path, prov)
    print(f"trained {len(result.log)} epochs; best epoch {result.best_epoch} "
          f"val_Lnorm={result.best_val_Lnorm:.6g}; wrote {ckpt} and {log_path}")


def _report(args, cfg, reports, command, inputs):
    path = _out(args, args.report)
    evalbench.write_report_csv(path, reports)
    write_sidecar(path, provenance(command, cfg, {"horizons": cfg.eval.horizons}, inputs))
    print("L_norm mean ± std over test episodes (std with ddof=1)")
    print(evalbench.format_table(reports))
    print(f"wrote {path}")


def cmd_eval(args):
    cfg = load_config(args)
    if args.horizons:
        cfg = cfg.with_overrides(eval={"horizons": args.horizons})
    episodes = _load_dataset(args.data)
    models = [_load_checkpoint(p) for p in args.checkpoints]
    for m in models:
        _check_dims(m, episodes[0])
    start = max(m.window for m in models)
    tag = _dataset_tag(episodes)
    reports = [evalbench.calibration(episodes, tag, start)]
    for path, m in zip(args.checkpoints, models):
        reports.append(evalbench.evaluate(m, episodes, cfg.eval.horizons, tag, Path(path).stem,
                                          cfg.train.seed, context_steps=start))
    _report(args, cfg, reports, "eval", [args.data, *args.checkpoints])


def _ablate_cfg(args, cfg):
    over = {"horizons": args.horizons, "jobs": args.jobs}
    cfg = cfg.with_overrides(eval=over, train={"epochs": args.epochs, "windows_per_episode": args.windows_per_episode})
    return cfg


def cmd_ablate(args):
    cfg = _ablate_cfg(args, load_config(args))
    train_eps, test_eps = _load_dataset(args.data), _load_dataset(args.test_data)
    cfg = cfg.with_overrides(model={"context_dim": len(train_eps[0].encoded)})
    variants = args.variants.split(",") if args.variants else evalbench.TABLE2_VARIANTS
    unknown = [v for v in variants if v not in evalbench.VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(evalbench.VARIANTS)}")
    seeds = args.seeds or [cfg.train.seed]
    reports = evalbench.ablation_suite(train_eps, test_eps, variants, cfg.model, cfg.train,
                                       cfg.eval.horizons, _dataset_tag(test_eps), seeds, cfg.eval.jobs)
    _report(args, cfg, reports, "ablate", [args.data, args.test_data])


def cmd_sweep(args):
    cfg = _ablate_cfg(args, load_config(args))
    if args.sizes:
        cfg = cfg.with_overrides(eval={"sweep_sizes": args.sizes})
    spec = evalbench.SweepSpec(cfg.eval.sweep_sizes, cfg.eval.horizons, args.seeds or [cfg.train.seed])
    cfg = cfg.with_overrides(model={"context_dim": cfg.sim.context_dim})
    test_eps = swarmgen.make_dataset(args.model, cfg.sim, cfg.eval.test_episodes, cfg.eval.test_seed)

    def make(count, seed):
        return swarmgen.make_dataset(args.model, cfg.sim, count, 1000 * seed)

    reports = evalbench.sample_size_sweep(spec, make, test_eps, cfg.model, cfg.train, args.model, cfg.eval.jobs)
    _report(args, cfg, [evalbench.calibration(test_eps, args.model)] + reports, "sweep", [])


def _seed_window(model, ep, start):
    start = model.window if start is None else start
    if start < model.window or start > ep.T:
        raise UsageError(f"--start must lie in [{model.window}, {ep.T}], got {start}")
    return ep.states[start - model.window:start], start


def _write_traj(args, path, arr, prov):
    path = _out(args, path)
    rollout.write_rollout_csv(path, arr)
    write_sidecar(path, prov)
    return path


def cmd_rollout(args):
    cfg = load_config(args)
    model = _load_checkpoint(args.checkpoint)
    ep = _episode(_load_dataset(args.data), args.episode)
    _check_dims(model, ep)
    window, start = _seed_window(model, ep, args.start)
    res = rollout.predict(model, window, ep.encoded, args.horizon)
    prov = provenance("rollout", cfg, {"episode": args.episode, "horizon": args.horizon, "start": start},
                      [args.checkpoint, args.data])
    path = _write_traj(args, args.out, res.predicted, prov)
    if args.plot:
        evalbench.plot_trajectories(ep.states, ep.encoded, _out(args, args.plot), res.predicted,
                                    title=f"{ep.model_tag} episode {args.episode}", start_step=start - 1,
                                    provenance=prov)
    print(f"wrote {path}")


def cmd_sample(args):
    cfg = load_config(args)
    cfg = cfg.with_overrides(noise={"samples": args.samples, "dropout": args.dropout, "sigma": args.sigma})
    model = _load_checkpoint(args.checkpoint)
    ep = _episode(_load_dataset(args.data), args.episode)
    _check_dims(model, ep)
    window, start = _seed_window(model, ep, args.start)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = rollout.sample_plus(model, window, ep.encoded, args.horizon, cfg.noise)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    prov = provenance("sample", cfg, {"episode": args.episode, "horizon": args.horizon, "start": start},
                      [args.checkpoint, args.data])
    path = _write_traj(args, args.out, res.samples, prov)
    if args.hist:
        step = args.hist_step if args.hist_step is not None else args.horizon - 1
        hist = rollout.marginal_histograms(res.samples, step, cfg.eval.bins, min_samples=1)
        hpath = _out(args, args.hist)
        rollout.write_histogram_csv(hpath, hist)
        write_sidecar(hpath, prov)
    if args.plot:
        evalbench.plot_trajectories(ep.states, ep.encoded, _out(args, args.plot), res.predicted, res.samples,
                                    title=f"{ep.model_tag} episode {args.episode}, {args.samples} samples",
                                    start_step=start - 1, provenance=prov)
    print(f"wrote {path} ({args.samples} samples, mean step-{args.horizon} dispersion "
          f"{rollout.positional_dispersion(res, args.horizon - 1):.4g})")


def cmd_clone(args):
    cfg = load_config(args)
    seed = _resolve_seed(args, 0)
    model = _load_checkpoint(args.checkpoint)
    agent_seq, ctx_seq = np.random.SeedSequence(seed).spawn(2)
    ctx = swarmgen.sample_context(args.model, cfg.sim, np.random.default_rng(ctx_seq))
    initial = swarmgen.spawn(args.model, cfg.sim, np.random.default_rng(agent_seq))
    encoded = ctx.encode(cfg.sim.max_obstacles)
    if len(encoded) != model.cfg.context_dim or initial.shape[1] != model.cfg.state_dim:
        raise UsageError(f"dimension mismatch: spawn states {initial.shape} and context ({len(encoded)},), "
                         f"checkpoint expects state_dim={model.cfg.state_dim} and context_dim={model.cfg.context_dim}")
    traj = rollout.clone_swarm(model, initial, encoded, args.steps, cfg.sim.dt, cfg.sim.max_speed(args.model),
                               cfg.sim.arena)
    reference = swarmgen.run(args.model, initial, ctx, cfg.sim, args.steps)
    prov = provenance("clone", cfg, {"model": args.model, "steps": args.steps, "seed": seed}, [args.checkpoint])
    path = _write_traj(args, args.out, traj, prov)
    if args.plot:
        evalbench.plot_trajectories(reference, ctx, _out(args, args.plot), traj[1:],
                                    title=f"clone swarm ({args.model} policy)", start_step=0, provenance=prov)
    r0, r1 = swarmgen.circumradius(traj[0]), swarmgen.circumradius(traj[-1])
    print(f"wrote {path}: circumradius {r0:.3f} -> {r1:.3f}")


def cmd_plot(args):
    cfg = load_config(args)
    ep = _episode(_load_dataset(args.data), args.episode)
    pred, samples, inputs = None, None, [args.data]
    if args.rollout:
        arr = rollout.read_rollout_csv(args.rollout)
        inputs.append(args.rollout)
        if arr.shape[0] == 1:
            pred = arr[0]
        else:
            samples, pred = arr, arr.mean(axis=0)
        if arr.shape[2] != ep.N:
            raise UsageError(f"dimension mismatch: rollout has {arr.shape[2]} agents, episode has {ep.N}")
    prov = provenance("plot", cfg, {"episode": args.episode, "start": args.start}, inputs)
    path = _out(args, args.out)
    evalbench.plot_trajectories(ep.states, ep.encoded, path, pred, samples,
                                title=f"{ep.model_tag} episode {args.episode}", start_step=args.start - 1,
                                provenance=prov)
    print(f"wrote {path}")


# -- parser ------------------------------------------------------------------------

def build_parser():
    def add_globals(parser, suppress):
        # accepted before or after the subcommand; SUPPRESS keeps the
        # subcommand parser from overwriting a value given up front
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--out-dir", default=dflt("."), help="directory all outputs are written under")
        parser.add_argument("--seed", type=int, default=dflt(None), help="global seed (falls back to SWARMNET_SEED)")
        parser.add_argument("--config", default=dflt(None), help="JSON run config with sections sim/model/train/noise/eval")
        parser.add_argument("-v", "--verbose", action="store_true", default=dflt(False))

    p = argparse.ArgumentParser(prog="swarmnet", description="Swarm dynamics lab: simulate, train, evaluate, roll out.")
    add_globals(p, False)
    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, True)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate a dataset of episodes")
    g.add_argument("--model", required=True, choices=swarmgen.MODEL_TAGS)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--agents", type=int, default=None)
    g.add_argument("--steps", type=int, default=None, help="recorded states per episode")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out-checkpoint", default="model.ckpt")
    t.add_argument("--log", default="train_log.csv")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--max-horizon", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--windows-per-episode", type=int, default=None)
    t.add_argument("--no-curriculum", action="store_true")
    t.add_argument("--no-context", action="store_true")
    t.add_argument("--encoder", choices=["conv1d", "markov"], default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score checkpoints on a test dataset")
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizons", type=_ints, default=None)
    e.add_argument("--report", default="eval_report.csv")
    e.set_defaults(func=cmd_eval)

    for name, func, help_text in [("ablate", cmd_ablate, "train and score model variants"),
                                  ("sweep", cmd_sweep, "train and score across training-set sizes")]:
        a = sub.add_parser(name, parents=[common], help=help_text)
        if name == "ablate":
            a.add_argument("--data", required=True)
            a.add_argument("--test-data", required=True)
            a.add_argument("--variants", default=None, help=f"comma list from {sorted(evalbench.VARIANTS)}")
        else:
            a.add_argument("--model", required=True, choices=swarmgen.MODEL_TAGS)
            a.add_argument("--sizes", type=_ints, default=None)
        a.add_argument("--horizons", type=_ints, default=None)
        a.add_argument("--seeds", type=_ints, default=None)
        a.add_argument("--epochs", type=int, default=None)
        a.add_argument("--windows-per-episode", type=int, default=None)
        a.add_argument("--jobs", type=int, default=None)
        a.add_argument("--report", default=f"{name}_report.csv")
        a.set_defaults(func=func)

    for name, func in [("rollout", cmd_rollout), ("sample", cmd_sample)]:
        r = sub.add_parser(name, parents=[common], help=f"{'deterministic' if name == 'rollout' else 'stochastic'} multistep prediction")
        r.add_argument("--checkpoint", required=True)
        r.add_argument("--data", required=True)
        r.add_argument("--episode", type=int, default=0)
        r.add_argument("--start", type=int, default=None, help="number of observed states (default: model window)")
        r.add_argument("--horizon", type=int, default=40)
        r.add_argument("--out", default=f"{name}.csv")
        r.add_argument("--plot", default=None, help="SVG output path")
        if name == "sample":
            r.add_argument("--samples", type=int, default=None)
            r.add_argument("--dropout", type=float, default=None)
            r.add_argument("--sigma", type=float, default=None)
            r.add_argument("--hist", default=None, help="histogram CSV output path")
            r.add_argument("--hist-step", type=int, default=None)
        r.set_defaults(func=func)

    c = sub.add_parser("clone", parents=[common], help="closed-loop control of a fresh swarm")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--model", required=True, choices=swarmgen.MODEL_TAGS, help="spawn and context distribution")
    c.add_argument("--steps", type=int, default=50)
    c.add_argument("--out", default="clone.csv")
    c.add_argument("--plot", default=None)
    c.set_defaults(func=cmd_clone)

    pl = sub.add_parser("plot", parents=[common], help="plot an episode, optionally with a rollout CSV")
    pl.add_argument("--data", required=True)
    pl.add_argument("--episode", type=int, default=0)
    pl.add_argument("--rollout", default=None)
    pl.add_argument("--start", type=int, default=7)
    pl.add_argument("--out", default="plot.svg")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (swarmgen.DatasetFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
