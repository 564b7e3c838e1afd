"""Cyclic pursuit, start to finish.

Simulate chaser episodes, train a SwarmNet with the 1 -> 10 step curriculum,
score it against copying the last state, look at the spread of dropout
samples, then let the trained network steer a fresh swarm on its own.

The defaults take a few minutes on one core; ``--episodes 1000 --epochs 30``
is the full desk-scale run.

    python demos/chaser_walkthrough.py --out-dir chaser_demo
"""
import argparse
from pathlib import Path

import numpy as np

from swarmnet import NoiseConfig, SimConfig, SwarmNetConfig, TrainRunConfig, clone_swarm, make_dataset, train
from swarmnet import evalbench as eb
from swarmnet import rollout as ro
from swarmnet import swarmgen as sg

parser = argparse.ArgumentParser()
parser.add_argument("--out-dir", default="chaser_demo")
parser.add_argument("--episodes", type=int, default=300)
parser.add_argument("--epochs", type=int, default=15)
args = parser.parse_args()
out = Path(args.out_dir)
out.mkdir(parents=True, exist_ok=True)

sim = SimConfig()
train_eps = make_dataset("chaser", sim, args.episodes, 0)
test_eps = make_dataset("chaser", sim, 50, 10**6)   # disjoint seeds
print(f"{len(train_eps)} training episodes of {train_eps[0].T} steps, {train_eps[0].N} agents")

# %% training
res = train(train_eps, SwarmNetConfig(), TrainRunConfig(epochs=args.epochs, windows_per_episode=8),
            log_path=out / "train_log.csv", checkpoint_path=out / "chaser.ckpt")
for row in res.log[:: max(1, len(res.log) // 5)]:
    print(f"epoch {row['epoch']:3d}  horizon {row['horizon']:2d}  val Lnorm {row['val_Lnorm']:.4f}")
model = res.model

# %% accuracy against the copy baseline
horizons = [1, 5, 10, 20, 40]
ours = eb.evaluate(model, test_eps, horizons, "chaser")
copy = eb.evaluate(eb.CopyBaseline(model.window), test_eps, horizons, "chaser", "copy")
print(eb.format_table([ours, copy]))

# %% one rollout, drawn over the ground truth
ep = test_eps[0]
w = model.window
pred = ro.predict(model, ep.states[:w], ep.encoded, 40).predicted
eb.plot_trajectories(ep.states, ep.encoded, out / "rollout.svg", pred, start_step=w - 1)

# %% dropout samples spread out as the horizon grows
samples = ro.sample_plus(model, ep.states[:w], ep.encoded, 40, NoiseConfig(dropout=0.1, samples=50))
for step in (4, 14, 29, 39):
    print(f"step {step + 1:2d}: positional spread {ro.positional_dispersion(samples, step):.4f}")
eb.plot_trajectories(ep.states, ep.encoded, out / "samples.svg", samples.predicted, samples.samples,
                     start_step=w - 1)

# %% closed loop: the network's velocities drive a new swarm
rng = np.random.default_rng(3)
initial = sg.spawn("chaser", sim, rng)
traj = clone_swarm(model, initial, np.zeros(model.cfg.context_dim), 50, sim.dt, sim.max_speed("chaser"))
ref = sg.run("chaser", initial, sg.ContextSpec(), sim, 50)
print(f"clone circumradius {sg.circumradius(traj[0]):.2f} -> {sg.circumradius(traj[-1]):.2f}"
      f" (simulator {sg.circumradius(ref[-1]):.2f})")
eb.plot_trajectories(ref, sg.ContextSpec(), out / "clone.svg", traj[1:], title="clone swarm")
