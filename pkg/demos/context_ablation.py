"""Does seeing the obstacle help?

Boids episodes each place the obstacle and goal at random.  A SwarmNet that
receives this context vector is compared with one that does not, over
several seeds, at the 40-step horizon.  The context-blind model can only
guess where the flock will bend.

    python demos/context_ablation.py --seeds 3 --episodes 300 --epochs 10
"""
import argparse

from swarmnet import SimConfig, SwarmNetConfig, TrainRunConfig, make_dataset, train
from swarmnet import evalbench as eb

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, default=3)
parser.add_argument("--episodes", type=int, default=300)
parser.add_argument("--epochs", type=int, default=10)
args = parser.parse_args()

sim = SimConfig()
test_eps = make_dataset("boids", sim, 100, 10**6)
copy = eb.evaluate(eb.CopyBaseline(7), test_eps, [5, 40], "boids", "copy")
print(f"copy baseline: h5 {copy.Lnorm_mean[0]:.2f}  h40 {copy.Lnorm_mean[1]:.1f}")

wins = 0
for seed in range(args.seeds):
    train_eps = make_dataset("boids", sim, args.episodes, 1000 * seed)
    scores = {}
    for variant in ("swarmnet_context", "swarmnet"):
        mc, rc = eb.variant_configs(variant, SwarmNetConfig(init_seed=seed),
                                    TrainRunConfig(epochs=args.epochs, seed=seed, windows_per_episode=8))
        model = train(train_eps, mc, rc).model
        scores[variant] = eb.evaluate(model, test_eps, [5, 40], "boids", variant, seed).Lnorm_mean
    wins += scores["swarmnet_context"][1] < scores["swarmnet"][1]
    print(f"seed {seed}: h40 with context {scores['swarmnet_context'][1]:.2f}, "
          f"without {scores['swarmnet'][1]:.2f}")

p = eb.sign_test(wins, args.seeds)
print(f"context better in {wins}/{args.seeds} seeds (one-sided sign test p={p:.3f})")
