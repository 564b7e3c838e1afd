"""Learned swarm dynamics on plain numpy: simulators for three swarm models,
a graph-convolutional multistep predictor with its own reverse-mode
autodiff, curriculum training, stochastic rollouts, closed-loop clone
swarms and an evaluation bench."""

from .config import RunConfig
from .model import SwarmNet, SwarmNetConfig
from .rollout import NoiseConfig, clone_swarm, predict, sample_plus
from .swarmgen import SimConfig, make_dataset, read_dataset, simulate, write_dataset
from .trainer import TrainRunConfig, train

__version__ = "0.1.0"
