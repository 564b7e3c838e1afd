"""Ground-truth swarm simulators and the episode dataset format.

Three point-mass models produce demonstrations: Reynolds-style Boids with a
goal and soft obstacle repulsion, a Helbing social-force swarm driven by
exponential repulsion, and a cyclic-pursuit "chaser" swarm.  Every state is
``(px, py, vx, vy)`` and every model is integrated with explicit Euler.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_TAGS = ("boids", "helbing", "chaser")
STATE_DIM = 4

DATASET_MAGIC = b"SWM1"
DATASET_VERSION = 1

# unit vector used when a repulsion direction is undefined (coincident points)
FALLBACK_DIRECTION = np.array([1.0, 0.0])


class ConfigurationError(ValueError):
    pass


class SimulationDivergedError(FloatingPointError):
    def __init__(self, step, model_tag=""):
        super().__init__(f"{model_tag} simulation produced non-finite state at step {step}")
        self.step = step


class DatasetFormatError(ValueError):
    pass


@dataclass
class BoidsParams:
    perception_radius: float = 3.0
    separation_radius: float = 1.0
    w_cohesion: float = 0.5
    w_separation: float = 2.0
    w_alignment: float = 0.3
    w_goal: float = 1.0
    w_obstacle: float = 4.0
    obstacle_range: float = 0.5
    max_speed: float = 2.0


@dataclass
class HelbingParams:
    v0: float = 1.5
    tau: float = 0.5
    A: float = 2.0
    B: float = 0.5
    r: float = 0.3

    @property
    def max_speed(self):
        # v0 = 0 disables the driving force entirely, so nothing to cap against
        return 2.0 * self.v0 if self.v0 > 0 else np.inf


@dataclass
class ChaserParams:
    v_chase: float = 1.5
    omega: float = 2.0
    spawn_radius: float = 5.0

    @property
    def max_speed(self):
        return self.v_chase


@dataclass
class SimConfig:
    dt: float = 0.1
    T: int = 50
    N: int = 5
    arena: float = 10.0
    max_obstacles: int = 1
    boids: BoidsParams = field(default_factory=BoidsParams)
    helbing: HelbingParams = field(default_factory=HelbingParams)
    chaser: ChaserParams = field(default_factory=ChaserParams)

    @property
    def context_dim(self):
        return 3 * self.max_obstacles + 2

    def validate(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.T < 2 or self.N < 1:
            raise ConfigurationError(f"need T >= 2 and N >= 1, got T={self.T}, N={self.N}")
        if self.max_obstacles < 0 or self.arena <= 0:
            raise ConfigurationError("max_obstacles must be >= 0 and arena > 0")
        return self

    def max_speed(self, model_tag):
        return getattr(self, model_tag).max_speed


@dataclass
class ContextSpec:
    """Static environment of an episode: circular obstacles and an optional goal."""

    obstacles: list = field(default_factory=list)
    goal: tuple | None = None

    def __post_init__(self):
        self.obstacles = [(tuple(float(c) for c in center), float(radius)) for center, radius in self.obstacles]
        for _, radius in self.obstacles:
            if not radius > 0:
                raise ConfigurationError(f"obstacle radius must be positive, got {radius}")
        if self.goal is not None:
            self.goal = tuple(float(g) for g in self.goal)

    def encode(self, max_obstacles):
        """Fixed-length vector: (cx, cy, r) per obstacle slot, then (gx, gy)."""
        if len(self.obstacles) > max_obstacles:
            raise ConfigurationError(f"{len(self.obstacles)} obstacles exceed max_obstacles={max_obstacles}")
        vec = np.zeros(3 * max_obstacles + 2, dtype=np.float32)
        for k, ((cx, cy), r) in enumerate(self.obstacles):
            vec[3 * k:3 * k + 3] = (cx, cy, r)
        if self.goal is not None:
            vec[-2:] = self.goal
        return vec

    @classmethod
    def from_encoded(cls, vec):
        vec = np.asarray(vec, dtype=np.float64)
        n_slots = (len(vec) - 2) // 3
        obstacles = []
        for k in range(n_slots):
            cx, cy, r = vec[3 * k:3 * k + 3]
            if r > 0:
                obstacles.append(((cx, cy), r))
        goal = tuple(vec[-2:]) if np.any(vec[-2:] != 0) else None
        return cls(obstacles, goal)


@dataclass(eq=False)
class Episode:
    """One demonstration: ``states`` is T x N x 4 float32."""

    states: np.ndarray
    context: ContextSpec
    model_tag: str
    seed: int
    encoded: np.ndarray = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        if self.states.ndim != 3 or self.states.shape[2] != STATE_DIM:
            raise ConfigurationError(f"episode states must be T x N x {STATE_DIM}, got {self.states.shape}")
        if self.model_tag not in MODEL_TAGS:
            raise ConfigurationError(f"unknown model tag {self.model_tag!r}")
        if self.encoded is None:
            n_slots = max(1, len(self.context.obstacles))
            self.encoded = self.context.encode(n_slots)
        self.encoded = np.asarray(self.encoded, dtype=np.float32)

    @property
    def T(self):
        return self.states.shape[0]

    @property
    def N(self):
        return self.states.shape[1]


def _unit(vectors, fallback=FALLBACK_DIRECTION):
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, vectors / safe, fallback), norms[..., 0]


def _integrate(states, acc, dt, max_speed):
    pos, vel = states[:, :2], states[:, 2:]
    vel = vel + acc * dt
    speed = np.linalg.norm(vel, axis=1, keepdims=True)
    if np.isfinite(max_speed):
        vel = np.where(speed > max_speed, vel * (max_speed / np.where(speed > 0, speed, 1.0)), vel)
    pos = pos + vel * dt
    return np.concatenate([pos, vel], axis=1)


def _obstacle_terms(pos, ctx):
    """Yield (unit direction away from obstacle, surface gap, radius) per obstacle."""
    for center, radius in ctx.obstacles:
        away, dist = _unit(pos - np.asarray(center))
        yield away, dist - radius, radius


def boids_step(states, ctx, cfg):
    states = np.asarray(states, dtype=np.float64)
    if ctx.goal is None:
        raise ConfigurationError("boids_step needs a goal in the context")
    bp = cfg.boids
    pos, vel = states[:, :2], states[:, 2:]
    n = len(states)
    off = pos[:, None, :] - pos[None, :, :]  # [i, j] = p_i - p_j
    away, dist = _unit(off)
    not_self = ~np.eye(n, dtype=bool)

    near = (dist < bp.perception_radius) & not_self
    count = near.sum(axis=1, keepdims=True)
    has = count > 0
    denom = np.where(has, count, 1)
    cohesion = np.where(has, near @ pos / denom - pos, 0.0)
    alignment = np.where(has, near @ vel / denom - vel, 0.0)

    close = (dist < bp.separation_radius) & not_self
    push = np.where(close, 1.0 - dist / bp.separation_radius, 0.0)
    separation = np.einsum("ij,ijk->ik", push, away)

    to_goal, goal_dist = _unit(np.asarray(ctx.goal) - pos, fallback=np.zeros(2))
    acc = (bp.w_cohesion * cohesion + bp.w_separation * separation
           + bp.w_alignment * alignment + bp.w_goal * to_goal)
    for direction, gap, _ in _obstacle_terms(pos, ctx):
        acc = acc + bp.w_obstacle * np.exp(-gap / bp.obstacle_range)[:, None] * direction
    return _integrate(states, acc, cfg.dt, bp.max_speed)


def helbing_pair_force(p_i, p_j, params):
    """Repulsion exerted on agent i by agent j."""
    direction, dist = _unit(np.asarray(p_i, dtype=np.float64) - np.asarray(p_j, dtype=np.float64))
    return params.A * np.exp((2 * params.r - dist) / params.B) * direction


def helbing_step(states, ctx, cfg):
    states = np.asarray(states, dtype=np.float64)
    hp = cfg.helbing
    pos, vel = states[:, :2], states[:, 2:]
    n = len(states)
    acc = np.zeros_like(vel)
    if ctx.goal is not None:
        to_goal, _ = _unit(np.asarray(ctx.goal) - pos, fallback=np.zeros(2))
        acc += (hp.v0 * to_goal - vel) / hp.tau
    away, dist = _unit(pos[:, None, :] - pos[None, :, :])
    mag = np.where(~np.eye(n, dtype=bool), hp.A * np.exp((2 * hp.r - dist) / hp.B), 0.0)
    acc += np.einsum("ij,ijk->ik", mag, away)
    for direction, gap, _ in _obstacle_terms(pos, ctx):
        # exp((r + R - d) / B) with gap = d - R
        acc += hp.A * np.exp((hp.r - gap) / hp.B)[:, None] * direction
    return _integrate(states, acc, cfg.dt, hp.max_speed)


def chaser_step(states, cfg):
    """Cyclic pursuit: agent i turns toward agent (i+1) mod N at bounded rate."""
    states = np.asarray(states, dtype=np.float64)
    n = len(states)
    if n < 2:
        raise ConfigurationError(f"chaser needs at least 2 agents, got {n}")
    cp = cfg.chaser
    pos, vel = states[:, :2], states[:, 2:]
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    to_target = np.roll(pos, -1, axis=0) - pos
    desired = np.arctan2(to_target[:, 1], to_target[:, 0])
    delta = (desired - heading + np.pi) % (2 * np.pi) - np.pi
    max_turn = cp.omega * cfg.dt
    heading = heading + np.clip(delta, -max_turn, max_turn)
    vel = cp.v_chase * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    pos = pos + vel * cfg.dt
    return np.concatenate([pos, vel], axis=1)


def step(model_tag, states, ctx, cfg):
    if model_tag == "boids":
        return boids_step(states, ctx, cfg)
    if model_tag == "helbing":
        return helbing_step(states, ctx, cfg)
    if model_tag == "chaser":
        return chaser_step(states, cfg)
    raise ConfigurationError(f"unknown model tag {model_tag!r}")


def sample_context(model_tag, cfg, rng):
    """Random obstacle and goal placement between the spawn box and the far side."""
    if model_tag == "chaser":
        return ContextSpec()
    a = cfg.arena
    goal = (0.8 * a, rng.uniform(-0.3 * a, 0.3 * a))
    obstacles = []
    for _ in range(cfg.max_obstacles):
        center = (rng.uniform(-0.35 * a, -0.05 * a), rng.uniform(-0.15 * a, 0.15 * a))
        obstacles.append((center, rng.uniform(0.8, 1.5)))
    return ContextSpec(obstacles, goal)


def spawn(model_tag, cfg, rng):
    """Initial N x 4 states."""
    n, a = cfg.N, cfg.arena
    if model_tag == "chaser":
        if n < 2:
            raise ConfigurationError(f"chaser needs at least 2 agents, got {n}")
        radius = cfg.chaser.spawn_radius * rng.uniform(0.6, 1.4)
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + 2 * np.pi * np.arange(n) / n
        pos = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        vel = cfg.chaser.v_chase * np.stack([-np.sin(ang), np.cos(ang)], axis=1)
        return np.concatenate([pos, vel], axis=1)
    pos = np.stack([rng.uniform(-0.8 * a, -0.5 * a, n), rng.uniform(-0.2 * a, 0.2 * a, n)], axis=1)
    vel = rng.uniform(-0.2, 0.2, size=(n, 2))
    return np.concatenate([pos, vel], axis=1)


def run(model_tag, initial, ctx, cfg, steps):
    """Integrate ``steps`` transitions; returns (steps+1) x N x 4 float64."""
    states = np.empty((steps + 1,) + np.shape(initial))
    states[0] = initial
    for t in range(1, steps + 1):
        states[t] = step(model_tag, states[t - 1], ctx, cfg)
        if not np.all(np.isfinite(states[t])):
            raise SimulationDivergedError(t, model_tag)
    return states


def simulate(model_tag, cfg, seed, ctx=None):
    """One seeded episode of ``cfg.T`` recorded states (initial state included).

    Agent initial conditions and context placement come from independent
    streams, so passing an explicit ``ctx`` leaves the agent spawn unchanged.
    """
    if model_tag not in MODEL_TAGS:
        raise ConfigurationError(f"unknown model tag {model_tag!r}")
    cfg.validate()
    agent_seq, ctx_seq = np.random.SeedSequence(seed).spawn(2)
    if ctx is None:
        ctx = sample_context(model_tag, cfg, np.random.default_rng(ctx_seq))
    initial = spawn(model_tag, cfg, np.random.default_rng(agent_seq))
    states = run(model_tag, initial, ctx, cfg, cfg.T - 1)
    return Episode(states.astype(np.float32), ctx, model_tag, int(seed),
                   encoded=ctx.encode(cfg.max_obstacles))


def make_dataset(model_tag, cfg, episode_count, base_seed, path=None):
    if episode_count < 1:
        raise ConfigurationError(f"episode_count must be >= 1, got {episode_count}")
    episodes = [simulate(model_tag, cfg, base_seed + k) for k in range(episode_count)]
    if path is not None:
        write_dataset(path, episodes)
    return episodes


def circumradius(positions):
    """Largest agent distance from the swarm centroid."""
    positions = np.asarray(positions, dtype=np.float64)[..., :2]
    centroid = positions.mean(axis=-2, keepdims=True)
    return np.linalg.norm(positions - centroid, axis=-1).max(axis=-1)


# -- binary dataset file -------------------------------------------------------

def encode_dataset(episodes):
    out = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(episodes))]
    for ep in episodes:
        T, N, D = ep.states.shape
        out.append(struct.pack("<IIII", T, N, D, len(ep.encoded)))
        out.append(np.ascontiguousarray(ep.states, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(ep.encoded, dtype="<f4").tobytes())
        out.append(struct.pack("<BQ", MODEL_TAGS.index(ep.model_tag), ep.seed & 0xFFFFFFFFFFFFFFFF))
    return b"".join(out)


def decode_dataset(blob):
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {blob[:4]!r}, expected {DATASET_MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    off = 12
    episodes = []
    try:
        for _ in range(count):
            T, N, D, dc = struct.unpack_from("<IIII", blob, off)
            off += 16
            n_states = T * N * D
            states = np.frombuffer(blob, dtype="<f4", count=n_states, offset=off).reshape(T, N, D)
            off += 4 * n_states
            encoded = np.frombuffer(blob, dtype="<f4", count=dc, offset=off)
            off += 4 * dc
            tag, seed = struct.unpack_from("<BQ", blob, off)
            off += 9
            episodes.append(Episode(states.astype(np.float32), ContextSpec.from_encoded(encoded),
                                    MODEL_TAGS[tag], seed, encoded=encoded.copy()))
    except (struct.error, ValueError, IndexError) as exc:
        raise DatasetFormatError(f"truncated or corrupt dataset: {exc}") from exc
    return episodes


def write_dataset(path, episodes):
    Path(path).write_bytes(encode_dataset(episodes))


def read_dataset(path):
    return decode_dataset(Path(path).read_bytes())
