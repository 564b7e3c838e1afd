"""SwarmNet: temporal Conv1D encoder, one graph convolution, MLP decoder.

Layouts used throughout (time-major, as the windows are stacked):

    window   [B, T_w, N, D]       agent states inside one temporal window
    context  [B, d_c]             static environment vector per window
    nodes    [B, N, H]            condensed per-agent features
    edges    [B, N, N-1, d_e]     edge (i -> j) stored at [i, k] where j is the
                                  k-th agent other than i

Every MLP is shared across agents (nodes) and pairs (edges), so the network
is equivariant to relabelling the agents.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .diffcore import (
    DimensionError,
    ParameterError,
    SeriesTooShortError,
    Tensor,
    concat,
    concat_last,
    conv1d_valid,
    dropout_mask,
    glorot_uniform,
    linear,
    mul,
    relu,
    reshape,
    segment_sum,
    swapaxes,
    take_rows,
)

CHECKPOINT_MAGIC = b"SWMC"
CHECKPOINT_VERSION = 1


class PoisonedModelError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class SwarmNetConfig:
    state_dim: int = 4
    context_dim: int = 5
    layers: int = 3
    kernel_size: int = 3
    filters: int = 32
    encoded_size: int = 32
    edge_size: int = 64
    edge_hidden: list = field(default_factory=lambda: [64, 64])
    agg_hidden: list = field(default_factory=lambda: [64, 64])
    node_hidden: list = field(default_factory=lambda: [64, 64])
    decoder_hidden: list = field(default_factory=lambda: [64, 64])
    gc_layers: int = 1
    dropout: float = 0.0
    temporal_encoder: str = "conv1d"
    use_context: bool = True
    predict_delta: bool = True
    zero_init_output: bool = True
    init_seed: int = 0
    # fixed affine normalisation, filled from training data by the trainer
    input_shift: list | None = None
    input_scale: list | None = None
    delta_scale: list | None = None

    def __post_init__(self):
        if self.temporal_encoder not in ("conv1d", "markov"):
            raise ParameterError(f"temporal_encoder must be 'conv1d' or 'markov', got {self.temporal_encoder!r}")
        if self.layers < 1 or self.kernel_size < 1:
            raise ParameterError("layers and kernel_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        channels = self.state_dim + self.context_dim
        for name, size in (("input_shift", channels), ("input_scale", channels), ("delta_scale", self.state_dim)):
            value = getattr(self, name)
            if value is not None and len(value) != size:
                raise ParameterError(f"{name} needs {size} entries, got {len(value)}")

    @property
    def window(self):
        """Temporal window T_w consumed per prediction."""
        if self.temporal_encoder == "markov":
            return 1
        return self.layers * (self.kernel_size - 1) + 1

    @property
    def in_channels(self):
        return self.state_dim + self.context_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def _mlp_shapes(prefix, sizes):
    return [(f"{prefix}.{k}", sizes[k], sizes[k + 1]) for k in range(len(sizes) - 1)]


def param_shapes(cfg):
    """Ordered ``name -> shape`` for every learnable tensor."""
    shapes = {}
    if cfg.temporal_encoder == "conv1d":
        widths = [cfg.in_channels] + [cfg.filters] * (cfg.layers - 1) + [cfg.encoded_size]
        for l in range(cfg.layers):
            shapes[f"conv{l}.kernel"] = (cfg.kernel_size, widths[l], widths[l + 1])
            shapes[f"conv{l}.bias"] = (widths[l + 1],)
    else:
        for name, i, o in _mlp_shapes("markov", [cfg.in_channels, cfg.filters, cfg.encoded_size]):
            shapes[f"{name}.weight"], shapes[f"{name}.bias"] = (i, o), (o,)
    H, de = cfg.encoded_size, cfg.edge_size
    for g in range(cfg.gc_layers):
        blocks = (
            ("edge", [2 * H] + list(cfg.edge_hidden) + [de]),
            ("agg", [de] + list(cfg.agg_hidden) + [de]),
            ("node", [H + de] + list(cfg.node_hidden) + [H]),
        )
        for block, sizes in blocks:
            for name, i, o in _mlp_shapes(f"gc{g}.{block}", sizes):
                shapes[f"{name}.weight"], shapes[f"{name}.bias"] = (i, o), (o,)
    for name, i, o in _mlp_shapes("decoder", [H] + list(cfg.decoder_hidden) + [cfg.state_dim]):
        shapes[f"{name}.weight"], shapes[f"{name}.bias"] = (i, o), (o,)
    return shapes


def init_params(cfg, seed=None):
    """Glorot-uniform weights, zero biases; decoder output zeroed if configured."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    shapes = param_shapes(cfg)
    out_layer = f"decoder.{len(cfg.decoder_hidden)}.weight"
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        elif name == out_layer and cfg.zero_init_output:
            data = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".kernel"):
            k, cin, cout = shape
            data = glorot_uniform(shape, k * cin, k * cout, rng)
        else:
            data = glorot_uniform(shape, shape[0], shape[1], rng)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def mlp(x, params, prefix, n_layers, dropout=0.0, rng=None):
    """ReLU MLP; dropout (if any) follows every hidden activation."""
    for k in range(n_layers):
        x = linear(x, params[f"{prefix}.{k}.weight"], params[f"{prefix}.{k}.bias"])
        if k < n_layers - 1:
            x = relu(x)
            if rng is not None and dropout > 0:
                x = mul(x, dropout_mask(x.shape, dropout, rng, dtype=x.data.dtype))
    return x


def edge_index(n):
    """Source and target agent of each directed edge, source-major, no self-loops."""
    src = np.repeat(np.arange(n), max(n - 1, 0))
    tgt = np.array([j for i in range(n) for j in range(n) if j != i], dtype=np.int64)
    return src, tgt


def _check_window(x, cfg):
    if x.ndim < 3:
        raise DimensionError(f"window must be [..., T_w, N, C], got {x.shape}")
    if x.shape[-3] != cfg.window:
        raise SeriesTooShortError(f"window has {x.shape[-3]} steps, model expects T_w={cfg.window}")
    if x.shape[-1] != cfg.in_channels:
        raise DimensionError(f"window has {x.shape[-1]} channels, model expects {cfg.in_channels}")


def encode_temporal(window, params, cfg):
    """Collapse a ``[..., T_w, N, D+d_c]`` window to ``[..., N, H]`` node states."""
    window = window if isinstance(window, Tensor) else Tensor(window)
    _check_window(window, cfg)
    if cfg.temporal_encoder == "markov":
        return mlp(window[..., -1, :, :], params, "markov", 2)
    return conv_stack(swapaxes(window, -3, -2), params, cfg)[..., 0, :]


def conv_stack(series, params, cfg):
    """Stacked valid Conv1D over ``[..., T, C]``: output length T - L(K-1)."""
    x = series if isinstance(series, Tensor) else Tensor(series)
    if x.shape[-2] < cfg.window:
        raise SeriesTooShortError(f"series of length {x.shape[-2]} shorter than T_w={cfg.window}")
    for l in range(cfg.layers):
        x = conv1d_valid(x, params[f"conv{l}.kernel"], params[f"conv{l}.bias"])
        if l < cfg.layers - 1:
            x = relu(x)
    return x


def edge_update(v, params, cfg, layer=0, dropout=0.0, rng=None):
    """e_ij = phi_e(v_i, v_j) for every ordered pair i != j -> ``[..., N, N-1, d_e]``."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    n = v.shape[-2]
    if n < 1:
        raise DimensionError("edge_update needs at least one agent")
    src, tgt = edge_index(n)
    pairs = concat_last(take_rows(v, src), take_rows(v, tgt))
    e = mlp(pairs, params, f"gc{layer}.edge", len(cfg.edge_hidden) + 1, dropout, rng)
    return reshape(e, v.shape[:-2] + (n, n - 1, cfg.edge_size))


def aggregate_edges(e, params, cfg, layer=0):
    """e_bar_i = psi(sum of edges targeting i) -> ``[..., N, d_e]``."""
    e = e if isinstance(e, Tensor) else Tensor(e)
    n = e.shape[-3]
    _, tgt = edge_index(n)
    flat = reshape(e, e.shape[:-3] + (n * (n - 1), e.shape[-1]))
    incoming = segment_sum(flat, tgt, n)
    return mlp(incoming, params, f"gc{layer}.agg", len(cfg.agg_hidden) + 1)


def node_update(v, e_bar, params, cfg, layer=0, dropout=0.0, rng=None):
    v = v if isinstance(v, Tensor) else Tensor(v)
    e_bar = e_bar if isinstance(e_bar, Tensor) else Tensor(e_bar)
    if v.shape[:-1] != e_bar.shape[:-1]:
        raise DimensionError(f"node_update: nodes {v.shape} vs aggregated edges {e_bar.shape}")
    return mlp(concat_last(v, e_bar), params, f"gc{layer}.node", len(cfg.node_hidden) + 1, dropout, rng)


def graph_conv(v, params, cfg, dropout=0.0, rng=None):
    for g in range(cfg.gc_layers):
        e = edge_update(v, params, cfg, g, dropout, rng)
        e_bar = aggregate_edges(e, params, cfg, g)
        v = node_update(v, e_bar, params, cfg, g, dropout, rng)
    return v


def _norm_arrays(cfg):
    c = cfg.in_channels
    shift = np.zeros(c, np.float32) if cfg.input_shift is None else np.asarray(cfg.input_shift, np.float32)
    scale = np.ones(c, np.float32) if cfg.input_scale is None else np.asarray(cfg.input_scale, np.float32)
    delta = np.ones(cfg.state_dim, np.float32) if cfg.delta_scale is None else np.asarray(cfg.delta_scale, np.float32)
    return shift, scale, delta


def predict_next(window, context, params, cfg, dropout=None, rng=None):
    """Next state of every agent from a ``[B, T_w, N, D]`` state window.

    ``context`` is ``[B, d_c]``.  Dropout masks are drawn only when ``rng``
    is given; ``dropout`` overrides the configured probability.
    """
    window = window if isinstance(window, Tensor) else Tensor(window)
    D, dc = cfg.state_dim, cfg.context_dim
    if window.ndim != 4 or window.shape[-1] != D:
        raise DimensionError(f"state window must be [B, T_w, N, {D}], got {window.shape}")
    B, Tw, N, _ = window.shape
    context = np.asarray(context, dtype=np.float32).reshape(B, dc)
    shift, scale, delta = _norm_arrays(cfg)
    x = mul(window - shift[:D], 1.0 / scale[:D])
    if cfg.use_context:
        c = (context - shift[D:]) / scale[D:]
    else:
        c = np.zeros_like(context)
    c = np.broadcast_to(c[:, None, None, :], (B, Tw, N, dc)).astype(np.float32)
    p = cfg.dropout if dropout is None else dropout
    h = encode_temporal(concat_last(x, Tensor(c)), params, cfg)
    h = graph_conv(h, params, cfg, p, rng)
    out = mlp(h, params, "decoder", len(cfg.decoder_hidden) + 1, p, rng)
    if cfg.predict_delta:
        return window[:, -1, :, :] + mul(out, delta)
    return mul(out, scale[:D]) + shift[:D]


def sliding_windows(states, window):
    """``[T, N, D]`` -> ``[T - window + 1, window, N, D]`` (copy)."""
    states = np.asarray(states)
    T = states.shape[0]
    if T < window:
        raise SeriesTooShortError(f"series of length {T} shorter than window T_w={window}")
    idx = np.arange(T - window + 1)[:, None] + np.arange(window)
    return states[idx]


def check_finite(params):
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise PoisonedModelError(f"parameter {name!r} contains non-finite values")


def forward(states, context, params, cfg, dropout=None, rng=None):
    """One-step predictions from every window position: ``[T_s, N, D]``."""
    check_finite(params)
    windows = sliding_windows(states, cfg.window)
    ctx = np.broadcast_to(np.asarray(context, np.float32), (len(windows), cfg.context_dim))
    return predict_next(windows, ctx, params, cfg, dropout, rng)


class SwarmNet:
    """Configuration plus parameters, with checkpoint I/O."""

    def __init__(self, cfg=None, params=None, provenance=None):
        self.cfg = cfg or SwarmNetConfig()
        self.params = params if params is not None else init_params(self.cfg)
        self.provenance = provenance or {}

    @property
    def window(self):
        return self.cfg.window

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def predict_next(self, window, context, dropout=None, rng=None):
        return predict_next(window, context, self.params, self.cfg, dropout, rng)

    def forward(self, states, context, dropout=None, rng=None):
        return forward(states, context, self.params, self.cfg, dropout, rng)

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, arrays):
        for k, a in arrays.items():
            self.params[k].data[...] = a

    def copy(self):
        params = {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in self.params.items()}
        return SwarmNet(SwarmNetConfig.from_dict(self.cfg.to_dict()), params, dict(self.provenance))

    def to_bytes(self):
        return encode_checkpoint(self.cfg, self.params, self.provenance)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return decode_checkpoint(Path(path).read_bytes())


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(cfg, params, provenance=None):
    blob = canonical_json({"model": cfg.to_dict(), "run": provenance or {}}).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
           struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(blob):
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(blob[off:off + n].decode("utf-8"))
    off += n
    cfg = SwarmNetConfig.from_dict(meta["model"])
    expected = param_shapes(cfg)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", blob, off)
        dims = struct.unpack_from(f"<{rank}I", blob, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        if expected.get(name) != tuple(dims):
            raise CheckpointError(f"tensor {name!r} has shape {tuple(dims)}, config expects {expected.get(name)}")
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    return SwarmNet(cfg, {k: params[k] for k in expected}, meta.get("run", {}))
