"""CNN-GRU forecaster: 2D convolution over the peer-by-lag plane, stacked GRU
over time, a meteorological MLP embedding, and a direct multi-step head."""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigError,
    GapInWindow,
    InsufficientData,
    OriginOutOfRange,
    ShapeMismatch,
    UnknownTarget,
)
from .features import Sample, Scalers, aux_matrix, inverse, make_analog_source, transform
from .rng import generator
from .similarity import PeerSet

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "selu")
NORM_SITES = ("layer", "batch", "none")
GATE_CONVENTIONS = ("retain", "replace")
BATCH_NORM_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    m: int = 5                       # stations per input tensor, target first
    tau: int = 12                    # input window length in hours
    leads: tuple = (1, 2, 3, 4, 5)   # forecast lead times; one output per lead
    conv_channels: int = 64
    conv_kernel: tuple = (1, 5)      # (height over stations, width over hours)
    gru_layers: int = 2
    gru_hidden: int = 48
    mlp_dims: tuple = (128,)         # hidden widths of the met MLP
    d_m: int = 64                    # met embedding size (MLP output)
    dropout: float = 0.2
    activation: str = "relu"
    norm_site: str = "layer"
    analog_rows: int = 0             # extra historical tensors stacked below x
    gate_convention: str = "retain"  # z gates retention of h_prev; "replace" flips it
    aux_features: int = 3

    @property
    def q(self):
        return len(self.leads)

    @property
    def input_height(self):
        return self.m * (1 + self.analog_rows)

    @property
    def conv_height(self):
        return self.input_height - self.conv_kernel[0] + 1

    @property
    def conv_width(self):
        return self.tau - self.conv_kernel[1] + 1

    @property
    def d_f(self):
        return self.conv_channels * self.conv_height

    def validate(self):
        leads = list(self.leads)
        if not leads or any(v < 1 for v in leads) or any(
            b <= a for a, b in zip(leads, leads[1:])
        ):
            raise ConfigError(f"leads must be strictly increasing positive: {leads}")
        extents = {
            "m": self.m, "tau": self.tau, "conv_channels": self.conv_channels,
            "gru_layers": self.gru_layers, "gru_hidden": self.gru_hidden,
            "d_m": self.d_m, "aux_features": self.aux_features,
        }
        for name, value in extents.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if any(v < 1 for v in self.mlp_dims):
            raise ConfigError(f"mlp_dims must all be >= 1: {self.mlp_dims}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.analog_rows < 0:
            raise ConfigError("analog_rows must be >= 0")
        kh, kw = self.conv_kernel
        if not 1 <= kh <= self.input_height:
            raise ConfigError(
                f"kernel height {kh} exceeds input height {self.input_height}"
            )
        if not 1 <= kw <= self.tau:
            raise ConfigError(f"kernel width {kw} exceeds window {self.tau}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.norm_site not in NORM_SITES:
            raise ConfigError(f"norm_site must be one of {NORM_SITES}")
        if self.gate_convention not in GATE_CONVENTIONS:
            raise ConfigError(f"gate_convention must be one of {GATE_CONVENTIONS}")
        return self

    def to_dict(self):
        out = asdict(self)
        for key in ("leads", "conv_kernel", "mlp_dims"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        for key in ("leads", "conv_kernel", "mlp_dims"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj).validate()


def preset(name: str, **overrides) -> ModelConfig:
    """Named model profiles.

    "base": compact profile (64 channels, (1, 5) kernel, two GRU layers of
    48 units, 128-wide met MLP, ReLU, dropout 0.2). "wide": 256 GRU units,
    SeLU activation, and a full-height (m, 3) kernel.
    """
    if name == "base":
        merged = dict(overrides)
    elif name == "wide":
        m = int(overrides.get("m", ModelConfig.m))
        merged = {"gru_hidden": 256, "activation": "selu", "conv_kernel": (m, 3)}
        merged.update(overrides)
    else:
        raise ConfigError(f"unknown model preset {name!r}")
    return ModelConfig(**merged).validate()


class ModelParams:
    """Named parameter tensors plus non-trained buffers (running norm stats)."""

    def __init__(self, tensors: dict, buffers: dict = None):
        self.tensors = tensors
        self.buffers = buffers or {}

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def count(self):
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def gru_layer(self, layer: int) -> dict:
        keys = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")
        return {k: self.tensors[f"gru{layer}.{k}"] for k in keys}


def param_count(config: ModelConfig) -> int:
    """Closed-form size of every trainable tensor implied by the config."""
    c = config
    kh, kw = c.conv_kernel
    n = c.conv_channels * kh * kw + c.conv_channels
    d_in = c.d_f
    for _ in range(c.gru_layers):
        n += 3 * (d_in * c.gru_hidden + c.gru_hidden * c.gru_hidden + c.gru_hidden)
        d_in = c.gru_hidden
    dims = [c.tau * c.aux_features] + list(c.mlp_dims) + [c.d_m]
    n += sum(a * b + b for a, b in zip(dims, dims[1:]))
    d_cat = c.gru_hidden + c.d_m
    if c.norm_site != "none":
        n += 2 * c.gru_hidden + 2 * d_cat
    n += d_cat * c.q + c.q
    return n


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights (std sqrt(2/fan_in)), zero biases, unit norm scales."""
    config.validate()
    g = generator(seed, "init")
    tensors = {}

    def weight(name, shape, fan_in):
        tensors[name] = Tensor(
            g.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True
        )

    def const(name, shape, value):
        tensors[name] = Tensor(np.full(shape, float(value)), requires_grad=True)

    c = config
    kh, kw = c.conv_kernel
    weight("conv.w", (c.conv_channels, 1, kh, kw), kh * kw)
    const("conv.b", (c.conv_channels,), 0.0)
    d_in = c.d_f
    for layer in range(c.gru_layers):
        for gate in ("z", "r", "h"):
            weight(f"gru{layer}.w{gate}", (d_in, c.gru_hidden), d_in)
            weight(f"gru{layer}.u{gate}", (c.gru_hidden, c.gru_hidden), c.gru_hidden)
            const(f"gru{layer}.b{gate}", (c.gru_hidden,), 0.0)
        d_in = c.gru_hidden
    if c.norm_site != "none":
        const("norm_h.scale", (c.gru_hidden,), 1.0)
        const("norm_h.shift", (c.gru_hidden,), 0.0)
    dims = [c.tau * c.aux_features] + list(c.mlp_dims) + [c.d_m]
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        weight(f"mlp{i}.w", (a, b), a)
        const(f"mlp{i}.b", (b,), 0.0)
    d_cat = c.gru_hidden + c.d_m
    if c.norm_site != "none":
        const("norm_cat.scale", (d_cat,), 1.0)
        const("norm_cat.shift", (d_cat,), 0.0)
    weight("head.w", (d_cat, c.q), d_cat)
    const("head.b", (c.q,), 0.0)

    buffers = {}
    if c.norm_site == "batch":
        buffers = {
            "norm_h.mean": np.zeros(c.gru_hidden),
            "norm_h.var": np.ones(c.gru_hidden),
            "norm_cat.mean": np.zeros(d_cat),
            "norm_cat.var": np.ones(d_cat),
        }
    params = ModelParams(tensors, buffers)
    log.info("initialized %d parameters", params.count())
    return params


def gru_step(x_t, h_prev, layer: dict, convention: str = "retain") -> Tensor:
    """One GRU update: z and r gates, candidate state, gated combination.

    With the "retain" convention z close to 1 keeps most of h_prev;
    "replace" flips the roles of h_prev and the candidate.
    """
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    flat = x_t.data.ndim == 1
    x = x_t.reshape(1, x_t.data.size) if flat else x_t
    h = h_prev.reshape(1, h_prev.data.size) if h_prev.data.ndim == 1 else h_prev
    try:
        z = (x @ layer["wz"] + h @ layer["uz"] + layer["bz"]).sigmoid()
        r = (x @ layer["wr"] + h @ layer["ur"] + layer["br"]).sigmoid()
        h_tilde = (x @ layer["wh"] + (r * h) @ layer["uh"] + layer["bh"]).tanh()
        if convention == "retain":
            h_new = z * h + (1.0 - z) * h_tilde
        else:
            h_new = (1.0 - z) * h + z * h_tilde
    except ShapeMismatch as exc:
        raise exc.tag_stage("gru")
    return h_new.reshape(h_new.data.size) if flat else h_new


def _apply_norm(x: Tensor, params: ModelParams, site: str, config: ModelConfig,
                mode: str) -> Tensor:
    """Normalization at one site; x is [B x d].

    "layer" normalizes each row over its features. "batch" standardizes each
    feature with running mean/var buffers; train-mode forwards first fold the
    current batch statistics into the buffers, and gradients do not flow
    through the statistics.
    """
    if config.norm_site == "none":
        return x
    scale, shift = params[f"{site}.scale"], params[f"{site}.shift"]
    if config.norm_site == "layer":
        return ad.layer_norm(x, axis=-1) * scale + shift
    mean, var = params.buffers[f"{site}.mean"], params.buffers[f"{site}.var"]
    if mode == "train":
        batch_mean = x.data.mean(axis=0)
        batch_var = x.data.var(axis=0)
        mean += BATCH_NORM_MOMENTUM * (batch_mean - mean)
        var += BATCH_NORM_MOMENTUM * (batch_var - var)
    x_hat = (x - Tensor(mean.copy())) * Tensor(1.0 / np.sqrt(var + 1e-5))
    return x_hat * scale + shift


def _check_sample_shapes(samples, config):
    for s in samples:
        stacked = s.stacked_input()
        if stacked.shape != (config.input_height, config.tau):
            raise ShapeMismatch(
                "input", stacked.shape, (config.input_height, config.tau),
                stage="input",
            )
        if s.aux.shape != (config.tau, config.aux_features):
            raise ShapeMismatch(
                "aux", s.aux.shape, (config.tau, config.aux_features), stage="input"
            )


def forward_batch(samples, params: ModelParams, config: ModelConfig,
                  mode: str = "eval", rng=None) -> Tensor:
    """Run the full pipeline over a batch; returns a [B x Q] tensor.

    Per-sample convolutions are concatenated into one [B*d_f x tau'] block so
    the recurrence works on whole-batch matrices; column t is pulled out with
    a one-hot matmul and reshaped to [B x d_f], which is exact because rows
    are laid out sample-major.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    train = mode == "train"
    if train and config.dropout > 0 and rng is None:
        raise ConfigError("train-mode forward with dropout needs an rng")
    _check_sample_shapes(samples, config)
    b = len(samples)
    c = config

    try:
        maps = []
        for s in samples:
            img = Tensor(s.stacked_input().reshape(1, c.input_height, c.tau))
            out = ad.conv2d(img, params["conv.w"], params["conv.b"])
            maps.append(out.reshape(c.d_f, c.conv_width))
        feats = ad.concat(maps, axis=0)
        feats = feats.relu() if c.activation == "relu" else feats.selu()
    except ShapeMismatch as exc:
        raise exc.tag_stage("conv")

    try:
        hidden = [Tensor(np.zeros((b, c.gru_hidden))) for _ in range(c.gru_layers)]
        eye = np.eye(c.conv_width)
        for t in range(c.conv_width):
            x_t = (feats @ Tensor(eye[:, t : t + 1])).reshape(b, c.d_f)
            for layer in range(c.gru_layers):
                hidden[layer] = gru_step(
                    x_t, hidden[layer], params.gru_layer(layer), c.gate_convention
                )
                x_t = hidden[layer]
                if layer < c.gru_layers - 1:
                    x_t = ad.dropout(x_t, c.dropout, train, rng)
        h = _apply_norm(hidden[-1], params, "norm_h", c, mode)
    except ShapeMismatch as exc:
        raise exc.tag_stage("gru")

    try:
        a = Tensor(np.stack([s.aux.reshape(-1) for s in samples]))
        for i in range(len(c.mlp_dims)):
            a = (a @ params[f"mlp{i}.w"] + params[f"mlp{i}.b"]).relu()
        last = len(c.mlp_dims)
        met = a @ params[f"mlp{last}.w"] + params[f"mlp{last}.b"]
    except ShapeMismatch as exc:
        raise exc.tag_stage("met-mlp")

    try:
        cat = ad.concat([h, met], axis=1)
        cat = _apply_norm(cat, params, "norm_cat", c, mode)
        cat = ad.dropout(cat, c.dropout, train, rng)
        return cat @ params["head.w"] + params["head.b"]
    except ShapeMismatch as exc:
        raise exc.tag_stage("head")


def forward(sample: Sample, params: ModelParams, config: ModelConfig,
            mode: str = "eval", rng=None) -> Tensor:
    """Single-sample pipeline; returns the scaled [Q] prediction tensor."""
    return forward_batch([sample], params, config, mode=mode, rng=rng).reshape(
        config.q
    )


@dataclass
class Forecast:
    target_station: str
    origin: int
    leads: tuple
    values: list                # physical units, inverse-scaled
    scaled_values: list = None  # absent for baselines that skip scaling


def predict(panel, station: str, origin: int, params: ModelParams,
            config: ModelConfig, scalers: Scalers, peers: PeerSet,
            analog_source=None) -> Forecast:
    """Forecast Q leads from one origin hour; never feeds outputs back in.

    `origin` is the epoch-hour timestamp of the last input hour. Inputs are
    scaled with the stored scalers, the network runs once in eval mode, and
    the Q outputs are inverse-scaled to physical units.
    """
    if station not in scalers.pm:
        raise UnknownTarget(station)
    pos = int(origin) - int(panel.index[0])
    n = panel.n_hours
    if pos < config.tau - 1 or pos >= n:
        raise OriginOutOfRange(
            f"origin {origin} needs hours [{origin - config.tau + 1}, {origin}] "
            f"inside the panel"
        )
    rows = [panel.station_row(sid) for sid in peers.members]
    lo = pos - config.tau + 1
    for sid, row in zip(peers.members, rows):
        gaps = np.flatnonzero(np.isnan(panel.pm25[row, lo : pos + 1]))
        if gaps.size:
            raise GapInWindow(sid, lo + int(gaps[0]))
    aux_raw, _ = aux_matrix(panel, wd_sincos=len(scalers.met_fields) == 4)
    window = aux_raw[lo : pos + 1]
    gaps = np.flatnonzero(~np.isfinite(window).all(axis=1))
    if gaps.size:
        raise GapInWindow("met", lo + int(gaps[0]))

    x = np.stack(
        [
            np.asarray(transform(scalers.pm[sid], panel.pm25[row, lo : pos + 1]))
            for sid, row in zip(peers.members, rows)
        ]
    )
    aux = np.stack(
        [np.asarray(transform(scalers.met[k], window[:, k])) for k in range(window.shape[1])],
        axis=1,
    )
    analogs = []
    if config.analog_rows > 0:
        source = analog_source or make_analog_source(
            panel, window=config.tau, m=config.analog_rows, exclusion=max(config.leads)
        )
        found = source(rows[0], pos)
        if found.truncated:
            raise InsufficientData(
                None, f"only {len(found.analogs)} of {config.analog_rows} analog "
                f"windows available before origin {origin}"
            )
        for end, _ in found.analogs:
            tensor = np.stack(
                [
                    np.asarray(
                        transform(
                            scalers.pm[sid], panel.pm25[row, end - config.tau + 1 : end + 1]
                        )
                    )
                    for sid, row in zip(peers.members, rows)
                ]
            )
            gap = np.flatnonzero(~np.isfinite(tensor).all(axis=0))
            if gap.size:
                raise GapInWindow("analog", end - config.tau + 1 + int(gap[0]))
            analogs.append(tensor)

    sample = Sample(
        target_station=station, origin=int(origin), x=x, aux=aux,
        y=np.zeros(config.q), analogs=analogs,
    )
    scaled = forward(sample, params, config, mode="eval").data
    values = inverse(scalers.pm[station], scaled)
    return Forecast(
        target_station=station,
        origin=int(origin),
        leads=tuple(config.leads),
        values=[float(v) for v in values],
        scaled_values=[float(v) for v in scaled],
    )


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    scalers: Scalers, peer_sets: dict, metadata: dict = None):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": config.to_dict(),
        "scalers": scalers.to_dict(),
        "peer_sets": {t: list(ps.members) for t, ps in peer_sets.items()},
        "params": {name: t.data.tolist() for name, t in params.tensors.items()},
        "buffers": {name: a.tolist() for name, a in params.buffers.items()},
        "metadata": metadata or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig.from_dict(doc["model_config"])
    scalers = Scalers.from_dict(doc["scalers"])
    peer_sets = {
        t: PeerSet(target=t, members=list(members))
        for t, members in doc["peer_sets"].items()
    }
    tensors = {
        name: Tensor(np.asarray(vals, dtype=np.float64), requires_grad=True)
        for name, vals in doc["params"].items()
    }
    buffers = {
        name: np.asarray(vals, dtype=np.float64) for name, vals in doc["buffers"].items()
    }
    return ModelParams(tensors, buffers), config, scalers, peer_sets, doc["metadata"]
