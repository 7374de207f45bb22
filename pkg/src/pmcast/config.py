"""Single JSON run configuration shared by every command.

A config names presets plus overrides; expand() resolves them into fully
explicit model and training dictionaries. The expanded form is what gets
written into every output directory, and feeding it back in reproduces the
run because explicit values win over the preset they came from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .evaluation import TERCILES
from .model import ModelConfig, preset
from .synth import SynthSpec
from .training import TrainConfig, train_preset

DEFAULT_EVAL_LEADS = (1, 24, 240)


@dataclass
class RunConfig:
    seed: int = 0
    input_dir: str = "stations"
    output_dir: str = "out"
    # ingest
    max_gap: int = 6                # fill runs up to this length, hours
    max_missing_frac: float = 0.3
    columns: dict = field(default_factory=dict)     # canonical -> actual CSV header
    # similarity
    k: int = 5
    window_start: int = None        # None: latest gap-free window in the train region
    window_len: int = 512
    normalize: bool = True
    # features
    fractions: tuple = (0.7, 0.15, 0.15)
    stride: int = 1
    wd_sincos: bool = False
    # model and training: preset name plus explicit overrides
    model_preset: str = "base"
    model: dict = field(default_factory=dict)
    train_preset: str = "base"
    train: dict = field(default_factory=dict)
    # evaluation
    eval_leads: tuple = DEFAULT_EVAL_LEADS
    quantiles: tuple = TERCILES
    # synthetic data
    synth: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        overrides = dict(self.model)
        for key in ("leads", "conv_kernel", "mlp_dims"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        overrides.setdefault("m", self.k)   # peer count drives the input height
        if self.wd_sincos and "aux_features" not in overrides:
            overrides["aux_features"] = 4
        cfg = preset(self.model_preset, **overrides)
        want = 4 if self.wd_sincos else 3
        if cfg.aux_features != want:
            raise ConfigError(
                f"aux_features={cfg.aux_features} clashes with wd_sincos={self.wd_sincos}"
            )
        return cfg

    def train_config(self) -> TrainConfig:
        overrides = dict(self.train)
        if "betas" in overrides:
            overrides["betas"] = tuple(overrides["betas"])
        overrides.setdefault("seed", self.seed)
        return train_preset(self.train_preset, **overrides)

    def synth_spec(self) -> SynthSpec:
        overrides = dict(self.synth)
        overrides.setdefault("seed", self.seed)
        return SynthSpec.from_dict(overrides)

    def validate(self):
        if self.max_gap < 0:
            raise ConfigError("max_gap must be >= 0")
        if not 0.0 <= self.max_missing_frac <= 1.0:
            raise ConfigError("max_missing_frac must lie in [0, 1]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.window_len < 2:
            raise ConfigError("window_len must be >= 2")
        if self.window_start is not None and self.window_start < 0:
            raise ConfigError("window_start must be >= 0")
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError(f"fractions needs three positive values: {self.fractions}")
        if sum(self.fractions) > 1.0 + 1e-9:
            raise ConfigError(f"fractions sum to {sum(self.fractions)} > 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not self.eval_leads or any(int(l) < 1 for l in self.eval_leads):
            raise ConfigError(f"eval_leads must be positive: {self.eval_leads}")
        lo, hi = self.quantiles
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError(f"quantiles must satisfy 0 < low < high < 1: {self.quantiles}")
        self.model_config().validate()
        self.train_config().validate()
        self.synth_spec()
        return self

    def expanded(self) -> dict:
        """Fully explicit dict: presets resolved, ready to write next to outputs."""
        self.validate()
        out = self.to_dict()
        out["model"] = self.model_config().to_dict()
        out["train"] = self.train_config().to_dict()
        out["synth"] = self.synth_spec().to_dict()
        return out

    def to_dict(self) -> dict:
        out = dict(vars(self))
        for key in ("fractions", "eval_leads", "quantiles"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, obj) -> "RunConfig":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("fractions", "eval_leads", "quantiles"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj).validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(obj)


def save_expanded(config: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(config.expanded(), fh, indent=2, sort_keys=True)
        fh.write("\n")
