"""Losses, Adam/AdamW with global-norm clipping, and the early-stopping loop."""

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import (
    ConfigError,
    DivergedLoss,
    EmptySplit,
    LengthMismatch,
    NegativeTarget,
)
from .model import ModelParams, forward_batch, init_params
from .rng import generator

log = logging.getLogger(__name__)

LOSSES = ("msle", "mse")
OPTIMIZERS = ("adam", "adamw")
LOSS_SPACES = ("auto", "physical", "scaled")
IMPROVEMENT_EPS = 1e-12


def mse(pred, target) -> Tensor:
    """Mean of squared differences; pred is a tensor, target plain values."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise LengthMismatch(f"pred {pred.data.shape} vs target {target.shape}")
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def msle(pred, target) -> Tensor:
    """Mean squared log error with predictions clamped to >= 0 before log1p.

    The clamp makes the gradient zero wherever the raw prediction is
    negative, which keeps the loss defined without hiding sign errors.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise LengthMismatch(f"pred {pred.data.shape} vs target {target.shape}")
    if (target < 0).any():
        raise NegativeTarget(f"msle targets must be >= 0, min is {target.min()}")
    diff = pred.relu().log1p() - Tensor(np.log1p(target))
    return (diff * diff).mean()


def clip_global_norm(grads, max_norm: float):
    """Scale every gradient by max_norm/norm when the joint norm exceeds it."""
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be > 0, got {max_norm}")
    total = 0.0
    for g in grads:
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


@dataclass
class TrainConfig:
    loss: str = "mse"
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 45
    patience: int = 5
    clip_norm: float = 5.0          # None disables clipping
    seed: int = 0
    shuffle: bool = True
    loss_space: str = "auto"        # auto: msle in physical units, mse in scaled

    def validate(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss_space not in LOSS_SPACES:
            raise ConfigError(f"loss_space must be one of {LOSS_SPACES}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1): {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("need batch_size >= 1, max_epochs >= 0, patience >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")
        return self

    def resolved_space(self):
        if self.loss_space != "auto":
            return self.loss_space
        return "physical" if self.loss == "msle" else "scaled"

    def to_dict(self):
        out = dict(vars(self))
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(**obj).validate()


def train_preset(name: str, **overrides) -> TrainConfig:
    """Named training profiles.

    "base": Adam at 1e-3, batch 64, up to 45 epochs, patience 5, MSE on
    scaled values. "long": AdamW at 4e-4 with weight decay 1e-4, up to 800
    epochs, patience 20, MSLE on physical values. Both clip gradients at 5.
    """
    if name == "base":
        merged = dict(overrides)
    elif name == "long":
        merged = dict(
            loss="msle", optimizer="adamw", lr=4e-4, weight_decay=1e-4,
            max_epochs=800, patience=20,
        )
        merged.update(overrides)
    else:
        raise ConfigError(f"unknown training preset {name!r}")
    return TrainConfig(**merged).validate()


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)     # first moments per parameter
    v: dict = field(default_factory=dict)     # second moments per parameter
    best_val_loss: float = float("inf")
    best_params: dict = None                  # name -> array snapshot
    best_buffers: dict = None
    epochs_since_improve: int = 0
    history: list = field(default_factory=list)
    stopped_early: bool = False


def init_state(params: ModelParams) -> TrainState:
    state = TrainState()
    for name, t in params.tensors.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    _snapshot(state, params)
    return state


def _snapshot(state: TrainState, params: ModelParams):
    state.best_params = {name: t.data.copy() for name, t in params.tensors.items()}
    state.best_buffers = {name: a.copy() for name, a in params.buffers.items()}


def _restore(state: TrainState) -> ModelParams:
    tensors = {
        name: Tensor(a.copy(), requires_grad=True)
        for name, a in state.best_params.items()
    }
    buffers = {name: a.copy() for name, a in state.best_buffers.items()}
    return ModelParams(tensors, buffers)


def optimizer_step(params: ModelParams, grads: dict, state: TrainState,
                   config: TrainConfig):
    """One Adam update with bias correction; AdamW first applies decoupled decay."""
    state.step += 1
    b1, b2 = config.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in params.tensors.items():
        g = grads[name]
        if config.optimizer == "adamw" and config.weight_decay > 0:
            t.data -= config.lr * config.weight_decay * t.data
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        t.data -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)


def record_validation(state: TrainState, val_loss: float, params: ModelParams,
                      patience: int) -> bool:
    """Track the best snapshot; returns True when patience is exhausted."""
    if state.best_val_loss - val_loss >= IMPROVEMENT_EPS:
        state.best_val_loss = val_loss
        state.epochs_since_improve = 0
        _snapshot(state, params)
        return False
    state.epochs_since_improve += 1
    return state.epochs_since_improve >= patience


def _physical_constants(batch, scalers):
    spans = np.asarray(
        [scalers.pm[s.target_station].max - scalers.pm[s.target_station].min
         for s in batch]
    )[:, None]
    mins = np.asarray([scalers.pm[s.target_station].min for s in batch])[:, None]
    return spans, mins


def batch_loss(pred: Tensor, batch, config: TrainConfig, scalers=None) -> Tensor:
    """Loss over a [B x Q] prediction block, in the configured value space."""
    targets = np.stack([s.y for s in batch])
    if config.resolved_space() == "physical":
        if scalers is None:
            raise ConfigError("physical-space loss needs scalers")
        spans, mins = _physical_constants(batch, scalers)
        pred = pred * Tensor(spans) + Tensor(mins)
        targets = targets * spans + mins
    fn = msle if config.loss == "msle" else mse
    return fn(pred, targets)


def evaluate_loss(samples, params: ModelParams, model_cfg, config: TrainConfig,
                  scalers=None) -> float:
    """Eval-mode loss over a sample list, exact mean across all samples."""
    total, count = 0.0, 0
    for i in range(0, len(samples), config.batch_size):
        batch = samples[i : i + config.batch_size]
        pred = forward_batch(batch, params, model_cfg, mode="eval")
        loss = batch_loss(pred, batch, config, scalers)
        total += float(loss.data) * len(batch)
        count += len(batch)
    return total / count


def train(by_split: dict, model_cfg, config: TrainConfig, scalers=None,
          log_path=None, initial_params: ModelParams = None):
    """Epoch loop with seeded shuffling, clipping, and early stopping.

    Returns (best params, state). The returned parameters are the snapshot
    taken at the lowest validation loss seen; with max_epochs = 0 they are
    the untouched initial parameters.
    """
    config.validate()
    train_samples = by_split.get("train") or []
    val_samples = by_split.get("val") or []
    if not train_samples:
        raise EmptySplit("no training samples")
    if not val_samples:
        raise EmptySplit("no validation samples")
    if config.resolved_space() == "physical" and scalers is None:
        raise ConfigError("physical-space loss needs scalers")

    params = initial_params if initial_params is not None else init_params(
        model_cfg, config.seed
    )
    state = init_state(params)
    shuffle_rng = generator(config.seed, "shuffle")
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            state.epoch = epoch
            started = time.perf_counter()
            if config.shuffle:
                order = shuffle_rng.permutation(len(train_samples))
            else:
                order = np.arange(len(train_samples))

            total, seen = 0.0, 0
            for i in range(0, len(order), config.batch_size):
                batch = [train_samples[j] for j in order[i : i + config.batch_size]]
                drop_rng = generator(config.seed, "dropout", state.step)
                pred = forward_batch(batch, params, model_cfg, mode="train", rng=drop_rng)
                loss = batch_loss(pred, batch, config, scalers)
                loss_value = float(loss.data)
                if not np.isfinite(loss_value):
                    raise DivergedLoss(
                        f"non-finite loss at epoch {epoch}, step {state.step + 1}",
                        state_dump={
                            "epoch": epoch,
                            "step": state.step + 1,
                            "history": list(state.history),
                        },
                    )
                params.zero_grad()
                loss.backward()
                names = params.names()
                grads = [params[n].grad for n in names]
                if config.clip_norm is not None:
                    grads = clip_global_norm(grads, config.clip_norm)
                optimizer_step(params, dict(zip(names, grads)), state, config)
                total += loss_value * len(batch)
                seen += len(batch)

            train_loss = total / seen
            val_loss = evaluate_loss(val_samples, params, model_cfg, config, scalers)
            state.history.append(
                {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
            )
            if log_fh:
                line = {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "val_loss": val_loss,
                    "lr": config.lr,
                    "seconds": round(time.perf_counter() - started, 3),
                }
                log_fh.write(json.dumps(line) + "\n")
                log_fh.flush()
            log.info(
                "epoch %d: train %.6f val %.6f", epoch, train_loss, val_loss
            )
            if record_validation(state, val_loss, params, config.patience):
                state.stopped_early = True
                break
    finally:
        if log_fh:
            log_fh.close()
    return _restore(state), state
