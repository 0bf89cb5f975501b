"""Alternating worst-case selection and gradient minimization, end to end.

Each step: weak-augment the labeled batch; weak-augment the unlabeled
batch and score it under frozen parameters for targets and confidence
gating; build K strong variants of each weak view; pick the per-sample
worst (or mean/best) consistency loss; take one Nesterov SGD step on the
combined objective with decoupled weight decay and a cosine learning
rate; update the EMA copy.

The whole trajectory is a pure function of (config, seeds): every random
draw is derived per (sample, epoch) or per step, so runs are reproducible
and serialized states resume bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import augment
from . import autodiff as ad
from . import data as data_mod
from . import losses
from . import seeding
from .errors import ConfigError, NumericError
from .model import Network

METRICS_COLUMNS = ("step", "epoch", "loss_l", "loss_u", "loss_u_mean", "loss_u_min",
                   "loss_u_max", "mask_rate", "lr", "train_err", "test_err", "ema_test_err")


@dataclass
class TrainConfig:
    """Every knob of the training loop. Defaults follow the reference recipe."""

    lam: float = 1.0                   # unlabeled trade-off
    k: int = 3                         # variants per unlabeled sample
    k_set: tuple | None = None         # randomized-K mode: sample K per step
    aggregator: str = "max"            # max | mean | min
    beta: float = 0.95                 # confidence threshold
    b_l: int = 64
    b_u: int = 448
    lr: float = 0.03
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    total_steps: int = 2000
    warmup_steps: int = 0
    model_seed: int = 0
    data_seed: int = 0
    augment_seed: int = 0
    eps: float = 0.05                  # soft-CE clamp
    target_mode: str = "pseudo"        # pseudo | soft
    fixmatch_mode: bool = False        # single-variant path, requires k == 1
    eval_every: int = 50
    weak_noise: float = augment.WEAK_VECTOR_SIGMA
    hidden_dims: tuple = (64, 64)
    conv_filters: int = 8

    def validate(self):
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.k_set is not None and (len(self.k_set) == 0 or min(self.k_set) < 1):
            raise ConfigError(f"k_set must be a non-empty tuple of K >= 1, got {self.k_set}")
        if self.aggregator not in losses.AGGREGATOR_MODES:
            raise ConfigError(f"aggregator must be one of {losses.AGGREGATOR_MODES}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if self.b_l <= 0 or self.b_u < 0:
            raise ConfigError("batch sizes must be positive (b_u may be 0)")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 < self.eps < 0.5:
            raise ConfigError(f"eps must be in (0, 0.5), got {self.eps}")
        if self.target_mode not in ("pseudo", "soft"):
            raise ConfigError(f"target_mode must be pseudo or soft, got {self.target_mode}")
        if self.fixmatch_mode and (self.k != 1 or self.k_set is not None):
            raise ConfigError("fixmatch_mode requires k == 1 and no k_set")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        for name in ("model_seed", "data_seed", "augment_seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    def to_json_dict(self):
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = list(value)
            out[key.replace("_", "-")] = value
        return out

    @classmethod
    def from_json_dict(cls, doc):
        known = {f.replace("-", "_"): v for f, v in doc.items()}
        valid = set(cls.__dataclass_fields__)
        unknown = set(known) - valid
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        for key in ("k_set", "hidden_dims"):
            if key in known and known[key] is not None:
                known[key] = tuple(known[key])
        return cls(**known).validate()


@dataclass
class MetricsRow:
    step: int
    epoch: int
    loss_l: float
    loss_u: float
    loss_u_mean: float
    loss_u_min: float
    loss_u_max: float
    mask_rate: float
    lr: float
    train_err: float
    test_err: float
    ema_test_err: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in METRICS_COLUMNS)


@dataclass
class StepInfo:
    """Per-step telemetry handed to run_training callbacks."""

    step: int
    loss_l: float
    loss_u: float
    k: int
    batch_losses: losses.ConsistencyBatchLosses | None
    lr: float


class TrainState:
    """Network, EMA copy, optimizer velocity, and iterator position."""

    def __init__(self, net: Network, cfg: TrainConfig):
        self.net = net
        self.ema_net = net.clone()
        self.cfg = cfg
        self.step = 0
        self.velocity = [np.zeros_like(p.data) for p in net.parameters()]
        self.iterator_state = None

    def serialize(self):
        return {
            "step": self.step,
            "params": [p.data.copy() for p in self.net.parameters()],
            "ema": [p.data.copy() for p in self.ema_net.parameters()],
            "velocity": [v.copy() for v in self.velocity],
            "iterator": self.iterator_state,
        }

    def restore(self, blob):
        self.step = int(blob["step"])
        for p, arr in zip(self.net.parameters(), blob["params"]):
            p.data = arr.copy()
            p.zero_grad()
        for p, arr in zip(self.ema_net.parameters(), blob["ema"]):
            p.data = arr.copy()
        self.velocity = [v.copy() for v in blob["velocity"]]
        self.iterator_state = blob["iterator"]


def cosine_lr(step, total_steps, base_lr, warmup_steps=0) -> float:
    """base_lr * cos(7 pi t / (16 T)), optionally scaled by a linear warmup.

    Monotone nonincreasing after warmup; t is clamped to [0, T].
    """
    t = min(max(step, 0), total_steps)
    lr = base_lr * np.cos(7.0 * np.pi * t / (16.0 * total_steps))
    if warmup_steps > 0 and step < warmup_steps:
        lr *= step / warmup_steps
    return float(lr)


def ema_update(ema_params, params, decay):
    """Componentwise ema <- decay * ema + (1 - decay) * param."""
    if not 0.0 <= decay < 1.0:
        raise ConfigError(f"ema decay must be in [0, 1), got {decay}")
    for e, p in zip(ema_params, params):
        if e.data.shape != p.data.shape:
            raise ConfigError(
                f"ema shape {e.data.shape} does not match parameter shape {p.data.shape}"
            )
        e.data *= decay
        e.data += (1.0 - decay) * p.data


def _sgd_step(state: TrainState, lr):
    """Decoupled weight decay (weights only), then Nesterov momentum."""
    cfg = state.cfg
    weights = set(id(t) for t in state.net.weight_tensors())
    for p, v in zip(state.net.parameters(), state.velocity):
        if cfg.weight_decay > 0 and id(p) in weights:
            p.data *= 1.0 - lr * cfg.weight_decay
        g = p.grad
        v *= cfg.momentum
        v += g
        step_dir = g + cfg.momentum * v if cfg.nesterov else v
        p.data -= lr * step_dir


def _choose_k(cfg: TrainConfig, step) -> int:
    if cfg.k_set is None:
        return cfg.k
    rng = seeding.derive_rng(cfg.augment_seed, seeding.TAG_K_CHOICE, step)
    return int(cfg.k_set[rng.integers(0, len(cfg.k_set))])


def _weak_batch(features, ids, epochs, base_seed, sigma):
    keys = np.array([augment.weak_seed(base_seed, sid, ep) for sid, ep in zip(ids, epochs)],
                    dtype=np.uint64)
    return augment.weak_augment_batch(features, keys, vector_sigma=sigma)


def train_step(state: TrainState, dataset, batch: data_mod.Batch, k: int) -> StepInfo:
    """One optimization step. Mutates state in place and returns telemetry."""
    cfg = state.cfg
    net = state.net
    lr = cosine_lr(state.step, cfg.total_steps, cfg.lr, cfg.warmup_steps)

    x_l = _weak_batch(dataset.features[batch.labeled_idx], batch.labeled_idx,
                      batch.labeled_epochs, cfg.augment_seed, cfg.weak_noise)
    y_l = dataset.labels[batch.labeled_idx]

    net.zero_grads()
    loss_l = losses.supervised_loss(net, x_l, y_l)

    batch_losses = None
    loss_u_value = 0.0
    if cfg.lam > 0 and len(batch.unlabeled_idx) > 0:
        x_u = _weak_batch(dataset.features[batch.unlabeled_idx], batch.unlabeled_idx,
                          batch.unlabeled_epochs, cfg.augment_seed, cfg.weak_noise)
        usets = [
            augment.build_uncertainty_set(x_u[i], k, cfg.augment_seed,
                                          batch.unlabeled_idx[i], batch.unlabeled_epochs[i])
            for i in range(len(x_u))
        ]
        aggregator = "max" if cfg.fixmatch_mode else cfg.aggregator
        loss_u, batch_losses = losses.fixmatch_unlabeled_loss(
            net, list(x_u), usets, cfg.beta, aggregator=aggregator,
            target_mode=cfg.target_mode, eps=cfg.eps,
        )
        total = losses.total_loss(loss_l, loss_u, cfg.lam)
        loss_u_value = loss_u.item()
    else:
        total = loss_l

    if not np.isfinite(total.data).all():
        raise NumericError(
            f"non-finite loss at step {state.step}: loss_l={loss_l.item()!r}"
        )
    ad.backward(total)
    _sgd_step(state, lr)
    ema_update(state.ema_net.parameters(), net.parameters(), cfg.ema_decay)
    info = StepInfo(step=state.step, loss_l=loss_l.item(), loss_u=loss_u_value,
                    k=k, batch_losses=batch_losses, lr=lr)
    state.step += 1
    return info


def error_rate(net: Network, features, labels) -> float:
    if len(features) == 0:
        return 0.0
    return float((net.predict(features) != np.asarray(labels)).mean())


def build_network(cfg: TrainConfig, dataset: data_mod.Dataset) -> Network:
    if dataset.is_image:
        return Network.conv_net(dataset.features.shape[1:], dataset.n_c,
                                filters=cfg.conv_filters, hidden=cfg.hidden_dims[0],
                                seed=cfg.model_seed)
    dims = (dataset.features.shape[1], *cfg.hidden_dims, dataset.n_c)
    return Network.mlp(dims, seed=cfg.model_seed)


def run_training(cfg: TrainConfig, dataset: data_mod.Dataset, split: data_mod.SslSplit,
                 test_dataset: data_mod.Dataset | None = None, state: TrainState | None = None,
                 step_callback=None):
    """Run the full loop; returns (TrainState, list of MetricsRow).

    Metrics rows are emitted every cfg.eval_every steps and at the final
    step; the callback, when given, fires on every step with a StepInfo.
    A restored state resumes the exact trajectory of an uninterrupted run.
    """
    cfg.validate()
    if cfg.lam > 0 and cfg.b_u > 0 and len(split.unlabeled_indices) == 0:
        raise ConfigError("unlabeled loss enabled but the unlabeled pool is empty")

    if state is None:
        state = TrainState(build_network(cfg, dataset), cfg)
    iterator = data_mod.BatchIterator(split, cfg.b_l, cfg.b_u, cfg.data_seed)
    if state.iterator_state is not None:
        iterator.restore(state.iterator_state)

    rows = []
    labeled_features = dataset.features[split.labeled_indices]
    labeled_labels = dataset.labels[split.labeled_indices]
    while state.step < cfg.total_steps:
        batch = next(iterator)
        k = _choose_k(cfg, state.step)
        info = train_step(state, dataset, batch, k)
        state.iterator_state = iterator.state()
        is_eval = (info.step % cfg.eval_every == 0) or (state.step == cfg.total_steps)
        if is_eval:
            bl = info.batch_losses
            epoch = int(batch.unlabeled_epochs[0]) if len(batch.unlabeled_epochs) \
                else int(batch.labeled_epochs[0])
            rows.append(MetricsRow(
                step=info.step,
                epoch=epoch,
                loss_l=info.loss_l,
                loss_u=info.loss_u,
                loss_u_mean=bl.masked_batch_value("mean") if bl else 0.0,
                loss_u_min=bl.masked_batch_value("min") if bl else 0.0,
                loss_u_max=bl.masked_batch_value("max") if bl else 0.0,
                mask_rate=bl.mask_rate if bl else 0.0,
                lr=info.lr,
                train_err=error_rate(state.net, labeled_features, labeled_labels),
                test_err=error_rate(state.net, test_dataset.features, test_dataset.labels)
                if test_dataset is not None else float("nan"),
                ema_test_err=error_rate(state.ema_net, test_dataset.features, test_dataset.labels)
                if test_dataset is not None else float("nan"),
            ))
        if step_callback is not None:
            step_callback(info)
    return state, rows


def measure_step_time(cfg: TrainConfig, dataset, split, steps=30, warmup=5) -> float:
    """Median wall-clock seconds per optimization step for this config."""
    cfg = replace(cfg, total_steps=max(cfg.total_steps, steps + warmup))
    state = TrainState(build_network(cfg, dataset), cfg)
    iterator = data_mod.BatchIterator(split, cfg.b_l, cfg.b_u, cfg.data_seed)
    durations = []
    for i in range(steps + warmup):
        batch = next(iterator)
        k = _choose_k(cfg, state.step)
        t0 = time.perf_counter()
        train_step(state, dataset, batch, k)
        if i >= warmup:
            durations.append(time.perf_counter() - t0)
    return float(np.median(durations))
