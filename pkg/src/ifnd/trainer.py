"""Contrastive training with incremental false negative detection.

The encoder ``f`` is an MLP with a rectifier after every layer; the projection
head ``g`` is an MLP with rectifiers between layers and a linear output that is
L2-normalized to give ``z``. Gradients are computed by hand.

Per epoch the trainer runs minibatch SGD against the configured objective using
the current pseudo labels, then (on clustering epochs) re-clusters the clean
encoder features, accepts the most confident labels at ``rate_at(schedule, epoch)``
and appends a :class:`~ifnd.metrics.MetricRecord`.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .embedding import normalize_rows
from .errors import ConfigError, MissingCache, NonFiniteLoss, ShapeMismatch
from .losses import Objective, ViewBatch, hierarchical_loss, loss_inst, view_labels
from .metrics import MetricRecord, linear_probe, mtnr, mtpr, nmi
from .pseudo_labels import (
    AcceptanceSchedule,
    PseudoLabelState,
    refresh,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ifnd-checkpoint"
CHECKPOINT_VERSION = 1


class TrainObjective(str, enum.Enum):
    INST = "inst"
    ELIM = "elim"
    ATTR = "attr"
    ATTR_ORACLE = "attr_oracle"


@dataclass
class EncoderParams:
    """Layer weights (``in x out``) and biases; the first ``n_encoder`` layers form ``f``."""

    weights: list
    biases: list
    n_encoder: int

    @classmethod
    def init(cls, input_dim: int, encoder_widths: Sequence[int], head_widths: Sequence[int],
             rng: np.random.Generator) -> "EncoderParams":
        dims = [input_dim, *encoder_widths, *head_widths]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, len(encoder_widths))

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need matching, nonempty weight and bias lists")
        if not 1 <= self.n_encoder < len(self.weights):
            raise ShapeMismatch("encoder and head each need at least one layer")
        for w, nxt in zip(self.weights[:-1], self.weights[1:]):
            if w.shape[1] != nxt.shape[0]:
                raise ShapeMismatch(f"layer shapes do not chain: {w.shape} then {nxt.shape}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ShapeMismatch(f"bias {b.shape} does not match weight {w.shape}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.n_encoder)

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    def to_dict(self) -> dict:
        return {
            "n_encoder": self.n_encoder,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        return cls([np.asarray(w, dtype=np.float64) for w in d["weights"]],
                   [np.asarray(b, dtype=np.float64) for b in d["biases"]],
                   d["n_encoder"])


@dataclass
class ForwardCache:
    inputs: list
    pre: list
    head_out: np.ndarray
    norms: np.ndarray
    v: np.ndarray
    z: np.ndarray


def _relu(x):
    return np.maximum(x, 0.0)


def encode(params: EncoderParams, x) -> np.ndarray:
    """Features ``v = f(x)`` only."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise ShapeMismatch(f"input shape {h.shape} does not match input dim {params.input_dim}")
    for w, b in zip(params.weights[:params.n_encoder], params.biases[:params.n_encoder]):
        h = _relu(h @ w + b)
    return h


def forward(params: EncoderParams, x) -> ForwardCache:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise ShapeMismatch(f"input shape {h.shape} does not match input dim {params.input_dim}")
    inputs, pre = [], []
    n_layers = len(params.weights)
    v = None
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        h = a if li == n_layers - 1 else _relu(a)
        if li == params.n_encoder - 1:
            v = h
    z = normalize_rows(h).values
    return ForwardCache(inputs, pre, h, np.linalg.norm(h, axis=1), v, z)


def backward(params: EncoderParams, cache: Optional[ForwardCache], dz) -> tuple[list, list]:
    """Parameter gradients given ``dL/dz``; returns ``(dW list, db list)``."""
    if cache is None:
        raise MissingCache("backward needs the cache from a forward pass")
    dz = np.asarray(dz, dtype=np.float64)
    z = cache.z
    # through z = h / |h|
    dh = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / cache.norms[:, None]
    n_layers = len(params.weights)
    dws, dbs = [None] * n_layers, [None] * n_layers
    for li in range(n_layers - 1, -1, -1):
        da = dh if li == n_layers - 1 else dh * (cache.pre[li] > 0)
        dws[li] = cache.inputs[li].T @ da
        dbs[li] = da.sum(axis=0)
        if li:
            dh = da @ params.weights[li].T
    return dws, dbs


def augment(sample, rng: np.random.Generator, noise: float, scaling: bool = True):
    """Two views of ``sample`` (one vector or a batch of rows): Gaussian noise plus a per-view scale in [0.8, 1.2]."""
    if noise < 0:
        raise ValueError("noise scale must be nonnegative")
    x = np.asarray(sample, dtype=np.float64)
    views = []
    for _ in range(2):
        view = x + rng.normal(0.0, noise, size=x.shape) if noise > 0 else x.copy()
        if scaling:
            shape = () if x.ndim == 1 else (x.shape[0], 1)
            view = view * rng.uniform(0.8, 1.2, size=shape)
        views.append(view)
    return views[0], views[1]


@dataclass
class Dataset:
    samples: np.ndarray
    true_label: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.true_label = np.asarray(self.true_label, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.samples) == 0:
            raise ValueError("dataset needs a nonempty 2-D sample matrix")
        if len(self.true_label) != len(self.samples):
            raise ValueError("one true label per sample is required")

    def __len__(self):
        return len(self.samples)


@dataclass
class TrainConfig:
    total_epochs: int = 50
    batch_m: int = 64
    tau: float = 0.2
    objective: TrainObjective = TrainObjective.ELIM
    schedule: AcceptanceSchedule = field(default_factory=AcceptanceSchedule)
    ks: list = field(default_factory=lambda: [10])
    refresh_every: int = 1
    learning_rate: float = 0.1
    lr_decay: str = "cosine"
    momentum: float = 0.0
    seed: int = 0
    noise: float = 0.1
    scaling: bool = True
    encoder_widths: list = field(default_factory=lambda: [32])
    head_widths: list = field(default_factory=lambda: [16])
    probe_fraction: float = 0.2
    probe_epochs: int = 300
    probe_lr: float = 0.5
    kmeans_restarts: int = 3
    kmeans_max_iters: int = 100

    def __post_init__(self):
        self.objective = TrainObjective(self.objective)
        if isinstance(self.schedule, dict):
            self.schedule = AcceptanceSchedule(**self.schedule)
        if self.schedule.total_epochs != self.total_epochs:
            self.schedule = AcceptanceSchedule(self.schedule.scheme, self.schedule.initial_rate,
                                               self.schedule.final_rate, self.total_epochs,
                                               self.schedule.step_epoch)
        self.ks = [int(k) for k in self.ks]
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be positive")
        if self.batch_m < 2:
            raise ConfigError("batch_m must be at least 2 so every anchor has negatives")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks needs at least one positive cluster count")
        if self.refresh_every < 1:
            raise ConfigError("refresh_every must be positive")
        if self.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if not 0.0 < self.probe_fraction < 1.0:
            raise ConfigError("probe_fraction must lie strictly between 0 and 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay == "none":
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.total_epochs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.value
        d["schedule"] = {
            "scheme": self.schedule.scheme.value,
            "initial_rate": self.schedule.initial_rate,
            "final_rate": self.schedule.final_rate,
            "total_epochs": self.schedule.total_epochs,
            "step_epoch": self.schedule.step_epoch,
        }
        return d


@dataclass
class TrainResult:
    params: EncoderParams
    records: list
    state: PseudoLabelState
    features: np.ndarray


def _streams(seed: int):
    init, data, cluster, split = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(data),
            int(cluster.generate_state(1)[0]), np.random.default_rng(split))


def _unit_features(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # dead-rectifier rows stay at the origin rather than aborting the refresh
    return v / np.where(norms > 1e-12, norms, 1.0)


def batch_loss(params: EncoderParams, x_views: np.ndarray, level_labels, objective: TrainObjective,
               tau: float):
    """Forward pass plus the objective for one interleaved batch of views."""
    cache = forward(params, x_views)
    batch = ViewBatch(cache.z)
    if objective is TrainObjective.INST:
        report = loss_inst(batch, tau)
    else:
        obj = Objective.ELIM if objective is TrainObjective.ELIM else Objective.ATTR
        report = hierarchical_loss(batch, level_labels, obj, tau)
    return cache, report


def train(dataset: Dataset, config: TrainConfig, *, resume: Optional[dict] = None,
          on_epoch: Optional[Callable[[int, EncoderParams, PseudoLabelState], None]] = None,
          checkpoint_path=None) -> TrainResult:
    n = len(dataset)
    if n < 2:
        raise ValueError("training needs at least two samples")
    init_rng, data_rng, cluster_seed, split_rng = _streams(config.seed)
    params = EncoderParams.init(dataset.samples.shape[1], config.encoder_widths,
                                config.head_widths, init_rng)
    order = split_rng.permutation(n)
    n_test = max(1, int(round(config.probe_fraction * n)))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])

    state = PseudoLabelState.singletons(n, config.ks)
    velocity = [np.zeros_like(a) for a in params.arrays()]
    records: list[MetricRecord] = []
    start = 0
    if resume is not None:
        params = EncoderParams.from_dict(resume["params"])
        state = PseudoLabelState.from_dict(resume["state"])
        data_rng.bit_generator.state = resume["rng_state"]
        velocity = [np.asarray(a, dtype=np.float64) for a in resume["velocity"]]
        records = [MetricRecord(**r) for r in resume["records"]]
        start = resume["epoch"] + 1

    oracle_labels = [dataset.true_label] * len(config.ks)
    v_all = encode(params, dataset.samples)

    for epoch in range(start, config.total_epochs):
        lr = config.lr_at(epoch)
        perm = data_rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_m):
            idx = perm[s:s + config.batch_m]
            if len(idx) < 2:
                continue
            first, second = augment(dataset.samples[idx], data_rng, config.noise, config.scaling)
            x_views = np.empty((2 * len(idx), first.shape[1]))
            x_views[0::2] = first
            x_views[1::2] = second
            if config.objective is TrainObjective.ATTR_ORACLE:
                levels = [view_labels(y[idx]) for y in oracle_labels]
            elif config.objective is TrainObjective.INST:
                levels = None
            else:
                levels = [view_labels(y[idx]) for y in state.labels]
            cache, report = batch_loss(params, x_views, levels, config.objective, config.tau)
            if not np.isfinite(report.value):
                raise NonFiniteLoss(f"loss diverged at epoch {epoch}")
            dws, dbs = backward(params, cache, report.grad)
            for arr, g, vel in zip(params.arrays(), [*dws, *dbs], velocity):
                vel *= config.momentum
                vel += g
                arr -= lr * vel
            losses.append(report.value)

        v_all = encode(params, dataset.samples)
        if not np.all(np.isfinite(v_all)):
            raise NonFiniteLoss(f"encoder features became non-finite at epoch {epoch}")
        if epoch % config.refresh_every == 0 or epoch == config.total_epochs - 1:
            clustered = refresh(_unit_features(v_all), config.ks, config.schedule, epoch,
                                seed=cluster_seed, tau=config.tau,
                                max_iters=config.kmeans_max_iters, restarts=config.kmeans_restarts)
            if config.objective in (TrainObjective.ELIM, TrainObjective.ATTR):
                state = clustered
                detected = state.labels[0]
            elif config.objective is TrainObjective.ATTR_ORACLE:
                detected = dataset.true_label
            else:
                detected = PseudoLabelState.singletons(n, config.ks).labels[0]
            probe = linear_probe(v_all[train_idx], dataset.true_label[train_idx],
                                 v_all[test_idx], dataset.true_label[test_idx],
                                 epochs=config.probe_epochs, lr=config.probe_lr)
            rec = MetricRecord(
                epoch=epoch,
                mtpr=mtpr(dataset.true_label, detected),
                mtnr=mtnr(dataset.true_label, detected),
                nmi=nmi(dataset.true_label, clustered.levels[0].assignment),
                loss=float(np.mean(losses)) if losses else float("nan"),
                probe_acc=probe,
            )
            records.append(rec)
            log.debug("epoch %d rate %.3f %s", epoch, clustered.rate, rec)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, state, epoch, data_rng, velocity, records)
        if on_epoch is not None:
            on_epoch(epoch, params, state)
    return TrainResult(params, records, state, v_all)


def checkpoint_dict(params: EncoderParams, state: PseudoLabelState, epoch: int,
                    rng: Optional[np.random.Generator] = None, velocity=None, records=()) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "epoch": epoch,
        "params": params.to_dict(),
        "state": state.to_dict(),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "velocity": [np.asarray(a).tolist() for a in (velocity or [])],
        "records": [asdict(r) for r in records],
    }


def save_checkpoint(path, params, state, epoch, rng=None, velocity=None, records=()) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        json.dump(checkpoint_dict(params, state, epoch, rng, velocity, records), fh)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an ifnd checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    return d
