"""Optimization loop: Adam with weight decay, the polynomial learning-rate
policy, the keep-probability schedule for DropBlock, epoch orchestration,
and evaluation into confusion counts.

All stochasticity inside an epoch derives from (seed, epoch), so resuming
from a checkpoint at epoch k replays exactly the run that never stopped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .metrics import ConfusionCounts
from .model import LdnetParams
from .tensor import Tensor, no_grad, softmax_cross_entropy


@dataclass
class TrainConfig:
    initial_lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    power: float = 0.9
    max_epochs: int = 100
    batch_size: int = 4
    kp_start: float = 0.0
    kp_end: float = 0.5
    seed: int = 0
    precision: str = "float32"

    def validate(self) -> list[str]:
        problems = []
        if self.initial_lr <= 0:
            problems.append(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.power < 0:
            problems.append(f"power must be >= 0, got {self.power}")
        if self.max_epochs < 0:
            problems.append(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            problems.append("adam betas must be in [0, 1)")
        if self.adam_eps <= 0:
            problems.append(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("kp_start", "kp_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                problems.append(f"{name} must be in [0, 1], got {v}")
        if self.precision not in ("float32", "float64"):
            problems.append(f"precision must be float32 or float64, got {self.precision!r}")
        return problems

    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    """initial_lr * (1 - epoch/max_epochs)^power; hits both endpoints exactly."""
    if epoch < 0 or epoch > cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    if epoch == 0:
        return cfg.initial_lr
    if epoch == cfg.max_epochs:
        return 0.0
    return cfg.initial_lr * (1.0 - epoch / cfg.max_epochs) ** cfg.power


def kp_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear keep-probability ramp between the configured endpoints."""
    if epoch < 0 or epoch > cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    if cfg.max_epochs == 0:
        return cfg.kp_end
    return cfg.kp_start + (cfg.kp_end - cfg.kp_start) * epoch / cfg.max_epochs


class AdamState:
    """First/second moment per parameter plus the shared step counter."""

    def __init__(self, named: dict[str, Tensor]):
        self.m = {n: np.zeros_like(t.values) for n, t in named.items()}
        self.v = {n: np.zeros_like(t.values) for n, t in named.items()}
        self.t = 0

    def as_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"adam.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam.v.{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, named: dict[str, Tensor], arrays: dict[str, np.ndarray], t: int):
        state = cls(named)
        for name in state.m:
            state.m[name][...] = arrays[f"adam.m.{name}"]
            state.v[name][...] = arrays[f"adam.v.{name}"]
        state.t = t
        return state


def adam_step(named: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig):
    """One in-place Adam update from the gradients left by backward().

    L2 weight decay is folded into the gradient (g <- g + wd * theta) before
    the moment updates; a non-finite gradient aborts the step untouched.
    """
    for name, tensor in named.items():
        g = tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam_step: non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, tensor in named.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.values)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * tensor.values
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bias1
        vhat = v / bias2
        tensor.values -= (lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(
            tensor.values.dtype, copy=False
        )


def make_batch(samples, dtype):
    """Stack samples into an NCHW tensor and an [N,H,W] label array."""
    frames = np.stack([s.frame.transpose(2, 0, 1) for s in samples]).astype(dtype)
    labels = np.stack([s.label for s in samples])
    return Tensor(frames), labels


def epoch_rngs(seed: int, epoch: int):
    """Deterministic per-epoch generators: (shuffle, regularizer)."""
    ss = np.random.SeedSequence([seed, epoch])
    children = ss.spawn(2)
    return np.random.default_rng(children[0]), np.random.default_rng(children[1])


def train_epoch(
    params: LdnetParams,
    samples,
    state: AdamState,
    epoch: int,
    cfg: TrainConfig,
) -> float:
    """One pass over shuffled samples in batches; returns the mean batch loss."""
    if not samples:
        raise ValueError("train_epoch: empty dataset")
    shuffle_rng, reg_rng = epoch_rngs(cfg.seed, epoch)
    order = shuffle_rng.permutation(len(samples))
    lr = poly_lr(epoch, cfg)
    params.set_keep_prob(kp_schedule(epoch, cfg))
    dtype = cfg.dtype()

    named = params.named_params()
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        batch = [samples[i] for i in order[start : start + cfg.batch_size]]
        x, labels = make_batch(batch, dtype)
        params.zero_grads()
        logits = params.forward(x, "train", rng=reg_rng)
        loss = softmax_cross_entropy(logits, labels)
        loss.backward()
        adam_step(named, state, lr, cfg)
        losses.append(float(loss.values))
    return float(np.mean(losses))


def evaluate(params: LdnetParams, samples, batch_size: int = 4) -> ConfusionCounts:
    """Argmax predictions accumulated into per-class confusion counts."""
    counts = ConfusionCounts(params.config.num_classes)
    dtype = np.float32
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            x, labels = make_batch(batch, dtype)
            logits = params.forward(x, "eval")
            pred = logits.values.argmax(axis=1)
            counts.accumulate(pred, labels)
    return counts


@dataclass
class EpochLog:
    epoch: int
    lr: float
    keep_prob: float
    loss: float
    val_mean_f1: Optional[float] = None
    val_mean_iou: Optional[float] = None


def fit(
    params: LdnetParams,
    train_samples,
    val_samples,
    cfg: TrainConfig,
    start_epoch: int = 0,
    state: Optional[AdamState] = None,
    on_epoch: Optional[Callable[[EpochLog, AdamState], None]] = None,
) -> tuple[list[EpochLog], AdamState]:
    """Run epochs [start_epoch, max_epochs) with per-epoch validation."""
    from .metrics import mean_report

    if state is None:
        state = AdamState(params.named_params())
    logs = []
    for epoch in range(start_epoch, cfg.max_epochs):
        loss = train_epoch(params, train_samples, state, epoch, cfg)
        entry = EpochLog(epoch, poly_lr(epoch, cfg), kp_schedule(epoch, cfg), loss)
        if val_samples:
            report = mean_report(evaluate(params, val_samples, cfg.batch_size), "lane-classes")
            entry.val_mean_f1 = report.mean_f1
            entry.val_mean_iou = report.mean_iou
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry, state)
    return logs, state
