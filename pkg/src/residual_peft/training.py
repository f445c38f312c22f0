"""BCE fine-tuning with AdamW and a step schedule, plus MAE/AP evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .data import stack
from .variants import PeftModel, forward, predict_proba

__all__ = [
    "NonFiniteError",
    "AdamWConfig",
    "TrainConfig",
    "AdamW",
    "MetricReport",
    "bce_loss",
    "adamw_step",
    "steplr",
    "mean_absolute_error",
    "average_precision",
    "evaluate_mae",
    "evaluate_ap",
    "train",
]


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    step_size: int = 10
    gamma: float = 0.5
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    adamw: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self):
        if isinstance(self.adamw, dict):
            object.__setattr__(self, "adamw", AdamWConfig(**self.adamw))
        if not self.lr0 >= 0:
            raise ValueError(f"lr0 must be non-negative, got {self.lr0}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.step_size < 1:
            raise ValueError(f"step_size must be >= 1, got {self.step_size}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form.

    ``max(z, 0) - z*t + log(1 + exp(-|z|))`` averaged over every element; for a
    batch of equal-size masks this is the mean over images of per-image means.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_loss: logits {logits.shape} vs target {t.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce_loss targets must be 0 or 1")
    z = logits.data
    value = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    p = ad._stable_sigmoid(z)
    return ad.record(np.array(value.mean()), (logits,), lambda g: (g * (p - t) / n,))


def steplr(lr0: float, epoch: int, step_size: int = 10, gamma: float = 0.5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * gamma ** (epoch // step_size)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
               lr: float, cfg: AdamWConfig = AdamWConfig()) -> None:
    """One in-place AdamW update (decoupled weight decay, bias-corrected moments).

    ``state`` maps each parameter name to ``{"m", "v", "t"}`` and is created on
    first use. Raises :class:`NonFiniteError` before touching anything if some
    gradient is not finite.
    """
    if set(grads) != set(params):
        raise KeyError(f"gradients given for {sorted(set(grads) ^ set(params))} mismatch the trainable set")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in params.items():
        g = grads[name]
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
        st["t"] += 1
        t = st["t"]
        p *= 1.0 - lr * cfg.weight_decay
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * (g * g)
        m_hat = st["m"] / (1 - b1**t)
        v_hat = st["v"] / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


class AdamW:
    """Optimizer over a fixed name -> Tensor mapping of trainable parameters."""

    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig = AdamWConfig()):
        self.params = dict(params)
        self.cfg = cfg
        self.state: dict = {}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        grads = {}
        for name, t in self.params.items():
            grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        adamw_step({k: t.data for k, t in self.params.items()}, grads, self.state, lr, self.cfg)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def mean_absolute_error(probs: np.ndarray, masks: np.ndarray) -> float:
    """Mean over samples of the per-pixel mean ``|p - t|``."""
    probs, masks = np.asarray(probs, dtype=np.float64), np.asarray(masks, dtype=np.float64)
    if probs.shape != masks.shape:
        raise ShapeError(f"predictions {probs.shape} vs masks {masks.shape}")
    if probs.shape[0] == 0:
        raise ValueError("no samples to evaluate")
    per_sample = np.abs(probs - masks).reshape(probs.shape[0], -1).mean(axis=1)
    return float(per_sample.mean())


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Step-wise area under the precision-recall curve over all pixels.

    Pixels with equal scores form one group and are admitted together, so the
    result does not depend on input order. Returns ``None`` when there is no
    positive pixel.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel() > 0.5
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in size")
    positives = int(y.sum())
    if positives == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    new_tp = np.diff(np.r_[0, tp])
    return float(np.sum(new_tp / positives * (tp / seen)))


def _arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple):
        return dataset
    return stack(dataset)


def evaluate_mae(model: PeftModel, dataset) -> float:
    images, masks = _arrays(dataset)
    return mean_absolute_error(predict_proba(model, images), masks)


def evaluate_ap(model: PeftModel, dataset) -> float | None:
    images, masks = _arrays(dataset)
    return average_precision(predict_proba(model, images), masks)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    mae: float
    ap: float | None
    best_mae: float
    best_epoch: int
    initial_mae: float
    loss_curve: list[float]
    lr_curve: list[float]
    mae_curve: list[float]
    seconds_per_epoch: list[float] = field(default_factory=list)

    def to_dict(self, timings: bool = False) -> dict:
        out = asdict(self)
        if not timings:
            out.pop("seconds_per_epoch")
        return out


def train(model: PeftModel, train_set, test_set, config: TrainConfig = TrainConfig(),
          log: Callable[[dict], None] | None = None,
          on_best: Callable[[int, float], None] | None = None) -> MetricReport:
    """Fine-tune the trainable parameters of ``model`` in place.

    Each epoch shuffles the training set with a generator seeded by
    ``config.seed``, takes mini-batch AdamW steps at the StepLR rate for that
    epoch, then scores the held-out set. ``log`` receives one record per
    epoch; ``on_best(epoch, mae)`` fires whenever held-out MAE improves
    (the caller decides how to checkpoint).
    """
    images, masks = _arrays(train_set)
    test_images, test_masks = _arrays(test_set)
    if len(images) == 0:
        raise ValueError("empty training set")
    params = model.trainable_parameters()
    frozen = model.frozen_parameters()
    for t in frozen.values():
        t.requires_grad = False
        t.grad = None
    opt = AdamW(params, config.adamw)
    rng = np.random.default_rng(config.seed)

    initial_mae = mean_absolute_error(predict_proba(model, test_images), test_masks)
    best_mae, best_epoch = initial_mae, -1
    if on_best is not None:
        on_best(-1, initial_mae)
    losses, lrs, maes, seconds = [], [], [], []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = steplr(config.lr0, epoch, config.step_size, config.gamma)
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = bce_loss(forward(model, images[idx]), masks[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            tape.backward(loss)
            opt.step(lr)
            total += value * len(idx)
        train_loss = total / len(images)
        mae = mean_absolute_error(predict_proba(model, test_images), test_masks)
        elapsed = time.perf_counter() - started
        losses.append(train_loss)
        lrs.append(lr)
        maes.append(mae)
        seconds.append(elapsed)
        if mae < best_mae:
            best_mae, best_epoch = mae, epoch
            if on_best is not None:
                on_best(epoch, mae)
        if log is not None:
            log({"epoch": epoch, "lr": lr, "train_loss": train_loss, "mae": mae, "seconds": elapsed})
    probs = predict_proba(model, test_images)
    final_mae = mean_absolute_error(probs, test_masks) if config.epochs else initial_mae
    return MetricReport(final_mae, average_precision(probs, test_masks), best_mae, best_epoch,
                        initial_mae, losses, lrs, maes, seconds)
