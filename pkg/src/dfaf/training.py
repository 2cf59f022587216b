"""Adamax optimization, the staged learning-rate schedule, and the train loop.

The optimizer keeps a first-moment average and an infinity-norm accumulator
per parameter; updates are bias-corrected through the first moment only. The
learning rate starts at its base value, doubles after a short warm phase,
and later drops to a quarter of the doubled rate, where it stays. Gradients
are clipped before every step — by global L2 norm by default, or per value
behind a config switch. A non-finite loss aborts training with a diagnostic
rather than silently continuing.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attention import ForwardContext
from .data import FeatureDataset, make_batches
from .model import ModelParams, cross_entropy_loss, forward, predict
from .tensor import GradTape, ShapeError, Tensor, backward

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

CLIP_MODES = ("global_norm", "per_value")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class AdamaxState:
    """Per-parameter first moments and infinity norms, plus the step count."""

    moments: list[np.ndarray]
    inf_norms: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamaxState":
        return cls(
            moments=[np.zeros_like(p.data) for p in params],
            inf_norms=[np.zeros_like(p.data) for p in params],
        )

    def as_checkpoint_trailer(self) -> tuple[int, list[np.ndarray], list[np.ndarray]]:
        return self.t, self.moments, self.inf_norms

    @classmethod
    def from_checkpoint_trailer(
        cls, trailer: tuple[int, list[np.ndarray], list[np.ndarray]]
    ) -> "AdamaxState":
        step, moments, inf_norms = trailer
        return cls(moments=[m.copy() for m in moments], inf_norms=[u.copy() for u in inf_norms], t=step)


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    clip: float = 0.25
    clip_mode: str = "global_norm"
    dropout: float = 0.1
    seed: int = 0
    schedule_breakpoints: tuple[int, int] = (2, 10)
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError(f"base_lr must be nonnegative, got {self.base_lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.clip <= 0:
            raise ValueError(f"clip threshold must be positive, got {self.clip}")
        if self.clip_mode not in CLIP_MODES:
            raise ValueError(f"clip_mode must be one of {CLIP_MODES}, got {self.clip_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        lo, hi = self.schedule_breakpoints
        if not (isinstance(lo, int) and isinstance(hi, int) and 1 <= lo < hi):
            raise ValueError(
                f"schedule breakpoints must be increasing epochs, got {self.schedule_breakpoints}"
            )


def adamax_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamaxState,
    lr: float,
) -> None:
    """One in-place update:

        m ← β1·m + (1−β1)·g
        u ← max(β2·u, |g|)
        θ ← θ − lr/(1−β1^t) · m/(u+ε)

    so the very first step moves every coordinate by −lr·sign(g).
    """
    if len(params) != len(grads) or len(params) != len(state.moments):
        raise ShapeError(
            f"{len(params)} params, {len(grads)} grads, {len(state.moments)} state rows"
        )
    state.t += 1
    correction = 1.0 - BETA1**state.t
    for p, g, m, u in zip(params, grads, state.moments, state.inf_norms):
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= BETA1
        m += (1.0 - BETA1) * g
        np.maximum(BETA2 * u, np.abs(g), out=u)
        p.data -= (lr / correction) * m / (u + EPSILON)


def lr_schedule(
    epoch: int, base_lr: float, breakpoints: tuple[int, int] = (2, 10)
) -> float:
    """Staged rate: base through the first breakpoint epoch, then doubled
    through the second, then a single drop to half base, held thereafter."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    lo, hi = breakpoints
    if epoch <= lo:
        return base_lr
    if epoch <= hi:
        return 2.0 * base_lr
    return 2.0 * base_lr * 0.25


def clip_gradients(
    grads: Sequence[np.ndarray], threshold: float = 0.25, mode: str = "global_norm"
) -> list[np.ndarray]:
    """Bound gradient magnitude before a step.

    global_norm: if the L2 norm over all entries of all arrays exceeds the
    threshold, scale every array by threshold/norm (direction preserved).
    per_value: clamp each entry into [−threshold, threshold].
    """
    if threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    if mode == "per_value":
        return [np.clip(g, -threshold, threshold) for g in grads]
    if mode != "global_norm":
        raise ValueError(f"clip mode must be one of {CLIP_MODES}, got {mode!r}")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= threshold:
        return list(grads)
    factor = threshold / total
    return [g * factor for g in grads]


def evaluate_accuracy(
    model: ModelParams, dataset: FeatureDataset, batch_size: int = 256
) -> float:
    """Fraction of instances whose argmax logit hits the stored answer."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for batch in make_batches(dataset, batch_size, mode="sequential"):
        pred = predict(Tensor(batch.regions), Tensor(batch.tokens), model)
        correct += int((pred.logits.data.argmax(axis=-1) == batch.answers).sum())
    return correct / len(dataset)


def evaluate_by_template(
    model: ModelParams, dataset: FeatureDataset, batch_size: int = 256
) -> dict:
    """Overall and per-template accuracy; the weighted per-template mean
    equals the overall accuracy exactly."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = np.zeros(len(dataset.template_names), dtype=np.int64)
    totals = np.zeros(len(dataset.template_names), dtype=np.int64)
    for batch in make_batches(dataset, batch_size, mode="sequential"):
        pred = predict(Tensor(batch.regions), Tensor(batch.tokens), model)
        good = pred.logits.data.argmax(axis=-1) == batch.answers
        for tid in range(len(dataset.template_names)):
            mask = batch.template_ids == tid
            hits[tid] += int(good[mask].sum())
            totals[tid] += int(mask.sum())
    per_template = {
        name: {
            "n": int(totals[i]),
            "accuracy": float(hits[i] / totals[i]) if totals[i] else None,
        }
        for i, name in enumerate(dataset.template_names)
    }
    return {
        "overall": float(hits.sum() / totals.sum()),
        "n": int(totals.sum()),
        "per_template": per_template,
    }


def train(
    model: ModelParams,
    dataset: FeatureDataset,
    cfg: TrainConfig,
    eval_dataset: FeatureDataset | None = None,
    state: AdamaxState | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[list[dict], AdamaxState]:
    """Optimize the model in place; returns per-epoch metric rows and the
    final optimizer state (resumable via its checkpoint trailer).

    Eval accuracy is measured on ``eval_dataset`` when given, otherwise on
    the training data. Fully deterministic given cfg.seed (wall_ms aside).
    """
    if dataset.n_answers != model.n_answers:
        raise ShapeError(
            f"dataset has {dataset.n_answers} answers, model head has {model.n_answers}"
        )
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    if state is None:
        state = AdamaxState.for_params(params)
    ctx = ForwardContext("train", cfg.dropout, rng)
    metrics: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        lr = lr_schedule(epoch, cfg.base_lr, cfg.schedule_breakpoints)
        loss_sum, seen = 0.0, 0
        for batch in make_batches(dataset, cfg.batch_size, rng, "shuffle"):
            for p in params:
                p.zero_grad()
            with GradTape() as tape:
                pred = forward(Tensor(batch.regions), Tensor(batch.tokens), model, ctx)
                loss = cross_entropy_loss(pred, batch.answers.tolist())
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss {loss_value} at epoch {epoch} after "
                    f"{state.t} optimizer steps (lr {lr})"
                )
            backward(tape, loss)
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
            ]
            grads = clip_gradients(grads, cfg.clip, cfg.clip_mode)
            adamax_step(params, grads, state, lr)
            loss_sum += loss_value * len(batch)
            seen += len(batch)
        eval_ds = eval_dataset if eval_dataset is not None else dataset
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "eval_acc": evaluate_accuracy(model, eval_ds, cfg.eval_batch_size),
            "wall_ms": (time.perf_counter() - started) * 1000.0,
        }
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return metrics, state
