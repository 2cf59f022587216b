"""End-to-end answerer: embed raw features, run the fusion stack, classify.

Raw per-region vectors (μ×d_v) and per-token vectors (L×d_w) are projected
to a common width, passed through the attention-flow stack, average-pooled
per modality, fused (element-wise product by default), and classified by a
two-layer MLP over a closed answer vocabulary. Training minimizes hard-label
cross entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .attention import (
    ATTENTION_TYPES,
    ORDERS,
    AttentionRecord,
    DfafBlockParams,
    ForwardContext,
    dfaf_stack_forward,
    init_dfaf_stack,
)
from .tensor import (
    LinearLayer,
    ShapeError,
    Tensor,
    add,
    apply_activation,
    avg_pool_rows,
    concat_cols,
    cross_entropy_rows,
    dropout,
    linear_forward,
    linear_init,
    mul,
)

FUSIONS = ("multiply", "add", "concat")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; everything a checkpoint must reproduce."""

    dim: int = 64
    heads: int = 4
    n_blocks: int = 1
    hidden: int = 128
    d_v: int = 64
    d_w: int = 32
    n_answers: int = 4
    fusion: str = "multiply"
    order: str = "r_then_e"
    attention_type: str = "full"

    def __post_init__(self):
        for name in ("dim", "heads", "n_blocks", "hidden", "d_v", "d_w", "n_answers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.dim % self.heads != 0:
            raise ShapeError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.attention_type not in ATTENTION_TYPES:
            raise ValueError(
                f"attention_type must be one of {ATTENTION_TYPES}, got {self.attention_type!r}"
            )


@dataclass
class ModelParams:
    """All trainable parameters plus the fusion-mode switch."""

    region_embed: LinearLayer
    word_embed: LinearLayer
    stack: list[DfafBlockParams]
    mlp_hidden: LinearLayer
    mlp_out: LinearLayer
    fusion: str = "multiply"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not self.stack:
            raise ValueError("model needs at least one block")
        dim = self.stack[0].dim
        expected_in = 2 * dim if self.fusion == "concat" else dim
        if self.mlp_hidden.in_dim != expected_in:
            raise ShapeError(
                f"{self.fusion} fusion feeds width {expected_in} to the classifier, "
                f"mlp_hidden expects {self.mlp_hidden.in_dim}"
            )
        if self.mlp_out.in_dim != self.mlp_hidden.out_dim:
            raise ShapeError(
                f"classifier layers disagree: hidden out {self.mlp_hidden.out_dim}, "
                f"output in {self.mlp_out.in_dim}"
            )

    @property
    def dim(self) -> int:
        return self.stack[0].dim

    @property
    def n_answers(self) -> int:
        return self.mlp_out.out_dim

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.region_embed.named_parameters(f"{prefix}region_embed.")
        yield from self.word_embed.named_parameters(f"{prefix}word_embed.")
        for i, block in enumerate(self.stack):
            yield from block.named_parameters(f"{prefix}stack.{i}.")
        yield from self.mlp_hidden.named_parameters(f"{prefix}mlp_hidden.")
        yield from self.mlp_out.named_parameters(f"{prefix}mlp_out.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class Prediction:
    """Classifier output for one instance (or a batch).

    ``logits`` stays tape-connected for the loss; ``probabilities`` is a
    detached convenience copy that sums to 1 along the last axis.
    """

    logits: Tensor
    probabilities: np.ndarray
    records: list[AttentionRecord] | None = None


def build_model(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters; rng draw order is fixed, so equal seeds build equal
    models."""
    fused_width = 2 * config.dim if config.fusion == "concat" else config.dim
    return ModelParams(
        region_embed=linear_init(config.d_v, config.dim, rng),
        word_embed=linear_init(config.d_w, config.dim, rng),
        stack=init_dfaf_stack(
            config.dim,
            config.heads,
            config.n_blocks,
            rng,
            order=config.order,
            attention_type=config.attention_type,
        ),
        mlp_hidden=linear_init(fused_width, config.hidden, rng),
        mlp_out=linear_init(config.hidden, config.n_answers, rng),
        fusion=config.fusion,
    )


def config_of(params: ModelParams, d_v: int | None = None, d_w: int | None = None) -> ModelConfig:
    """Recover the architecture description from a parameter set."""
    block = params.stack[0]
    return ModelConfig(
        dim=params.dim,
        heads=block.heads,
        n_blocks=len(params.stack),
        hidden=params.mlp_hidden.out_dim,
        d_v=d_v if d_v is not None else params.region_embed.in_dim,
        d_w=d_w if d_w is not None else params.word_embed.in_dim,
        n_answers=params.n_answers,
        fusion=params.fusion,
        order=block.order,
        attention_type=block.attention_type,
    )


def embed_inputs(
    raw_r: Tensor, raw_e: Tensor, p: ModelParams, ctx: ForwardContext | None = None
) -> tuple[Tensor, Tensor]:
    """Project both modalities to the shared width (dropout in train mode)."""
    if raw_r.shape[-1] != p.region_embed.in_dim:
        raise ShapeError(
            f"region features have width {raw_r.shape[-1]}, "
            f"model expects {p.region_embed.in_dim}"
        )
    if raw_e.shape[-1] != p.word_embed.in_dim:
        raise ShapeError(
            f"word features have width {raw_e.shape[-1]}, "
            f"model expects {p.word_embed.in_dim}"
        )
    r0 = linear_forward(p.region_embed, raw_r)
    e0 = linear_forward(p.word_embed, raw_e)
    if ctx is not None and ctx.mode == "train" and ctx.dropout_rate > 0.0:
        r0 = dropout(r0, ctx.dropout_rate, "train", ctx.rng)
        e0 = dropout(e0, ctx.dropout_rate, "train", ctx.rng)
    return r0, e0


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def fuse_and_classify(
    r: Tensor,
    e: Tensor,
    p: ModelParams,
    mode: str = "eval",
    records: list[AttentionRecord] | None = None,
) -> Prediction:
    """Pool both modalities, fuse, and score the answer vocabulary."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if r.shape[-2] < 1 or e.shape[-2] < 1:
        raise ShapeError(
            f"cannot pool an empty modality: regions {r.shape}, words {e.shape}"
        )
    v = avg_pool_rows(r)
    q = avg_pool_rows(e)
    if p.fusion == "multiply":
        fused = mul(v, q)
    elif p.fusion == "add":
        fused = add(v, q)
    else:
        fused = concat_cols(v, q)
    logits = linear_forward(
        p.mlp_out, apply_activation("relu", linear_forward(p.mlp_hidden, fused))
    )
    return Prediction(
        logits=logits, probabilities=_stable_softmax(logits.data), records=records
    )


def forward(
    raw_r: Tensor,
    raw_e: Tensor,
    p: ModelParams,
    ctx: ForwardContext | None = None,
    records: list[AttentionRecord] | None = None,
) -> Prediction:
    """Full pipeline, mode taken from ``ctx`` (None means eval)."""
    r0, e0 = embed_inputs(raw_r, raw_e, p, ctx)
    r_out, e_out = dfaf_stack_forward(r0, e0, p.stack, records=records, ctx=ctx)
    mode = ctx.mode if ctx is not None else "eval"
    return fuse_and_classify(r_out, e_out, p, mode=mode, records=records)


def predict(raw_r: Tensor, raw_e: Tensor, p: ModelParams, record: bool = False) -> Prediction:
    """Deterministic eval-mode forward; records one AttentionRecord per block
    when asked."""
    records: list[AttentionRecord] | None = [] if record else None
    return forward(raw_r, raw_e, p, ctx=None, records=records)


def cross_entropy_loss(pred: Prediction, target: int | Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the target answer(s)."""
    targets = [target] if isinstance(target, (int, np.integer)) else list(target)
    n = pred.logits.shape[0] if pred.logits.ndim == 2 else 1
    if len(targets) != n:
        raise ShapeError(f"{n} prediction rows but {len(targets)} targets")
    return cross_entropy_rows(pred.logits, targets)
