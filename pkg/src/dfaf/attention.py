"""Inter- and intra-modality attention flow between region and word features.

Two module families operate on a pair of feature matrices (regions ``r``,
words ``e``), both projected to a shared width ``dim``:

* Inter-modality flow: bidirectional co-attention. Each modality attends over
  the other, pulls in weighted value vectors, and fuses them with its own
  features through a concatenation + linear layer. Updates can run in
  parallel or sequentially (the second pass re-projects the freshly updated
  modality through the same projection weights).

* Intra-modality flow: self-attention within each modality. In the dynamic
  variant each modality's query and key features are modulated channel-wise
  by ``1 + sigmoid(linear(avg_pool(other modality)))`` — so what a modality
  attends to within itself is conditioned on the other modality. Value
  features are never gated. The naive variant skips gating entirely and is
  fully independent of the other modality. Both use a residual update.

Multi-head attention splits the feature axis into contiguous groups; each
group attends independently with scaling by the square root of the group
width. Gates are computed at full width and split alongside the channels.

A block is inter-modality flow followed by intra-modality flow; blocks stack
sequentially. There is no normalization anywhere, and dropout (train mode
only) follows each projection and fusion linear.

All forwards accept an optional leading batch axis on ``r`` and ``e``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import (
    LinearLayer,
    ShapeError,
    Tensor,
    add,
    add_scalar,
    apply_activation,
    avg_pool_rows,
    concat_cols,
    dropout,
    linear_forward,
    linear_init,
    matmul,
    mul_row,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)

ORDERS = ("parallel", "r_then_e", "e_then_r")
ATTENTION_TYPES = ("full", "inter_only", "intra_only", "dyintra_only")


@dataclass
class ForwardContext:
    """Execution-mode knobs threaded through forward passes.

    ``mode`` 'train' enables dropout at ``dropout_rate`` using ``rng``;
    'eval' (and a None context) is deterministic.
    """

    mode: str = "eval"
    dropout_rate: float = 0.0
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")


def _lin(layer: LinearLayer, x: Tensor, ctx: ForwardContext | None) -> Tensor:
    out = linear_forward(layer, x)
    if ctx is not None and ctx.mode == "train" and ctx.dropout_rate > 0.0:
        out = dropout(out, ctx.dropout_rate, "train", ctx.rng)
    return out


@dataclass
class QkvProjection:
    """Query/key/value projections for one modality."""

    query: LinearLayer
    key: LinearLayer
    value: LinearLayer

    def __post_init__(self):
        dims = {self.query.out_dim, self.key.out_dim, self.value.out_dim}
        if len(dims) != 1:
            raise ShapeError(f"q/k/v widths disagree: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.query.out_dim

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in ("query", "key", "value"):
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")


@dataclass
class InterMafParams:
    """Bidirectional cross-modality attention parameters."""

    region_qkv: QkvProjection
    word_qkv: QkvProjection
    region_out: LinearLayer  # 2*dim -> dim, fuses [r, r_update]
    word_out: LinearLayer  # 2*dim -> dim, fuses [e, e_update]

    def __post_init__(self):
        dim = self.region_qkv.dim
        if self.word_qkv.dim != dim:
            raise ShapeError("region and word projections disagree on width")
        for layer, name in ((self.region_out, "region_out"), (self.word_out, "word_out")):
            if layer.in_dim != 2 * dim or layer.out_dim != dim:
                raise ShapeError(
                    f"{name} must map {2 * dim} -> {dim}, got "
                    f"{layer.in_dim} -> {layer.out_dim}"
                )

    @property
    def dim(self) -> int:
        return self.region_qkv.dim

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.region_qkv.named_parameters(f"{prefix}region_qkv.")
        yield from self.word_qkv.named_parameters(f"{prefix}word_qkv.")
        yield from self.region_out.named_parameters(f"{prefix}region_out.")
        yield from self.word_out.named_parameters(f"{prefix}word_out.")


@dataclass
class DyIntraMafParams:
    """Self-attention parameters, optionally gated by the other modality.

    ``dynamic`` false turns off the gates entirely (naive self-attention);
    the gate layers still exist so the parameter set has one shape.
    """

    region_qkv: QkvProjection
    word_qkv: QkvProjection
    gate_from_regions: LinearLayer  # pooled regions -> gate on word q/k
    gate_from_words: LinearLayer  # pooled words -> gate on region q/k
    region_out: LinearLayer  # dim -> dim, applied to the residual sum
    word_out: LinearLayer
    dynamic: bool = True

    def __post_init__(self):
        dim = self.region_qkv.dim
        if self.word_qkv.dim != dim:
            raise ShapeError("region and word projections disagree on width")
        for layer, name in (
            (self.gate_from_regions, "gate_from_regions"),
            (self.gate_from_words, "gate_from_words"),
            (self.region_out, "region_out"),
            (self.word_out, "word_out"),
        ):
            if layer.in_dim != dim or layer.out_dim != dim:
                raise ShapeError(
                    f"{name} must map {dim} -> {dim}, got "
                    f"{layer.in_dim} -> {layer.out_dim}"
                )

    @property
    def dim(self) -> int:
        return self.region_qkv.dim

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.region_qkv.named_parameters(f"{prefix}region_qkv.")
        yield from self.word_qkv.named_parameters(f"{prefix}word_qkv.")
        yield from self.gate_from_regions.named_parameters(f"{prefix}gate_from_regions.")
        yield from self.gate_from_words.named_parameters(f"{prefix}gate_from_words.")
        yield from self.region_out.named_parameters(f"{prefix}region_out.")
        yield from self.word_out.named_parameters(f"{prefix}word_out.")


@dataclass
class AttentionRecord:
    """Attention matrices and gate vectors captured from one block's forward.

    Matrix lists hold one array per head (length ``heads``); gate vectors are
    full-width. Arrays are detached copies, safe to keep after backward.
    """

    inter_r_from_e: list[np.ndarray] = field(default_factory=list)
    inter_e_from_r: list[np.ndarray] = field(default_factory=list)
    intra_r: list[np.ndarray] = field(default_factory=list)
    intra_e: list[np.ndarray] = field(default_factory=list)
    gate_on_regions: np.ndarray | None = None
    gate_on_words: np.ndarray | None = None

    def matrices(self) -> Iterator[tuple[str, int, np.ndarray]]:
        """All captured attention matrices as (name, head, array)."""
        for name in ("inter_r_from_e", "inter_e_from_r", "intra_r", "intra_e"):
            for head, arr in enumerate(getattr(self, name)):
                yield name, head, arr


@dataclass
class DfafBlockParams:
    """One fusion block: inter-modality flow, then intra-modality flow.

    Either half may be absent (ablation variants); at least one must exist.
    """

    inter: InterMafParams | None
    intra: DyIntraMafParams | None
    heads: int
    head_dim: int
    order: str = "r_then_e"

    def __post_init__(self):
        if self.inter is None and self.intra is None:
            raise ValueError("block needs at least one attention module")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        dim = self.dim
        if self.heads * self.head_dim != dim:
            raise ShapeError(
                f"heads ({self.heads}) x head_dim ({self.head_dim}) != dim ({dim})"
            )

    @property
    def dim(self) -> int:
        return self.inter.dim if self.inter is not None else self.intra.dim

    @property
    def attention_type(self) -> str:
        if self.inter is not None and self.intra is not None:
            return "full"
        if self.inter is not None:
            return "inter_only"
        return "dyintra_only" if self.intra.dynamic else "intra_only"

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        if self.inter is not None:
            yield from self.inter.named_parameters(f"{prefix}inter.")
        if self.intra is not None:
            yield from self.intra.named_parameters(f"{prefix}intra.")


# ---------------------------------------------------------------------------
# forward passes


def scaled_dot_attention(q: Tensor, k: Tensor) -> Tensor:
    """Attention weights softmax(q·kᵀ/√d): rows index queries, columns keys."""
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"query/key widths disagree: {q.shape} vs {k.shape}")
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    return softmax_rows(logits)


def multi_head_apply(
    attention_fn: Callable[[Tensor, Tensor], Tensor],
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
) -> tuple[Tensor, list[Tensor]]:
    """Split q/k/v channels into ``heads`` contiguous groups, attend per
    group, and concatenate. Returns (merged values, per-head weights)."""
    dim = q.shape[-1]
    if dim % heads != 0:
        raise ShapeError(f"dim {dim} not divisible by {heads} heads")
    if heads == 1:
        w = attention_fn(q, k)
        return matmul(w, v), [w]
    hd = dim // heads
    outs, weights = [], []
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        w = attention_fn(slice_cols(q, lo, hi), slice_cols(k, lo, hi))
        weights.append(w)
        outs.append(matmul(w, slice_cols(v, lo, hi)))
    return concat_cols(*outs), weights


def compute_gates(other_modality_feats: Tensor, gate_layer: LinearLayer) -> Tensor:
    """Per-channel gate in (0,1) from the other modality's pooled features."""
    if other_modality_feats.ndim < 2 or other_modality_feats.shape[-2] < 1:
        raise ShapeError(
            f"gates need at least one feature row, got {other_modality_feats.shape}"
        )
    pooled = avg_pool_rows(other_modality_feats)
    return apply_activation("sigmoid", linear_forward(gate_layer, pooled))


def _project(qkv: QkvProjection, x: Tensor, ctx) -> tuple[Tensor, Tensor, Tensor]:
    return _lin(qkv.query, x, ctx), _lin(qkv.key, x, ctx), _lin(qkv.value, x, ctx)


def _detach(t: Tensor) -> np.ndarray:
    return t.numpy()


def inter_maf_forward(
    r: Tensor,
    e: Tensor,
    p: InterMafParams,
    heads: int = 1,
    order: str = "parallel",
    record: AttentionRecord | None = None,
    ctx: ForwardContext | None = None,
) -> tuple[Tensor, Tensor]:
    """Bidirectional cross-attention update of both modalities.

    parallel: both updates read the other modality's original projections.
    r_then_e: words update first (attending over original regions); regions
    then attend over the *updated* words, re-projected through the same
    key/value layers. e_then_r is the mirror image.
    """
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}, got {order!r}")
    r_q = _lin(p.region_qkv.query, r, ctx)
    e_q = _lin(p.word_qkv.query, e, ctx)

    def update_regions(keys: Tensor, values: Tensor) -> tuple[Tensor, list[Tensor]]:
        attended, weights = multi_head_apply(scaled_dot_attention, r_q, keys, values, heads)
        return _lin(p.region_out, concat_cols(r, attended), ctx), weights

    def update_words(keys: Tensor, values: Tensor) -> tuple[Tensor, list[Tensor]]:
        attended, weights = multi_head_apply(scaled_dot_attention, e_q, keys, values, heads)
        return _lin(p.word_out, concat_cols(e, attended), ctx), weights

    def keys_values(qkv: QkvProjection, x: Tensor) -> tuple[Tensor, Tensor]:
        return _lin(qkv.key, x, ctx), _lin(qkv.value, x, ctx)

    if order == "parallel":
        r_new, w_r = update_regions(*keys_values(p.word_qkv, e))
        e_new, w_e = update_words(*keys_values(p.region_qkv, r))
    elif order == "r_then_e":
        e_new, w_e = update_words(*keys_values(p.region_qkv, r))
        r_new, w_r = update_regions(*keys_values(p.word_qkv, e_new))
    else:  # e_then_r
        r_new, w_r = update_regions(*keys_values(p.word_qkv, e))
        e_new, w_e = update_words(*keys_values(p.region_qkv, r_new))

    if record is not None:
        record.inter_r_from_e = [_detach(w) for w in w_r]
        record.inter_e_from_r = [_detach(w) for w in w_e]
    return r_new, e_new


def dyintra_maf_forward(
    r: Tensor,
    e: Tensor,
    p: DyIntraMafParams,
    heads: int = 1,
    record: AttentionRecord | None = None,
    ctx: ForwardContext | None = None,
) -> tuple[Tensor, Tensor]:
    """Self-attention within each modality with a residual update.

    Dynamic variant: each modality's queries and keys are scaled channel-wise
    by (1 + gate), the gate coming from the other modality's pooled features.
    Values are never gated. Naive variant (dynamic=false) has no dependence
    on the other modality at all.
    """
    r_q, r_k, r_v = _project(p.region_qkv, r, ctx)
    e_q, e_k, e_v = _project(p.word_qkv, e, ctx)

    gate_r = gate_e = None
    if p.dynamic:
        gate_r = compute_gates(e, p.gate_from_words)  # modulates region q/k
        gate_e = compute_gates(r, p.gate_from_regions)  # modulates word q/k
        mult_r = add_scalar(gate_r, 1.0)
        mult_e = add_scalar(gate_e, 1.0)
        r_q, r_k = mul_row(r_q, mult_r), mul_row(r_k, mult_r)
        e_q, e_k = mul_row(e_q, mult_e), mul_row(e_k, mult_e)

    r_att, w_r = multi_head_apply(scaled_dot_attention, r_q, r_k, r_v, heads)
    e_att, w_e = multi_head_apply(scaled_dot_attention, e_q, e_k, e_v, heads)
    r_new = _lin(p.region_out, add(r, r_att), ctx)
    e_new = _lin(p.word_out, add(e, e_att), ctx)

    if record is not None:
        record.intra_r = [_detach(w) for w in w_r]
        record.intra_e = [_detach(w) for w in w_e]
        if p.dynamic:
            record.gate_on_regions = _detach(gate_r)
            record.gate_on_words = _detach(gate_e)
    return r_new, e_new


def dfaf_block_forward(
    r: Tensor,
    e: Tensor,
    p: DfafBlockParams,
    record: AttentionRecord | None = None,
    ctx: ForwardContext | None = None,
) -> tuple[Tensor, Tensor]:
    """Inter-modality flow followed by intra-modality flow (either optional)."""
    if r.shape[-1] != p.dim or e.shape[-1] != p.dim:
        raise ShapeError(
            f"block expects width {p.dim}, got regions {r.shape} words {e.shape}"
        )
    if p.inter is not None:
        r, e = inter_maf_forward(r, e, p.inter, p.heads, p.order, record, ctx)
    if p.intra is not None:
        r, e = dyintra_maf_forward(r, e, p.intra, p.heads, record, ctx)
    return r, e


def dfaf_stack_forward(
    r: Tensor,
    e: Tensor,
    blocks: list[DfafBlockParams],
    records: list[AttentionRecord] | None = None,
    ctx: ForwardContext | None = None,
) -> tuple[Tensor, Tensor]:
    """Apply blocks sequentially; append one AttentionRecord per block when
    ``records`` is a list."""
    if not blocks:
        raise ValueError("stack needs at least one block")
    dims = {b.dim for b in blocks}
    if len(dims) != 1:
        raise ShapeError(f"blocks disagree on width: {sorted(dims)}")
    for block in blocks:
        rec = AttentionRecord() if records is not None else None
        r, e = dfaf_block_forward(r, e, block, rec, ctx)
        if records is not None:
            records.append(rec)
    return r, e


# ---------------------------------------------------------------------------
# builders


def init_qkv(dim: int, rng: np.random.Generator) -> QkvProjection:
    return QkvProjection(
        query=linear_init(dim, dim, rng),
        key=linear_init(dim, dim, rng),
        value=linear_init(dim, dim, rng),
    )


def init_inter_maf(dim: int, rng: np.random.Generator) -> InterMafParams:
    return InterMafParams(
        region_qkv=init_qkv(dim, rng),
        word_qkv=init_qkv(dim, rng),
        region_out=linear_init(2 * dim, dim, rng),
        word_out=linear_init(2 * dim, dim, rng),
    )


def init_dyintra_maf(dim: int, rng: np.random.Generator, dynamic: bool = True) -> DyIntraMafParams:
    return DyIntraMafParams(
        region_qkv=init_qkv(dim, rng),
        word_qkv=init_qkv(dim, rng),
        gate_from_regions=linear_init(dim, dim, rng),
        gate_from_words=linear_init(dim, dim, rng),
        region_out=linear_init(dim, dim, rng),
        word_out=linear_init(dim, dim, rng),
        dynamic=dynamic,
    )


def init_dfaf_block(
    dim: int,
    heads: int,
    rng: np.random.Generator,
    order: str = "r_then_e",
    attention_type: str = "full",
) -> DfafBlockParams:
    if attention_type not in ATTENTION_TYPES:
        raise ValueError(
            f"attention_type must be one of {ATTENTION_TYPES}, got {attention_type!r}"
        )
    if dim % heads != 0:
        raise ShapeError(f"dim {dim} not divisible by {heads} heads")
    inter = init_inter_maf(dim, rng) if attention_type in ("full", "inter_only") else None
    if attention_type in ("full", "dyintra_only"):
        intra = init_dyintra_maf(dim, rng, dynamic=True)
    elif attention_type == "intra_only":
        intra = init_dyintra_maf(dim, rng, dynamic=False)
    else:
        intra = None
    return DfafBlockParams(inter=inter, intra=intra, heads=heads, head_dim=dim // heads, order=order)


def init_dfaf_stack(
    dim: int,
    heads: int,
    n_blocks: int,
    rng: np.random.Generator,
    order: str = "r_then_e",
    attention_type: str = "full",
) -> list[DfafBlockParams]:
    if n_blocks < 1:
        raise ValueError(f"need at least one block, got {n_blocks}")
    return [
        init_dfaf_block(dim, heads, rng, order, attention_type) for _ in range(n_blocks)
    ]
