"""Dense float64 tensors with reverse-mode autodiff on an explicit gradient tape.

Tensors hold 1 to 3 axes of row-major 64-bit floats. Operations record
themselves on the innermost active ``GradTape`` whenever an input requires
gradients; ``backward`` replays the tape in reverse and accumulates adjoints
into the leaves. With no tape active, operations are plain numpy compute.

Matrix ops accept an optional leading batch axis: every contract stated for
an (n x d) input holds slice-wise for a (B x n x d) input. Broadcasting
beyond that (and beyond bias-over-rows) is deliberately unsupported.

Tapes are confined to the thread that opened them; independent tapes may run
concurrently on separate threads.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Backward pass asked for something the tape cannot provide."""


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape() -> "GradTape | None":
    """The innermost tape opened on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array of 1-3 axes, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 3:
            raise ShapeError(f"tensors take 1-3 axes, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """A defensive copy of the values."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, requires_grad: bool) -> Tensor:
    # Internal fast path: data is already a float64 ndarray of valid rank.
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    return t


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of forward operations, replayable for adjoints.

    Used as a context manager; ops executed inside record themselves when any
    input requires gradients. Recording order is execution order, which is a
    valid topological order for the reverse sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _apply(inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = _make(out_data, track)
    if track:
        tape.nodes.append(_Node(inputs, out, backward))
    return out


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf on the tape.

    Repeated calls keep adding into ``.grad``; callers zero grads explicitly.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not produced on this tape")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out_g = adjoints.pop(id(node.output), None)
        if out_g is None:
            continue
        for inp, g in zip(node.inputs, node.backward(out_g)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                acc = adjoints.get(key)
                adjoints[key] = g if acc is None else acc + g
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g


# ---------------------------------------------------------------------------
# arithmetic ops


def _swap(x: np.ndarray) -> np.ndarray:
    return x.swapaxes(-1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry a leading batch axis; a 1-axis ``a``
    acts as a single row. ``b`` is a matrix or a batch of matrices."""
    ad, bd = a.data, b.data
    if bd.ndim < 2:
        raise ShapeError(f"matmul rhs must be a matrix, got shape {bd.shape}")
    if ad.ndim == 1 and bd.ndim != 2:
        raise ShapeError(f"vector lhs needs an unbatched rhs, got {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {ad.shape} x {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul batch sizes disagree: {ad.shape} x {bd.shape}")
    out = np.matmul(ad, bd)
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = gb = None
        if need_a:
            if ad.ndim == 1:
                ga = np.matmul(g, _swap(bd))
            else:
                ga = np.matmul(g, _swap(bd))
                if ga.ndim > ad.ndim:
                    ga = ga.sum(axis=0)
        if need_b:
            if ad.ndim == 1:
                gb = np.outer(ad, g)
            else:
                gb = np.matmul(_swap(ad), g)
                if gb.ndim > bd.ndim:
                    gb = gb.sum(axis=0)
        return ga, gb

    return _apply((a, b), out, bwd)


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    if t.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {t.shape}")
    out = np.ascontiguousarray(_swap(t.data))

    def bwd(g):
        return (_swap(g),)

    return _apply((t,), out, bwd)


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname} needs equal shapes: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        return g, g

    return _apply((a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        return g, -g

    return _apply((a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _apply((a, b), ad * bd, bwd)


def _row_vector_view(m: Tensor, v: Tensor, opname: str) -> np.ndarray:
    # v is one feature vector shared by all rows, or one per batch element.
    if m.ndim < 2:
        raise ShapeError(f"{opname} needs a matrix, got {m.shape}")
    if v.shape[-1] != m.shape[-1]:
        raise ShapeError(f"{opname} widths disagree: {m.shape} vs {v.shape}")
    if v.ndim == 1:
        return v.data
    if v.ndim == 2 and m.ndim == 3 and v.shape[0] == m.shape[0]:
        return v.data[:, None, :]
    raise ShapeError(f"{opname} cannot broadcast {v.shape} over {m.shape}")


def _reduce_rows(g: np.ndarray, v: Tensor) -> np.ndarray:
    # Sum the row axis (and batch axis when v is unbatched) back to v's shape.
    if v.ndim == 1:
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g.sum(axis=1)


def add_row(m: Tensor, v: Tensor) -> Tensor:
    """Add one feature vector to every row of ``m`` (bias broadcast)."""
    vb = _row_vector_view(m, v, "add_row")

    def bwd(g):
        return g, _reduce_rows(g, v)

    return _apply((m, v), m.data + vb, bwd)


def mul_row(m: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of ``m`` by one feature vector (gate broadcast)."""
    vb = _row_vector_view(m, v, "mul_row")
    md = m.data

    def bwd(g):
        return g * vb, _reduce_rows(g * md, v)

    return _apply((m, v), md * vb, bwd)


def add_scalar(t: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g,)

    return _apply((t,), t.data + c, bwd)


def scale(t: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g * c,)

    return _apply((t,), t.data * c, bwd)


def concat_cols(*tensors: Tensor) -> Tensor:
    """Concatenate along the feature (last) axis."""
    if len(tensors) < 2:
        raise ShapeError("concat_cols needs at least two tensors")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_cols leading axes disagree: {tensors[0].shape} vs {t.shape}"
            )
    widths = [t.shape[-1] for t in tensors]
    offsets = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=-1))

    return _apply(tensors, np.concatenate([t.data for t in tensors], axis=-1), bwd)


def slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    """A contiguous block of feature columns, as a copy."""
    width = t.shape[-1]
    if not 0 <= start < stop <= width:
        raise ShapeError(f"column slice [{start}:{stop}] out of range for width {width}")
    td_shape = t.shape

    def bwd(g):
        full = np.zeros(td_shape)
        full[..., start:stop] = g
        return (full,)

    return _apply((t,), np.ascontiguousarray(t.data[..., start:stop]), bwd)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if not 1 <= len(shape) <= 3:
        raise ShapeError(f"tensors take 1-3 axes, got {shape}")
    old = t.shape

    def bwd(g):
        return (g.reshape(old),)

    return _apply((t,), t.data.reshape(shape), bwd)


def sum_all(t: Tensor) -> Tensor:
    """Sum of all elements, as a length-1 tensor."""
    td_shape = t.shape

    def bwd(g):
        return (np.full(td_shape, g.reshape(-1)[0]),)

    return _apply((t,), np.array([t.data.sum()]), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax_rows(t: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by per-row max subtraction."""
    if t.shape[-1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _apply((t,), s, bwd)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _apply((t,), out, bwd)


def relu(t: Tensor) -> Tensor:
    x = t.data
    mask = x > 0

    def bwd(g):
        return (g * mask,)

    return _apply((t,), np.where(mask, x, 0.0), bwd)


def apply_activation(kind: str, t: Tensor) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(t)
    if kind == "relu":
        return relu(t)
    raise ValueError(f"unknown activation {kind!r}, expected 'sigmoid' or 'relu'")


def avg_pool_rows(m: Tensor) -> Tensor:
    """Arithmetic mean over the row axis: (..., n, d) -> (..., d)."""
    if m.ndim < 2:
        raise ShapeError(f"avg_pool_rows needs a matrix, got {m.shape}")
    n = m.shape[-2]
    if n == 0:
        raise ShapeError("avg_pool_rows on an empty input")
    md_shape = m.shape

    def bwd(g):
        return (np.broadcast_to((g / n)[..., None, :], md_shape),)

    return _apply((m,), m.data.mean(axis=-2), bwd)


def dropout(t: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: eval mode is the identity, train mode zeroes each
    element with probability ``rate`` and scales survivors by 1/(1-rate)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return t
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = (rng.random(t.shape) >= rate) * (1.0 / (1.0 - rate))

    def bwd(g):
        return (g * keep,)

    return _apply((t,), t.data * keep, bwd)


def cross_entropy_rows(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax.

    Computed through log-sum-exp on the logits for stability; the gradient is
    (softmax - one_hot) / n_rows.
    """
    if logits.ndim == 3:
        raise ShapeError(f"cross entropy takes a logit matrix, got {logits.shape}")
    x = logits.data if logits.ndim == 2 else logits.data[None, :]
    idx = np.asarray(targets, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} logit rows but {idx.shape} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"target outside [0, {x.shape[1]}): {idx.tolist()}")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    lse = m[:, 0] + np.log(e.sum(axis=-1))
    rows = np.arange(x.shape[0])
    losses = lse - x[rows, idx]
    n = x.shape[0]
    probs = e / e.sum(axis=-1, keepdims=True)
    was_vector = logits.ndim == 1

    def bwd(g):
        gl = probs.copy()
        gl[rows, idx] -= 1.0
        gl *= g.reshape(-1)[0] / n
        return (gl[0] if was_vector else gl,)

    return _apply((logits,), np.array([losses.mean()]), bwd)


# ---------------------------------------------------------------------------
# layers and the finite-difference oracle


@dataclass
class LinearLayer:
    """Fully-connected layer: weight (in_dim x out_dim) plus bias (out_dim)."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weight must be a matrix and bias a vector")
        if self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeError(
                f"weight {self.weight.shape} inconsistent with bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}weight", self.weight
        yield f"{prefix}bias", self.bias


def linear_init(in_dim: int, out_dim: int, rng: np.random.Generator) -> LinearLayer:
    # Uniform +-1/sqrt(fan_in) weights, zero bias.
    bound = 1.0 / math.sqrt(in_dim)
    weight = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
    bias = Tensor(np.zeros(out_dim), requires_grad=True)
    return LinearLayer(weight, bias)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(
            f"linear layer expects width {layer.in_dim}, input has shape {x.shape}"
        )
    return add_row(matmul(x, layer.weight), layer.bias) if x.ndim > 1 else add(
        matmul(x, layer.weight), layer.bias
    )


def finite_diff_gradient(
    f: Callable[[Sequence[Tensor]], float],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. each tensor in ``params``.

    ``f`` must be deterministic; parameters are perturbed in place one
    coordinate at a time and restored exactly.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f(params))
            flat[j] = orig - eps
            fm = float(f(params))
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(
    analytic: np.ndarray, reference: np.ndarray, atol: float = 1e-8
) -> float:
    """Blockwise relative L2 error.

    When both blocks are below ``atol`` in norm they agree on "zero" — a
    structurally zero gradient (e.g. a bias that softmax shift-invariance
    cancels) compared against finite-difference rounding noise must not read
    as a 100% mismatch.
    """
    na = float(np.linalg.norm(analytic))
    nf = float(np.linalg.norm(reference))
    if max(na, nf) < atol:
        return 0.0
    return float(np.linalg.norm(analytic - reference)) / max(na, nf)
