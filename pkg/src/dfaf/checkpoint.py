"""Versioned binary model checkpoints.

Layout (all integers and floats little-endian):

    magic    4 bytes  b"DFAF"
    version  u32      currently 1
    config   7 × u32  dim, heads, n_blocks, hidden, d_v, d_w, n_answers
             3 × str  fusion, order, attention_type (u16 length + utf-8)
    tensors  u32 count, then per tensor:
             str name, u32 ndim, ndim × u32 shape, float64 data (row-major)
    trailer  u8 flag; when 1, optimizer state follows:
             u64 step count, then per tensor (same order as above) the
             first-moment and infinity-norm arrays, float64 each

Writing is deterministic: tensor order is the model's named-parameter order,
so identical parameters produce byte-identical files.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .model import ModelConfig, ModelParams, build_model, config_of

MAGIC = b"DFAF"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with expectations."""


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"string too long for format: {len(raw)} bytes")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes of {what}")
    return raw


def _read_str(fh: BinaryIO, what: str) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2, f"{what} length"))
    return _read_exact(fh, n, what).decode("utf-8")


def _write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, 8 * count, what)
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_checkpoint(
    path: str,
    params: ModelParams,
    config: ModelConfig | None = None,
    optimizer_state: tuple[int, list[np.ndarray], list[np.ndarray]] | None = None,
) -> None:
    """Write parameters (and optionally optimizer state as
    (step, first_moments, inf_norms) aligned with named-parameter order)."""
    if config is None:
        config = config_of(params)
    named = list(params.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(
            struct.pack(
                "<7I",
                config.dim,
                config.heads,
                config.n_blocks,
                config.hidden,
                config.d_v,
                config.d_w,
                config.n_answers,
            )
        )
        for s in (config.fusion, config.order, config.attention_type):
            _write_str(fh, s)
        fh.write(struct.pack("<I", len(named)))
        for name, tensor in named:
            _write_str(fh, name)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            _write_array(fh, tensor.data)
        if optimizer_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            step, moments, inf_norms = optimizer_state
            if len(moments) != len(named) or len(inf_norms) != len(named):
                raise CheckpointError(
                    f"optimizer state covers {len(moments)}/{len(inf_norms)} arrays "
                    f"for {len(named)} parameters"
                )
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", step))
            for (_, tensor), m, u in zip(named, moments, inf_norms):
                if m.shape != tensor.shape or u.shape != tensor.shape:
                    raise CheckpointError("optimizer arrays misshapen for parameter")
                _write_array(fh, m)
                _write_array(fh, u)


def load_checkpoint(
    path: str,
) -> tuple[ModelParams, ModelConfig, tuple[int, list[np.ndarray], list[np.ndarray]] | None]:
    """Rebuild a model from file; returns (params, config, optimizer_state)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        nums = struct.unpack("<7I", _read_exact(fh, 28, "config"))
        fusion = _read_str(fh, "fusion")
        order = _read_str(fh, "order")
        attention_type = _read_str(fh, "attention_type")
        try:
            config = ModelConfig(
                dim=nums[0],
                heads=nums[1],
                n_blocks=nums[2],
                hidden=nums[3],
                d_v=nums[4],
                d_w=nums[5],
                n_answers=nums[6],
                fusion=fusion,
                order=order,
                attention_type=attention_type,
            )
        except ValueError as exc:
            raise CheckpointError(f"invalid checkpoint config: {exc}") from exc

        params = build_model(config, np.random.default_rng(0))
        named = list(params.named_parameters())
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        if count != len(named):
            raise CheckpointError(
                f"checkpoint holds {count} tensors, architecture needs {len(named)}"
            )
        for expect_name, tensor in named:
            name = _read_str(fh, "tensor name")
            if name != expect_name:
                raise CheckpointError(
                    f"tensor order mismatch: found {name!r}, expected {expect_name!r}"
                )
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor shape"))
            if shape != tensor.shape:
                raise CheckpointError(
                    f"{name}: stored shape {shape} != architecture shape {tensor.shape}"
                )
            tensor.data = _read_array(fh, shape, f"{name} data")

        (flag,) = struct.unpack("<B", _read_exact(fh, 1, "optimizer flag"))
        optimizer_state = None
        if flag == 1:
            (step,) = struct.unpack("<Q", _read_exact(fh, 8, "step count"))
            moments, inf_norms = [], []
            for name, tensor in named:
                moments.append(_read_array(fh, tensor.shape, f"{name} moment"))
                inf_norms.append(_read_array(fh, tensor.shape, f"{name} inf-norm"))
            optimizer_state = (step, moments, inf_norms)
        elif flag != 0:
            raise CheckpointError(f"bad optimizer flag {flag}")
        extra = fh.read(1)
        if extra:
            raise CheckpointError("trailing bytes after checkpoint payload")
    return params, config, optimizer_state
