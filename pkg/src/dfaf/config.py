"""Flat key=value run configuration.

One schema covers task generation, model architecture, training, and the
gradient-check harness, so a single config file (plus ``--set`` overrides)
pins an entire reproducible run.  Files hold one ``key=value`` pair per
line; blank lines and lines starting with ``#`` are skipped.  The
``DFAF_SEED`` environment variable, when set, beats every other source of
``seed``.

Validation is collect-first: every unknown key, unparsable value, and
semantic violation is gathered into one :class:`ConfigError` so a bad config
is fixed in one round trip, not one message at a time.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Callable, Mapping, Sequence

from .data import ToyTaskSpec, answer_vocabulary
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV_VAR = "DFAF_SEED"


class ConfigError(ValueError):
    """All configuration problems found, kept as a list for exhaustive reporting."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration of one command invocation."""

    # toy-task generation
    grid_rows: int = 3
    grid_cols: int = 4
    n_colors: int = 4
    n_shapes: int = 4
    templates: tuple[str, ...] = ("attribute", "relational", "existence", "counting")
    max_count: int = 4
    token_len: int = 6
    d_v: int = 64
    d_w: int = 32
    noise_std: float = 0.0
    relational_direct_fraction: float = 0.3
    codebook_seed: int = 7777
    n_instances: int = 1000

    # model architecture
    dim: int = 64
    heads: int = 4
    n_blocks: int = 1
    hidden: int = 128
    fusion: str = "multiply"
    order: str = "r_then_e"
    attention_type: str = "full"

    # optimization
    base_lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    clip: float = 0.25
    clip_mode: str = "global_norm"
    dropout: float = 0.1
    schedule_breakpoints: tuple[int, ...] = (2, 10)
    eval_batch_size: int = 256

    # shared by generation, training, and checking
    seed: int = 0

    # optional checkpoint to continue training from ("" = fresh start)
    resume_from: str = ""

    # gradient-check harness
    gradcheck_regions: int = 5
    gradcheck_words: int = 4
    gradcheck_threshold: float = 1e-4
    gradcheck_eps: float = 1e-5
    gradcheck_corrupt: str = ""


def _parse_int(text: str) -> int:
    return int(text, 10)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_str_tuple(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part.strip(), 10) for part in text.split(",") if part.strip())


def _field_parser(name: str, annotation: object) -> Callable[[str], object]:
    if name == "templates":
        return _parse_str_tuple
    if name == "schedule_breakpoints":
        return _parse_int_tuple
    # Dataclass annotations are strings under deferred evaluation.
    key = annotation.__name__ if isinstance(annotation, type) else str(annotation)
    return {"int": _parse_int, "float": _parse_float, "str": _parse_str}[key]


_SCHEMA: dict[str, Callable[[str], object]] = {
    f.name: _field_parser(f.name, f.type) for f in fields(RunConfig)
}


def _format_value(value: object) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_dict(cfg: RunConfig) -> dict[str, str]:
    """Canonical string form of every field, echoed into reports."""
    return {f.name: _format_value(getattr(cfg, f.name)) for f in fields(RunConfig)}


def config_lines(cfg: RunConfig) -> str:
    """Config-file text that reloads to an equal RunConfig."""
    return "".join(f"{k}={v}\n" for k, v in config_dict(cfg).items())


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Read raw key=value pairs; syntax problems are collected, not cascaded."""
    pairs: dict[str, str] = {}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected key=value, got {line!r}")
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            errors.append(f"{source}:{lineno}: empty key")
            continue
        if key in pairs:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        pairs[key] = value.strip()
    if errors:
        raise ConfigError(errors)
    return pairs


def as_task_spec(cfg: RunConfig) -> ToyTaskSpec:
    return ToyTaskSpec(
        grid_rows=cfg.grid_rows,
        grid_cols=cfg.grid_cols,
        n_colors=cfg.n_colors,
        n_shapes=cfg.n_shapes,
        templates=cfg.templates,
        max_count=cfg.max_count,
        token_len=cfg.token_len,
        d_v=cfg.d_v,
        d_w=cfg.d_w,
        noise_std=cfg.noise_std,
        relational_direct_fraction=cfg.relational_direct_fraction,
        seed=cfg.seed,
        codebook_seed=cfg.codebook_seed,
    )


def as_model_config(cfg: RunConfig, n_answers: int) -> ModelConfig:
    return ModelConfig(
        dim=cfg.dim,
        heads=cfg.heads,
        n_blocks=cfg.n_blocks,
        hidden=cfg.hidden,
        d_v=cfg.d_v,
        d_w=cfg.d_w,
        n_answers=n_answers,
        fusion=cfg.fusion,
        order=cfg.order,
        attention_type=cfg.attention_type,
    )


def as_train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        base_lr=cfg.base_lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        clip=cfg.clip,
        clip_mode=cfg.clip_mode,
        dropout=cfg.dropout,
        seed=cfg.seed,
        schedule_breakpoints=cfg.schedule_breakpoints,
        eval_batch_size=cfg.eval_batch_size,
    )


def _semantic_errors(cfg: RunConfig) -> list[str]:
    """Cross-field validation, one message per failing sub-config."""
    errors = []
    n_answers = 2
    try:
        spec = as_task_spec(cfg)
        n_answers = len(answer_vocabulary(spec))
    except ValueError as exc:
        errors.append(f"task: {exc}")
    try:
        as_model_config(cfg, n_answers)
    except ValueError as exc:
        errors.append(f"model: {exc}")
    try:
        as_train_config(cfg)
    except ValueError as exc:
        errors.append(f"training: {exc}")
    if cfg.n_instances < 1:
        errors.append(f"n_instances must be at least 1, got {cfg.n_instances}")
    if cfg.gradcheck_regions < 1 or cfg.gradcheck_words < 1:
        errors.append("gradcheck_regions and gradcheck_words must be at least 1")
    if cfg.gradcheck_threshold <= 0 or cfg.gradcheck_eps <= 0:
        errors.append("gradcheck_threshold and gradcheck_eps must be positive")
    return errors


def load_run_config(
    path: str | None = None,
    overrides: Sequence[str] = (),
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults, then file pairs, then ``--set`` pairs, then ``DFAF_SEED``.

    Raises :class:`ConfigError` carrying every problem found at every layer.
    """
    env = os.environ if env is None else env
    errors: list[str] = []
    pairs: dict[str, str] = {}

    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError([f"cannot read config file {path}: {exc}"]) from exc
        try:
            pairs.update(parse_config_text(text, source=path))
        except ConfigError as exc:
            errors.extend(exc.errors)

    for item in overrides:
        if "=" not in item:
            errors.append(f"--set expects key=value, got {item!r}")
            continue
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()

    values: dict[str, object] = {}
    for key, raw in pairs.items():
        parser = _SCHEMA.get(key)
        if parser is None:
            errors.append(f"unknown config key {key!r}")
            continue
        try:
            values[key] = parser(raw)
        except ValueError:
            errors.append(f"bad value for {key}: {raw!r}")

    if SEED_ENV_VAR in env:
        raw = env[SEED_ENV_VAR]
        try:
            values["seed"] = _parse_int(raw)
        except ValueError:
            errors.append(f"bad {SEED_ENV_VAR} value: {raw!r}")

    if errors:
        raise ConfigError(errors)

    cfg = RunConfig(**values)
    semantic = _semantic_errors(cfg)
    if semantic:
        raise ConfigError(semantic)
    return cfg
