"""Command-line front end.

Grammar::

    dfaf <gen-data|train|eval|gradcheck|inspect> [--config PATH] [--set key=value ...] [paths]

Reports go to standard output as JSON (training streams one JSON object per
epoch); progress logs go to standard error.  Exit codes: 0 success, 1 failed
check, 2 configuration error, 3 data or checkpoint error, 4 numerical
divergence.  The effective configuration is echoed into every report so any
run can be reproduced by feeding the echo back as a config file.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from typing import Sequence

import numpy as np

from .attention import AttentionRecord, dyintra_maf_forward, inter_maf_forward
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    as_model_config,
    as_task_spec,
    as_train_config,
    config_dict,
    load_run_config,
)
from .data import (
    FeatureFileError,
    dataset_summary,
    generate_feature_dataset,
    read_feature_file,
    write_feature_file,
)
from .gradcheck import run_gradcheck
from .model import ModelParams, build_model, embed_inputs, predict
from .tensor import ShapeError, Tensor
from .training import (
    AdamaxState,
    DivergenceError,
    evaluate_by_template,
    train,
)


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _emit(payload: dict) -> None:
    print(json.dumps(payload), flush=True)


def cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    spec = as_task_spec(cfg)
    dataset = generate_feature_dataset(spec, cfg.n_instances)
    write_feature_file(args.out, dataset)
    _log(f"wrote {cfg.n_instances} instances to {args.out}")
    _emit(
        {
            "command": "gen-data",
            "config": config_dict(cfg),
            "path": args.out,
            "summary": dataset_summary(dataset),
        }
    )
    return 0


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = read_feature_file(args.data)
    model_config = as_model_config(cfg, dataset.n_answers)
    if model_config.d_v != dataset.regions.shape[2] or model_config.d_w != dataset.tokens.shape[2]:
        raise ShapeError(
            f"config expects features {model_config.d_v}x{model_config.d_w}, "
            f"data file has {dataset.regions.shape[2]}x{dataset.tokens.shape[2]}"
        )

    state = None
    if cfg.resume_from:
        model, saved_config, trailer = load_checkpoint(cfg.resume_from)
        if saved_config != model_config:
            raise ConfigError(
                [
                    f"checkpoint architecture {saved_config} does not match "
                    f"configured architecture {model_config}"
                ]
            )
        if trailer is not None:
            state = AdamaxState.from_checkpoint_trailer(trailer)
        _log(f"resumed from {cfg.resume_from} at step {state.t if state else 0}")
    else:
        model = build_model(model_config, np.random.default_rng(cfg.seed))

    _emit({"command": "train", "config": config_dict(cfg), "data": args.data})

    def stream(row: dict) -> None:
        _emit(row)
        _log(
            f"epoch {row['epoch']}/{cfg.epochs} "
            f"loss {row['train_loss']:.4f} acc {row['eval_acc']:.4f}"
        )

    metrics, state = train(
        model, dataset, as_train_config(cfg), state=state, on_epoch=stream
    )
    save_checkpoint(args.ckpt_out, model, model_config, state.as_checkpoint_trailer())
    _emit(
        {
            "checkpoint": args.ckpt_out,
            "steps": state.t,
            "final_train_loss": metrics[-1]["train_loss"],
            "final_eval_acc": metrics[-1]["eval_acc"],
        }
    )
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, model_config, _ = load_checkpoint(args.ckpt)
    dataset = read_feature_file(args.data)
    if model_config.d_v != dataset.regions.shape[2] or model_config.d_w != dataset.tokens.shape[2]:
        raise ShapeError(
            f"checkpoint expects features {model_config.d_v}x{model_config.d_w}, "
            f"data file has {dataset.regions.shape[2]}x{dataset.tokens.shape[2]}"
        )
    if model_config.n_answers != dataset.n_answers:
        raise ShapeError(
            f"checkpoint answer head has {model_config.n_answers} entries, "
            f"data file has {dataset.n_answers}"
        )
    report = evaluate_by_template(model, dataset, cfg.eval_batch_size)
    _emit(
        {
            "command": "eval",
            "config": config_dict(cfg),
            "checkpoint": args.ckpt,
            "data": args.data,
            "accuracy": report["overall"],
            "n_instances": report["n"],
            "per_template": report["per_template"],
        }
    )
    return 0


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    try:
        report = run_gradcheck(
            dim=cfg.dim,
            regions=cfg.gradcheck_regions,
            words=cfg.gradcheck_words,
            n_blocks=cfg.n_blocks,
            heads=cfg.heads,
            order=cfg.order,
            seed=cfg.seed,
            threshold=cfg.gradcheck_threshold,
            eps=cfg.gradcheck_eps,
            corrupt=cfg.gradcheck_corrupt,
        )
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    payload = report.as_dict()
    payload["command"] = "gradcheck"
    payload["config"] = config_dict(cfg)
    _emit(payload)
    _log(
        f"gradcheck {'passed' if report.passed else 'FAILED'} "
        f"(max rel err {report.max_rel_err:.3e})"
    )
    return 0 if report.passed else 1


def _matrices(per_head: list[np.ndarray]) -> list[list[list[float]]]:
    return [m.tolist() for m in per_head]


def _record_payload(record: AttentionRecord) -> dict:
    payload: dict = {}
    if record.inter_r_from_e:
        payload["inter_r_from_e"] = _matrices(record.inter_r_from_e)
        payload["inter_e_from_r"] = _matrices(record.inter_e_from_r)
    if record.intra_r:
        payload["intra_r"] = _matrices(record.intra_r)
        payload["intra_e"] = _matrices(record.intra_e)
    if record.gate_on_regions is not None:
        payload["gate_on_regions"] = record.gate_on_regions.tolist()
        payload["gate_on_words"] = record.gate_on_words.tolist()
    return payload


def _inspect_blocks(model: ModelParams, regions: Tensor, tokens: Tensor) -> list[dict]:
    """Replay the stack block by block, capturing each block's attention and,
    for dynamic intra modules, a gate-disabled recomputation of the same
    inputs so the static-vs-dynamic contrast comes from one forward."""
    r, e = embed_inputs(regions, tokens, model)
    blocks = []
    for index, block in enumerate(model.stack):
        record = AttentionRecord()
        entry: dict = {"block": index}
        if block.inter is not None:
            r, e = inter_maf_forward(r, e, block.inter, block.heads, block.order, record)
        if block.intra is not None:
            r_in, e_in = r, e
            r, e = dyintra_maf_forward(r_in, e_in, block.intra, block.heads, record)
            if block.intra.dynamic:
                naive = dataclasses.replace(block.intra, dynamic=False)
                naive_record = AttentionRecord()
                dyintra_maf_forward(r_in, e_in, naive, block.heads, naive_record)
                entry["intra_r_gates_disabled"] = _matrices(naive_record.intra_r)
                entry["intra_e_gates_disabled"] = _matrices(naive_record.intra_e)
        entry.update(_record_payload(record))
        blocks.append(entry)
    return blocks


def cmd_inspect(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    dataset = read_feature_file(args.data)
    if not 0 <= args.index < len(dataset):
        raise IndexError(
            f"instance index {args.index} out of range for {len(dataset)} instances"
        )
    regions = Tensor(dataset.regions[args.index])
    tokens = Tensor(dataset.tokens[args.index])
    pred = predict(regions, tokens, model)
    predicted = int(pred.logits.data.argmax())
    dump = {
        "config": config_dict(cfg),
        "instance": {
            "index": args.index,
            "template": dataset.template_names[dataset.template_ids[args.index]],
            "answer": dataset.answer_names[dataset.answers[args.index]],
            "predicted": dataset.answer_names[predicted],
        },
        "blocks": _inspect_blocks(model, regions, tokens),
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(dump, fh)
    _log(f"wrote attention dump to {args.out}")
    _emit(
        {
            "command": "inspect",
            "config": config_dict(cfg),
            "written": args.out,
            "blocks": len(dump["blocks"]),
            "instance": dump["instance"],
        }
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="key=value config file")
    shared.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        dest="overrides",
        help="override one config key (repeatable)",
    )

    parser = argparse.ArgumentParser(
        prog="dfaf",
        description="Train and probe a two-modality attention-flow classifier "
        "on synthetic grid-scene question answering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[shared], help="generate a feature file")
    p.add_argument("out", help="output feature file path")

    p = sub.add_parser("train", parents=[shared], help="train on a feature file")
    p.add_argument("data", help="training feature file")
    p.add_argument("ckpt_out", help="checkpoint output path")

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint")
    p.add_argument("ckpt", help="checkpoint path")
    p.add_argument("data", help="feature file to score")

    sub.add_parser("gradcheck", parents=[shared], help="verify gradients")

    p = sub.add_parser("inspect", parents=[shared], help="dump attention maps")
    p.add_argument("ckpt", help="checkpoint path")
    p.add_argument("data", help="feature file")
    p.add_argument("index", type=int, help="instance index")
    p.add_argument("out", help="JSON output path")

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        for line in exc.errors:
            _log(f"config error: {line}")
        return 2
    except (FeatureFileError, CheckpointError, ShapeError, IndexError) as exc:
        _log(f"data error: {exc}")
        return 3
    except OSError as exc:
        _log(f"io error: {exc}")
        return 3
    except DivergenceError as exc:
        _log(f"diverged: {exc}")
        return 4
