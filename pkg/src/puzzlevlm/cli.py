"""Command-line pipeline: synth, caption, train, infer, eval, simulate-routing.

Every command reads an optional INI config (--config) with a --seed override,
and every artifact it writes embeds the fully resolved config for provenance:
single-JSON artifacts inline it, JSON Lines artifacts get a sibling
`<name>.meta.json`. Commands are deterministic given identical inputs+seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .captioning import (
    CaptionCache,
    CaptionCacheError,
    CaptionError,
    enhance,
    image_digest,
    make_backend,
)
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_seed, load_config
from .core import AnswerKind, PuzzleInstance
from .data import DatasetError, LoadResult, load_puzzles, make_puzzle_split, save_puzzles
from .decoder import (
    KEY_MODEL,
    VALUE_MODEL,
    DecoderConfig,
    ModelAssembly,
    build_assembly,
)
from .evaluation import (
    EvalError,
    eval_report,
    format_report_table,
    read_predictions,
    write_predictions,
)
from .qformer import QFormerConfig
from .router import route_and_answer, simulate_routing
from .synth import generate_synthetic_puzzles
from .training import LoraConfig, TrainingError, fit, lora_wrap
from .vision import VisionConfig


def _meta_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".meta.json")


def _write_meta(artifact: Path, cfg: RunConfig, command: str, extra: dict) -> None:
    meta = {"command": command, "seed": cfg.seed, "config": cfg.to_json(), **extra}
    _meta_path(artifact).write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _warn_load_errors(result: LoadResult) -> None:
    for error in result.errors:
        print(f"warning: manifest line {error.line_number}: {error.message}", file=sys.stderr)


def _resolved_backend_id(cfg: RunConfig) -> str:
    if cfg.captioner.backend == "mock":
        return "mock"
    return f"http:{cfg.captioner.url}"


def _load_captions(
    path: str | None, cfg: RunConfig, instances: list[PuzzleInstance]
) -> dict[str, str]:
    """Captions for the given instances from a cache file. Records are matched
    by puzzle id and image digest; the configured backend/k is preferred when
    several records exist."""
    if not path:
        return {}
    cache = CaptionCache(path)
    preferred = (_resolved_backend_id(cfg), cfg.captioner.k)
    captions: dict[str, str] = {}
    exact: set[str] = set()
    digests = {p.id: image_digest(p.image) for p in instances}
    for record in cache.records():
        if digests.get(record.puzzle_id) != record.image_digest:
            continue
        if (record.backend_id, record.k) == preferred:
            captions[record.puzzle_id] = record.caption
            exact.add(record.puzzle_id)
        elif record.puzzle_id not in exact:
            captions[record.puzzle_id] = record.caption
    missing = sum(1 for p in instances if p.id not in captions)
    if missing:
        print(f"warning: no caption for {missing} of {len(instances)} instances",
              file=sys.stderr)
    return captions


def _split_sides(
    instances: list[PuzzleInstance], test_root_ids: set[int]
) -> tuple[list[PuzzleInstance], list[PuzzleInstance]]:
    train = [p for p in instances if p.root_id not in test_root_ids]
    test = [p for p in instances if p.root_id in test_root_ids]
    return train, test


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    puzzles = generate_synthetic_puzzles(args.n_per_category, args.image_size, cfg.seed)
    out = Path(args.out)
    save_puzzles(puzzles, out)
    _write_meta(
        out / "puzzles.jsonl",
        cfg,
        "synth",
        {"n_per_category": args.n_per_category, "image_size": args.image_size,
         "n_puzzles": len(puzzles)},
    )
    print(f"wrote {len(puzzles)} puzzles to {out}")
    return 0


def cmd_caption(args: argparse.Namespace, cfg: RunConfig) -> int:
    result = load_puzzles(args.data)
    _warn_load_errors(result)
    backend_name = args.backend or cfg.captioner.backend
    backend = make_backend(backend_name, cfg.captioner.url or None)
    k = args.k if args.k is not None else cfg.captioner.k
    cache = CaptionCache(args.cache)
    for puzzle in result.puzzles:
        enhance(puzzle, backend, cache, k)
    _write_meta(
        Path(args.cache),
        cfg,
        "caption",
        {"backend": backend.backend_id, "k": k, "n_puzzles": len(result.puzzles)},
    )
    print(f"captioned {len(result.puzzles)} puzzles: "
          f"hits={cache.hits} misses={cache.misses}")
    return 0


def _model_section(cfg: RunConfig) -> dict:
    return {
        "vision": cfg.to_json()["vision"],
        "qformer": cfg.to_json()["qformer"],
        "decoder": cfg.to_json()["decoder"],
    }


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    result = load_puzzles(args.data)
    _warn_load_errors(result)
    instances = result.puzzles
    role = KEY_MODEL if args.role == "key" else VALUE_MODEL
    split_seed = args.split_seed if args.split_seed is not None else cfg.seed

    if 0 < args.test_fraction < 1:
        spec = make_puzzle_split(instances, args.test_fraction, split_seed)
        train_side, _ = _split_sides(instances, set(spec.test_root_ids))
        split_meta = {
            "test_fraction": args.test_fraction,
            "split_seed": split_seed,
            "train_root_ids": sorted(spec.train_root_ids),
            "test_root_ids": sorted(spec.test_root_ids),
        }
    else:
        train_side = instances
        split_meta = {"test_fraction": 0.0, "split_seed": split_seed,
                      "train_root_ids": sorted({p.root_id for p in instances}),
                      "test_root_ids": []}

    kind = AnswerKind.KEY if role == KEY_MODEL else AnswerKind.VALUE
    role_instances = [p for p in train_side if p.answer_kind is kind]
    if not role_instances:
        raise TrainingError(f"no {kind.value}-kind instances on the training side")
    # Classifier coverage: the key model's routing head must see all eight
    # categories, so value-kind instances join its batches as additional data
    # (classification loss only; see instance_loss).
    additional: list = []
    if role == KEY_MODEL and cfg.train.all_categories:
        additional = [p for p in train_side if p.answer_kind is not kind]

    try:
        val_spec = make_puzzle_split(role_instances, cfg.train.val_fraction, split_seed + 1)
        fit_train, fit_val = _split_sides(role_instances, set(val_spec.test_root_ids))
    except DatasetError:
        fit_train, fit_val = role_instances, []

    captions = _load_captions(args.captions, cfg, instances)
    assembly = build_assembly(
        cfg.vision, cfg.qformer, cfg.decoder, role,
        cfg.seed + (0 if role == KEY_MODEL else 1),
    )
    lora_cfg = cfg.lora if args.lora else None
    metrics_path = args.metrics or f"{args.out}.metrics.jsonl"
    metadata = {
        "command": "train",
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "model": _model_section(cfg),
        "split": split_meta,
    }
    fit_result = fit(
        assembly,
        fit_train,
        fit_val,
        captions,
        cfg.train,
        lora_cfg,
        args.out,
        metadata,
        additional_instances=additional,
        metrics_path=metrics_path,
    )
    print(
        f"trained {role} for {fit_result.steps} steps on {len(fit_train)} instances "
        f"(val {len(fit_val)}): best val O_acc {fit_result.best_val_o_acc:.3f} "
        f"at step {fit_result.best_step}; checkpoint {args.out}"
    )
    return 0


def load_assembly(path: str | Path) -> tuple[ModelAssembly, dict]:
    """Rebuild a ModelAssembly from a checkpoint, bit-exactly."""
    metadata, tensors = load_checkpoint(path)
    model = metadata["model"]
    vision_cfg = VisionConfig(**model["vision"])
    qformer_cfg = QFormerConfig(**model["qformer"])
    decoder_cfg = DecoderConfig(**model["decoder"])
    assembly = ModelAssembly(vision_cfg, qformer_cfg, decoder_cfg, metadata["role"])
    if metadata.get("lora_config"):
        raw = dict(metadata["lora_config"])
        raw["targets"] = tuple(raw["targets"])
        lora_wrap(assembly, LoraConfig(**raw))
    assembly.load_state_dict(tensors, strict=True)
    return assembly, metadata


def cmd_infer(args: argparse.Namespace, cfg: RunConfig) -> int:
    key_assembly, key_meta = load_assembly(args.key_ckpt)
    value_assembly, value_meta = load_assembly(args.value_ckpt)
    if key_assembly.role != KEY_MODEL:
        raise CheckpointError(f"{args.key_ckpt} holds a {key_assembly.role}, expected key model")
    if value_assembly.role != VALUE_MODEL:
        raise CheckpointError(
            f"{args.value_ckpt} holds a {value_assembly.role}, expected value model"
        )
    key_split = key_meta.get("split", {})
    value_split = value_meta.get("split", {})
    if key_split.get("test_root_ids") != value_split.get("test_root_ids"):
        raise CheckpointError(
            "key and value checkpoints were trained with different puzzle splits; "
            "re-train with matching --test-fraction/--split-seed"
        )

    result = load_puzzles(args.data)
    _warn_load_errors(result)
    instances = result.puzzles
    test_root_ids = set(key_split.get("test_root_ids", []))
    side = args.split
    if side == "test":
        subset = [p for p in instances if p.root_id in test_root_ids]
    elif side == "train":
        subset = [p for p in instances if p.root_id not in test_root_ids]
    else:
        subset = instances
    if not subset:
        raise DatasetError(f"no instances on the {side!r} side of the recorded split")

    captions = _load_captions(args.captions, cfg, subset)
    predictions: dict[str, int] = {}
    routing: dict[str, dict] = {}
    with torch.no_grad():
        for puzzle in subset:
            decision, answer = route_and_answer(
                key_assembly, value_assembly, puzzle, captions.get(puzzle.id, ""),
                cfg.router.prompt,
            )
            predictions[puzzle.id] = answer
            routing[puzzle.id] = decision.to_json()
    out = Path(args.out)
    write_predictions(out, predictions, routing)
    _write_meta(
        out,
        cfg,
        "infer",
        {
            "split_side": side,
            "split": key_split,
            "key_ckpt": str(args.key_ckpt),
            "value_ckpt": str(args.value_ckpt),
            "n_predictions": len(predictions),
        },
    )
    print(f"wrote {len(predictions)} predictions to {out}")
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    predictions = read_predictions(args.predictions)
    result = load_puzzles(args.data)
    _warn_load_errors(result)
    dataset = result.puzzles

    meta_file = _meta_path(Path(args.predictions))
    if meta_file.exists():
        meta = json.loads(meta_file.read_text(encoding="utf-8"))
        side = meta.get("split_side", "all")
        test_root_ids = set(meta.get("split", {}).get("test_root_ids", []))
        if side == "test":
            dataset = [p for p in dataset if p.root_id in test_root_ids]
        elif side == "train":
            dataset = [p for p in dataset if p.root_id not in test_root_ids]

    tags = None
    if args.tags:
        tags = json.loads(Path(args.tags).read_text(encoding="utf-8"))
    report = eval_report(predictions, dataset, tags)
    print(format_report_table(report))
    print(f"n={report.n} O_acc={report.o_acc:.4f} WOSA={report.wosa_total:.4f}")
    for category, stats in report.per_category.items():
        print(f"  {category.value:<18} n={stats.count:<4} "
              f"O_acc={stats.o_acc:.4f} WOSA={stats.wosa:.4f}")
    if args.out:
        payload = {
            "report": report.to_json(),
            "provenance": {"command": "eval", "seed": cfg.seed, "config": cfg.to_json()},
        }
        Path(args.out).write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return 0


def cmd_simulate_routing(args: argparse.Namespace, cfg: RunConfig) -> int:
    kinds = [AnswerKind.KEY] * args.n_key + [AnswerKind.VALUE] * args.n_value
    estimate = simulate_routing(
        kinds,
        args.p_kind,
        args.key_acc,
        args.value_acc,
        args.misrouted_key_acc,
        args.misrouted_value_acc,
        args.trials,
        cfg.seed,
    )
    print(estimate)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="puzzlevlm",
        description="Caption-enhanced dual-stream puzzle solver with routed specialists.",
    )
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, help="global seed override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic puzzle dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--n-per-category", type=int, default=32)
    p.add_argument("--image-size", type=int, default=48)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("caption", help="run two-stage caption enhancement")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--cache", required=True, help="caption cache JSONL path")
    p.add_argument("--backend", help="captioner backend (mock, http)")
    p.add_argument("--k", type=int, help="number of VQA probe pairs")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("train", help="train one specialist role")
    p.add_argument("--role", required=True, choices=("key", "value"))
    p.add_argument("--data", required=True)
    p.add_argument("--captions", help="caption cache JSONL to read")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--test-fraction", type=float, default=0.25,
                   help="root fraction held out from training entirely")
    p.add_argument("--split-seed", type=int, help="seed for the root split")
    p.add_argument("--lora", action="store_true", help="wrap attention projections with LoRA")
    p.add_argument("--metrics", help="metrics JSONL path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="routed inference over a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--key-ckpt", required=True)
    p.add_argument("--value-ckpt", required=True)
    p.add_argument("--captions", help="caption cache JSONL to read")
    p.add_argument("--out", required=True, help="predictions JSONL path")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tags", help="JSON file mapping puzzle_id to text/vl")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate-routing", help="Monte-Carlo routing-accuracy study")
    p.add_argument("--p-kind", type=float, required=True)
    p.add_argument("--key-acc", type=float, required=True)
    p.add_argument("--value-acc", type=float, required=True)
    p.add_argument("--misrouted-key-acc", type=float, default=0.2)
    p.add_argument("--misrouted-value-acc", type=float, default=0.2)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--n-key", type=int, default=1)
    p.add_argument("--n-value", type=int, default=1)
    p.set_defaults(func=cmd_simulate_routing)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            apply_seed(cfg, args.seed)
        return args.func(args, cfg)
    except (
        ValueError,
        ConfigError,
        DatasetError,
        CaptionError,
        CaptionCacheError,
        TrainingError,
        EvalError,
        CheckpointError,
        OSError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
