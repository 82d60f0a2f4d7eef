"""Supervised training of the key and value assemblies.

Cross-entropy on the role's output tokens, a single Adam optimizer with two
learning-rate groups (base parameters vs LoRA factors), a deterministic mixed
sampler over primary + additional data, periodic held-out evaluation, and
best-by-validation checkpointing.

The key role optionally adds an auxiliary classification cross-entropy on the
eight reserved category tokens (same training instances, gold label = the
instance's category). A from-scratch toy decoder has no zero-shot knowledge,
so without this term the router head would be uninitialized noise. Value-kind
instances can be mixed into key-role batches (`additional_instances` plus
`mix_ratio`, or a mixed primary dataset with `all_categories`) to give the
classifier coverage of all eight categories; such instances contribute only
the classification term, never the option-selection term.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import save_checkpoint
from .core import AnswerKind, PuzzleInstance
from .decoder import KEY_MODEL, TOKENIZER, ModelAssembly, answer_puzzle, build_prompt
from .evaluation import EvalRecord, o_acc, wosa
from .router import DEFAULT_ROUTER_PROMPT


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 1e-5
    lora_lr: float = 1e-6
    batch_size: int = 16
    epochs: float = 2.0
    seed: int = 0
    mix_ratio: float = 0.0
    aux_classify_weight: float = 0.5
    eval_every: int = 50
    val_fraction: float = 0.2
    all_categories: bool = False
    image_blank_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.base_lr <= 0 or self.lora_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0.0 <= self.image_blank_prob <= 1.0:
            raise ValueError("image_blank_prob must be in [0, 1]")

    def to_json(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "lora_lr": self.lora_lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "mix_ratio": self.mix_ratio,
            "aux_classify_weight": self.aux_classify_weight,
            "eval_every": self.eval_every,
            "val_fraction": self.val_fraction,
            "all_categories": self.all_categories,
            "image_blank_prob": self.image_blank_prob,
        }


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q_proj", "v_proj")
    freeze_base: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not self.targets:
            raise ValueError("targets must be non-empty")

    def to_json(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "targets": list(self.targets),
            "freeze_base": self.freeze_base,
            "seed": self.seed,
        }


class LoRALinear(nn.Module):
    """W + (alpha/rank) * B @ A around a wrapped nn.Linear. B starts at zero,
    so a freshly wrapped model computes exactly what the base model did."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, freeze_base: bool,
                 generator: torch.Generator):
        super().__init__()
        self.base = base
        self.scale = alpha / rank
        dtype = base.weight.dtype
        out_features, in_features = base.weight.shape
        if freeze_base:
            base.weight.requires_grad_(False)
            if base.bias is not None:
                base.bias.requires_grad_(False)
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank, dtype=dtype))
        self.lora_A = nn.Parameter(
            torch.randn(rank, in_features, generator=generator, dtype=dtype) * 0.02
        )

    @property
    def effective_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.lora_B @ self.lora_A)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.lora_A.T) @ self.lora_B.T)


def lora_wrap(module: nn.Module, cfg: LoraConfig) -> int:
    """Replace every nn.Linear whose attribute name is in cfg.targets with a
    LoRALinear. Returns the number of adapted sites; a target matching nothing
    is a configuration error."""
    sites: list[tuple[nn.Module, str, str]] = []
    matched: set[str] = set()
    for parent_name, parent in module.named_modules():
        if isinstance(parent, LoRALinear):
            continue
        for attr, child in parent.named_children():
            if attr in cfg.targets and isinstance(child, nn.Linear):
                qualified = f"{parent_name}.{attr}" if parent_name else attr
                sites.append((parent, attr, qualified))
                matched.add(attr)
    missing = [t for t in cfg.targets if t not in matched]
    if missing:
        raise TrainingError(f"LoRA targets match no linear weight: {', '.join(missing)}")
    sites.sort(key=lambda s: s[2])
    for index, (parent, attr, _) in enumerate(sites):
        generator = torch.Generator()
        generator.manual_seed(cfg.seed * 100003 + index)
        setattr(parent, attr, LoRALinear(getattr(parent, attr), cfg.rank, cfg.alpha,
                                         cfg.freeze_base, generator))
    return len(sites)


def lora_parameter_names(module: nn.Module) -> set[str]:
    return {
        name
        for name, _ in module.named_parameters()
        if name.endswith("lora_A") or name.endswith("lora_B")
    }


def make_optimizer(module: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    """One Adam with two groups: LoRA factors at lora_lr, the rest at base_lr."""
    lora_names = lora_parameter_names(module)
    base_params = [
        p for n, p in module.named_parameters() if p.requires_grad and n not in lora_names
    ]
    lora_params = [
        p for n, p in module.named_parameters() if p.requires_grad and n in lora_names
    ]
    groups = [{"params": base_params, "lr": cfg.base_lr}]
    if lora_params:
        groups.append({"params": lora_params, "lr": cfg.lora_lr})
    return torch.optim.Adam(groups)


def mixed_sampler(
    primary: list, additional: list, cfg: TrainConfig
) -> Iterator[list]:
    """Infinite deterministic batch stream: round(mix_ratio * batch_size)
    items per batch come from `additional`, the rest from `primary`; each side
    is reshuffled per epoch by its own seeded RNG."""
    if not primary:
        raise TrainingError("primary dataset is empty")
    n_additional = round(cfg.mix_ratio * cfg.batch_size) if additional else 0
    n_primary = cfg.batch_size - n_additional

    def stream(items: list, rng: random.Random) -> Iterator:
        while True:
            order = list(range(len(items)))
            rng.shuffle(order)
            for i in order:
                yield items[i]

    primary_stream = stream(primary, random.Random(cfg.seed))
    additional_stream = stream(additional, random.Random(cfg.seed + 1)) if additional else None
    while True:
        batch = [next(primary_stream) for _ in range(n_primary)]
        if additional_stream is not None:
            batch.extend(next(additional_stream) for _ in range(n_additional))
        yield batch


def blank_image(puzzle: PuzzleInstance) -> PuzzleInstance:
    """The same instance over an all-white canvas.

    Training with a fraction of blanked images (cfg.image_blank_prob) is a
    modality dropout: a small model can reach zero training loss by
    memorizing image -> answer, which does not survive a root-disjoint split,
    while the caption states the relevant facts in text; intermittently
    removing the image forces the caption-reading path to carry the answer.
    """
    return replace(puzzle, image=np.full_like(puzzle.image, 255))


def _classification_prompt(puzzle: PuzzleInstance, caption: str) -> str:
    text = f"question: {puzzle.question}\n"
    if caption:
        text += f"caption: {caption}\n"
    return text + DEFAULT_ROUTER_PROMPT


def instance_loss(
    assembly: ModelAssembly, puzzle: PuzzleInstance, caption: str, cfg: TrainConfig
) -> torch.Tensor:
    """Cross-entropy for one instance under the assembly's role.

    A value-kind instance reaching the key model trains only the shared
    classification head: the option-selection head stays a key-category
    specialist while the classifier still sees all eight categories.
    """
    if assembly.role == KEY_MODEL:
        if puzzle.answer_kind is AnswerKind.KEY:
            logits = assembly.option_logits(puzzle, caption)
            loss = F.cross_entropy(
                logits.unsqueeze(0), torch.tensor([puzzle.gold_option_index])
            )
        else:
            loss = torch.zeros(())
        if cfg.aux_classify_weight > 0:
            cat_logits = assembly.category_logits(
                puzzle, caption, _classification_prompt(puzzle, caption)
            )
            loss = loss + cfg.aux_classify_weight * F.cross_entropy(
                cat_logits.unsqueeze(0), torch.tensor([puzzle.category.index])
            )
        return loss
    gold = puzzle.gold_answer
    target_ids = TOKENIZER.encode(gold) + [TOKENIZER.EOS]
    prompt = build_prompt(puzzle.question, caption, puzzle.options, assembly.role)
    sequence = prompt + target_ids[:-1]
    logits = assembly.prompt_logits(puzzle.image, puzzle.question, sequence)
    n_prefix = logits.shape[0] - len(sequence)
    start = n_prefix + len(prompt) - 1
    positions = logits[start : start + len(target_ids)]
    return F.cross_entropy(
        positions, torch.tensor(target_ids, dtype=torch.long), reduction="sum"
    )


def train_step(
    assembly: ModelAssembly,
    batch: list[tuple[PuzzleInstance, str]],
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
) -> float:
    """One optimizer update on a batch of (puzzle, caption) pairs."""
    optimizer.zero_grad()
    total = torch.zeros(())
    for puzzle, caption in batch:
        total = total + instance_loss(assembly, puzzle, caption, cfg)
    loss = total / len(batch)
    if not torch.isfinite(loss):
        ids = ", ".join(p.id for p, _ in batch)
        raise TrainingError(f"non-finite loss on batch [{ids}]")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def evaluate_split(
    assembly: ModelAssembly, instances: list[PuzzleInstance], captions: dict[str, str]
) -> tuple[float, float]:
    """(O_acc, WOSA) of direct role answers over a split."""
    records = []
    with torch.no_grad():
        for puzzle in instances:
            predicted = answer_puzzle(assembly, puzzle, captions.get(puzzle.id, ""))
            records.append(
                EvalRecord(
                    puzzle_id=puzzle.id,
                    weight=puzzle.weight,
                    correct=int(predicted == puzzle.gold_option_index),
                    category=puzzle.category,
                    modality_tag="vl",
                )
            )
    return o_acc(records), wosa(records)


@dataclass
class FitResult:
    checkpoint_path: Path
    history: list[dict] = field(default_factory=list)
    best_val_o_acc: float = 0.0
    best_step: int = 0
    steps: int = 0


def _role_kind(role: str) -> AnswerKind:
    return AnswerKind.KEY if role == KEY_MODEL else AnswerKind.VALUE


def fit(
    assembly: ModelAssembly,
    train_instances: list[PuzzleInstance],
    val_instances: list[PuzzleInstance],
    captions: dict[str, str],
    cfg: TrainConfig,
    lora_cfg: LoraConfig | None,
    checkpoint_path: str | Path,
    metadata: dict | None = None,
    additional_instances: list[PuzzleInstance] | None = None,
    metrics_path: str | Path | None = None,
) -> FitResult:
    """Train one role and keep the best-by-validation checkpoint (ties go to
    the later step). Training instances must match the role's answer kind
    unless cfg.all_categories is set."""
    if not train_instances:
        raise TrainingError("primary dataset is empty")
    if not cfg.all_categories:
        expected = _role_kind(assembly.role)
        for puzzle in train_instances:
            if puzzle.answer_kind is not expected:
                raise TrainingError(
                    f"{assembly.role} fit received {puzzle.answer_kind.value}-kind "
                    f"instance {puzzle.id!r}; filter datasets by role or set all_categories"
                )
    if lora_cfg is not None:
        lora_wrap(assembly, lora_cfg)
    optimizer = make_optimizer(assembly, cfg)
    total_steps = max(1, math.ceil(cfg.epochs * len(train_instances) / cfg.batch_size))
    sampler = mixed_sampler(train_instances, additional_instances or [], cfg)

    checkpoint_path = Path(checkpoint_path)
    metrics_file = Path(metrics_path) if metrics_path else None
    if metrics_file:
        metrics_file.parent.mkdir(parents=True, exist_ok=True)
        metrics_file.write_text("", encoding="utf-8")
    result = FitResult(checkpoint_path=checkpoint_path, best_val_o_acc=-1.0)

    def log_metrics(step: int, loss: float) -> None:
        entries = []
        train_acc, train_wosa = evaluate_split(assembly, train_instances, captions)
        entries.append({"step": step, "split": "train", "o_acc": train_acc,
                        "wosa": train_wosa, "loss": loss})
        if val_instances:
            val_acc, val_wosa = evaluate_split(assembly, val_instances, captions)
            entries.append({"step": step, "split": "val", "o_acc": val_acc,
                            "wosa": val_wosa, "loss": loss})
        else:
            val_acc = train_acc
        result.history.extend(entries)
        if metrics_file:
            with open(metrics_file, "a", encoding="utf-8") as fh:
                for entry in entries:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if val_acc >= result.best_val_o_acc:
            result.best_val_o_acc = val_acc
            result.best_step = step
            save_checkpoint(
                assembly,
                {
                    **(metadata or {}),
                    "role": assembly.role,
                    "train_config": cfg.to_json(),
                    "lora_config": lora_cfg.to_json() if lora_cfg else None,
                    "step": step,
                    "history": result.history,
                },
                checkpoint_path,
            )

    loss = float("nan")
    blank_rng = random.Random(cfg.seed + 29)
    for step in range(1, total_steps + 1):
        batch = [
            (
                blank_image(p)
                if blank_rng.random() < cfg.image_blank_prob
                else p,
                captions.get(p.id, ""),
            )
            for p in next(sampler)
        ]
        try:
            loss = train_step(assembly, batch, cfg, optimizer)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        if step % cfg.eval_every == 0 and step != total_steps:
            log_metrics(step, loss)
    log_metrics(total_steps, loss)
    result.steps = total_steps
    return result
