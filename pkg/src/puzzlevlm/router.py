"""Inference-time dispatch: classify the puzzle's skill category with the key
model, derive the answer kind, and route to the matching specialist.

Classification is a single forward pass: a fixed prompt is appended to the
question and caption, and the decoder's first-position logits are read at the
eight reserved category tokens (fixed enumeration order, ties resolved to the
lowest category index). A Monte-Carlo simulator estimates how classifier
accuracy translates into option accuracy.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import torch

from .core import AnswerKind, PuzzleInstance, SkillCategory, answer_kind_for_category
from .decoder import KEY_MODEL, VALUE_MODEL, ModelAssembly, answer_puzzle

DEFAULT_ROUTER_PROMPT = (
    "Which skill does this puzzle require? Choose one of: "
    + ", ".join(c.value for c in SkillCategory)
    + ".\nskill: "
)


@dataclass(frozen=True)
class RoutingDecision:
    predicted_category: SkillCategory
    predicted_kind: AnswerKind
    chosen_model: str
    classifier_logits: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.classifier_logits) != len(SkillCategory):
            raise ValueError("classifier_logits must have one entry per category")

    def to_json(self) -> dict:
        return {
            "predicted_category": self.predicted_category.value,
            "predicted_kind": self.predicted_kind.value,
            "chosen_model": self.chosen_model,
            "classifier_logits": list(self.classifier_logits),
        }


def decision_from_logits(logits: list[float] | tuple[float, ...]) -> RoutingDecision:
    """RoutingDecision implied by eight classifier logits (first-maximal
    tie-break, kind derived from the category)."""
    values = [float(v) for v in logits]
    if len(values) != len(SkillCategory):
        raise ValueError(f"expected {len(SkillCategory)} logits, got {len(values)}")
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    category = list(SkillCategory)[best]
    kind = answer_kind_for_category(category)
    chosen = KEY_MODEL if kind is AnswerKind.KEY else VALUE_MODEL
    return RoutingDecision(category, kind, chosen, tuple(values))


def classify_puzzle(
    key_assembly: ModelAssembly,
    puzzle: PuzzleInstance,
    caption: str,
    prompt_template: str = DEFAULT_ROUTER_PROMPT,
) -> RoutingDecision:
    if key_assembly.role != KEY_MODEL:
        raise ValueError("classify_puzzle requires the key model")
    prompt_text = f"question: {puzzle.question}\n"
    if caption:
        prompt_text += f"caption: {caption}\n"
    prompt_text += prompt_template
    with torch.no_grad():
        logits = key_assembly.category_logits(puzzle, caption, prompt_text)
    return decision_from_logits([float(v) for v in logits])


def route_and_answer(
    key_assembly: ModelAssembly,
    value_assembly: ModelAssembly,
    puzzle: PuzzleInstance,
    caption: str,
    prompt_template: str = DEFAULT_ROUTER_PROMPT,
) -> tuple[RoutingDecision, int]:
    if key_assembly.role != KEY_MODEL or value_assembly.role != VALUE_MODEL:
        raise ValueError("route_and_answer requires one key and one value assembly")
    decision = classify_puzzle(key_assembly, puzzle, caption, prompt_template)
    chosen = key_assembly if decision.chosen_model == KEY_MODEL else value_assembly
    return decision, answer_puzzle(chosen, puzzle, caption)


def simulate_routing(
    true_kinds: list[AnswerKind],
    p_kind: float,
    key_acc: float,
    value_acc: float,
    misrouted_key_acc: float,
    misrouted_value_acc: float,
    trials: int,
    seed: int,
) -> float:
    """Monte-Carlo estimate of option accuracy under an imperfect binary
    router.

    Each trial draws an instance kind uniformly from true_kinds and routes it
    correctly with probability p_kind. Correctly routed instances are answered
    with key_acc/value_acc; misrouted instances land on the other model, whose
    accuracy is misrouted_key_acc (key model answering a value-kind instance)
    or misrouted_value_acc (value model answering a key-kind instance).
    """
    if not true_kinds:
        raise ValueError("true_kinds must be non-empty")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    for name, p in (
        ("p_kind", p_kind),
        ("key_acc", key_acc),
        ("value_acc", value_acc),
        ("misrouted_key_acc", misrouted_key_acc),
        ("misrouted_value_acc", misrouted_value_acc),
    ):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {p}")
    rng = random.Random(seed)
    successes = 0
    for _ in range(trials):
        kind = true_kinds[rng.randrange(len(true_kinds))]
        routed_correctly = rng.random() < p_kind
        if kind is AnswerKind.KEY:
            acc = key_acc if routed_correctly else misrouted_value_acc
        else:
            acc = value_acc if routed_correctly else misrouted_key_acc
        if rng.random() < acc:
            successes += 1
    return successes / trials
