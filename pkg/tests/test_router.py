"""Routing: logit-based classification, dispatch, and the accuracy simulator."""

from __future__ import annotations

import math

import pytest

from puzzlevlm.core import AnswerKind, SkillCategory, answer_kind_for_category
from puzzlevlm.decoder import (
    KEY_MODEL,
    VALUE_MODEL,
    DecoderConfig,
    QFormerConfig,
    build_assembly,
)
from puzzlevlm.router import (
    DEFAULT_ROUTER_PROMPT,
    RoutingDecision,
    classify_puzzle,
    decision_from_logits,
    route_and_answer,
    simulate_routing,
)
from puzzlevlm.synth import generate_synthetic_puzzles
from puzzlevlm.vision import VisionConfig

N_CATEGORIES = len(SkillCategory)


def test_router_prompt_lists_all_categories_in_order() -> None:
    assert DEFAULT_ROUTER_PROMPT.endswith("skill: ")
    positions = [DEFAULT_ROUTER_PROMPT.index(c.value) for c in SkillCategory]
    assert positions == sorted(positions)


def test_decision_from_logits_picks_argmax() -> None:
    logits = [0.0] * N_CATEGORIES
    logits[5] = 3.0  # arithmetic
    decision = decision_from_logits(logits)
    assert decision.predicted_category is SkillCategory.ARITHMETIC
    assert decision.predicted_kind is AnswerKind.VALUE
    assert decision.chosen_model == VALUE_MODEL
    assert decision.classifier_logits == tuple(logits)


@pytest.mark.parametrize("category", list(SkillCategory))
def test_decision_one_hot_routes_by_answer_kind(category: SkillCategory) -> None:
    logits = [0.0] * N_CATEGORIES
    logits[list(SkillCategory).index(category)] = 1.0
    decision = decision_from_logits(logits)
    assert decision.predicted_category is category
    expected_kind = answer_kind_for_category(category)
    assert decision.predicted_kind is expected_kind
    expected_model = KEY_MODEL if expected_kind is AnswerKind.KEY else VALUE_MODEL
    assert decision.chosen_model == expected_model


def test_decision_tie_breaks_to_lowest_index() -> None:
    logits = [0.0] * N_CATEGORIES
    logits[1] = 2.0
    logits[5] = 2.0
    assert decision_from_logits(logits).predicted_category is SkillCategory.COUNTING
    assert decision_from_logits([1.0] * N_CATEGORIES).predicted_category is SkillCategory.LOGIC


def test_decision_rejects_wrong_length() -> None:
    with pytest.raises(ValueError, match="expected 8 logits"):
        decision_from_logits([0.0] * 5)


def test_routing_decision_validates_logit_count() -> None:
    with pytest.raises(ValueError, match="one entry per category"):
        RoutingDecision(SkillCategory.LOGIC, AnswerKind.KEY, KEY_MODEL, (0.0, 1.0))


def test_routing_decision_to_json() -> None:
    decision = decision_from_logits([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0])
    obj = decision.to_json()
    assert obj["predicted_category"] == "algebra"
    assert obj["predicted_kind"] == "value"
    assert obj["chosen_model"] == VALUE_MODEL
    assert obj["classifier_logits"] == [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0]


class _StubClassifier:
    """Duck-typed stand-in recording the prompt handed to category_logits."""

    def __init__(self, logits: list[float], role: str = KEY_MODEL) -> None:
        self.role = role
        self.logits = logits
        self.seen_prompts: list[str] = []
        self.seen_captions: list[str] = []

    def category_logits(self, puzzle, caption, prompt_text):  # noqa: ANN001, ANN201
        self.seen_prompts.append(prompt_text)
        self.seen_captions.append(caption)
        return self.logits


def _one_puzzle():
    return generate_synthetic_puzzles(1, 24, seed=5)[0]


def test_classify_puzzle_builds_prompt_with_caption() -> None:
    puzzle = _one_puzzle()
    logits = [0.0] * N_CATEGORIES
    logits[2] = 1.0
    stub = _StubClassifier(logits)
    decision = classify_puzzle(stub, puzzle, "three shapes on white")
    assert decision.predicted_category is SkillCategory.SPATIAL_REASONING
    prompt = stub.seen_prompts[0]
    assert prompt == (
        f"question: {puzzle.question}\n"
        "caption: three shapes on white\n" + DEFAULT_ROUTER_PROMPT
    )


def test_classify_puzzle_omits_empty_caption_line() -> None:
    puzzle = _one_puzzle()
    stub = _StubClassifier([0.0] * N_CATEGORIES)
    classify_puzzle(stub, puzzle, "")
    assert "caption:" not in stub.seen_prompts[0]


def test_classify_puzzle_requires_key_role() -> None:
    stub = _StubClassifier([0.0] * N_CATEGORIES, role=VALUE_MODEL)
    with pytest.raises(ValueError, match="requires the key model"):
        classify_puzzle(stub, _one_puzzle(), "")


def test_route_and_answer_checks_roles() -> None:
    key = _StubClassifier([0.0] * N_CATEGORIES, role=KEY_MODEL)
    value = _StubClassifier([0.0] * N_CATEGORIES, role=VALUE_MODEL)
    with pytest.raises(ValueError, match="one key and one value"):
        route_and_answer(value, key, _one_puzzle(), "")


@pytest.mark.parametrize(
    "peak_index, expect_key",
    [(0, True), (4, True), (5, False), (7, False)],
)
def test_route_and_answer_dispatches_to_predicted_model(
    monkeypatch: pytest.MonkeyPatch, peak_index: int, expect_key: bool
) -> None:
    logits = [0.0] * N_CATEGORIES
    logits[peak_index] = 2.0
    key = _StubClassifier(logits, role=KEY_MODEL)
    value = _StubClassifier([0.0] * N_CATEGORIES, role=VALUE_MODEL)
    answered_by: list[object] = []

    def fake_answer(assembly, puzzle, caption):  # noqa: ANN001, ANN202
        answered_by.append(assembly)
        return 3

    monkeypatch.setattr("puzzlevlm.router.answer_puzzle", fake_answer)
    decision, option_index = route_and_answer(key, value, _one_puzzle(), "cap")
    assert option_index == 3
    assert answered_by[0] is (key if expect_key else value)
    assert decision.chosen_model == (KEY_MODEL if expect_key else VALUE_MODEL)


def test_route_and_answer_end_to_end_with_real_assemblies() -> None:
    vision = VisionConfig(image_size=24, patch_size=8, n_segments=4, dim=16)
    qformer = QFormerConfig(
        n_queries=2, dim=16, n_layers=1, n_heads=2, dim_out=16, dim_visual=16, ffn_hidden=16
    )
    decoder = DecoderConfig(dim=16, n_layers=1, n_heads=2, max_len=512, ffn_hidden=16)
    key = build_assembly(vision, qformer, decoder, KEY_MODEL, seed=0)
    value = build_assembly(vision, qformer, decoder, VALUE_MODEL, seed=1)
    decision, option_index = route_and_answer(key, value, _one_puzzle(), "a caption")
    assert 0 <= option_index < 5
    assert len(decision.classifier_logits) == N_CATEGORIES
    assert decision.chosen_model in (KEY_MODEL, VALUE_MODEL)


def test_simulate_routing_perfect_router_and_models() -> None:
    acc = simulate_routing([AnswerKind.KEY], 1.0, 1.0, 0.0, 0.0, 0.0, trials=500, seed=0)
    assert acc == 1.0


def test_simulate_routing_misrouted_key_instances_hit_value_model() -> None:
    # p_kind=0 forces every key-kind instance onto the value model.
    acc = simulate_routing([AnswerKind.KEY], 0.0, 0.0, 0.0, 0.0, 1.0, trials=500, seed=0)
    assert acc == 1.0
    acc = simulate_routing([AnswerKind.VALUE], 0.0, 0.0, 0.0, 1.0, 0.0, trials=500, seed=0)
    assert acc == 1.0


def test_simulate_routing_is_deterministic_in_seed() -> None:
    kinds = [AnswerKind.KEY, AnswerKind.VALUE]
    a = simulate_routing(kinds, 0.8, 0.9, 0.8, 0.2, 0.2, trials=2000, seed=11)
    b = simulate_routing(kinds, 0.8, 0.9, 0.8, 0.2, 0.2, trials=2000, seed=11)
    c = simulate_routing(kinds, 0.8, 0.9, 0.8, 0.2, 0.2, trials=2000, seed=12)
    assert a == b
    assert a != c


def test_simulate_routing_matches_closed_form_within_three_sigma() -> None:
    kinds = [AnswerKind.KEY] * 5 + [AnswerKind.VALUE] * 3
    p, key_acc, value_acc, mis = 0.8, 0.9, 0.8, 0.2
    trials = 20_000
    expected = (5 / 8) * (p * key_acc + (1 - p) * mis) + (3 / 8) * (
        p * value_acc + (1 - p) * mis
    )
    estimate = simulate_routing(kinds, p, key_acc, value_acc, mis, mis, trials=trials, seed=3)
    sigma = math.sqrt(expected * (1 - expected) / trials)
    assert abs(estimate - expected) < 3 * sigma


def test_simulate_routing_validates_inputs() -> None:
    with pytest.raises(ValueError, match="non-empty"):
        simulate_routing([], 0.5, 0.5, 0.5, 0.5, 0.5, trials=10, seed=0)
    with pytest.raises(ValueError, match="trials must be >= 1"):
        simulate_routing([AnswerKind.KEY], 0.5, 0.5, 0.5, 0.5, 0.5, trials=0, seed=0)
    with pytest.raises(ValueError, match="p_kind must be in"):
        simulate_routing([AnswerKind.KEY], 1.5, 0.5, 0.5, 0.5, 0.5, trials=10, seed=0)
    with pytest.raises(ValueError, match="misrouted_key_acc must be in"):
        simulate_routing([AnswerKind.KEY], 0.5, 0.5, 0.5, -0.1, 0.5, trials=10, seed=0)
