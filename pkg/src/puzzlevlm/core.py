"""Domain types for diagram puzzles: skill categories, answer kinds, answer
normalization, and the rule that maps a free-form answer value back onto one
of the five options."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

N_OPTIONS = 5


class SkillCategory(Enum):
    """The eight puzzle skill categories, in fixed enumeration order.

    The order matters: classifier tie-breaks resolve to the lowest index.
    """

    LOGIC = "logic"
    COUNTING = "counting"
    SPATIAL_REASONING = "spatial_reasoning"
    PATH_TRACING = "path_tracing"
    PATTERN_FINDING = "pattern_finding"
    ARITHMETIC = "arithmetic"
    MEASUREMENT = "measurement"
    ALGEBRA = "algebra"

    @property
    def index(self) -> int:
        return list(SkillCategory).index(self)


class AnswerKind(Enum):
    KEY = "key"
    VALUE = "value"


_KEY_CATEGORIES = frozenset(
    {
        SkillCategory.LOGIC,
        SkillCategory.COUNTING,
        SkillCategory.SPATIAL_REASONING,
        SkillCategory.PATH_TRACING,
        SkillCategory.PATTERN_FINDING,
    }
)


def answer_kind_for_category(category: SkillCategory) -> AnswerKind:
    """Map a skill category to the kind of answer its specialist model emits.

    Logic, counting, spatial reasoning, path tracing and pattern finding
    puzzles are answered by picking an option key directly; arithmetic,
    measurement and algebra puzzles are answered with a numeric value.
    """
    return AnswerKind.KEY if category in _KEY_CATEGORIES else AnswerKind.VALUE


_INT_RE = re.compile(r"[+-]?\d+")
_FLOAT_RE = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+)")


def normalize_answer(raw: str) -> str:
    """Canonical form of an answer string.

    Surrounding whitespace is stripped, the text is case-folded, and internal
    whitespace runs collapse to single spaces. Strings that are plain numbers
    are canonicalized so "007", "7" and "7.0" compare equal.
    """
    text = " ".join(raw.split()).casefold()
    if _INT_RE.fullmatch(text):
        return str(int(text))
    if _FLOAT_RE.fullmatch(text):
        value = float(text)
        if value == int(value) and abs(value) < 1e15:
            return str(int(value))
        return str(value)
    return text


def _parse_number(text: str) -> float | None:
    if _FLOAT_RE.fullmatch(text):
        return float(text)
    return None


def _edit_distance(a: str, b: str) -> int:
    # Classic Levenshtein DP over two rows; strings here are short option texts.
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb))
            )
        previous = current
    return previous[-1]


def select_option_by_value(value: str, options: Sequence[str]) -> int:
    """Match a free-form answer value to one of the five options.

    Tries, in order: exact match on normalized forms, numerically nearest
    option when both sides parse as numbers, and smallest edit distance
    between normalized forms. Every tie breaks to the lowest option index,
    so the chain is total and deterministic.
    """
    if len(options) != N_OPTIONS:
        raise ValueError(f"expected {N_OPTIONS} options, got {len(options)}")
    norm_value = normalize_answer(value)
    norm_options = [normalize_answer(o) for o in options]

    for i, opt in enumerate(norm_options):
        if norm_value == opt:
            return i

    numeric_value = _parse_number(norm_value)
    if numeric_value is not None:
        numeric = [(i, _parse_number(o)) for i, o in enumerate(norm_options)]
        numeric = [(i, v) for i, v in numeric if v is not None]
        if numeric:
            return min(numeric, key=lambda iv: (abs(numeric_value - iv[1]), iv[0]))[0]

    distances = [_edit_distance(norm_value, o) for o in norm_options]
    return min(range(N_OPTIONS), key=lambda i: (distances[i], i))


@dataclass(eq=False)
class PuzzleInstance:
    """One puzzle: an image, a question, five options and the gold answer.

    `weight` is the per-puzzle scoring weight; it defaults to 1 because the
    challenge-side weights are not public.
    """

    id: str
    root_id: int
    image: np.ndarray
    question: str
    options: list[str]
    gold_option_index: int
    category: SkillCategory
    weight: float = 1.0

    def __post_init__(self) -> None:
        if len(self.options) != N_OPTIONS:
            raise ValueError(
                f"puzzle {self.id!r}: expected {N_OPTIONS} options, got {len(self.options)}"
            )
        normalized = [normalize_answer(o) for o in self.options]
        if len(set(normalized)) != N_OPTIONS:
            raise ValueError(f"puzzle {self.id!r}: options duplicate after normalization")
        if not 0 <= self.gold_option_index < N_OPTIONS:
            raise ValueError(
                f"puzzle {self.id!r}: gold_option_index {self.gold_option_index} out of range"
            )
        if not self.weight > 0:
            raise ValueError(f"puzzle {self.id!r}: weight must be positive")
        image = np.asarray(self.image)
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
            raise ValueError(
                f"puzzle {self.id!r}: image must be HxWx3 uint8, got "
                f"shape {image.shape} dtype {image.dtype}"
            )
        self.image = image

    @property
    def gold_answer(self) -> str:
        return self.options[self.gold_option_index]

    @property
    def answer_kind(self) -> AnswerKind:
        return answer_kind_for_category(self.category)
