"""Scoring: option selection accuracy and weighted option selection accuracy.

WOSA = 100 * sum(w_i * correct_i) / sum(w_i), accumulated with math.fsum.
Reports aggregate per category and per modality tag (text vs vl); the tag is
supplied as input metadata, since the text/vision-language partition is not
derivable from a puzzle instance itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .core import PuzzleInstance, SkillCategory

MODALITY_TAGS = ("text", "vl")


class EvalError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    puzzle_id: str
    weight: float
    correct: int
    category: SkillCategory
    modality_tag: str

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise EvalError(f"record {self.puzzle_id!r}: weight must be positive")
        if self.correct not in (0, 1):
            raise EvalError(f"record {self.puzzle_id!r}: correct must be 0 or 1")
        if self.modality_tag not in MODALITY_TAGS:
            raise EvalError(
                f"record {self.puzzle_id!r}: modality_tag must be one of {MODALITY_TAGS}"
            )


def o_acc(records: list[EvalRecord]) -> float:
    if not records:
        raise EvalError("cannot score an empty record list")
    return sum(r.correct for r in records) / len(records)


def wosa(records: list[EvalRecord]) -> float:
    if not records:
        raise EvalError("cannot score an empty record list")
    for record in records:
        if record.weight <= 0:
            raise EvalError(f"record {record.puzzle_id!r}: non-positive weight")
    numerator = math.fsum(r.weight * r.correct for r in records)
    denominator = math.fsum(r.weight for r in records)
    # 100 * (num/den), not (100*num)/den: with uniform integer weights the
    # quotient is then the correctly-rounded k/n, so WOSA == 100 * o_acc
    # exactly rather than up to one ulp.
    return 100.0 * (numerator / denominator)


@dataclass(frozen=True)
class CategoryStats:
    count: int
    o_acc: float
    wosa: float


@dataclass
class EvalReport:
    n: int
    o_acc: float
    wosa_total: float
    wosa_text: float | None
    wosa_vl: float | None
    per_category: dict[SkillCategory, CategoryStats]

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "o_acc": self.o_acc,
            "wosa_total": self.wosa_total,
            "wosa_text": self.wosa_text,
            "wosa_vl": self.wosa_vl,
            "per_category": {
                category.value: {
                    "count": stats.count,
                    "o_acc": stats.o_acc,
                    "wosa": stats.wosa,
                }
                for category, stats in self.per_category.items()
            },
        }


def eval_report(
    predictions: dict[str, int],
    dataset: list[PuzzleInstance],
    modality_tags: dict[str, str] | None = None,
) -> EvalReport:
    """Score predictions against gold options. Every dataset instance must
    have a prediction; modality tags default to 'vl' when unspecified."""
    if not dataset:
        raise EvalError("cannot evaluate an empty dataset")
    tags = modality_tags or {}
    missing = sorted(p.id for p in dataset if p.id not in predictions)
    if missing:
        raise EvalError(f"missing predictions for: {', '.join(missing)}")
    records = [
        EvalRecord(
            puzzle_id=p.id,
            weight=p.weight,
            correct=int(predictions[p.id] == p.gold_option_index),
            category=p.category,
            modality_tag=tags.get(p.id, "vl"),
        )
        for p in dataset
    ]
    by_tag = {tag: [r for r in records if r.modality_tag == tag] for tag in MODALITY_TAGS}
    per_category: dict[SkillCategory, CategoryStats] = {}
    for category in SkillCategory:
        group = [r for r in records if r.category is category]
        if group:
            per_category[category] = CategoryStats(len(group), o_acc(group), wosa(group))
    return EvalReport(
        n=len(records),
        o_acc=o_acc(records),
        wosa_total=wosa(records),
        wosa_text=wosa(by_tag["text"]) if by_tag["text"] else None,
        wosa_vl=wosa(by_tag["vl"]) if by_tag["vl"] else None,
        per_category=per_category,
    )


def format_report_table(report: EvalReport, method: str = "ours (toy)") -> str:
    """Text table shaped like the standard results layout: one method row with
    Text-WOSA, VL-WOSA, and Total-WOSA columns."""

    def cell(value: float | None) -> str:
        return f"{value:.2f}" if value is not None else "-"

    header = f"{'method':<16} | {'Text-WOSA':>9} | {'VL-WOSA':>8} | {'Total-WOSA':>10}"
    rule = "-" * len(header)
    row = (
        f"{method:<16} | {cell(report.wosa_text):>9} | "
        f"{cell(report.wosa_vl):>8} | {cell(report.wosa_total):>10}"
    )
    return "\n".join([header, rule, row])


def write_predictions(
    path: str | Path, predictions: dict[str, int], routing: dict[str, dict] | None = None
) -> None:
    """JSON Lines, one {puzzle_id, option_index[, routing]} per line, sorted
    by puzzle_id for byte-stable output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for puzzle_id in sorted(predictions):
            record: dict = {"puzzle_id": puzzle_id, "option_index": predictions[puzzle_id]}
            if routing and puzzle_id in routing:
                record["routing"] = routing[puzzle_id]
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> dict[str, int]:
    path = Path(path)
    if not path.exists():
        raise EvalError(f"predictions file not found: {path}")
    predictions: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                predictions[record["puzzle_id"]] = int(record["option_index"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise EvalError(f"{path}:{line_number}: malformed prediction: {exc}") from exc
    return predictions
