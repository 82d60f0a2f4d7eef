"""Dataset loading and splitting.

Puzzle datasets live on disk as a `puzzles.jsonl` manifest plus PNG images.
Splits are generated at root-puzzle granularity so every instance of a held
out root is unseen during training.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .core import N_OPTIONS, PuzzleInstance, SkillCategory, normalize_answer

MANIFEST_NAME = "puzzles.jsonl"


class DatasetError(Exception):
    """Fatal dataset problem: missing manifest, unreadable file, bad split input."""


class SplitError(DatasetError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test root-id sets produced by a seeded shuffle."""

    test_root_ids: frozenset[int]
    train_root_ids: frozenset[int]
    seed: int

    def side_of(self, root_id: int) -> str:
        if root_id in self.test_root_ids:
            return "test"
        if root_id in self.train_root_ids:
            return "train"
        raise KeyError(f"root id {root_id} not covered by this split")


@dataclass
class RecordError:
    """One skipped manifest record and why."""

    line_number: int
    message: str


@dataclass
class LoadResult:
    puzzles: list[PuzzleInstance]
    errors: list[RecordError] = field(default_factory=list)

    def __iter__(self):
        return iter(self.puzzles)

    def __len__(self) -> int:
        return len(self.puzzles)


def _parse_manifest_record(record: dict, root: Path) -> PuzzleInstance:
    options = record["options"]
    if not isinstance(options, list) or len(options) != N_OPTIONS:
        raise ValueError(f"expected {N_OPTIONS} options, got {options!r}")
    image_path = root / record["image"]
    if not image_path.is_file():
        raise ValueError(f"image file not found: {record['image']}")
    try:
        with Image.open(image_path) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ValueError(f"undecodable image {record['image']}: {exc}") from exc
    return PuzzleInstance(
        id=str(record["id"]),
        root_id=int(record["root_id"]),
        image=image,
        question=str(record["question"]),
        options=[str(o) for o in options],
        gold_option_index=int(record["answer_index"]),
        category=SkillCategory(record["category"]),
        weight=float(record.get("weight", 1.0)),
    )


def load_puzzles(root_path: str | Path) -> LoadResult:
    """Load every puzzle listed in `<root_path>/puzzles.jsonl`.

    A missing manifest raises DatasetError. Individual bad records (missing
    or undecodable image, wrong option count, malformed JSON) are skipped and
    reported in the result's `errors` list; valid records keep manifest order.
    """
    root = Path(root_path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")

    puzzles: list[PuzzleInstance] = []
    errors: list[RecordError] = []
    with open(manifest, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                puzzles.append(_parse_manifest_record(record, root))
            except Exception as exc:
                errors.append(RecordError(line_number, str(exc)))
    return LoadResult(puzzles=puzzles, errors=errors)


def save_puzzles(puzzles: Sequence[PuzzleInstance], root_path: str | Path) -> Path:
    """Write a dataset directory: PNG per puzzle plus the JSONL manifest."""
    root = Path(root_path)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    manifest = root / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for puzzle in puzzles:
            rel = f"images/{puzzle.id}.png"
            Image.fromarray(puzzle.image, mode="RGB").save(root / rel, format="PNG")
            record = {
                "id": puzzle.id,
                "root_id": puzzle.root_id,
                "image": rel,
                "question": puzzle.question,
                "options": puzzle.options,
                "answer_index": puzzle.gold_option_index,
                "category": puzzle.category.value,
            }
            if puzzle.weight != 1.0:
                record["weight"] = puzzle.weight
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def make_puzzle_split(
    instances: Sequence[PuzzleInstance], test_fraction: float, seed: int
) -> SplitSpec:
    """Partition root ids into train/test by a seeded shuffle.

    Roughly ceil(test_fraction * #roots) roots land on the test side, clamped
    so both sides stay non-empty. Instances sharing a root always fall on the
    same side; the result is deterministic for fixed inputs and seed.
    """
    if not 0 < test_fraction < 1:
        raise SplitError(f"test_fraction must be in (0,1), got {test_fraction}")
    roots = sorted({p.root_id for p in instances})
    if len(roots) < 2:
        raise SplitError(f"need at least 2 distinct root ids, got {len(roots)}")
    rng = random.Random(seed)
    rng.shuffle(roots)
    n_test = math.ceil(test_fraction * len(roots))
    n_test = min(max(n_test, 1), len(roots) - 1)
    return SplitSpec(
        test_root_ids=frozenset(roots[:n_test]),
        train_root_ids=frozenset(roots[n_test:]),
        seed=seed,
    )


def split_instances(
    instances: Iterable[PuzzleInstance], spec: SplitSpec
) -> tuple[list[PuzzleInstance], list[PuzzleInstance]]:
    """Apply a SplitSpec, returning (train, test) in input order."""
    train, test = [], []
    for puzzle in instances:
        if puzzle.root_id in spec.test_root_ids:
            test.append(puzzle)
        elif puzzle.root_id in spec.train_root_ids:
            train.append(puzzle)
        else:
            raise SplitError(f"instance {puzzle.id} has root {puzzle.root_id} outside the split")
    return train, test


@dataclass
class ExternalRecord:
    """A QA record from an auxiliary dataset, possibly free-form."""

    question: str
    options: list[str]
    answer: str
    source: str
    image: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.source:
            raise ValueError("external record needs a non-empty source identifier")


def is_multiple_choice(record: ExternalRecord) -> bool:
    if len(record.options) < 2:
        return False
    answer = normalize_answer(record.answer)
    return any(normalize_answer(o) == answer for o in record.options)


def filter_multiple_choice(records: Sequence[ExternalRecord]) -> list[ExternalRecord]:
    """Keep only records whose answer matches one of at least two options.

    Order is preserved; everything free-form or unmatched is dropped.
    """
    return [r for r in records if is_multiple_choice(r)]


def load_external_records(path: str | Path) -> list[ExternalRecord]:
    """Read an external-record JSONL manifest (no image decoding)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                ExternalRecord(
                    question=str(obj["question"]),
                    options=[str(o) for o in obj.get("options", [])],
                    answer=str(obj["answer"]),
                    source=str(obj["source"]),
                )
            )
    return records
