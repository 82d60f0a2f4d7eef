"""Synthetic diagram puzzles with programmatically known answers.

Eight generators, one per skill category, render small PNG-style diagrams
(disjoint solid shapes on a white background, hard-edged so connected
component counts are exact) and emit five-option questions. Everything is
deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .core import PuzzleInstance, SkillCategory

BACKGROUND = (255, 255, 255)
INK = (20, 20, 20)

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 170, 40),
    "blue": (50, 70, 220),
    "orange": (240, 150, 30),
    "purple": (150, 50, 190),
    "teal": (20, 150, 160),
}

SHAPE_NAMES = ["circle", "square", "triangle", "diamond", "star"]

# Kinds that are safe to rasterize: each fills to a single 4-connected
# component at any size >= 2px half-extent. Star arms thin out to separate
# components on small canvases, so stars appear only as option text.
DRAWN_SHAPES = SHAPE_NAMES[:4]


@dataclass
class _Drawn:
    image: np.ndarray
    question: str
    options: list[str]
    gold_index: int


def _canvas(size: int) -> tuple[Image.Image, ImageDraw.ImageDraw]:
    img = Image.new("RGB", (size, size), BACKGROUND)
    return img, ImageDraw.Draw(img)


def _finish(img: Image.Image) -> np.ndarray:
    return np.asarray(img, dtype=np.uint8)


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, cx: int, cy: int, half: int, color) -> None:
    x0, y0, x1, y1 = cx - half, cy - half, cx + half, cy + half
    if kind == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif kind == "square":
        draw.rectangle([x0, y0, x1, y1], fill=color)
    elif kind == "triangle":
        draw.polygon([(cx, y0), (x1, y1), (x0, y1)], fill=color)
    elif kind == "diamond":
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=color)
    elif kind == "star":
        outer, inner = half, max(1, int(half * 0.45))
        points = []
        for i in range(10):
            radius = outer if i % 2 == 0 else inner
            angle = -np.pi / 2 + i * np.pi / 5
            points.append((cx + radius * np.cos(angle), cy + radius * np.sin(angle)))
        draw.polygon(points, fill=color)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")


def _place_disjoint(
    rng: np.random.Generator, size: int, halves: list[int], gap: int = 2
) -> list[tuple[int, int, int]]:
    """Sample non-overlapping placements by rejection, shrinking on failure.

    Returns (cx, cy, half) triples; the returned half is the effective one, so
    callers must draw with it (a shrunk keep-out with a full-size shape could
    overlap a neighbor and merge two components).
    """
    boxes: list[tuple[int, int, int, int]] = []
    placements: list[tuple[int, int, int]] = []
    for half in halves:
        h = half
        placed = False
        while not placed:
            for _ in range(200):
                cx = int(rng.integers(h + 1, size - h - 1))
                cy = int(rng.integers(h + 1, size - h - 1))
                box = (cx - h - gap, cy - h - gap, cx + h + gap, cy + h + gap)
                if all(
                    box[2] < b[0] or b[2] < box[0] or box[3] < b[1] or b[3] < box[1]
                    for b in boxes
                ):
                    boxes.append(box)
                    placements.append((cx, cy, h))
                    placed = True
                    break
            if not placed:
                if h <= 1:
                    raise ValueError(f"cannot place {len(halves)} shapes on a {size}px canvas")
                h = max(1, h - 1)
    return placements


def _with_gold(rng: np.random.Generator, gold: str, distractors: list[str]) -> tuple[list[str], int]:
    """Shuffle four distractors plus the gold answer into a 5-option list."""
    assert len(distractors) == 4 and gold not in distractors
    options = list(distractors)
    gold_index = int(rng.integers(0, 5))
    options.insert(gold_index, gold)
    return options, gold_index


def _number_distractors(rng: np.random.Generator, gold: int, low: int = 0) -> list[str]:
    candidates = [gold + d for d in range(-6, 7) if d != 0 and gold + d >= low]
    picks = rng.choice(len(candidates), size=4, replace=False)
    return [str(candidates[i]) for i in sorted(picks)]


def _name_distractors(rng: np.random.Generator, gold: str, pool: list[str]) -> list[str]:
    others = [p for p in pool if p != gold]
    picks = rng.choice(len(others), size=4, replace=False)
    return [others[i] for i in sorted(picks)]


def glyph_stencil(text: str) -> np.ndarray:
    """Hard-edged ink mask of `text` in the default font, cropped to its
    bounding box.

    The default font rasterizes with anti-aliasing on RGB canvases, which
    produces hundreds of off-ink gray levels; thresholding an "L" stencil at
    50% instead keeps every text pixel exactly `INK` once pasted, so masks,
    component counts, and glyph matching stay exact.
    """
    font = ImageFont.load_default()
    probe = ImageDraw.Draw(Image.new("L", (1, 1)))
    left, top, right, bottom = probe.textbbox((0, 0), text, font=font)
    pad = 8
    canvas = Image.new("L", (right - left + 2 * pad, bottom - top + 2 * pad), 0)
    ImageDraw.Draw(canvas).text((pad - left, pad - top), text, fill=255, font=font)
    mask = np.asarray(canvas) >= 128
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError(f"text {text!r} rendered no ink")
    return mask[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]


def _draw_text_center(img: Image.Image, size: int, text: str) -> None:
    mask = glyph_stencil(text)
    mask = mask[: min(mask.shape[0], size), : min(mask.shape[1], size)]
    h, w = mask.shape
    stencil = Image.fromarray(mask.astype(np.uint8) * 255, mode="L")
    img.paste(INK, ((size - w) // 2, (size - h) // 2), stencil)


def _gen_counting(rng: np.random.Generator, size: int) -> _Drawn:
    k_max = min(6, max(3, size // 10))
    k = int(rng.integers(2, k_max + 1))
    img, draw = _canvas(size)
    half = max(2, size // 12)
    color_names = list(PALETTE)
    for cx, cy, h in _place_disjoint(rng, size, [half] * k):
        kind = DRAWN_SHAPES[int(rng.integers(0, len(DRAWN_SHAPES)))]
        color = PALETTE[color_names[int(rng.integers(0, len(color_names)))]]
        _draw_shape(draw, kind, cx, cy, h, color)
    options, gold_index = _with_gold(rng, str(k), _number_distractors(rng, k, low=1))
    return _Drawn(_finish(img), "How many shapes are in the picture?", options, gold_index)


def _gen_arithmetic(rng: np.random.Generator, size: int) -> _Drawn:
    high = 20 if size >= 64 else 9
    a = int(rng.integers(1, high + 1))
    b = int(rng.integers(1, high + 1))
    img, _ = _canvas(size)
    _draw_text_center(img, size, f"{a}+{b}=?")
    gold = a + b
    options, gold_index = _with_gold(rng, str(gold), _number_distractors(rng, gold, low=0))
    return _Drawn(
        _finish(img), "What number completes the equation in the picture?", options, gold_index
    )


def _gen_spatial(rng: np.random.Generator, size: int) -> _Drawn:
    """Three shapes of distinct colors; the strictly largest one is a square.

    The largest is placed first so rejection shrinkage can only affect the
    smaller shapes, preserving "largest" by construction.
    """
    largest = max(4, size // 6)
    halves = [largest, largest - 2, largest - 3]
    color_names = list(PALETTE)
    picks = rng.choice(len(color_names), size=len(halves), replace=False)
    colors = [color_names[i] for i in picks]
    img, draw = _canvas(size)
    placements = _place_disjoint(rng, size, halves)
    assert placements[0][2] == halves[0]
    for i, (cx, cy, h) in enumerate(placements):
        kind = "square" if i == 0 else SHAPE_NAMES[int(rng.integers(0, 3))]
        _draw_shape(draw, kind, cx, cy, h, PALETTE[colors[i]])
    gold = colors[0]
    options, gold_index = _with_gold(rng, gold, _name_distractors(rng, gold, list(PALETTE)))
    return _Drawn(_finish(img), "What color is the largest shape?", options, gold_index)


def _gen_path(rng: np.random.Generator, size: int) -> _Drawn:
    n_lines = 3
    color_names = list(PALETTE)
    picks = rng.choice(len(color_names), size=n_lines, replace=False)
    colors = [color_names[i] for i in picks]
    img, draw = _canvas(size)
    margin = max(2, size // 8)
    thickness = max(2, size // 20)
    rows = np.linspace(margin, size - margin, n_lines).astype(int)
    for row, name in zip(rows, colors):
        draw.rectangle([margin, int(row), size - margin, int(row) + thickness], fill=PALETTE[name])
    target = int(rng.integers(0, n_lines))
    dot_r = thickness + 1
    dot_x = int(rng.integers(margin + dot_r, size - margin - dot_r))
    dot_y = int(rows[target]) + thickness // 2
    draw.ellipse([dot_x - dot_r, dot_y - dot_r, dot_x + dot_r, dot_y + dot_r], fill=INK)
    gold = colors[target]
    options, gold_index = _with_gold(rng, gold, _name_distractors(rng, gold, list(PALETTE)))
    return _Drawn(
        _finish(img), "What color is the line that touches the black dot?", options, gold_index
    )


def _gen_pattern(rng: np.random.Generator, size: int) -> _Drawn:
    n_items = int(rng.integers(5, 8)) if size >= 32 else int(rng.integers(4, 6))
    period = int(rng.integers(2, 4)) if n_items >= 5 else 2
    color_names = list(PALETTE)
    picks = rng.choice(len(color_names), size=period, replace=False)
    cycle = [color_names[i] for i in picks]
    img, draw = _canvas(size)
    slot = size // (n_items + 1)
    half = max(1, slot // 2 - 1)
    cy = size // 2
    for i in range(n_items):
        cx = slot * (i + 1)
        _draw_shape(draw, "circle", cx, cy, half, PALETTE[cycle[i % period]])
    gold = cycle[n_items % period]
    distractors = _name_distractors(rng, gold, list(PALETTE))
    options, gold_index = _with_gold(rng, gold, distractors)
    return _Drawn(
        _finish(img),
        "The shape colors repeat in a pattern from left to right. What color comes next?",
        options,
        gold_index,
    )


def _gen_measurement(rng: np.random.Generator, size: int) -> _Drawn:
    unit = max(3, size // 12)
    max_len = max(3, (size - 4) // unit - 1)
    length = int(rng.integers(2, min(7, max_len) + 1))
    img, draw = _canvas(size)
    sq_x, sq_y = 2, 2
    draw.rectangle([sq_x, sq_y, sq_x + unit - 1, sq_y + unit - 1], fill=PALETTE["blue"])
    bar_y = size - 2 - unit
    bar_x = 2
    draw.rectangle(
        [bar_x, bar_y, bar_x + length * unit - 1, bar_y + unit - 1], fill=PALETTE["red"]
    )
    options, gold_index = _with_gold(rng, str(length), _number_distractors(rng, length, low=1))
    return _Drawn(
        _finish(img),
        "The bar is how many times as long as the small square?",
        options,
        gold_index,
    )


def _gen_algebra(rng: np.random.Generator, size: int) -> _Drawn:
    high = 20 if size >= 64 else 9
    x = int(rng.integers(1, high))
    a = int(rng.integers(1, high - x + 1)) if high - x >= 1 else 1
    b = x + a
    img, _ = _canvas(size)
    _draw_text_center(img, size, f"x+{a}={b}")
    options, gold_index = _with_gold(rng, str(x), _number_distractors(rng, x, low=0))
    return _Drawn(
        _finish(img), "What is the value of x in the equation shown?", options, gold_index
    )


def _gen_logic(rng: np.random.Generator, size: int) -> _Drawn:
    kinds = [str(k) for k in rng.permutation(DRAWN_SHAPES)]
    unique_kind = kinds[0]
    max_repeated = 2 if size >= 32 else 1
    repeated = kinds[1 : 1 + int(rng.integers(1, max_repeated + 1))]
    plan = [unique_kind] + [k for k in repeated for _ in range(2)]
    half = max(2, size // 14)
    img, draw = _canvas(size)
    placements = _place_disjoint(rng, size, [half] * len(plan))
    color_names = list(PALETTE)
    order = list(rng.permutation(len(plan)))
    for slot, (cx, cy, h) in zip(order, placements):
        color = PALETTE[color_names[int(rng.integers(0, len(color_names)))]]
        _draw_shape(draw, plan[slot], cx, cy, h, color)
    options, gold_index = _with_gold(
        rng, unique_kind, _name_distractors(rng, unique_kind, SHAPE_NAMES)
    )
    return _Drawn(
        _finish(img), "Which shape appears exactly once in the picture?", options, gold_index
    )


_GENERATORS = {
    SkillCategory.LOGIC: _gen_logic,
    SkillCategory.COUNTING: _gen_counting,
    SkillCategory.SPATIAL_REASONING: _gen_spatial,
    SkillCategory.PATH_TRACING: _gen_path,
    SkillCategory.PATTERN_FINDING: _gen_pattern,
    SkillCategory.ARITHMETIC: _gen_arithmetic,
    SkillCategory.MEASUREMENT: _gen_measurement,
    SkillCategory.ALGEBRA: _gen_algebra,
}


def generate_synthetic_puzzles(
    n_per_category: int, image_size: int, seed: int
) -> list[PuzzleInstance]:
    """Generate `n_per_category` puzzles for each of the eight categories.

    Root ids group consecutive variants (up to eight roots per category) so
    root-level splits behave like the real dataset's. Identical arguments
    always produce identical puzzles.
    """
    if n_per_category < 1:
        raise ValueError("n_per_category must be >= 1")
    if image_size < 24:
        raise ValueError("image_size must be >= 24")
    puzzles: list[PuzzleInstance] = []
    roots_per_category = max(1, min(8, n_per_category))
    for category in SkillCategory:
        generator = _GENERATORS[category]
        for i in range(n_per_category):
            rng = np.random.default_rng([seed, category.index, i])
            drawn = generator(rng, image_size)
            puzzles.append(
                PuzzleInstance(
                    id=f"{category.value}-{i:04d}",
                    root_id=category.index * 100 + i % roots_per_category,
                    image=drawn.image,
                    question=drawn.question,
                    options=drawn.options,
                    gold_option_index=drawn.gold_index,
                    category=category,
                )
            )
    return puzzles
