"""Two-stage caption enhancement with an on-disk cache.

Stage one asks the captioner backend a fixed set of probe questions about the
image; stage two asks for a detailed caption with those question/answer pairs
serialized into the prompt as history. Records are cached in a JSON Lines
file keyed by (puzzle_id, image_digest, backend_id, k).

The shipped `mock` backend is a scripted captioner grounded in the pixels: it
runs the same kind of connected-component analysis as the segment encoder and
reports counts, colors, arrangements, size ratios, and (for bitmap-font
glyphs) literal text. It describes; it never solves equations.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

from .core import PuzzleInstance
from .synth import glyph_stencil
from .vision import foreground_mask, label_components

DEFAULT_K = 3

DEFAULT_PROBES: tuple[str, ...] = (
    "What shapes and objects are in the image?",
    "How many shapes are there and how are they arranged?",
    "What text or numbers are visible in the image?",
)

CAPTION_INSTRUCTION = (
    "Describe this puzzle image in detail, including all shapes, numbers, "
    "text, and their arrangement."
)


class CaptionError(RuntimeError):
    pass


class CaptionCacheError(RuntimeError):
    pass


@runtime_checkable
class CaptionerBackend(Protocol):
    @property
    def backend_id(self) -> str: ...

    def answer_visual_question(self, image: np.ndarray, question: str) -> str: ...

    def generate_text(self, image: np.ndarray, prompt: str) -> str: ...


@dataclass(frozen=True)
class CaptionRecord:
    puzzle_id: str
    image_digest: str
    vqa_pairs: tuple[tuple[str, str], ...]
    caption: str
    backend_id: str
    k: int

    def to_json(self) -> dict:
        return {
            "puzzle_id": self.puzzle_id,
            "image_digest": self.image_digest,
            "backend_id": self.backend_id,
            "k": self.k,
            "vqa_pairs": [[q, a] for q, a in self.vqa_pairs],
            "caption": self.caption,
        }

    @staticmethod
    def from_json(obj: dict) -> "CaptionRecord":
        return CaptionRecord(
            puzzle_id=obj["puzzle_id"],
            image_digest=obj["image_digest"],
            vqa_pairs=tuple((q, a) for q, a in obj["vqa_pairs"]),
            caption=obj["caption"],
            backend_id=obj["backend_id"],
            k=int(obj["k"]),
        )


def image_digest(image: np.ndarray) -> str:
    """Stable content hash over the raw pixel buffer (shape included)."""
    h = hashlib.sha256()
    h.update(f"{image.shape[0]}x{image.shape[1]}x{image.shape[2]}:".encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()


def generate_vqa_pairs(
    image: np.ndarray,
    backend: CaptionerBackend,
    k: int,
    probes: tuple[str, ...] = DEFAULT_PROBES,
) -> list[tuple[str, str]]:
    """Ask the first k probe questions; pair order equals probe order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(probes):
        raise ValueError(f"k={k} exceeds the {len(probes)} configured probe questions")
    pairs: list[tuple[str, str]] = []
    for i, question in enumerate(probes[:k]):
        try:
            answer = backend.answer_visual_question(image, question)
        except Exception as exc:
            raise CaptionError(f"captioner backend failed on probe {i}: {exc}") from exc
        pairs.append((question, answer))
    return pairs


def caption_prompt(history: list[tuple[str, str]]) -> str:
    """'Q:/A:' blocks in order, then the fixed caption instruction."""
    blocks = "".join(f"Q: {q}\nA: {a}\n" for q, a in history)
    return blocks + CAPTION_INSTRUCTION


def generate_caption(
    image: np.ndarray, history: list[tuple[str, str]], backend: CaptionerBackend
) -> str:
    try:
        return backend.generate_text(image, caption_prompt(history))
    except Exception as exc:
        raise CaptionError(f"caption generation failed: {exc}") from exc


_CacheKey = tuple[str, str, str, int]


class CaptionCache:
    """Append-aware JSONL cache; later lines shadow earlier ones with the same
    (puzzle_id, image_digest, backend_id, k) key. Thread-safe within a process."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[_CacheKey, CaptionRecord] = {}
        self.hits = 0
        self.misses = 0
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line_number, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = CaptionRecord.from_json(json.loads(line))
                    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                        raise CaptionCacheError(
                            f"{self.path}:{line_number}: malformed caption record: {exc}"
                        ) from exc
                    self._records[self._key(record)] = record

    @staticmethod
    def _key(record: CaptionRecord) -> _CacheKey:
        return (record.puzzle_id, record.image_digest, record.backend_id, record.k)

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[CaptionRecord]:
        """Snapshot of all live (non-shadowed) records."""
        with self._lock:
            return list(self._records.values())

    def get(self, puzzle_id: str, digest: str, backend_id: str, k: int) -> CaptionRecord | None:
        with self._lock:
            record = self._records.get((puzzle_id, digest, backend_id, k))
            if record is None:
                self.misses += 1
            else:
                self.hits += 1
            return record

    def put(self, record: CaptionRecord) -> None:
        line = json.dumps(record.to_json(), sort_keys=True)
        with self._lock:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(line + "\n")
            except OSError as exc:
                raise CaptionCacheError(f"cannot write caption cache {self.path}: {exc}") from exc
            self._records[self._key(record)] = record


def enhance(
    puzzle: PuzzleInstance,
    backend: CaptionerBackend,
    cache: CaptionCache,
    k: int = DEFAULT_K,
    probes: tuple[str, ...] = DEFAULT_PROBES,
) -> CaptionRecord:
    """Cache hit → stored record with zero backend calls; miss → k probe calls
    plus one caption call, record persisted."""
    digest = image_digest(puzzle.image)
    cached = cache.get(puzzle.id, digest, backend.backend_id, k)
    if cached is not None:
        return cached
    pairs = generate_vqa_pairs(puzzle.image, backend, k, probes)
    caption = generate_caption(puzzle.image, pairs, backend)
    record = CaptionRecord(
        puzzle_id=puzzle.id,
        image_digest=digest,
        vqa_pairs=tuple(pairs),
        caption=caption,
        backend_id=backend.backend_id,
        k=k,
    )
    cache.put(record)
    return record


# --- scripted mock backend -------------------------------------------------

_COLOR_REFERENCES: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 170, 40),
    "blue": (50, 70, 220),
    "orange": (240, 150, 30),
    "purple": (150, 50, 190),
    "teal": (20, 150, 160),
    "black": (20, 20, 20),
}

_GLYPH_CHARS = "0123456789+=?x"


def _nearest_color_name(rgb: np.ndarray) -> str:
    names = list(_COLOR_REFERENCES)
    dists = [
        int(np.abs(np.asarray(_COLOR_REFERENCES[n], dtype=np.int16) - rgb).max())
        for n in names
    ]
    return names[int(np.argmin(dists))]


def _glyph_templates() -> dict[str, np.ndarray]:
    """Bbox-cropped ink masks of each candidate glyph, rendered through the
    same hard-edged stencil the synthetic generator uses for text."""
    return {ch: glyph_stencil(ch) for ch in _GLYPH_CHARS}


_TEMPLATES: dict[str, np.ndarray] | None = None


def _templates() -> dict[str, np.ndarray]:
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = _glyph_templates()
    return _TEMPLATES


def _glyph_size_limit() -> tuple[int, int]:
    """(max height, max width) any single glyph component can occupy."""
    templates = _templates()
    return (
        max(t.shape[0] for t in templates.values()),
        max(t.shape[1] for t in templates.values()),
    )


def _read_text(ink_mask: np.ndarray) -> str | None:
    """Decode a single line of bitmap-font glyphs by splitting the ink mask on
    empty columns and matching each strip against glyph templates."""
    if not ink_mask.any():
        return None
    templates = _templates()
    col_has_ink = ink_mask.any(axis=0)
    strips: list[tuple[int, int]] = []
    start = None
    for j, has in enumerate(col_has_ink):
        if has and start is None:
            start = j
        elif not has and start is not None:
            strips.append((start, j))
            start = None
    if start is not None:
        strips.append((start, len(col_has_ink)))
    chars: list[str] = []
    for j0, j1 in strips:
        strip = ink_mask[:, j0:j1]
        rows = np.nonzero(strip.any(axis=1))[0]
        cropped = strip[rows.min() : rows.max() + 1, :]
        match = next(
            (ch for ch, t in templates.items() if t.shape == cropped.shape and (t == cropped).all()),
            None,
        )
        if match is None:
            return None
        chars.append(match)
    text = "".join(chars)
    # A clipped rendering can split into strips that each happen to equal some
    # template; re-rendering the candidate and demanding pixel equality with
    # the observed ink rejects such misreads.
    rows = np.nonzero(ink_mask.any(axis=1))[0]
    cols = np.nonzero(ink_mask.any(axis=0))[0]
    observed = ink_mask[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]
    rendered = glyph_stencil(text)
    if rendered.shape != observed.shape or not (rendered == observed).all():
        return None
    return text


@dataclass
class ImageFacts:
    """Deterministic pixel-level facts the mock captioner reports."""

    n_shapes: int
    largest_color: str | None
    largest_kind: str | None
    dot_line_color: str | None
    row_colors: list[str] | None
    next_color: str | None
    singleton_kinds: list[str]
    bar_ratio: int | None
    text: str | None


@dataclass
class _Component:
    rows: np.ndarray
    cols: np.ndarray
    color_votes: dict[str, int]

    @property
    def area(self) -> int:
        return int(self.rows.size)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (
            int(self.rows.min()),
            int(self.cols.min()),
            int(self.rows.max() - self.rows.min() + 1),
            int(self.cols.max() - self.cols.min() + 1),
        )

    @property
    def main_color(self) -> str:
        non_black = {n: c for n, c in self.color_votes.items() if n != "black"}
        votes = non_black or self.color_votes
        return max(votes, key=lambda n: (votes[n], n))

    @property
    def black_fraction(self) -> float:
        return self.color_votes.get("black", 0) / self.area


def _classify_kind(comp: _Component) -> str:
    _, _, bh, bw = comp.bbox
    fill = comp.area / (bh * bw)
    top = comp.bbox[0]
    centroid_in_bbox = (comp.rows.mean() - top + 0.5) / bh
    if fill >= 0.92:
        return "square"
    if centroid_in_bbox >= 0.58:
        return "triangle"
    if fill >= 0.60:
        return "circle"
    mid_row = top + bh // 2
    mid_width = int(np.count_nonzero(comp.rows == mid_row))
    if mid_width >= 0.85 * bw:
        return "diamond"
    return "star"


def analyze_image(image: np.ndarray, threshold: int = 32) -> ImageFacts:
    """Connected-component analysis behind every mock answer."""
    mask = foreground_mask(image, threshold)
    labels, count = label_components(mask)
    luminance = image.astype(np.int16).mean(axis=2)
    max_glyph_h, max_glyph_w = _glyph_size_limit()

    glyph_labels: set[int] = set()
    components: list[_Component] = []
    for k in range(count):
        rows, cols = np.nonzero(labels == k)
        bh = int(rows.max() - rows.min() + 1)
        bw = int(cols.max() - cols.min() + 1)
        dark = luminance[rows, cols] < 80
        if dark.all() and bh <= max_glyph_h and bw <= max_glyph_w:
            glyph_labels.add(k)
            continue
        votes: dict[str, int] = {}
        for name in (_nearest_color_name(image[i, j]) for i, j in zip(rows, cols)):
            votes[name] = votes.get(name, 0) + 1
        components.append(_Component(rows, cols, votes))

    text = None
    if glyph_labels:
        ink = np.isin(labels, list(glyph_labels))
        text = _read_text(ink)

    components.sort(key=lambda c: (-c.area, c.bbox[0], c.bbox[1]))
    n_shapes = len(components)
    largest_color = components[0].main_color if components else None
    largest_kind = _classify_kind(components[0]) if components else None

    dot_line_color = None
    for comp in components:
        if 0.10 <= comp.black_fraction <= 0.90:
            dot_line_color = comp.main_color
            break

    row_colors = None
    next_color = None
    if n_shapes >= 4:
        mean_rows = [float(c.rows.mean()) for c in components]
        center = sum(mean_rows) / len(mean_rows)
        if all(abs(r - center) <= 1.5 for r in mean_rows):
            ordered = sorted(components, key=lambda c: float(c.cols.mean()))
            row_colors = [c.main_color for c in ordered]
            n = len(row_colors)
            for period in range(1, 4):
                if n >= period + 2 and all(
                    row_colors[i] == row_colors[i - period] for i in range(period, n)
                ):
                    next_color = row_colors[n - period]
                    break

    singleton_kinds: list[str] = []
    if n_shapes >= 3:
        kind_counts: dict[str, int] = {}
        for comp in components:
            kind = _classify_kind(comp)
            kind_counts[kind] = kind_counts.get(kind, 0) + 1
        order = ["circle", "square", "triangle", "diamond", "star"]
        singleton_kinds = [k for k in order if kind_counts.get(k) == 1]

    bar_ratio = None
    if n_shapes == 2:
        (_, _, h_a, w_a), (_, _, h_b, w_b) = components[0].bbox, components[1].bbox
        fills = [c.area / (c.bbox[2] * c.bbox[3]) for c in components]
        if min(fills) >= 0.9 and abs(h_a - h_b) <= 1 and min(w_a, w_b) > 0:
            ratio = max(w_a, w_b) / min(w_a, w_b)
            if ratio >= 1.5 and abs(ratio - round(ratio)) < 0.25:
                bar_ratio = int(round(ratio))

    return ImageFacts(
        n_shapes=n_shapes,
        largest_color=largest_color,
        largest_kind=largest_kind,
        dot_line_color=dot_line_color,
        row_colors=row_colors,
        next_color=next_color,
        singleton_kinds=singleton_kinds,
        bar_ratio=bar_ratio,
        text=text,
    )


class MockCaptioner:
    """Deterministic scripted backend: answers and captions are computed from
    the pixels, so they carry genuine (if shallow) visual information."""

    backend_id = "mock"

    def __init__(self, threshold: int = 32):
        self.threshold = threshold

    def _facts(self, image: np.ndarray) -> ImageFacts:
        return analyze_image(image, self.threshold)

    def _caption(self, facts: ImageFacts) -> str:
        sentences = [f"There are {facts.n_shapes} shapes."]
        if facts.largest_color:
            sentences.append(f"The largest shape is {facts.largest_color}.")
        if facts.dot_line_color:
            sentences.append(f"The black dot touches the {facts.dot_line_color} line.")
        if facts.row_colors:
            sentences.append(
                "The colors from left to right are " + ", ".join(facts.row_colors) + "."
            )
        if facts.next_color:
            sentences.append(f"The next color in the pattern is {facts.next_color}.")
        for kind in facts.singleton_kinds:
            sentences.append(f"There is exactly one {kind}.")
        if facts.bar_ratio is not None:
            sentences.append(
                f"The bar is {facts.bar_ratio} times as long as the small square."
            )
        if facts.text:
            sentences.append(f"The picture shows the text '{facts.text}'.")
        return " ".join(sentences)

    def answer_visual_question(self, image: np.ndarray, question: str) -> str:
        facts = self._facts(image)
        if question == DEFAULT_PROBES[0]:
            if facts.n_shapes == 0:
                return "No shapes, only text." if facts.text else "A blank image."
            parts = [f"{facts.n_shapes} shapes"]
            if facts.largest_color:
                parts.append(f"the largest is a {facts.largest_kind} and is {facts.largest_color}")
            return "; ".join(parts) + "."
        if question == DEFAULT_PROBES[1]:
            arrangement = " arranged in a row" if facts.row_colors else ""
            return f"There are {facts.n_shapes} shapes{arrangement}."
        if question == DEFAULT_PROBES[2]:
            return f"The text reads '{facts.text}'." if facts.text else "No readable text."
        return self._caption(facts)

    def generate_text(self, image: np.ndarray, prompt: str) -> str:
        return self._caption(self._facts(image))


class HttpCaptioner:
    """Backend that POSTs {image_base64, prompt} JSON and expects {text}."""

    def __init__(self, url: str, timeout: float = 30.0):
        if not url:
            raise ValueError("http captioner requires a URL")
        self.url = url
        self.timeout = timeout

    @property
    def backend_id(self) -> str:
        return f"http:{self.url}"

    def _png_base64(self, image: np.ndarray) -> str:
        buf = io.BytesIO()
        Image.fromarray(image, mode="RGB").save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode("ascii")

    def _post(self, image: np.ndarray, prompt: str) -> str:
        payload = json.dumps({"image_base64": self._png_base64(image), "prompt": prompt})
        request = urllib.request.Request(
            self.url, data=payload.encode("utf-8"), headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(request, timeout=self.timeout) as response:
            body = json.loads(response.read().decode("utf-8"))
        if "text" not in body:
            raise CaptionError(f"captioner at {self.url} returned no 'text' field")
        return str(body["text"])

    def answer_visual_question(self, image: np.ndarray, question: str) -> str:
        return self._post(image, question)

    def generate_text(self, image: np.ndarray, prompt: str) -> str:
        return self._post(image, prompt)


def make_backend(name: str, http_url: str | None = None) -> CaptionerBackend:
    """Resolve the `captioner.backend` config value."""
    if name == "mock":
        return MockCaptioner()
    if name == "http":
        if not http_url:
            raise ValueError("captioner.backend = http requires captioner.url")
        return HttpCaptioner(http_url)
    raise ValueError(f"unknown captioner backend {name!r} (expected 'mock' or 'http')")
