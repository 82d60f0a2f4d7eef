from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from puzzlevlm.captioning import (
    CAPTION_INSTRUCTION,
    DEFAULT_K,
    DEFAULT_PROBES,
    CaptionCache,
    CaptionCacheError,
    CaptionError,
    CaptionRecord,
    HttpCaptioner,
    MockCaptioner,
    analyze_image,
    caption_prompt,
    enhance,
    generate_vqa_pairs,
    image_digest,
    make_backend,
)
from puzzlevlm.core import SkillCategory
from puzzlevlm.synth import generate_synthetic_puzzles


class CountingBackend:
    """Backend that counts its own calls; answers are synthesized from inputs."""

    backend_id = "counting"

    def __init__(self):
        self.vqa_calls = 0
        self.text_calls = 0

    @property
    def total_calls(self) -> int:
        return self.vqa_calls + self.text_calls

    def answer_visual_question(self, image, question):
        self.vqa_calls += 1
        return f"answer to: {question}"

    def generate_text(self, image, prompt):
        self.text_calls += 1
        return f"caption ({len(prompt)} prompt chars)"


def _puzzles(n=2, size=32, seed=0):
    return generate_synthetic_puzzles(n, size, seed)


def test_image_digest_is_stable_and_content_sensitive():
    image = np.zeros((8, 8, 3), dtype=np.uint8)
    assert image_digest(image) == image_digest(image.copy())
    other = image.copy()
    other[0, 0, 0] = 1
    assert image_digest(other) != image_digest(image)
    # Shape participates even when the bytes agree.
    assert image_digest(image) != image_digest(np.zeros((4, 16, 3), dtype=np.uint8))


def test_generate_vqa_pairs_order_and_bounds():
    backend = CountingBackend()
    image = np.zeros((8, 8, 3), dtype=np.uint8)
    pairs = generate_vqa_pairs(image, backend, k=3)
    assert [q for q, _ in pairs] == list(DEFAULT_PROBES[:3])
    assert backend.vqa_calls == 3
    with pytest.raises(ValueError, match="k must be >= 1"):
        generate_vqa_pairs(image, backend, k=0)
    with pytest.raises(ValueError, match="probe questions"):
        generate_vqa_pairs(image, backend, k=99)


def test_generate_vqa_pairs_reports_failing_probe():
    class Failing(CountingBackend):
        def answer_visual_question(self, image, question):
            if self.vqa_calls == 1:
                raise RuntimeError("boom")
            return super().answer_visual_question(image, question)

    with pytest.raises(CaptionError, match="probe 1"):
        generate_vqa_pairs(np.zeros((8, 8, 3), dtype=np.uint8), Failing(), k=3)


def test_caption_prompt_serialization():
    history = [("q one?", "a one"), ("q two?", "a two")]
    prompt = caption_prompt(history)
    assert prompt == "Q: q one?\nA: a one\nQ: q two?\nA: a two\n" + CAPTION_INSTRUCTION


def test_cold_cache_costs_k_plus_one_calls_and_warm_costs_zero(tmp_path):
    puzzles = _puzzles()
    cache = CaptionCache(tmp_path / "captions.jsonl")
    backend = CountingBackend()
    k = DEFAULT_K

    for puzzle in puzzles:
        before = backend.total_calls
        enhance(puzzle, backend, cache, k=k)
        assert backend.total_calls - before == k + 1

    for puzzle in puzzles:
        before = backend.total_calls
        record = enhance(puzzle, backend, cache, k=k)
        assert backend.total_calls == before
        assert record.k == k and len(record.vqa_pairs) == k

    assert cache.hits == len(puzzles)
    assert cache.misses == len(puzzles)


def test_cache_persists_across_instances(tmp_path):
    path = tmp_path / "captions.jsonl"
    puzzle = _puzzles(1)[0]
    backend = CountingBackend()
    enhance(puzzle, backend, CaptionCache(path), k=2)

    reloaded = CaptionCache(path)
    assert len(reloaded) == 1
    before = backend.total_calls
    enhance(puzzle, backend, reloaded, k=2)
    assert backend.total_calls == before


def test_cache_key_misses_on_different_backend_digest_or_k(tmp_path):
    path = tmp_path / "captions.jsonl"
    puzzle = _puzzles(1)[0]
    backend = CountingBackend()
    cache = CaptionCache(path)
    enhance(puzzle, backend, cache, k=2)

    other = CountingBackend()
    other.backend_id = "counting-v2"
    before = other.total_calls
    enhance(puzzle, other, cache, k=2)
    assert other.total_calls == before + 3

    before = backend.total_calls
    enhance(puzzle, backend, cache, k=3)
    assert backend.total_calls == before + 4


def test_later_cache_lines_shadow_earlier_ones(tmp_path):
    path = tmp_path / "captions.jsonl"
    record = CaptionRecord(
        puzzle_id="p", image_digest="d", vqa_pairs=(("q", "a"),), caption="old",
        backend_id="b", k=1,
    )
    newer = CaptionRecord(
        puzzle_id="p", image_digest="d", vqa_pairs=(("q", "a"),), caption="new",
        backend_id="b", k=1,
    )
    with open(path, "w") as fh:
        fh.write(json.dumps(record.to_json()) + "\n")
        fh.write(json.dumps(newer.to_json()) + "\n")
    cache = CaptionCache(path)
    assert len(cache) == 1
    assert cache.get("p", "d", "b", 1).caption == "new"


def test_malformed_cache_line_reports_line_number(tmp_path):
    path = tmp_path / "captions.jsonl"
    record = CaptionRecord(
        puzzle_id="p", image_digest="d", vqa_pairs=(), caption="c", backend_id="b", k=1
    )
    path.write_text(json.dumps(record.to_json()) + "\n{broken\n")
    with pytest.raises(CaptionCacheError, match=":2:"):
        CaptionCache(path)


def test_mock_backend_is_deterministic_and_grounded():
    backend = MockCaptioner()
    for puzzle in _puzzles(2, 32, seed=4):
        caption_a = backend.generate_text(puzzle.image, "any prompt")
        caption_b = backend.generate_text(puzzle.image, "other prompt")
        assert caption_a == caption_b
        if puzzle.category is SkillCategory.COUNTING:
            assert f"There are {puzzle.gold_answer} shapes." in caption_a
        if puzzle.category is SkillCategory.SPATIAL_REASONING:
            assert f"The largest shape is {puzzle.gold_answer}." in caption_a


def test_mock_backend_reads_text_but_does_not_solve():
    for puzzle in generate_synthetic_puzzles(6, 32, seed=7):
        if puzzle.category is not SkillCategory.ARITHMETIC:
            continue
        facts = analyze_image(puzzle.image)
        assert facts.text is not None and facts.text.endswith("=?")
        a, b = facts.text[:-2].split("+")
        assert str(int(a) + int(b)) == puzzle.gold_answer
        caption = MockCaptioner().generate_text(puzzle.image, "")
        assert f"'{facts.text}'" in caption
        if puzzle.gold_answer not in facts.text:
            # The mock reports the expression, never the sum.
            assert puzzle.gold_answer not in caption


def test_mock_probe_answers_follow_the_probe_questions():
    backend = MockCaptioner()
    puzzle = next(
        p for p in _puzzles(2, 32, seed=0) if p.category is SkillCategory.COUNTING
    )
    text_answer = backend.answer_visual_question(puzzle.image, DEFAULT_PROBES[2])
    assert text_answer == "No readable text."
    count_answer = backend.answer_visual_question(puzzle.image, DEFAULT_PROBES[1])
    assert f"There are {puzzle.gold_answer} shapes" in count_answer


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.path == "/bad":
            reply = {"nope": 1}
        else:
            reply = {"text": f"echo:{len(body['image_base64'])}:{body['prompt']}"}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture()
def http_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_http_backend_round_trip(http_server):
    backend = HttpCaptioner(http_server + "/vqa")
    image = np.zeros((8, 8, 3), dtype=np.uint8)
    answer = backend.answer_visual_question(image, "what?")
    assert answer.startswith("echo:") and answer.endswith(":what?")
    assert backend.backend_id == f"http:{http_server}/vqa"

    with pytest.raises(CaptionError, match="no 'text' field"):
        HttpCaptioner(http_server + "/bad").generate_text(image, "p")


def test_make_backend(http_server):
    assert isinstance(make_backend("mock"), MockCaptioner)
    assert isinstance(make_backend("http", http_server), HttpCaptioner)
    with pytest.raises(ValueError, match="requires captioner.url"):
        make_backend("http")
    with pytest.raises(ValueError, match="unknown captioner backend"):
        make_backend("llava")
