from __future__ import annotations

import numpy as np
import pytest
import torch

from puzzlevlm.core import SkillCategory
from puzzlevlm.decoder import (
    KEY_MODEL,
    TOKENIZER,
    VALUE_MODEL,
    CharTokenizer,
    Decoder,
    DecoderConfig,
    ModelAssembly,
    answer_puzzle,
    build_assembly,
    build_prompt,
    decode_key,
    decode_value,
)
from puzzlevlm.qformer import QFormerConfig
from puzzlevlm.synth import generate_synthetic_puzzles
from puzzlevlm.vision import VisionConfig


def _tiny_configs():
    vision = VisionConfig(image_size=24, patch_size=8, n_segments=4, dim=16)
    qformer = QFormerConfig(
        n_queries=2, dim=16, n_layers=1, n_heads=2, dim_out=16, dim_visual=16, ffn_hidden=16
    )
    decoder = DecoderConfig(dim=16, n_layers=1, n_heads=2, max_len=512, ffn_hidden=16)
    return vision, qformer, decoder


def _assembly(role: str, seed: int = 0) -> ModelAssembly:
    return build_assembly(*_tiny_configs(), role=role, seed=seed)


def _puzzle(category=SkillCategory.COUNTING, seed=0):
    puzzles = generate_synthetic_puzzles(1, 24, seed=seed)
    return next(p for p in puzzles if p.category is category)


def test_tokenizer_specials_and_roundtrip():
    tok = CharTokenizer()
    assert tok.PAD == 0 and tok.BOS == 1 and tok.EOS == 2
    assert len(tok.OPT) == 5 and len(tok.CAT) == 8
    text = "answer: 42\n"
    assert tok.decode_chars(tok.encode(text)) == text
    assert tok.encode("é") == [tok.UNK]
    value_chars = {tok.decode_chars([i]) for i in tok.value_token_ids if i != tok.EOS}
    assert value_chars == set("0123456789-.")
    assert tok.EOS in tok.value_token_ids


def test_build_prompt_serialization():
    options = ["1", "2", "3", "4", "5"]
    key_ids = build_prompt("How many?", "two dots.", options, KEY_MODEL)
    assert key_ids[0] == TOKENIZER.BOS
    assert TOKENIZER.decode_chars(key_ids[1:]) == (
        "caption: two dots.\n"
        "question: How many?\n"
        "options: A) 1 B) 2 C) 3 D) 4 E) 5\n"
        "answer: "
    )
    value_ids = build_prompt("How many?", "", options, VALUE_MODEL)
    assert TOKENIZER.decode_chars(value_ids[1:]) == (
        "question: How many?\nrespond with a number.\nanswer: "
    )
    with pytest.raises(ValueError, match="role"):
        build_prompt("q", "", options, "other_model")


def test_decoder_is_causal():
    cfg = DecoderConfig(dim=16, n_layers=2, n_heads=2, max_len=64, ffn_hidden=16)
    torch.manual_seed(0)
    decoder = Decoder(cfg)
    ids = TOKENIZER.encode("abcdef")
    base = decoder(None, ids)
    edited = list(ids)
    edited[-1] = TOKENIZER.encode("z")[0]
    changed = decoder(None, edited)
    assert torch.allclose(base[:-1], changed[:-1], atol=1e-6)
    assert not torch.allclose(base[-1], changed[-1], atol=1e-6)


def test_decoder_length_validation():
    cfg = DecoderConfig(dim=16, n_layers=1, n_heads=2, max_len=8, ffn_hidden=16)
    torch.manual_seed(0)
    decoder = Decoder(cfg)
    with pytest.raises(ValueError, match="max_len"):
        decoder(None, TOKENIZER.encode("123456789"))
    with pytest.raises(ValueError, match="at least one input"):
        decoder(None, [])


def test_assembly_validates_role_and_dimension_coupling():
    vision, qformer, decoder = _tiny_configs()
    with pytest.raises(ValueError, match="role"):
        ModelAssembly(vision, qformer, decoder, "neither")
    bad_qformer = QFormerConfig(
        n_queries=2, dim=16, n_layers=1, n_heads=2, dim_out=16, dim_visual=32, ffn_hidden=16
    )
    with pytest.raises(ValueError, match="dim_visual"):
        ModelAssembly(vision, bad_qformer, decoder, KEY_MODEL)
    bad_out = QFormerConfig(
        n_queries=2, dim=16, n_layers=1, n_heads=2, dim_out=8, dim_visual=16, ffn_hidden=16
    )
    with pytest.raises(ValueError, match="dim_out"):
        ModelAssembly(vision, bad_out, decoder, KEY_MODEL)


def test_option_and_category_logit_shapes():
    assembly = _assembly(KEY_MODEL)
    puzzle = _puzzle()
    assert assembly.option_logits(puzzle, "a caption").shape == (5,)
    assert assembly.category_logits(puzzle, "", "skill: ").shape == (8,)


class _StubKeyAssembly:
    role = KEY_MODEL

    def __init__(self, logits):
        self._logits = torch.tensor(logits, dtype=torch.float32)

    def option_logits(self, puzzle, caption):
        return self._logits


def test_decode_key_picks_argmax_and_breaks_ties_low():
    puzzle = _puzzle()
    index, distribution = decode_key(_StubKeyAssembly([0.0, 2.0, 1.0, 2.0, -1.0]), puzzle, "")
    assert index == 1  # ties (positions 1 and 3) resolve to the lowest index
    assert distribution.shape == (5,)
    assert abs(float(distribution.sum()) - 1.0) < 1e-6
    index, _ = decode_key(_StubKeyAssembly([3.0, 3.0, 3.0, 3.0, 3.0]), puzzle, "")
    assert index == 0


def test_decode_key_requires_key_role():
    with pytest.raises(ValueError, match="key_model"):
        decode_key(_assembly(VALUE_MODEL), _puzzle(), "")


def test_decode_value_emits_only_numeric_characters():
    assembly = _assembly(VALUE_MODEL, seed=1)
    puzzle = _puzzle(SkillCategory.ARITHMETIC)
    value = decode_value(assembly, puzzle, "caption text", max_len=6)
    assert len(value) <= 6
    assert set(value) <= set("0123456789-.")
    assert decode_value(assembly, puzzle, "caption text", max_len=6) == value
    with pytest.raises(ValueError, match="value_model"):
        decode_value(_assembly(KEY_MODEL), puzzle, "")
    with pytest.raises(ValueError, match="max_len"):
        decode_value(assembly, puzzle, "", max_len=0)


def test_answer_puzzle_always_returns_valid_option_index():
    key_answer = answer_puzzle(_assembly(KEY_MODEL), _puzzle(), "caption")
    assert 0 <= key_answer < 5
    value_answer = answer_puzzle(
        _assembly(VALUE_MODEL), _puzzle(SkillCategory.ALGEBRA), "caption"
    )
    assert 0 <= value_answer < 5


def test_build_assembly_is_seed_deterministic():
    state_a = _assembly(KEY_MODEL, seed=9).state_dict()
    state_b = _assembly(KEY_MODEL, seed=9).state_dict()
    state_c = _assembly(KEY_MODEL, seed=10).state_dict()
    assert state_a.keys() == state_b.keys()
    for name in state_a:
        assert torch.equal(state_a[name], state_b[name]), name
    assert any(not torch.equal(state_a[n], state_c[n]) for n in state_a)
