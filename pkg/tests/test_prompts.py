"""Prompt specs, subject spans, and concept substitution."""

import pytest

from subswap.backend.toy import ToyModelSpec, ToyTokenizer
from subswap.errors import LengthError, SpanError
from subswap.prompts import (
    PromptSpec,
    build_target_prompt,
    find_subject_span,
    make_prompt_spec,
    prompt_from_text,
    target_prompt_from_text,
)


@pytest.fixture
def tokenizer():
    return ToyTokenizer(ToyModelSpec())


def test_prompt_spec_rejects_bad_spans():
    tokens = (5, 6, 7, 0)
    for span in [(-1, 1), (2, 2), (3, 2), (0, 5)]:
        with pytest.raises(SpanError):
            PromptSpec(tokens=tokens, subject_span=span)
    with pytest.raises(SpanError):
        PromptSpec(tokens=tokens, subject_span=(2, 4))  # covers padding


def test_content_length_strips_trailing_padding():
    spec = PromptSpec(tokens=(5, 6, 7, 0, 0), subject_span=(0, 1))
    assert spec.length == 5
    assert spec.content_length() == 3
    no_pad = PromptSpec(tokens=(5, 6), subject_span=(0, 2))
    assert no_pad.content_length() == 2


def test_make_prompt_spec_pads_to_fixed_length():
    spec = make_prompt_spec([5, 6, 7], (1, 2), max_len=6)
    assert spec.tokens == (5, 6, 7, 0, 0, 0)
    assert spec.subject_span == (1, 2)
    with pytest.raises(LengthError):
        make_prompt_spec([1] * 7, (0, 1), max_len=6)
    with pytest.raises(LengthError):
        make_prompt_spec([], (0, 1), max_len=6)


def test_find_subject_span():
    words = "a big cat sitting in a basket".split()
    assert find_subject_span(words, "cat") == (2, 3)
    assert find_subject_span(words, "big cat") == (1, 3)
    assert find_subject_span(words, "CAT") == (2, 3)
    assert find_subject_span(words, "a") == (0, 1)  # first match wins
    with pytest.raises(SpanError):
        find_subject_span(words, "dog")
    with pytest.raises(SpanError):
        find_subject_span(words, "")


def test_build_target_prompt_substitutes_span():
    source = make_prompt_spec([10, 11, 12, 13], (1, 3), max_len=6)
    target = build_target_prompt(source, [40])
    assert target.tokens == (10, 40, 13, 0, 0, 0)
    assert target.subject_span == (1, 2)
    assert target.length == source.length
    wide = build_target_prompt(source, [40, 41, 42])
    assert wide.tokens == (10, 40, 41, 42, 13, 0)
    assert wide.subject_span == (1, 4)


def test_build_target_prompt_errors():
    source = make_prompt_spec([10, 11, 12, 13], (1, 2), max_len=4)
    with pytest.raises(SpanError):
        build_target_prompt(source, [])
    with pytest.raises(LengthError):
        build_target_prompt(source, [40, 41])  # 5 content tokens into length 4


def test_prompt_from_text_locates_subject(tokenizer):
    spec = prompt_from_text(tokenizer, "a cat sitting in a basket", subject="cat")
    assert spec.length == 8
    assert spec.subject_span == (1, 2)
    assert spec.tokens[1] == 48
    assert spec.tokens[6:] == (0, 0)


def test_prompt_from_text_defaults_span_to_first_token(tokenizer):
    spec = prompt_from_text(tokenizer, "a cat sitting in a basket")
    assert spec.subject_span == (0, 1)
    with pytest.raises(LengthError):
        prompt_from_text(tokenizer, "   ")


def test_target_prompt_from_text(tokenizer):
    source, target, concept_id = target_prompt_from_text(
        tokenizer, "a cat sitting in a basket", "cat", "<mydog>"
    )
    assert concept_id == 2
    assert source.tokens[1] == 48
    assert target.tokens[1] == 2
    assert target.tokens[:1] == source.tokens[:1]
    assert target.tokens[2:] == source.tokens[2:]
    assert target.subject_span == (1, 2)
    # the target is exactly what tokenizing the substituted text gives
    assert list(target.tokens) == tokenizer.encode("a <mydog> sitting in a basket")
