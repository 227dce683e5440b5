"""Fixed-length prompt specifications and subject substitution.

Prompts are token id sequences padded to the backend's fixed text length, so
source and target cross-attention always operate over equally many keys. The
subject span marks which positions the personalized concept replaces.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

from .errors import LengthError, SpanError


@dataclasses.dataclass(frozen=True)
class PromptSpec:
    """A tokenized prompt with its subject span.

    Attributes:
        tokens: padded token ids, fixed length.
        subject_span: half-open ``(start, end)`` indices of the subject.
        pad_id: the padding token id.
    """

    tokens: tuple[int, ...]
    subject_span: tuple[int, int]
    pad_id: int = 0

    def __post_init__(self) -> None:
        start, end = self.subject_span
        if not 0 <= start < end <= len(self.tokens):
            raise SpanError(
                f"subject span {self.subject_span} invalid for {len(self.tokens)} tokens"
            )
        for pos in range(start, end):
            if self.tokens[pos] == self.pad_id:
                raise SpanError("subject span covers padding")

    @property
    def length(self) -> int:
        return len(self.tokens)

    def content_length(self) -> int:
        n = len(self.tokens)
        while n > 0 and self.tokens[n - 1] == self.pad_id:
            n -= 1
        return n


def make_prompt_spec(
    token_ids: Sequence[int],
    subject_positions: tuple[int, int],
    max_len: int,
    pad_id: int = 0,
) -> PromptSpec:
    """Pad raw token ids to ``max_len`` and wrap them with their span."""
    ids = list(token_ids)
    if len(ids) > max_len:
        raise LengthError(f"prompt has {len(ids)} tokens, limit is {max_len}")
    if len(ids) == 0:
        raise LengthError("prompt has no tokens")
    ids = ids + [pad_id] * (max_len - len(ids))
    return PromptSpec(tokens=tuple(ids), subject_span=subject_positions, pad_id=pad_id)


def find_subject_span(words: Sequence[str], subject: str) -> tuple[int, int]:
    """Locate the subject word sequence inside a prompt's words."""
    subject_words = [w.lower() for w in subject.split()]
    if not subject_words:
        raise SpanError("subject is empty")
    lowered = [w.lower() for w in words]
    n = len(subject_words)
    for start in range(0, len(lowered) - n + 1):
        if lowered[start : start + n] == subject_words:
            return (start, start + n)
    raise SpanError(f"subject {subject!r} does not occur in the prompt")


def build_target_prompt(
    source: PromptSpec, concept_tokens: Sequence[int]
) -> PromptSpec:
    """Replace the source's subject span with the concept tokens and re-pad.

    The result keeps the source's fixed length; its subject span covers the
    inserted concept tokens.

    Raises:
        SpanError: if the concept token list is empty.
        LengthError: if the substitution overflows the fixed length.
    """
    concept = list(concept_tokens)
    if not concept:
        raise SpanError("concept token list is empty")
    start, end = source.subject_span
    content = list(source.tokens[: source.content_length()])
    new_content = content[:start] + concept + content[end:]
    if len(new_content) > source.length:
        raise LengthError(
            f"substituted prompt has {len(new_content)} tokens, "
            f"fixed length is {source.length}"
        )
    tokens = tuple(new_content + [source.pad_id] * (source.length - len(new_content)))
    return PromptSpec(
        tokens=tokens,
        subject_span=(start, start + len(concept)),
        pad_id=source.pad_id,
    )


def prompt_from_text(
    tokenizer, prompt: str, subject: str | None = None
) -> PromptSpec:
    """Tokenize a prompt string, locating the subject span when given.

    Without a subject the span defaults to the first token, which suits
    prompts used only for generation (never substitution).
    """
    words = prompt.split()
    if not words:
        raise LengthError("prompt has no words")
    ids = tokenizer.encode(prompt)
    max_len = len(ids)
    if subject is not None:
        span = find_subject_span(words, subject)
    else:
        span = (0, 1)
    content = tokenizer.encode_words(words)
    if len(content) > max_len:
        raise LengthError(f"prompt has {len(content)} tokens, limit is {max_len}")
    return make_prompt_spec(content, span, max_len)


def target_prompt_from_text(
    tokenizer, prompt: str, subject: str, concept: str
) -> tuple[PromptSpec, PromptSpec, int]:
    """Build the source and target prompt pair for a swap.

    Returns ``(source_spec, target_spec, concept_token_id)``.
    """
    source = prompt_from_text(tokenizer, prompt, subject=subject)
    concept_id = tokenizer.concept_id(concept)
    target = build_target_prompt(source, [concept_id])
    return source, target, concept_id
