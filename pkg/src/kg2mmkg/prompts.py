"""Prompt synthesis for entity image generation.

An instruction asking for a one-sentence visual description, grounded in
the entity's surviving neighbor facts, goes to an LLM backend; without a
backend (or after one fails) a deterministic template takes over.  The
knowledge graph itself is never mutated by anything a model replies.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .backends import BackendError
from .kg import EntityId

logger = logging.getLogger(__name__)

DEFAULT_WORD_CAP = 60


@dataclass(frozen=True)
class PromptRecord:
    entity: EntityId
    facts: tuple[str, ...]
    instruction: str
    prompt: str
    source: str                  # "llm" | "template"
    word_count: int
    truncated: bool = False
    downgraded: bool = False     # llm requested but template used

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.source not in ("llm", "template"):
            raise ValueError(f"unknown prompt source {self.source!r}")


def build_instruction(label: str, facts: list[str], cap: int = DEFAULT_WORD_CAP) -> str:
    """Fixed instruction text; the facts appear verbatim, in input order."""
    if not label:
        raise ValueError("entity label must be non-empty")
    if facts:
        fact_lines = "\n".join(f"- {fact}" for fact in facts)
        return (
            f'Write a one-sentence visual description of "{label}" for an image generator, '
            f"grounded in these facts:\n{fact_lines}\n"
            f"Correct any fact you know to be wrong. Use at most {cap} words."
        )
    return (
        f'Write a one-sentence visual description of "{label}" for an image generator: '
        f"what does it look like? Use at most {cap} words."
    )


_CONTROL = re.compile(r"[\x00-\x1f\x7f]")


def sanitize_reply(text: str) -> str:
    """Strip control characters and wrapping quotes; collapse whitespace."""
    text = _CONTROL.sub(" ", text)
    text = " ".join(text.split())
    while len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text.strip()


def _truncate_words(text: str, cap: int) -> tuple[str, bool]:
    words = text.split()
    if len(words) <= cap:
        return text, False
    return " ".join(words[:cap]), True


def template_prompt(label: str, facts: list[str]) -> str:
    if facts:
        return f"A photo of {label}, " + "; ".join(facts)
    return f"A photo of {label}"


def gen_prompt(
    entity: EntityId,
    label: str,
    facts: list[str],
    llm=None,
    cap: int = DEFAULT_WORD_CAP,
) -> PromptRecord:
    """Produce the prompt record for one entity; falls back to the template."""
    instruction = build_instruction(label, facts, cap)
    source = "template"
    downgraded = False
    prompt = ""
    if llm is not None:
        try:
            prompt = sanitize_reply(llm.complete(instruction))
            source = "llm"
        except BackendError as exc:
            logger.warning("llm backend failed for %r, using template: %s", label, exc)
            downgraded = True
        if source == "llm" and not prompt:
            logger.warning("llm returned an empty reply for %r, using template", label)
            source = "template"
            downgraded = True
    if source == "template":
        prompt = sanitize_reply(template_prompt(label, facts))
    prompt, truncated = _truncate_words(prompt, cap)
    return PromptRecord(
        entity=entity,
        facts=tuple(facts),
        instruction=instruction,
        prompt=prompt,
        source=source,
        word_count=len(prompt.split()),
        truncated=truncated,
        downgraded=downgraded,
    )
