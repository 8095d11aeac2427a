"""Relation visualizability scoring.

Each relation is scored by sampling a few of its triples, verbalizing
them, generating an image per sentence, and asking a reward backend how
well image and sentence match.  The per-relation score is the fraction
of samples with a strictly positive reward; relations above a threshold
survive to neighbor selection.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

import numpy as np

from .backends import BackendError
from .kg import KnowledgeGraph, RelationId, Triple

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES_PER_RELATION = 10
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class VisualizationSample:
    triple: Triple
    text: str
    image_sha256: str
    reward: float
    r_score: int

    def __post_init__(self):
        expected = 1 if self.reward > 0 else 0
        if self.r_score != expected:
            raise ValueError(f"r_score {self.r_score} inconsistent with reward {self.reward}")


@dataclass(frozen=True)
class RelationVisScore:
    relation: RelationId
    samples: tuple[VisualizationSample, ...]
    score: float            # fraction of positive samples
    threshold: float
    visualizable: bool
    n_failed: int = 0
    all_failed: bool = False


def sample_triples(
    g: KnowledgeGraph,
    rel: RelationId,
    k: int,
    seed: int,
    splits: tuple[str, ...] = ("train",),
) -> list[Triple]:
    """min(k, available) distinct triples of ``rel``, uniform without replacement."""
    pool: list[Triple] = []
    for split in splits:
        pool.extend(g.triples_of_relation(rel, split=split))
    if len(pool) <= k:
        return pool
    rng = np.random.default_rng([seed, rel])
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(idx)]


def naturalize(label: str) -> str:
    """Split camelCase/underscores and lowercase: playsFor -> 'plays for'."""
    spaced = label.replace("_", " ")
    spaced = re.sub(r"(?<=[a-z0-9])(?=[A-Z])", " ", spaced)
    return " ".join(spaced.split()).lower()


def verbalize(triple: Triple, g: KnowledgeGraph) -> str:
    """Deterministic sentence for a triple, using display names when present."""
    head = g.display(g.entities.label(triple.head))
    tail = g.display(g.entities.label(triple.tail))
    rel = naturalize(g.display(g.relations.label(triple.rel)))
    return f"{head} {rel} {tail}."


def score_relation(
    g: KnowledgeGraph,
    rel: RelationId,
    t2i,
    reward,
    k: int = DEFAULT_SAMPLES_PER_RELATION,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
    image_size: tuple[int, int] = (256, 256),
    splits: tuple[str, ...] = ("train",),
) -> RelationVisScore:
    """Score one relation: verbalize samples, generate, reward, aggregate.

    A sample whose backend calls fail (after client-side retries) is
    excluded from both numerator and denominator; backend flakiness must
    not read as non-visualizability.
    """
    triples = sample_triples(g, rel, k, seed, splits)
    samples: list[VisualizationSample] = []
    n_failed = 0
    for triple in triples:
        text = verbalize(triple, g)
        try:
            artifact = t2i.generate(text, seed=seed, size=image_size)
            raw = reward.score(text, artifact)
        except BackendError as exc:
            n_failed += 1
            logger.warning(
                "sample %r for relation %r failed permanently: %s",
                text, g.relations.label(rel), exc,
            )
            continue
        samples.append(
            VisualizationSample(
                triple=triple,
                text=text,
                image_sha256=artifact.sha256,
                reward=raw,
                r_score=1 if raw > 0 else 0,  # reward of exactly 0 counts as 0
            )
        )
    all_failed = bool(triples) and not samples
    score = sum(s.r_score for s in samples) / len(samples) if samples else 0.0
    return RelationVisScore(
        relation=rel,
        samples=tuple(samples),
        score=score,
        threshold=threshold,
        visualizable=bool(samples) and score > threshold,
        n_failed=n_failed,
        all_failed=all_failed,
    )


def filter_relations(scores: list[RelationVisScore]) -> set[RelationId]:
    """Relations whose score strictly exceeds their threshold."""
    return {s.relation for s in scores if s.visualizable}


def relation_scores_payload(scores: list[RelationVisScore], g: KnowledgeGraph) -> list[dict]:
    rows = []
    for s in sorted(scores, key=lambda s: s.relation):
        rows.append(
            {
                "relation": g.relations.label(s.relation),
                "r_vis": round(s.score, 6),
                "n_samples": len(s.samples),
                "n_failed": s.n_failed,
                "visualizable": s.visualizable,
                "mu": s.threshold,
            }
        )
    return rows


def write_relation_scores(path, scores: list[RelationVisScore], g: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(relation_scores_payload(scores, g), fh, indent=2, ensure_ascii=False)
        fh.write("\n")
