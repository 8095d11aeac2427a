"""Structural neighbor selection.

For each entity and each surviving relation, one-hop neighbors are
represented by composing the relation and tail embeddings; the cosine
similarity of each representation to the entity embedding is compared to
the group mean, and every neighbor at or above the mean is kept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .encoder import EmbeddingTable, compose
from .kg import EntityId, KnowledgeGraph, RelationId


@dataclass(frozen=True)
class NeighborScore:
    head: EntityId
    rel: RelationId
    tail: EntityId
    rep: np.ndarray
    sim: float


@dataclass(frozen=True)
class NeighborGroup:
    scores: tuple[NeighborScore, ...]
    group_mean: float
    selected: tuple[NeighborScore, ...]


@dataclass(frozen=True)
class SelectedNeighbors:
    head: EntityId
    groups: dict[RelationId, NeighborGroup] = field(default_factory=dict)

    def selected_pairs(self) -> list[tuple[RelationId, EntityId]]:
        """All surviving (relation, tail) pairs in handle order."""
        pairs = [
            (rel, ns.tail)
            for rel, group in self.groups.items()
            for ns in group.selected
        ]
        pairs.sort()
        return pairs


def neighbor_rep(e_r: np.ndarray, e_t: np.ndarray, op: str = "mult") -> np.ndarray:
    """One-hop neighbor representation: composition of relation and tail."""
    return compose(e_r, e_t, op)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b) / (na * nb)


def select_neighbors(
    g: KnowledgeGraph,
    emb: EmbeddingTable,
    head: EntityId,
    allowed: set[RelationId],
    split: str | None = "train",
) -> SelectedNeighbors:
    """Group neighbors per relation; keep those with similarity >= group mean.

    The comparison is inclusive, so a nonempty group always keeps at least
    its maximum.  An entity with no allowed neighbors yields an empty
    result; callers fall back to name-only prompting.
    """
    if emb.entity_vecs.shape[0] != g.num_entities or emb.relation_vecs.shape[0] != g.num_relations:
        raise ValueError("embedding table does not cover this graph")
    op = emb.config.composition
    e_h = emb.entity_vecs[head]
    by_rel: dict[RelationId, list[EntityId]] = {}
    for rel, tail in g.neighbors(head, allowed=allowed, split=split):
        by_rel.setdefault(rel, []).append(tail)

    groups: dict[RelationId, NeighborGroup] = {}
    for rel, tails in by_rel.items():
        scores = []
        for tail in tails:
            rep = neighbor_rep(emb.relation_vecs[rel], emb.entity_vecs[tail], op)
            scores.append(NeighborScore(head=head, rel=rel, tail=tail, rep=rep, sim=cosine(e_h, rep)))
        mean = sum(s.sim for s in scores) / len(scores)
        selected = tuple(s for s in scores if s.sim >= mean)
        groups[rel] = NeighborGroup(scores=tuple(scores), group_mean=mean, selected=selected)
    return SelectedNeighbors(head=head, groups=groups)


def selection_payload(sel: SelectedNeighbors, g: KnowledgeGraph) -> dict:
    groups = []
    for rel in sorted(sel.groups):
        group = sel.groups[rel]
        chosen = {ns.tail for ns in group.selected}
        groups.append(
            {
                "relation": g.relations.label(rel),
                "group_mean": round(group.group_mean, 6),
                "neighbors": [
                    {
                        "tail": g.entities.label(ns.tail),
                        "sim": round(ns.sim, 6),
                        "selected": ns.tail in chosen,
                    }
                    for ns in group.scores
                ],
            }
        )
    return {"entity": g.entities.label(sel.head), "groups": groups}


def write_selected_neighbors(path, selections: list[SelectedNeighbors], g: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sel in selections:
            fh.write(json.dumps(selection_payload(sel, g), ensure_ascii=False, sort_keys=True))
            fh.write("\n")
