"""Knowledge graph loading, indexing and validation.

Triples live in TSV files, one `head<TAB>relation<TAB>tail` per line.
Entity and relation vocabularies are assigned dense integer handles in
first-appearance order of the train split, which keeps every seeded
computation downstream reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

logger = logging.getLogger(__name__)

EntityId = int
RelationId = int

SPLITS = ("train", "valid", "test")


class KgError(Exception):
    """Base class for graph loading and lookup failures."""


class KgParseError(KgError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class KgValidationError(KgError):
    pass


class KgLookupError(KgError, KeyError):
    pass


class Vocab:
    """Bijective label <-> dense handle mapping, first-appearance order."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._handles: dict[str, int] = {}
        for lab in labels:
            self.add(lab)

    def add(self, label: str) -> int:
        h = self._handles.get(label)
        if h is None:
            h = len(self._labels)
            self._handles[label] = h
            self._labels.append(label)
        return h

    def handle(self, label: str) -> int:
        try:
            return self._handles[label]
        except KeyError:
            raise KgLookupError(f"unknown label {label!r}") from None

    def label(self, handle: int) -> str:
        if not 0 <= handle < len(self._labels):
            raise KgLookupError(f"handle {handle} outside vocabulary of size {len(self._labels)}")
        return self._labels[handle]

    def labels(self) -> list[str]:
        return list(self._labels)

    def __contains__(self, label: str) -> bool:
        return label in self._handles

    def __len__(self) -> int:
        return len(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._labels == other._labels


@dataclass(frozen=True)
class Triple:
    head: EntityId
    rel: RelationId
    tail: EntityId


@dataclass
class KnowledgeGraph:
    """Immutable after load; safe for concurrent readers.

    ``triples`` holds all splits concatenated in train/valid/test order;
    ``splits`` maps a split name to positions into that list.  Both
    adjacency indices cover the full triple list and carry the triple
    position so callers can restrict to a split.
    """

    entities: Vocab
    relations: Vocab
    triples: list[Triple]
    splits: dict[str, list[int]]
    display_names: dict[str, str] = field(default_factory=dict)
    out_index: dict[int, list[tuple[int, int, int]]] = field(default_factory=dict)
    rel_index: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.out_index and not self.rel_index:
            out, rel = build_indices(self.triples)
            self.out_index.update(out)
            self.rel_index.update(rel)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def _split_sets(self) -> dict[str, frozenset]:
        cached = getattr(self, "_split_sets_cache", None)
        if cached is None:
            cached = {name: frozenset(pos) for name, pos in self.splits.items()}
            object.__setattr__(self, "_split_sets_cache", cached)
        return cached

    def neighbors(
        self,
        head: EntityId,
        allowed: Optional[set[RelationId]] = None,
        split: Optional[str] = None,
    ) -> list[tuple[RelationId, EntityId]]:
        """Out-edges of ``head`` in deterministic (relation, tail) handle order."""
        self.entities.label(head)  # raises on unknown handle
        members = self._split_sets()[split] if split else None
        edges = []
        for rel, tail, pos in self.out_index.get(head, ()):
            if allowed is not None and rel not in allowed:
                continue
            if members is not None and pos not in members:
                continue
            edges.append((rel, tail))
        edges.sort()
        return edges

    def triples_of_relation(self, rel: RelationId, split: Optional[str] = None) -> list[Triple]:
        """All triples carrying ``rel`` in triple-list order."""
        self.relations.label(rel)
        members = self._split_sets()[split] if split else None
        positions = self.rel_index.get(rel, ())
        return [self.triples[p] for p in positions if members is None or p in members]

    def display(self, label: str) -> str:
        return self.display_names.get(label, label)

    def entity_display(self, handle: EntityId) -> str:
        return self.display(self.entities.label(handle))

    def known_triples(self) -> set[tuple[int, int, int]]:
        return {(t.head, t.rel, t.tail) for t in self.triples}


def build_indices(triples: Sequence[Triple]):
    """Adjacency indices from scratch; the stored ones must equal these."""
    out_index: dict[int, list[tuple[int, int, int]]] = {}
    rel_index: dict[int, list[int]] = {}
    for pos, t in enumerate(triples):
        out_index.setdefault(t.head, []).append((t.rel, t.tail, pos))
        rel_index.setdefault(t.rel, []).append(pos)
    return out_index, rel_index


def _parse_tsv(path) -> Iterator[tuple[int, tuple[str, str, str]]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise KgParseError(path, line_no, f"expected 3 tab-separated fields, got {len(fields)}")
            head, rel, tail = (f.strip() for f in fields)
            if not head or not rel or not tail:
                raise KgParseError(path, line_no, "empty field after trimming whitespace")
            yield line_no, (head, rel, tail)


def load_kg(
    train_path,
    valid_path=None,
    test_path=None,
    labels_path=None,
) -> KnowledgeGraph:
    """Load train (and optional valid/test) TSV splits into an indexed graph.

    Vocabularies come from the train split alone; valid/test triples that
    mention unseen entities or relations are rejected.  Duplicate triples
    inside one split are an error, duplicates across splits only warn.
    """
    entities = Vocab()
    relations = Vocab()
    triples: list[Triple] = []
    splits: dict[str, list[int]] = {}
    seen_anywhere: dict[tuple[int, int, int], str] = {}

    paths = {"train": train_path, "valid": valid_path, "test": test_path}
    for split in SPLITS:
        path = paths[split]
        positions: list[int] = []
        splits[split] = positions
        if path is None:
            continue
        seen_here: set[tuple[int, int, int]] = set()
        offenders: list[str] = []
        for line_no, (head, rel, tail) in _parse_tsv(path):
            if split == "train":
                key = (entities.add(head), relations.add(rel), entities.add(tail))
            else:
                missing = [lab for lab in (head, tail) if lab not in entities]
                if rel not in relations:
                    missing.append(rel)
                if missing:
                    offenders.extend(f"{path}:{line_no}: {m!r}" for m in missing)
                    continue
                key = (entities.handle(head), relations.handle(rel), entities.handle(tail))
            if key in seen_here:
                raise KgValidationError(
                    f"duplicate triple ({head!r}, {rel!r}, {tail!r}) in {split} split ({path}:{line_no})"
                )
            seen_here.add(key)
            if key in seen_anywhere and seen_anywhere[key] != split:
                logger.warning(
                    "triple (%r, %r, %r) appears in both %s and %s splits",
                    head, rel, tail, seen_anywhere[key], split,
                )
            seen_anywhere.setdefault(key, split)
            positions.append(len(triples))
            triples.append(Triple(*key))
        if offenders:
            raise KgValidationError(
                f"{split} split references labels absent from train: " + "; ".join(offenders)
            )

    display_names: dict[str, str] = {}
    if labels_path is not None:
        with open(labels_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in raw.items()
        ):
            raise KgValidationError(f"{labels_path}: labels sidecar must map strings to strings")
        display_names = raw

    return KnowledgeGraph(
        entities=entities,
        relations=relations,
        triples=triples,
        splits=splits,
        display_names=display_names,
    )


def save_kg(g: KnowledgeGraph, out_dir) -> dict[str, Path]:
    """Write the graph back to per-split TSV files plus the labels sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for split in SPLITS:
        positions = g.splits.get(split, [])
        if not positions and split != "train":
            continue
        path = out / f"{split}.tsv"
        with open(path, "w", encoding="utf-8") as fh:
            for pos in positions:
                t = g.triples[pos]
                fh.write(
                    f"{g.entities.label(t.head)}\t{g.relations.label(t.rel)}\t{g.entities.label(t.tail)}\n"
                )
        written[split] = path
    if g.display_names:
        path = out / "labels.json"
        path.write_text(json.dumps(g.display_names, indent=2, ensure_ascii=False), encoding="utf-8")
        written["labels"] = path
    return written
