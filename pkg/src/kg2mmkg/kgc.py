"""Link prediction harness for measuring what image features add.

A deterministic TransE baseline (margin ranking loss, full-batch descent)
plus an image-augmented variant that adds a learned linear projection of
per-entity image features to the structural embedding.  Evaluation ranks
both tail and head completions of every test triple against all
entities, raw or filtered, with mean-rank tie handling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .kg import KnowledgeGraph

logger = logging.getLogger(__name__)

FUSIONS = ("none", "image-add")
SETTINGS = ("raw", "filtered")
HIT_LEVELS = (1, 3, 10)


class KgcError(Exception):
    pass


@dataclass(frozen=True)
class KgcConfig:
    dim: int = 16
    margin: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 200
    negatives: int = 2
    seed: int = 0
    fusion: str = "none"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.dim < 1 or self.learning_rate <= 0 or self.epochs < 0 or self.negatives < 1:
            raise ValueError("invalid training hyperparameters")


def fuse_image(struct_vec: np.ndarray, image_vec: np.ndarray | None, projection: np.ndarray) -> np.ndarray:
    """struct + projection of the image feature; struct alone without one."""
    if image_vec is None:
        return struct_vec
    return struct_vec + image_vec @ projection


@dataclass
class KgcModel:
    entity_vecs: np.ndarray
    relation_vecs: np.ndarray
    projection: np.ndarray | None
    image_matrix: np.ndarray | None      # (n_entities, img_dim), zero rows where absent
    config: KgcConfig
    loss_history: list[float] = field(default_factory=list)

    def fused_entities(self) -> np.ndarray:
        if self.config.fusion == "none" or self.projection is None or self.image_matrix is None:
            return self.entity_vecs
        return self.entity_vecs + self.image_matrix @ self.projection


def _image_matrix(g: KnowledgeGraph, image_features: dict[int, np.ndarray] | None):
    if not image_features:
        return None, 0
    dims = {v.shape[0] for v in image_features.values()}
    if len(dims) != 1:
        raise KgcError(f"inconsistent image feature dims: {sorted(dims)}")
    img_dim = dims.pop()
    mat = np.zeros((g.num_entities, img_dim))
    for handle, vec in image_features.items():
        mat[handle] = vec
    return mat, img_dim


def _train_arrays(g: KnowledgeGraph):
    positions = g.splits["train"]
    if not positions:
        raise KgcError("train split is empty")
    heads = np.array([g.triples[p].head for p in positions], dtype=np.int64)
    rels = np.array([g.triples[p].rel for p in positions], dtype=np.int64)
    tails = np.array([g.triples[p].tail for p in positions], dtype=np.int64)
    return heads, rels, tails


def _corruptions(n_triples: int, n_entities: int, cfg: KgcConfig):
    """Frozen seeded corruptions: entity replacement plus head/tail coin."""
    rng = np.random.default_rng([cfg.seed, 0xC0])
    entities = rng.integers(0, n_entities, size=(n_triples, cfg.negatives))
    corrupt_head = rng.random(size=(n_triples, cfg.negatives)) < 0.5
    return entities, corrupt_head


def loss_and_grads(g, ent, rel, proj, img_mat, cfg: KgcConfig, corruptions, want_grads=True):
    """Margin ranking loss over train triples and its parameter gradients."""
    heads, rels, tails = _train_arrays(g)
    neg_entities, corrupt_head = corruptions
    fused = ent if img_mat is None or cfg.fusion == "none" else ent + img_mat @ proj

    def distances(h_idx, r_idx, t_idx):
        diff = fused[h_idx] + rel[r_idx] - fused[t_idx]
        return diff, np.sqrt(np.sum(diff ** 2, axis=-1))

    pos_diff, pos_dist = distances(heads, rels, tails)

    k = cfg.negatives
    neg_heads = np.where(corrupt_head, neg_entities, heads[:, None])
    neg_tails = np.where(corrupt_head, tails[:, None], neg_entities)
    neg_rels = np.broadcast_to(rels[:, None], neg_heads.shape)
    neg_diff = fused[neg_heads] + rel[neg_rels] - fused[neg_tails]
    neg_dist = np.sqrt(np.sum(neg_diff ** 2, axis=-1))

    margins = cfg.margin + pos_dist[:, None] - neg_dist
    active = margins > 0
    n_pairs = heads.size * k
    loss = float(np.sum(np.where(active, margins, 0.0)) / n_pairs)
    if not np.isfinite(loss):
        raise KgcError("non-finite loss; lower the learning rate")
    if not want_grads:
        return loss, None

    d_fused = np.zeros_like(fused)
    d_rel = np.zeros_like(rel)

    # positive side: d dist/d diff = diff / dist (zero-safe)
    pos_weight = active.sum(axis=1) / n_pairs
    safe_pos = np.where(pos_dist > 1e-12, pos_dist, 1.0)
    g_pos = (pos_weight / safe_pos)[:, None] * pos_diff
    np.add.at(d_fused, heads, g_pos)
    np.add.at(d_rel, rels, g_pos)
    np.add.at(d_fused, tails, -g_pos)

    safe_neg = np.where(neg_dist > 1e-12, neg_dist, 1.0)
    g_neg = -(active / (n_pairs * safe_neg))[:, :, None] * neg_diff
    flat = g_neg.reshape(-1, ent.shape[1])
    np.add.at(d_fused, neg_heads.ravel(), flat)
    np.add.at(d_rel, neg_rels.ravel(), flat)
    np.add.at(d_fused, neg_tails.ravel(), -flat)

    d_ent = d_fused
    d_proj = None
    if img_mat is not None and cfg.fusion == "image-add":
        d_proj = img_mat.T @ d_fused
    return loss, (d_ent, d_rel, d_proj)


def train_transe(
    g: KnowledgeGraph,
    cfg: KgcConfig,
    image_features: dict[int, np.ndarray] | None = None,
) -> KgcModel:
    """Deterministic full-batch training; same seed, same model, bit for bit."""
    img_mat, img_dim = _image_matrix(g, image_features)
    if cfg.fusion == "image-add" and img_mat is None:
        raise KgcError("image-add fusion requires image features")
    rng = np.random.default_rng(cfg.seed)
    bound = 6.0 / np.sqrt(cfg.dim)
    ent = rng.uniform(-bound, bound, size=(g.num_entities, cfg.dim))
    rel = rng.uniform(-bound, bound, size=(g.num_relations, cfg.dim))
    # zero-initialized projection: fusion starts as an exact no-op
    proj = np.zeros((img_dim, cfg.dim)) if cfg.fusion == "image-add" else None

    corruptions = _corruptions(len(g.splits["train"]), g.num_entities, cfg)
    history = []
    for _ in range(cfg.epochs):
        loss, grads = loss_and_grads(g, ent, rel, proj, img_mat, cfg, corruptions)
        history.append(loss)
        d_ent, d_rel, d_proj = grads
        ent -= cfg.learning_rate * d_ent
        rel -= cfg.learning_rate * d_rel
        if d_proj is not None:
            proj -= cfg.learning_rate * d_proj
    final, _ = loss_and_grads(g, ent, rel, proj, img_mat, cfg, corruptions, want_grads=False)
    history.append(final)
    return KgcModel(
        entity_vecs=ent,
        relation_vecs=rel,
        projection=proj,
        image_matrix=img_mat,
        config=cfg,
        loss_history=history,
    )


def score_transe(fused: np.ndarray, rel_vec: np.ndarray, side: str, anchor: int) -> np.ndarray:
    """Candidate scores (higher is better) for one query direction."""
    if side == "tail":
        diff = fused[anchor] + rel_vec - fused
    else:
        diff = fused + rel_vec - fused[anchor]
    return -np.sqrt(np.sum(diff ** 2, axis=-1))


def _rank_with_ties(scores: np.ndarray, true_idx: int, excluded: np.ndarray | None) -> float:
    s_true = scores[true_idx]
    if excluded is not None:
        scores = scores[~excluded]
    better = int(np.sum(scores > s_true))
    ties = int(np.sum(scores == s_true))
    return better + (ties + 1) / 2.0


@dataclass(frozen=True)
class RankReport:
    mrr: float
    hits_at: dict[int, float]
    n_queries: int
    setting: str

    def __post_init__(self):
        if not 0.0 < self.mrr <= 1.0:
            raise ValueError(f"mrr {self.mrr} outside (0, 1]")
        if not self.hits_at[1] <= self.hits_at[3] <= self.hits_at[10]:
            raise ValueError("hits@N must be monotone in N")

    def to_payload(self) -> dict:
        return {
            "setting": self.setting,
            "mrr": self.mrr,
            "hits_at": {str(k): v for k, v in sorted(self.hits_at.items())},
            "n_queries": self.n_queries,
        }


def evaluate(g: KnowledgeGraph, model: KgcModel, setting: str = "filtered") -> RankReport:
    """Filtered or raw ranking over both query directions of the test split."""
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    test_positions = g.splits.get("test", [])
    if not test_positions:
        raise KgcError("test split is empty or missing")
    fused = model.fused_entities()
    known = g.known_triples() if setting == "filtered" else None

    ranks = []
    for pos in test_positions:
        triple = g.triples[pos]
        rel_vec = model.relation_vecs[triple.rel]
        for side, anchor, true_idx in (
            ("tail", triple.head, triple.tail),
            ("head", triple.tail, triple.head),
        ):
            scores = score_transe(fused, rel_vec, side, anchor)
            excluded = None
            if known is not None:
                excluded = np.zeros(g.num_entities, dtype=bool)
                for cand in range(g.num_entities):
                    if cand == true_idx:
                        continue
                    key = (anchor, triple.rel, cand) if side == "tail" else (cand, triple.rel, anchor)
                    if key in known:
                        excluded[cand] = True
            ranks.append(_rank_with_ties(scores, true_idx, excluded))

    n = len(ranks)
    return RankReport(
        mrr=sum(1.0 / r for r in ranks) / n,  # sequential sum: reproducible reduction
        hits_at={k: sum(r <= k for r in ranks) / n for k in HIT_LEVELS},
        n_queries=n,
        setting=setting,
    )


def save_image_features(path, features: dict[str, np.ndarray]) -> None:
    payload = {label: vec.tolist() for label, vec in sorted(features.items())}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_image_features(path, g: KnowledgeGraph) -> dict[int, np.ndarray]:
    """Feature file maps entity labels to vectors; unknown labels are skipped."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    features = {}
    for label, vec in payload.items():
        if label in g.entities:
            features[g.entities.handle(label)] = np.asarray(vec, dtype=np.float64)
        else:
            logger.warning("image feature for unknown entity %r ignored", label)
    return features


def write_kgc_report(path, reports: list[RankReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_payload() for r in reports], fh, indent=2)
        fh.write("\n")
