"""Automatic image evaluation: Fréchet distance and CLIP-style similarity.

The generated image for an entity is compared against each of its (up to
three) real images; the report keeps the smallest Fréchet distance and
the largest similarity.  Against single images both feature "sets" are
singletons, so the Fréchet distance degenerates to the squared feature
distance; reports carry that caveat explicitly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .sns import cosine

logger = logging.getLogger(__name__)

_JITTER = 1e-6
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class FeatureSet:
    vectors: np.ndarray                  # (n, d)
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("feature set must be a non-empty (n, d) matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature set contains non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _mean_cov(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    if x.shape[0] == 1:
        return mean, np.zeros((x.shape[1], x.shape[1]))
    return mean, np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition, negatives clamped to 0."""
    eigvals, eigvecs = np.linalg.eigh((m + m.T) / 2.0)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def _regularize(cov: np.ndarray) -> np.ndarray:
    eigvals = np.linalg.eigvalsh((cov + cov.T) / 2.0)
    top = float(eigvals[-1])
    bottom = float(eigvals[0])
    if top > 0 and (bottom <= 0 or top / max(bottom, 1e-300) > _COND_LIMIT):
        return cov + _JITTER * np.eye(cov.shape[0])
    return cov


def fid(a: FeatureSet, b: FeatureSet, jitter: float = 0.0) -> float:
    """Fréchet distance between Gaussians fitted to the two feature sets.

    ``jitter`` adds an explicit eps*I to both covariances (stability
    probing); ill-conditioned covariances are regularized regardless.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dimension mismatch: {a.dim} vs {b.dim}")
    mu1, cov1 = _mean_cov(a.vectors)
    mu2, cov2 = _mean_cov(b.vectors)
    if jitter:
        eye = np.eye(a.dim)
        cov1 = cov1 + jitter * eye
        cov2 = cov2 + jitter * eye
    cov1 = _regularize(cov1)
    cov2 = _regularize(cov2)
    root1 = _sqrtm_psd(cov1)
    cross = _sqrtm_psd(root1 @ cov2 @ root1)
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def clipscore_pair(u: np.ndarray, v: np.ndarray) -> float:
    """Similarity of two embedding vectors; dot product for unit inputs."""
    return cosine(u, v)


def best_of_reals(gen_artifact, real_artifacts, embedder) -> tuple[float, float]:
    """(min Fréchet distance, max similarity) of a generated image vs reals."""
    if not real_artifacts:
        raise ValueError("at least one real image is required")
    gen_vec = embedder.embed_image(gen_artifact)
    fids = []
    clips = []
    for real in real_artifacts:
        real_vec = embedder.embed_image(real)
        fids.append(fid(FeatureSet(gen_vec, "generated"), FeatureSet(real_vec, "real")))
        clips.append(clipscore_pair(gen_vec, real_vec))
    return min(fids), max(clips)


@dataclass
class MetricReport:
    per_entity: dict[str, dict[str, float]] = field(default_factory=dict)
    n_skipped: int = 0
    notes: list[str] = field(
        default_factory=lambda: ["fid against single images degenerates to squared feature distance"]
    )

    def add(self, entity: str, fid_min: float, clip_max: float) -> None:
        if fid_min < -1e-9:
            raise ValueError(f"fid_min {fid_min} below tolerance")
        if not -1.0 - 1e-9 <= clip_max <= 1.0 + 1e-9:
            raise ValueError(f"clip_max {clip_max} outside [-1, 1]")
        self.per_entity[entity] = {"fid_min": fid_min, "clip_max": clip_max}

    def skip(self, entity: str, reason: str) -> None:
        logger.warning("entity %r skipped in metric report: %s", entity, reason)
        self.n_skipped += 1

    def aggregates(self) -> dict:
        keys = sorted(self.per_entity)  # fixed summation order
        n = len(keys)
        mean_fid = sum(self.per_entity[k]["fid_min"] for k in keys) / n if n else float("nan")
        mean_clip = sum(self.per_entity[k]["clip_max"] for k in keys) / n if n else float("nan")
        return {
            "mean_fid": mean_fid,
            "mean_clipscore": mean_clip,
            "n_entities": n,
            "n_skipped": self.n_skipped,
        }

    def to_payload(self) -> dict:
        return {
            "per_entity": {k: self.per_entity[k] for k in sorted(self.per_entity)},
            "aggregates": self.aggregates(),
            "notes": self.notes,
        }

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_payload(), fh, indent=2, ensure_ascii=False, allow_nan=True)
            fh.write("\n")
