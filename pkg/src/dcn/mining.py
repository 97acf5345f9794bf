"""Difficulty-based template pair sampling from a classifier embedding.

Templates are approximated by the mean of their images' embeddings. The
cosine similarity between every pair of templates, compared with the
same/different ground truth, gives a difficulty ``|label - cosine|``;
training pairs are drawn from difficulty buckets below a hard ceiling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DIFFICULTY_CEILING = 0.6


class MiningShortageError(RuntimeError):
    """No eligible pair exists for a requested bucket and label."""


@dataclass(frozen=True)
class Bucket:
    center: float
    half_width: float = 0.1
    weight: float = 1.0

    def contains(self, d) -> np.ndarray:
        return np.abs(np.asarray(d) - self.center) <= self.half_width


DEFAULT_BUCKETS = (Bucket(0.3), Bucket(0.5))


@dataclass
class EmbeddingStore:
    embeddings: np.ndarray  # (num_images, D)
    identities: np.ndarray  # (num_images,)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.identities = np.asarray(self.identities)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.identities):
            raise ValueError("embeddings must be (num_images, D) with one identity per row")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("non-finite embedding")

    def indices_of(self, identity: int) -> np.ndarray:
        return np.flatnonzero(self.identities == identity)


@dataclass
class DifficultyMatrix:
    similarity: np.ndarray
    labels: np.ndarray
    d: np.ndarray


@dataclass
class MiningRound:
    templates: list  # per template: array of store indices
    identities: np.ndarray  # per template
    descriptors: np.ndarray  # (T, D) unit rows
    difficulty: DifficultyMatrix = field(repr=False)


def template_descriptor(image_embeddings) -> np.ndarray:
    """Mean of the image embeddings, L2-normalized."""
    e = np.asarray(image_embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) == 0:
        raise ValueError("need a non-empty (n, D) list of embeddings")
    m = e.mean(axis=0)
    n = np.linalg.norm(m)
    return m if n < 1e-12 else m / n


def similarity_matrix(descriptors) -> np.ndarray:
    x = np.asarray(descriptors, dtype=np.float64)
    s = x @ x.T
    s = (s + s.T) / 2
    return np.clip(s, -1.0, 1.0)


def difficulty_matrix(similarity, labels) -> DifficultyMatrix:
    s = np.asarray(similarity, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"similarity {s.shape} and labels {y.shape} disagree")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return DifficultyMatrix(s, y.astype(np.int8), np.abs(y - s))


def sample_pairs(
    dm: DifficultyMatrix,
    batch: int,
    rng: np.random.Generator,
    buckets=DEFAULT_BUCKETS,
    ceiling: float = DIFFICULTY_CEILING,
    fallback_size: int = 8,
) -> list:
    """Draw ``batch / 2`` positive and ``batch / 2`` negative pairs (i, j, label).

    Each draw picks a bucket with probability proportional to its weight
    and then a uniform pair of the right label inside it. When the bucket
    holds no such pair, one of the ``fallback_size`` eligible pairs nearest
    to the bucket center is used instead. Pairs above ``ceiling`` are never
    returned and i != j always.
    """
    if batch <= 0 or batch % 2:
        raise ValueError("batch must be a positive even number")
    iu, ju = np.triu_indices(dm.d.shape[0], k=1)
    d = dm.d[iu, ju]
    lab = dm.labels[iu, ju]
    weights = np.array([b.weight for b in buckets], dtype=np.float64)
    weights = weights / weights.sum()

    pools = {}
    for label in (1, 0):
        eligible = np.flatnonzero((lab == label) & (d <= ceiling))
        for bi, b in enumerate(buckets):
            inside = eligible[b.contains(d[eligible])]
            if inside.size == 0:
                if eligible.size == 0:
                    kind = "positive" if label else "negative"
                    raise MiningShortageError(
                        f"bucket {bi} (center {b.center}): no eligible {kind} pairs at difficulty <= {ceiling}"
                    )
                order = np.argsort(np.abs(d[eligible] - b.center), kind="stable")
                inside = eligible[order[:fallback_size]]
            pools[label, bi] = inside

    out = []
    for label in (1, 0):
        for _ in range(batch // 2):
            bi = int(rng.choice(len(buckets), p=weights))
            pool = pools[label, bi]
            p = int(pool[rng.integers(pool.size)])
            out.append((int(iu[p]), int(ju[p]), label))
    return out


def _template_indices(pool: np.ndarray, n: int, rng: np.random.Generator, duplicate_prob: float) -> np.ndarray:
    if n > 1 and rng.random() < duplicate_prob:
        return np.repeat(pool[rng.integers(pool.size)], n)
    return rng.choice(pool, size=n, replace=False)


def build_mining_round(
    store: EmbeddingStore,
    rng: np.random.Generator,
    identities: int = 64,
    templates_per_identity: int = 2,
    images_per_template: int = 3,
    duplicate_prob: float = 0.0,
) -> MiningRound:
    """Sample identities, build templates from their images, score all pairs."""
    ids = np.unique(store.identities)
    if identities > ids.size:
        raise ValueError(f"requested {identities} identities, store has {ids.size}")
    chosen = rng.choice(ids, size=identities, replace=False)
    templates, tids = [], []
    for ident in chosen:
        pool = store.indices_of(ident)
        if pool.size < images_per_template:
            raise ValueError(f"identity {ident} has {pool.size} images, need {images_per_template}")
        for _ in range(templates_per_identity):
            templates.append(_template_indices(pool, images_per_template, rng, duplicate_prob))
            tids.append(ident)
    desc = np.stack([template_descriptor(store.embeddings[t]) for t in templates])
    tids = np.asarray(tids)
    labels = (tids[:, None] == tids[None, :]).astype(np.int8)
    dm = difficulty_matrix(similarity_matrix(desc), labels)
    return MiningRound(templates, tids, desc, dm)


def difficulty_histogram(dm: DifficultyMatrix, bins: int = 20, upper: float = 2.0) -> list:
    """(left, right, count) rows over the strict upper triangle."""
    iu, ju = np.triu_indices(dm.d.shape[0], k=1)
    counts, edges = np.histogram(dm.d[iu, ju], bins=bins, range=(0.0, upper))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
