"""Visual vocabulary: k-means over probe-set visual tokens and token-to-ingredient
assignment. Ingredient ids are 0-based everywhere in this repository.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .feature_io import FeatureRecord, FormatError, _read_exact
from .numerics import SeededRng

VOCAB_MAGIC = b"SNVW"
VOCAB_VERSION = 1

DEFAULT_PROBE_LIMIT = 5000


@dataclass
class Fingerprint:
    """Identifies the probe data a vocabulary (and anything built on it) came from."""

    probe_size: int = 0
    seed: int = 0
    layer_index: int = 0

    def __eq__(self, other):
        return (
            isinstance(other, Fingerprint)
            and (self.probe_size, self.seed, self.layer_index)
            == (other.probe_size, other.seed, other.layer_index)
        )


@dataclass
class VisualVocabulary:
    centers: np.ndarray  # M x d, float64 in memory
    fingerprint: Fingerprint = field(default_factory=Fingerprint)

    @property
    def M(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]


@dataclass
class DiscretizedSequence:
    """Ingredient index per visual token, plus occurrence lists and grid geometry.

    token_positions maps sequence slots to original grid indices; occurrence
    lists hold sequence slots (they index the sliced attention block directly).
    """

    indices: np.ndarray
    occurrences: dict[int, np.ndarray]
    grid_h: int
    grid_w: int
    token_positions: np.ndarray

    @property
    def n(self) -> int:
        return self.indices.shape[0]


def _pairwise_sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x||^2 - 2 x.c + ||c||^2; clamp tiny negatives from cancellation
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans_objective(tokens: np.ndarray, centers: np.ndarray) -> float:
    """Sum of squared distances from each token to its nearest center."""
    return float(_pairwise_sq_dists(tokens, centers).min(axis=1).sum())


def _plusplus_seed(tokens: np.ndarray, M: int, rng: SeededRng) -> np.ndarray:
    n = tokens.shape[0]
    centers = np.empty((M, tokens.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centers[0] = tokens[first]
    d2 = _pairwise_sq_dists(tokens, centers[:1]).ravel()
    for k in range(1, M):
        idx = rng.choice_weighted(n, d2)
        centers[k] = tokens[idx]
        d2 = np.minimum(d2, _pairwise_sq_dists(tokens, centers[k : k + 1]).ravel())
    return centers


def build_vocabulary(
    tokens,
    M: int,
    rng: SeededRng,
    max_iters: int = 100,
    rel_tol: float = 1e-4,
    fingerprint: Fingerprint | None = None,
) -> VisualVocabulary:
    """k-means++ seeding followed by Lloyd iterations over the token collection.

    Iterates until the assignment stops changing (a Lloyd fixed point), the
    relative objective improvement drops below rel_tol, or max_iters. An empty
    cluster is reseeded to the token farthest from its current center so the
    vocabulary keeps M live centers.
    """
    tokens = np.asarray(list(tokens) if not isinstance(tokens, np.ndarray) else tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a 2-D collection of d-vectors")
    n = tokens.shape[0]
    if n < M:
        raise ValueError(f"need at least M={M} tokens, got {n}")
    if np.unique(tokens, axis=0).shape[0] < M:
        raise ValueError(f"fewer than M={M} distinct tokens")

    centers = _plusplus_seed(tokens, M, rng)
    prev_assign = None
    prev_obj = None

    def distinct():
        return np.unique(centers, axis=0).shape[0] == M

    # a Lloyd fixed point cannot hold duplicate centers (the tie rule empties
    # one, and the empty-cluster repair separates them), so early-exit
    # conditions only apply once centers are distinct
    for _ in range(max_iters + M):
        d2 = _pairwise_sq_dists(tokens, centers)
        assign = d2.argmin(axis=1)
        if prev_assign is not None and np.array_equal(assign, prev_assign) and distinct():
            break
        prev_assign = assign
        # center update: deterministic chunk-free reduction via bincount sums
        counts = np.bincount(assign, minlength=M).astype(np.float64)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, tokens)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for k in np.flatnonzero(~nonempty):
            nearest = _pairwise_sq_dists(tokens, centers).min(axis=1)
            far = int(nearest.argmax())
            centers[k] = tokens[far]
        obj = kmeans_objective(tokens, centers)
        if distinct():
            if prev_obj is not None and prev_obj > 0 and (prev_obj - obj) / prev_obj < rel_tol:
                break
            if obj == 0.0:
                break
        prev_obj = obj
    return VisualVocabulary(centers=centers, fingerprint=fingerprint or Fingerprint(probe_size=n))


def assign_ingredient(x: np.ndarray, vocab: VisualVocabulary) -> int:
    """Index of the nearest center by Euclidean distance; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (vocab.d,):
        raise ValueError(f"vector has dim {x.shape}, vocabulary has d={vocab.d}")
    d2 = _pairwise_sq_dists(x[None, :], vocab.centers)
    return int(d2.argmin())


def assign_ingredients(X: np.ndarray, vocab: VisualVocabulary) -> np.ndarray:
    """Vectorized nearest-center assignment for a batch of token vectors."""
    return _pairwise_sq_dists(np.asarray(X, dtype=np.float64), vocab.centers).argmin(axis=1)


def occurrence_map(indices: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(indices, kind="stable")
    sorted_idx = indices[order]
    out: dict[int, np.ndarray] = {}
    start = 0
    for i in range(1, len(sorted_idx) + 1):
        if i == len(sorted_idx) or sorted_idx[i] != sorted_idx[start]:
            out[int(sorted_idx[start])] = np.sort(order[start:i])
            start = i
    return out


def discretize_record(rec: FeatureRecord, vocab: VisualVocabulary) -> DiscretizedSequence:
    """Map each visual token (aux rows dropped) to its ingredient index."""
    visual = np.asarray(rec.X[rec.zeta :], dtype=np.float64)
    if visual.shape[1] != vocab.d:
        raise ValueError(f"record d={visual.shape[1]} but vocabulary d={vocab.d}")
    indices = assign_ingredients(visual, vocab)
    return DiscretizedSequence(
        indices=indices,
        occurrences=occurrence_map(indices),
        grid_h=rec.grid_h,
        grid_w=rec.grid_w,
        token_positions=rec.positions(),
    )


def probe_tokens(records, zeta: int, limit: int = DEFAULT_PROBE_LIMIT, rng: SeededRng | None = None) -> np.ndarray:
    """Visual tokens from a probe subset: all records when few, else a seeded sample."""
    records = list(records)
    if len(records) > limit:
        if rng is None:
            rng = SeededRng(0)
        pick = rng.permutation(len(records))[:limit]
        records = [records[i] for i in sorted(pick)]
    return np.concatenate([np.asarray(r.X[zeta:], dtype=np.float64) for r in records], axis=0)


_FP_STRUCT = struct.Struct("<QQI")


def save_vocabulary(path, vocab: VisualVocabulary) -> None:
    with open(path, "wb") as f:
        f.write(VOCAB_MAGIC)
        f.write(struct.pack("<III", VOCAB_VERSION, vocab.M, vocab.d))
        f.write(np.ascontiguousarray(vocab.centers, dtype="<f4").tobytes())
        fp = vocab.fingerprint
        f.write(_FP_STRUCT.pack(fp.probe_size, fp.seed, fp.layer_index))


def load_vocabulary(path) -> VisualVocabulary:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != VOCAB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {VOCAB_MAGIC!r}")
        version, M, d = struct.unpack("<III", _read_exact(f, 12, "vocabulary header"))
        if version != VOCAB_VERSION:
            raise FormatError(f"unsupported vocabulary version {version}")
        centers = np.frombuffer(_read_exact(f, 4 * M * d, "centers"), dtype="<f4").reshape(M, d)
        ps, seed, layer = _FP_STRUCT.unpack(_read_exact(f, _FP_STRUCT.size, "fingerprint"))
    return VisualVocabulary(
        centers=centers.astype(np.float64),
        fingerprint=Fingerprint(probe_size=ps, seed=seed, layer_index=layer),
    )
