"""Record-to-graph conversion: attention partition, vertex weights, edge weights,
and graph normalization.

Edge aggregation is the hot path. Both edge components reduce to block sums of
an n x n matrix over occurrence groups, so they are computed as one-hot grouped
matmuls (P^T A P) instead of looping over position pairs; the inverse-distance
matrix is cached per grid shape. The per-component aggregates (lam_cls, lam_bag,
attn_comp, adj_comp) are exposed so the matcher's backward pass can produce
exact gradients for the four mixing scalars through the normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atlas import IRGraph, dense_to_graph
from .feature_io import FeatureRecord, ValidationError
from .vocabulary import DiscretizedSequence, VisualVocabulary, discretize_record


@dataclass
class Feat2GraphParams:
    """Mixing scalars for vertex (alpha) and edge (beta) components; all >= 0."""

    alpha1: float = 0.5
    alpha2: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.5
    epsilon: float = 1.0

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.beta1, self.beta2) < 0:
            raise ValueError("mixing scalars must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class AttentionViews:
    """Symmetrized attention and its blocks: aux-aux, aux-visual, visual-visual."""

    Psi: np.ndarray
    PsiStar: np.ndarray
    PsiA: np.ndarray
    PsiV: np.ndarray
    psi_cls: np.ndarray


def attention_views(rec: FeatureRecord) -> AttentionViews:
    """Symmetrize the head-averaged attention and slice the block partition."""
    bar = np.asarray(rec.attn, dtype=np.float64)
    psi = 0.5 * (bar + bar.T)
    z = rec.zeta
    return AttentionViews(
        Psi=psi,
        PsiStar=psi[:z, :z],
        PsiA=psi[:z, z:],
        PsiV=psi[z:, z:],
        psi_cls=psi[0, z:].copy(),
    )


def pos(i: int, grid_h: int, grid_w: int) -> tuple[int, int]:
    """2-D patch coordinate of visual-token index i, row-major over the grid."""
    if not 0 <= i < grid_h * grid_w:
        raise ValueError(f"token index {i} outside grid {grid_h}x{grid_w}")
    return (i // grid_w, i % grid_w)


_INV_DIST_CACHE: dict[tuple[int, int, float], np.ndarray] = {}


def _inv_distance_full(grid_h: int, grid_w: int, epsilon: float) -> np.ndarray:
    key = (grid_h, grid_w, epsilon)
    cached = _INV_DIST_CACHE.get(key)
    if cached is None:
        idx = np.arange(grid_h * grid_w)
        coords = np.stack([idx // grid_w, idx % grid_w], axis=1).astype(np.float64)
        diff = coords[:, None, :] - coords[None, :, :]
        cached = 1.0 / (epsilon + np.sqrt((diff * diff).sum(axis=2)))
        _INV_DIST_CACHE[key] = cached
    return cached


@dataclass
class VertexWeights:
    vertices: np.ndarray
    lam: np.ndarray
    lam_cls: np.ndarray
    lam_bag: np.ndarray


@dataclass
class EdgeWeights:
    vertices: np.ndarray
    e: np.ndarray  # |V| x |V| symmetric hollow
    attn_comp: np.ndarray
    adj_comp: np.ndarray


def _one_hot(seq: DiscretizedSequence, vertices: np.ndarray) -> np.ndarray:
    p = np.zeros((seq.n, vertices.shape[0]), dtype=np.float64)
    p[np.arange(seq.n), np.searchsorted(vertices, seq.indices)] = 1.0
    return p


def feat2vertex(seq: DiscretizedSequence, views: AttentionViews, params: Feat2GraphParams) -> VertexWeights:
    """Raw vertex weights: alpha1 * attention-to-CLS mass + alpha2 * occurrence count."""
    vertices = np.unique(seq.indices)
    lam_cls = np.zeros(vertices.shape[0], dtype=np.float64)
    lam_bag = np.zeros(vertices.shape[0], dtype=np.float64)
    for j, v in enumerate(vertices):
        occ = seq.occurrences[int(v)]
        lam_cls[j] = views.psi_cls[occ].sum()
        lam_bag[j] = occ.shape[0]
    return VertexWeights(
        vertices=vertices,
        lam=params.alpha1 * lam_cls + params.alpha2 * lam_bag,
        lam_cls=lam_cls,
        lam_bag=lam_bag,
    )


def feat2edge(seq: DiscretizedSequence, views: AttentionViews, params: Feat2GraphParams) -> EdgeWeights:
    """Raw edge weights per distinct vertex pair.

    Each component is the mean over all occurrence pairs of, respectively, the
    visual-visual attention and the inverse patch distance; both are block
    means of an n x n matrix, computed as grouped matmuls.
    """
    vertices = np.unique(seq.indices)
    p = _one_hot(seq, vertices)
    counts = p.sum(axis=0)
    pair_counts = np.outer(counts, counts)

    attn_sum = p.T @ views.PsiV @ p
    d_full = _inv_distance_full(seq.grid_h, seq.grid_w, params.epsilon)
    d = d_full[np.ix_(seq.token_positions, seq.token_positions)]
    adj_sum = p.T @ d @ p

    attn_comp = attn_sum / pair_counts
    adj_comp = adj_sum / pair_counts
    np.fill_diagonal(attn_comp, 0.0)
    np.fill_diagonal(adj_comp, 0.0)
    return EdgeWeights(
        vertices=vertices,
        e=params.beta1 * attn_comp + params.beta2 * adj_comp,
        attn_comp=attn_comp,
        adj_comp=adj_comp,
    )


@dataclass
class NormTrace:
    """Forward cache of graph normalization, enough to backprop exactly through it."""

    lam_raw: np.ndarray
    lam_sum: float
    lam_norm: np.ndarray
    e_raw: np.ndarray
    row_sums: np.ndarray
    e_norm: np.ndarray
    e_sym: np.ndarray


def normalize_dense(lam_raw: np.ndarray, e_raw: np.ndarray) -> NormTrace:
    """Vertex weights to the simplex; edges row-normalized then symmetrized.

    Zero-sum rows stay zero rows (isolated vertices after pruning); an all-zero
    vertex weight vector is a degenerate graph and raises.
    """
    s = float(lam_raw.sum())
    if s <= 0.0:
        raise ValidationError("degenerate graph: vertex weights sum to zero")
    lam_norm = lam_raw / s
    row_sums = e_raw.sum(axis=1)
    e_norm = np.divide(
        e_raw, row_sums[:, None], out=np.zeros_like(e_raw), where=row_sums[:, None] > 0
    )
    e_sym = 0.5 * (e_norm + e_norm.T)
    return NormTrace(
        lam_raw=lam_raw, lam_sum=s, lam_norm=lam_norm,
        e_raw=e_raw, row_sums=row_sums, e_norm=e_norm, e_sym=e_sym,
    )


def normalize_backward(trace: NormTrace, dlam_norm: np.ndarray, de_sym: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact adjoints of normalize_dense w.r.t. the raw weights."""
    dlam_raw = (dlam_norm - float(dlam_norm @ trace.lam_norm)) / trace.lam_sum
    de_norm = 0.5 * (de_sym + de_sym.T)
    inner = (de_norm * trace.e_norm).sum(axis=1, keepdims=True)
    de_raw = np.divide(
        de_norm - inner,
        trace.row_sums[:, None],
        out=np.zeros_like(de_norm),
        where=trace.row_sums[:, None] > 0,
    )
    np.fill_diagonal(de_raw, 0.0)
    return dlam_raw, de_raw


def normalize_graph(raw: IRGraph) -> IRGraph:
    """Normalized copy of a raw graph: weights on the simplex, edges row-stochastic
    then symmetrized."""
    if np.any(raw.weights < 0) or np.any(raw.edge_w < 0):
        raise ValidationError("normalize_graph expects nonnegative raw weights")
    trace = normalize_dense(raw.weights, raw.dense_adjacency())
    return dense_to_graph(raw.vertices, trace.lam_norm, trace.e_sym, kind=raw.kind)


@dataclass
class InstanceComponents:
    """Per-record aggregates that do not depend on the mixing scalars."""

    vertices: np.ndarray
    lam_cls: np.ndarray
    lam_bag: np.ndarray
    attn_comp: np.ndarray
    adj_comp: np.ndarray
    label: int
    image_id: int


def instance_components(rec: FeatureRecord, vocab: VisualVocabulary, epsilon: float = 1.0) -> InstanceComponents:
    seq = discretize_record(rec, vocab)
    views = attention_views(rec)
    params = Feat2GraphParams(epsilon=epsilon)
    vw = feat2vertex(seq, views, params)
    ew = feat2edge(seq, views, params)
    return InstanceComponents(
        vertices=vw.vertices,
        lam_cls=vw.lam_cls,
        lam_bag=vw.lam_bag,
        attn_comp=ew.attn_comp,
        adj_comp=ew.adj_comp,
        label=rec.label,
        image_id=rec.image_id,
    )


def assemble_raw(comp: InstanceComponents, params: Feat2GraphParams) -> tuple[np.ndarray, np.ndarray]:
    lam_raw = params.alpha1 * comp.lam_cls + params.alpha2 * comp.lam_bag
    e_raw = params.beta1 * comp.attn_comp + params.beta2 * comp.adj_comp
    return lam_raw, e_raw


def components_to_graph(comp: InstanceComponents, params: Feat2GraphParams) -> IRGraph:
    lam_raw, e_raw = assemble_raw(comp, params)
    trace = normalize_dense(lam_raw, e_raw)
    return dense_to_graph(comp.vertices, trace.lam_norm, trace.e_sym, kind="instance")


def feat2graph(rec: FeatureRecord, vocab: VisualVocabulary, params: Feat2GraphParams) -> IRGraph:
    """Full conversion: discretize, weight vertices and edges, normalize."""
    return components_to_graph(instance_components(rec, vocab, params.epsilon), params)
