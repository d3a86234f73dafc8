"""Ingredient-relation graphs and the per-class atlas.

An IRGraph stores nonnegative vertex weights over sorted ingredient ids and a
symmetric, hollow edge set kept once per pair (u < v). Category graphs are the
trainable class imaginations; the atlas groups one per class together with the
sparsification threshold and the vocabulary fingerprint they were built from.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .feature_io import FormatError, ValidationError, _read_exact
from .vocabulary import Fingerprint, _FP_STRUCT

GRAPH_MAGIC = b"SNGR"
ATLAS_MAGIC = b"SNAT"
GRAPH_VERSION = 1
ATLAS_VERSION = 1

_EDGE_DTYPE = np.dtype([("u", "<u4"), ("v", "<u4"), ("w", "<f4")])


@dataclass
class IRGraph:
    vertices: np.ndarray  # sorted ingredient ids, int64
    weights: np.ndarray  # float64, aligned with vertices
    edge_u: np.ndarray  # ingredient ids with edge_u < edge_v
    edge_v: np.ndarray
    edge_w: np.ndarray  # float64
    kind: str = "instance"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.edge_u = np.asarray(self.edge_u, dtype=np.int64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.int64)
        self.edge_w = np.asarray(self.edge_w, dtype=np.float64)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_u.shape[0]

    def local(self, ids: np.ndarray) -> np.ndarray:
        """Positions of ingredient ids within the sorted vertex array."""
        pos = np.searchsorted(self.vertices, ids)
        if np.any(pos >= self.n_vertices) or np.any(self.vertices[pos] != ids):
            raise ValueError("edge endpoint not present in vertex set")
        return pos

    def dense_adjacency(self) -> np.ndarray:
        """Symmetric |V| x |V| weight matrix with a zero diagonal, local indexing."""
        a = np.zeros((self.n_vertices, self.n_vertices), dtype=np.float64)
        if self.n_edges:
            lu = self.local(self.edge_u)
            lv = self.local(self.edge_v)
            a[lu, lv] = self.edge_w
            a[lv, lu] = self.edge_w
        return a

    def copy(self) -> "IRGraph":
        return IRGraph(
            vertices=self.vertices.copy(),
            weights=self.weights.copy(),
            edge_u=self.edge_u.copy(),
            edge_v=self.edge_v.copy(),
            edge_w=self.edge_w.copy(),
            kind=self.kind,
        )

    def validate(self) -> None:
        if np.any(self.weights < 0) or np.any(self.edge_w < 0):
            raise ValidationError("graph weights must be nonnegative")
        if np.any(np.diff(self.vertices) <= 0):
            raise ValidationError("vertices must be strictly increasing")
        if np.any(self.edge_u >= self.edge_v):
            raise ValidationError("edges must be stored upper-triangular (u < v)")
        self.local(self.edge_u)
        self.local(self.edge_v)


def dense_to_graph(vertices: np.ndarray, weights: np.ndarray, adj: np.ndarray, kind: str = "instance") -> IRGraph:
    """Build an IRGraph from a dense symmetric adjacency, keeping every upper pair."""
    k = vertices.shape[0]
    iu, iv = np.triu_indices(k, 1)
    return IRGraph(
        vertices=vertices,
        weights=weights,
        edge_u=vertices[iu],
        edge_v=vertices[iv],
        edge_w=adj[iu, iv],
        kind=kind,
    )


@dataclass
class IRAtlas:
    graphs: list[IRGraph]
    M: int
    delta_t: float = 0.01
    fingerprint: Fingerprint = field(default_factory=Fingerprint)

    @property
    def class_count(self) -> int:
        return len(self.graphs)


def average_init(
    grouped: dict[int, list[IRGraph]],
    M: int,
    delta_t: float = 0.01,
    fingerprint: Fingerprint | None = None,
    max_vertices: int | None = None,
) -> IRAtlas:
    """Initialize the atlas by class-wise averaging of normalized instance graphs.

    Per class the vertex support is the union across instances; a weight absent
    from an instance contributes zero to its mean, and likewise for edges.
    """
    if not grouped:
        raise ValueError("no classes to initialize from")
    C = max(grouped) + 1
    graphs: list[IRGraph] = []
    for c in range(C):
        members = grouped.get(c, [])
        if not members:
            raise ValueError(f"class {c} has no instance graphs")
        union = np.unique(np.concatenate([g.vertices for g in members]))
        lam = np.zeros(union.shape[0], dtype=np.float64)
        edge_sum: dict[tuple[int, int], float] = {}
        for g in members:
            if abs(g.weights.sum() - 1.0) > 1e-6:
                raise ValidationError("average_init expects normalized instance graphs")
            lam[np.searchsorted(union, g.vertices)] += g.weights
            for u, v, w in zip(g.edge_u, g.edge_v, g.edge_w):
                if w != 0.0:
                    key = (int(u), int(v))
                    edge_sum[key] = edge_sum.get(key, 0.0) + float(w)
        k = float(len(members))
        lam /= k
        if edge_sum:
            keys = sorted(edge_sum)
            eu = np.array([u for u, _ in keys], dtype=np.int64)
            ev = np.array([v for _, v in keys], dtype=np.int64)
            ew = np.array([edge_sum[key] / k for key in keys], dtype=np.float64)
        else:
            eu = ev = np.zeros(0, dtype=np.int64)
            ew = np.zeros(0, dtype=np.float64)
        graph = IRGraph(vertices=union, weights=lam, edge_u=eu, edge_v=ev, edge_w=ew, kind="category")
        if max_vertices is not None and graph.n_vertices > max_vertices:
            graph = cap_vertices(graph, max_vertices)
        graphs.append(graph)
    return IRAtlas(graphs=graphs, M=M, delta_t=delta_t, fingerprint=fingerprint or Fingerprint())


def cap_vertices(graph: IRGraph, max_vertices: int) -> IRGraph:
    """Keep the max_vertices heaviest vertices (ties to the lower id) and their edges."""
    order = np.lexsort((graph.vertices, -graph.weights))
    keep_ids = np.sort(graph.vertices[order[:max_vertices]])
    vmask = np.isin(graph.vertices, keep_ids)
    emask = np.isin(graph.edge_u, keep_ids) & np.isin(graph.edge_v, keep_ids)
    return IRGraph(
        vertices=graph.vertices[vmask],
        weights=graph.weights[vmask],
        edge_u=graph.edge_u[emask],
        edge_v=graph.edge_v[emask],
        edge_w=graph.edge_w[emask],
        kind=graph.kind,
    )


@dataclass
class PruneReport:
    removed_per_class: dict[int, int]
    kept_masks: dict[int, np.ndarray]

    @property
    def total_removed(self) -> int:
        return sum(self.removed_per_class.values())


def sparsify(atlas: IRAtlas, delta_t: float | None = None) -> tuple[IRAtlas, PruneReport]:
    """Drop every edge with an endpoint whose normalized vertex weight is below delta_t.

    Vertices are retained (their weights may still train back up); the report
    carries the per-class kept masks so optimizer state can be filtered in step.
    Idempotent at a fixed threshold. Mutates the atlas in place.
    """
    if delta_t is None:
        delta_t = atlas.delta_t
    removed: dict[int, int] = {}
    masks: dict[int, np.ndarray] = {}
    for c, g in enumerate(atlas.graphs):
        total = g.weights.sum()
        norm = g.weights / total if total > 0 else g.weights
        light = g.vertices[norm < delta_t]
        keep = ~(np.isin(g.edge_u, light) | np.isin(g.edge_v, light))
        removed[c] = int((~keep).sum())
        masks[c] = keep
        if removed[c]:
            g.edge_u = g.edge_u[keep]
            g.edge_v = g.edge_v[keep]
            g.edge_w = g.edge_w[keep]
    return atlas, PruneReport(removed_per_class=removed, kept_masks=masks)


def entropy(x: np.ndarray) -> float:
    """Entropy of x normalized by its sum, with 0*ln(0) = 0; an all-zero x gives 0."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("entropy requires nonnegative components")
    s = x.sum()
    if s == 0.0 or x.size == 0:
        return 0.0
    p = x / s
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def entropy_grad(x: np.ndarray) -> np.ndarray:
    """d entropy / dx; zero entries get the zero subgradient (boundary of the domain)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    s = x.sum()
    if s == 0.0 or x.size == 0:
        return g
    nz = x > 0
    p = x[nz] / s
    h = -np.sum(p * np.log(p))
    g[nz] = -(np.log(p) + h) / s
    return g


def incident_edges(graph: IRGraph) -> list[np.ndarray]:
    """Edge-index list per local vertex (each stored edge appears at both endpoints)."""
    lists: list[list[int]] = [[] for _ in range(graph.n_vertices)]
    if graph.n_edges:
        lu = graph.local(graph.edge_u)
        lv = graph.local(graph.edge_v)
        for k in range(graph.n_edges):
            lists[lu[k]].append(k)
            lists[lv[k]].append(k)
    return [np.asarray(ix, dtype=np.int64) for ix in lists]


def atlas_regularizers(atlas: IRAtlas) -> tuple[float, float]:
    """Mean vertex-weight entropy and mean per-vertex incident-edge entropy."""
    C = atlas.class_count
    l_v = sum(entropy(g.weights) for g in atlas.graphs) / C
    l_e = 0.0
    for g in atlas.graphs:
        if g.n_vertices == 0:
            continue
        inc = incident_edges(g)
        l_e += sum(entropy(g.edge_w[ix]) for ix in inc) / g.n_vertices
    return l_v, l_e / C


def atlas_regularizer_grads(atlas: IRAtlas, gamma_v: float, gamma_e: float):
    """Gradients of gamma_v * L_v + gamma_e * L_e w.r.t. each class's raw weights."""
    C = atlas.class_count
    out = []
    for g in atlas.graphs:
        dlam = (gamma_v / C) * entropy_grad(g.weights)
        dedge = np.zeros_like(g.edge_w)
        if g.n_vertices and gamma_e != 0.0:
            scale = gamma_e / (C * g.n_vertices)
            for ix in incident_edges(g):
                if ix.size:
                    dedge[ix] += scale * entropy_grad(g.edge_w[ix])
        out.append((dlam, dedge))
    return out


def extend_atlas(atlas: IRAtlas, grouped_new: dict[int, list[IRGraph]], max_vertices: int | None = None) -> IRAtlas:
    """Append freshly averaged class graphs; existing class graphs are untouched.

    New class indices must continue the existing range C, C+1, ...; a collision
    with an existing index is an error.
    """
    C = atlas.class_count
    if not grouped_new:
        return IRAtlas(
            graphs=[g.copy() for g in atlas.graphs],
            M=atlas.M,
            delta_t=atlas.delta_t,
            fingerprint=atlas.fingerprint,
        )
    for c in grouped_new:
        if c < C:
            raise ValueError(f"class index {c} collides with an existing class")
    expected = set(range(C, C + len(grouped_new)))
    if set(grouped_new) != expected:
        raise ValueError(f"new class indices must be exactly {sorted(expected)}")
    shifted = {c - C: gs for c, gs in grouped_new.items()}
    fresh = average_init(shifted, M=atlas.M, delta_t=atlas.delta_t, max_vertices=max_vertices)
    return IRAtlas(
        graphs=[g.copy() for g in atlas.graphs] + fresh.graphs,
        M=atlas.M,
        delta_t=atlas.delta_t,
        fingerprint=atlas.fingerprint,
    )


def _write_graph_blob(f, g: IRGraph) -> None:
    f.write(struct.pack("<I", g.n_vertices))
    f.write(np.ascontiguousarray(g.vertices, dtype="<u4").tobytes())
    f.write(np.ascontiguousarray(g.weights, dtype="<f4").tobytes())
    f.write(struct.pack("<I", g.n_edges))
    triples = np.empty(g.n_edges, dtype=_EDGE_DTYPE)
    triples["u"] = g.edge_u
    triples["v"] = g.edge_v
    triples["w"] = g.edge_w
    f.write(triples.tobytes())


def _read_graph_blob(f, kind: str) -> IRGraph:
    (nv,) = struct.unpack("<I", _read_exact(f, 4, "vertex count"))
    vertices = np.frombuffer(_read_exact(f, 4 * nv, "vertex ids"), dtype="<u4").astype(np.int64)
    weights = np.frombuffer(_read_exact(f, 4 * nv, "vertex weights"), dtype="<f4").astype(np.float64)
    (ne,) = struct.unpack("<I", _read_exact(f, 4, "edge count"))
    triples = np.frombuffer(_read_exact(f, _EDGE_DTYPE.itemsize * ne, "edges"), dtype=_EDGE_DTYPE)
    return IRGraph(
        vertices=vertices,
        weights=weights,
        edge_u=triples["u"].astype(np.int64),
        edge_v=triples["v"].astype(np.int64),
        edge_w=triples["w"].astype(np.float64),
        kind=kind,
    )


def save_instance_graphs(path, graphs: list[IRGraph], labels, image_ids, M: int) -> None:
    with open(path, "wb") as f:
        f.write(GRAPH_MAGIC)
        f.write(struct.pack("<III", GRAPH_VERSION, len(graphs), M))
        for g, label, image_id in zip(graphs, labels, image_ids):
            f.write(struct.pack("<QI", int(image_id), int(label)))
            _write_graph_blob(f, g)


def load_instance_graphs(path) -> tuple[list[IRGraph], np.ndarray, np.ndarray, int]:
    """Returns (graphs, labels, image_ids, M)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != GRAPH_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {GRAPH_MAGIC!r}")
        version, count, M = struct.unpack("<III", _read_exact(f, 12, "graph file header"))
        if version != GRAPH_VERSION:
            raise FormatError(f"unsupported graph file version {version}")
        graphs, labels, ids = [], [], []
        for _ in range(count):
            image_id, label = struct.unpack("<QI", _read_exact(f, 12, "graph record prefix"))
            graphs.append(_read_graph_blob(f, "instance"))
            labels.append(label)
            ids.append(image_id)
    return graphs, np.asarray(labels, dtype=np.int64), np.asarray(ids, dtype=np.uint64), M


def save_atlas(path, atlas: IRAtlas) -> None:
    with open(path, "wb") as f:
        f.write(ATLAS_MAGIC)
        f.write(struct.pack("<IIIf", ATLAS_VERSION, atlas.class_count, atlas.M, atlas.delta_t))
        fp = atlas.fingerprint
        f.write(_FP_STRUCT.pack(fp.probe_size, fp.seed, fp.layer_index))
        for g in atlas.graphs:
            _write_graph_blob(f, g)


def load_atlas(path) -> IRAtlas:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != ATLAS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {ATLAS_MAGIC!r}")
        version, C, M, delta_t = struct.unpack("<IIIf", _read_exact(f, 16, "atlas header"))
        if version != ATLAS_VERSION:
            raise FormatError(f"unsupported atlas version {version}")
        ps, seed, layer = _FP_STRUCT.unpack(_read_exact(f, _FP_STRUCT.size, "fingerprint"))
        graphs = [_read_graph_blob(f, "category") for _ in range(C)]
    return IRAtlas(
        graphs=graphs,
        M=M,
        delta_t=float(delta_t),
        fingerprint=Fingerprint(probe_size=ps, seed=seed, layer_index=layer),
    )
