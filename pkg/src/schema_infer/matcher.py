"""Graph matcher: shared ingredient embeddings, a shallow graph-convolution stack,
weighted average pooling, inner-product logits, the full training loss with
exact hand-rolled gradients, and the evidence decomposition of a logit.

Instance and category graphs pass through the same embedding table and the
same layer weights; a logit is the inner product of the two pooled vectors,
which expands into a double sum of per-vertex-pair evidence terms. Every
trainable tensor (embeddings, layer weights, norm parameters, category vertex
and edge weights, and the four mixing scalars) gets an analytic gradient that
is verified against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .atlas import (
    IRAtlas,
    IRGraph,
    atlas_regularizer_grads,
    atlas_regularizers,
    average_init,
    sparsify,
)
from .feat2graph import (
    Feat2GraphParams,
    InstanceComponents,
    NormTrace,
    assemble_raw,
    instance_components,
    normalize_backward,
    normalize_dense,
)
from .feature_io import FeatureRecord, FormatError, _read_exact
from .numerics import (
    LAYER_NORM_EPS,
    AdamWState,
    CosineSchedule,
    SeededRng,
    adamw_step,
    parallel_map,
)
from .vocabulary import VisualVocabulary

PARAMS_MAGIC = b"SNMP"
PARAMS_VERSION = 1


@dataclass
class LayerParams:
    weight: np.ndarray
    gain: np.ndarray
    bias: np.ndarray


@dataclass
class MatcherParams:
    """All matcher-side trainables. The mixing scalars live here so a single
    optimizer owns every parameter; they are stored as 0-d arrays to allow
    in-place updates through the shared parameter dict."""

    embed: np.ndarray
    layers: list[LayerParams]
    alpha1: np.ndarray
    alpha2: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    epsilon: float = 1.0

    @property
    def M(self) -> int:
        return self.embed.shape[0]

    @property
    def d_G(self) -> int:
        return self.embed.shape[1]

    @property
    def L_G(self) -> int:
        return len(self.layers)

    def feat2graph_params(self) -> Feat2GraphParams:
        return Feat2GraphParams(
            alpha1=float(self.alpha1),
            alpha2=float(self.alpha2),
            beta1=float(self.beta1),
            beta2=float(self.beta2),
            epsilon=self.epsilon,
        )


def init_matcher_params(
    M: int,
    d_G: int,
    L_G: int,
    rng: SeededRng,
    alpha_init: float = 0.5,
    beta_init: float = 0.5,
    epsilon: float = 1.0,
    alpha1_init: float | None = None,
) -> MatcherParams:
    """Embedding rows i.i.d. standard normal; layer weights scaled by 1/sqrt(d_G)."""
    layers = [
        LayerParams(
            weight=rng.normal((d_G, d_G)) / np.sqrt(d_G),
            gain=np.ones(d_G),
            bias=np.zeros(d_G),
        )
        for _ in range(L_G)
    ]
    return MatcherParams(
        embed=rng.normal((M, d_G)),
        layers=layers,
        alpha1=np.asarray(float(alpha_init if alpha1_init is None else alpha1_init)),
        alpha2=np.asarray(float(alpha_init)),
        beta1=np.asarray(float(beta_init)),
        beta2=np.asarray(float(beta_init)),
        epsilon=epsilon,
    )


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 5e-4
    gamma_v: float = 0.5
    gamma_e: float = 0.75
    delta_t: float = 0.01
    layers: int = 2
    dim: int = 256
    seed: int = 0
    epsilon: float = 1.0
    alpha_init: float = 0.5
    beta_init: float = 0.5
    bovw_mode: bool = False
    max_vertices: int | None = None
    threads: int = 1

    def __post_init__(self):
        # bag-of-words configuration: no conv layers, occurrence counts only
        if self.bovw_mode:
            self.layers = 0


# ---------------------------------------------------------------------------
# graph-conv stack


@dataclass
class GraphTrace:
    """Forward cache for one graph through the stack, kept for backward/explain."""

    vertices: np.ndarray
    lam_norm: np.ndarray
    e_sym: np.ndarray
    feats: list[np.ndarray]  # F^0 .. F^L
    projs: list[np.ndarray]  # G_l = F^(l-1) W_l
    preacts: list[np.ndarray]  # H_l = (I + E) G_l
    xhats: list[np.ndarray]
    invstds: list[np.ndarray]
    z: np.ndarray
    norm: NormTrace | None = None  # set for graphs normalized inside the matcher


def _ln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mean) * invstd
    return xhat * gain + bias, xhat, invstd


def _ln_backward(dout, xhat, invstd, gain):
    dgain = (dout * xhat).sum(axis=0)
    dbias = dout.sum(axis=0)
    dxhat = dout * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = invstd * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def graph_conv(F: np.ndarray, e_dense: np.ndarray, layer: LayerParams) -> np.ndarray:
    """One convolution layer: row layer-norm of relu((I + E) F W).

    The identity is the vertex-space self-loop, so each vertex keeps its own
    feature alongside the edge-weighted neighbor aggregate."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != layer.weight.shape[0]:
        raise ValueError(f"feature shape {F.shape} incompatible with weight {layer.weight.shape}")
    if e_dense.shape != (F.shape[0], F.shape[0]):
        raise ValueError(f"adjacency shape {e_dense.shape} must be ({F.shape[0]}, {F.shape[0]})")
    g = F @ layer.weight
    h = g + e_dense @ g
    out, _, _ = _ln_forward(np.maximum(h, 0.0), layer.gain, layer.bias)
    return out


def _stack_forward(vertices: np.ndarray, lam_norm: np.ndarray, e_sym: np.ndarray, params: MatcherParams) -> GraphTrace:
    if vertices.size and int(vertices.max()) >= params.M:
        raise ValueError(f"vertex id {int(vertices.max())} outside embedding table of size {params.M}")
    f = params.embed[vertices]
    feats, projs, preacts, xhats, invstds = [f], [], [], [], []
    for lay in params.layers:
        g = feats[-1] @ lay.weight
        h = g + e_sym @ g
        r = np.maximum(h, 0.0)
        out, xhat, invstd = _ln_forward(r, lay.gain, lay.bias)
        projs.append(g)
        preacts.append(h)
        xhats.append(xhat)
        invstds.append(invstd)
        feats.append(out)
    z = lam_norm @ feats[-1]
    return GraphTrace(
        vertices=vertices, lam_norm=lam_norm, e_sym=e_sym,
        feats=feats, projs=projs, preacts=preacts, xhats=xhats, invstds=invstds, z=z,
    )


def _stack_backward(trace: GraphTrace, dz: np.ndarray, params: MatcherParams, grads: dict[str, np.ndarray]):
    """Backprop dz through pooling and the stack; returns (dlam_norm, de_sym)."""
    dlam_norm = trace.feats[-1] @ dz
    df = np.outer(trace.lam_norm, dz)
    de_sym = np.zeros_like(trace.e_sym)
    for l in range(len(params.layers) - 1, -1, -1):
        lay = params.layers[l]
        dr, dgain, dbias = _ln_backward(df, trace.xhats[l], trace.invstds[l], lay.gain)
        grads[f"gain{l}"] += dgain
        grads[f"bias{l}"] += dbias
        dh = dr * (trace.preacts[l] > 0)
        de_sym += dh @ trace.projs[l].T
        dg = dh + trace.e_sym @ dh
        grads[f"W{l}"] += trace.feats[l].T @ dg
        df = dg @ lay.weight.T
    grads["embed"][trace.vertices] += df
    np.fill_diagonal(de_sym, 0.0)
    return dlam_norm, de_sym


def _check_normalized(g: IRGraph) -> None:
    if abs(g.weights.sum() - 1.0) > 1e-6:
        raise ValueError("graph is not normalized: vertex weights must sum to 1")


def embed_graph(g: IRGraph, params: MatcherParams) -> np.ndarray:
    """Pooled representation of a normalized graph: weighted average of the
    final-layer vertex features."""
    _check_normalized(g)
    return _stack_forward(g.vertices, g.weights, g.dense_adjacency(), params).z


def _category_trace(g: IRGraph, params: MatcherParams) -> GraphTrace:
    norm = normalize_dense(g.weights, g.dense_adjacency())
    trace = _stack_forward(g.vertices, norm.lam_norm, norm.e_sym, params)
    trace.norm = norm
    return trace


@dataclass
class ForwardTrace:
    instance: GraphTrace
    categories: list[GraphTrace]
    logits: np.ndarray


def forward(instance: IRGraph, atlas: IRAtlas, params: MatcherParams) -> tuple[np.ndarray, ForwardTrace]:
    """Logits over all classes: inner products of the pooled instance vector with
    each pooled (normalized) category vector."""
    _check_normalized(instance)
    inst = _stack_forward(instance.vertices, instance.weights, instance.dense_adjacency(), params)
    cats = [_category_trace(g, params) for g in atlas.graphs]
    logits = np.array([float(c.z @ inst.z) for c in cats])
    return logits, ForwardTrace(instance=inst, categories=cats, logits=logits)


# ---------------------------------------------------------------------------
# loss and gradients


@dataclass
class LossBreakdown:
    total: float
    cross_entropy: float
    vertex_term: float  # gamma_v * L_v
    edge_term: float  # gamma_e * L_e


def trainable_dict(params: MatcherParams, atlas: IRAtlas) -> dict[str, np.ndarray]:
    """Live views of every trainable tensor, shared with the model objects."""
    out = {
        "embed": params.embed,
        "alpha1": params.alpha1,
        "alpha2": params.alpha2,
        "beta1": params.beta1,
        "beta2": params.beta2,
    }
    for l, lay in enumerate(params.layers):
        out[f"W{l}"] = lay.weight
        out[f"gain{l}"] = lay.gain
        out[f"bias{l}"] = lay.bias
    for c, g in enumerate(atlas.graphs):
        out[f"atlas{c}:lam"] = g.weights
        out[f"atlas{c}:edge"] = g.edge_w
    return out


def zero_grads(params: MatcherParams, atlas: IRAtlas) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in trainable_dict(params, atlas).items()}


def _softmax_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max()
    lse = float(np.log(np.exp(shifted).sum()))
    loss = lse - float(shifted[label])
    p = np.exp(shifted - lse)
    dy = p.copy()
    dy[label] -= 1.0
    return loss, dy


def _instance_forward(comp: InstanceComponents, params: MatcherParams):
    lam_raw, e_raw = assemble_raw(comp, params.feat2graph_params())
    norm = normalize_dense(lam_raw, e_raw)
    trace = _stack_forward(comp.vertices, norm.lam_norm, norm.e_sym, params)
    trace.norm = norm
    return trace


def _loss_and_grads_components(
    comps: list[InstanceComponents],
    atlas: IRAtlas,
    params: MatcherParams,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, dict[str, np.ndarray], np.ndarray]:
    """Batch loss/gradients from precomputed per-record components.

    Returns the loss breakdown, gradient dict, and the batch's predicted labels.
    Category graphs are embedded once per batch; their pooled-vector adjoints
    accumulate over the records and are pushed back in a single pass per class.
    """
    grads = zero_grads(params, atlas)
    cats = [_category_trace(g, params) for g in atlas.graphs]
    zhat = np.stack([c.z for c in cats])
    batch = len(comps)
    dzhat = np.zeros_like(zhat)
    ce_sum = 0.0
    preds = np.empty(batch, dtype=np.int64)

    for i, comp in enumerate(comps):
        inst = _instance_forward(comp, params)
        logits = zhat @ inst.z
        preds[i] = int(np.argmax(logits))
        loss_i, dy = _softmax_ce(logits, comp.label)
        ce_sum += loss_i
        dy /= batch
        dzhat += np.outer(dy, inst.z)
        dz_inst = zhat.T @ dy
        dlam_norm, de_sym = _stack_backward(inst, dz_inst, params, grads)
        dlam_raw, de_raw = normalize_backward(inst.norm, dlam_norm, de_sym)
        grads["alpha1"] += comp.lam_cls @ dlam_raw
        grads["alpha2"] += comp.lam_bag @ dlam_raw
        grads["beta1"] += float((comp.attn_comp * de_raw).sum())
        grads["beta2"] += float((comp.adj_comp * de_raw).sum())

    for c, cat in enumerate(cats):
        dlam_norm, de_sym = _stack_backward(cat, dzhat[c], params, grads)
        dlam_raw, de_raw = normalize_backward(cat.norm, dlam_norm, de_sym)
        grads[f"atlas{c}:lam"] += dlam_raw
        g = atlas.graphs[c]
        if g.n_edges:
            lu = g.local(g.edge_u)
            lv = g.local(g.edge_v)
            grads[f"atlas{c}:edge"] += de_raw[lu, lv] + de_raw[lv, lu]

    l_v, l_e = atlas_regularizers(atlas)
    for c, (dlam, dedge) in enumerate(atlas_regularizer_grads(atlas, cfg.gamma_v, cfg.gamma_e)):
        grads[f"atlas{c}:lam"] += dlam
        grads[f"atlas{c}:edge"] += dedge

    if cfg.bovw_mode:
        grads["alpha1"][...] = 0.0

    ce = ce_sum / batch
    breakdown = LossBreakdown(
        total=ce + cfg.gamma_v * l_v + cfg.gamma_e * l_e,
        cross_entropy=ce,
        vertex_term=cfg.gamma_v * l_v,
        edge_term=cfg.gamma_e * l_e,
    )
    return breakdown, grads, preds


def loss_and_grads(
    batch,
    atlas: IRAtlas,
    params: MatcherParams,
    vocab: VisualVocabulary,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch plus the atlas entropy regularizers,
    with exact gradients for every trainable tensor.

    batch items may be FeatureRecords or (record, label) pairs; a pair's label
    overrides the record's own.
    """
    comps = []
    for item in batch:
        if isinstance(item, tuple):
            rec, label = item
        else:
            rec, label = item, item.label
        comp = instance_components(rec, vocab, params.epsilon)
        comp.label = int(label)
        comps.append(comp)
    breakdown, grads, _ = _loss_and_grads_components(comps, atlas, params, cfg)
    return breakdown, grads


# ---------------------------------------------------------------------------
# training loop


def project_nonnegative(params: MatcherParams, atlas: IRAtlas) -> None:
    """Clamp the constrained tensors (mixing scalars, atlas weights) at zero."""
    for arr in (params.alpha1, params.alpha2, params.beta1, params.beta2):
        np.maximum(arr, 0.0, out=arr)
    for g in atlas.graphs:
        np.maximum(g.weights, 0.0, out=g.weights)
        np.maximum(g.edge_w, 0.0, out=g.edge_w)


def build_components(records, vocab: VisualVocabulary, epsilon: float, threads: int = 1) -> list[InstanceComponents]:
    return parallel_map(lambda r: instance_components(r, vocab, epsilon), list(records), threads=threads)


def init_atlas_from_components(
    comps: list[InstanceComponents],
    params: MatcherParams,
    vocab: VisualVocabulary,
    cfg: TrainConfig,
) -> IRAtlas:
    from .feat2graph import components_to_graph

    fp_params = params.feat2graph_params()
    grouped: dict[int, list[IRGraph]] = {}
    for comp in comps:
        grouped.setdefault(comp.label, []).append(components_to_graph(comp, fp_params))
    return average_init(
        grouped,
        M=vocab.M,
        delta_t=cfg.delta_t,
        fingerprint=vocab.fingerprint,
        max_vertices=cfg.max_vertices,
    )


def train(records, vocab: VisualVocabulary, cfg: TrainConfig):
    """Full training: averaged initialization, per-epoch sparsification, shuffled
    mini-batches, AdamW with cosine decay, and nonnegativity projection.

    records is a list of FeatureRecords (or an SNFX path already loaded by the
    caller); labels must cover 0..C-1. Returns (atlas, params, history).
    """
    records = list(records)
    if not records:
        raise ValueError("empty training set")
    labels = np.array([r.label for r in records])
    C = int(labels.max()) + 1
    present = set(labels.tolist())
    missing = [c for c in range(C) if c not in present]
    if missing:
        raise ValueError(f"classes without training instances: {missing}")

    rng = SeededRng(cfg.seed)
    param_rng, shuffle_rng = rng.split(2)
    params = init_matcher_params(
        vocab.M, cfg.dim, cfg.layers, param_rng,
        alpha_init=cfg.alpha_init, beta_init=cfg.beta_init, epsilon=cfg.epsilon,
        alpha1_init=0.0 if cfg.bovw_mode else None,
    )
    comps = build_components(records, vocab, cfg.epsilon, threads=cfg.threads)
    atlas = init_atlas_from_components(comps, params, vocab, cfg)

    n = len(comps)
    batches_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    schedule = CosineSchedule(base=cfg.lr, minimum=cfg.min_lr, total=max(1, cfg.epochs * batches_per_epoch))
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[dict] = []
    step = 0

    for epoch in range(cfg.epochs):
        _, report = sparsify(atlas, cfg.delta_t)
        for c, keep in report.kept_masks.items():
            if not keep.all():
                state.filter(f"atlas{c}:edge", keep)
        order = shuffle_rng.permutation(n)
        ce_sum = 0.0
        loss_sum = 0.0
        v_sum = 0.0
        e_sum = 0.0
        correct = 0
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            chunk = [comps[i] for i in idx]
            breakdown, grads, preds = _loss_and_grads_components(chunk, atlas, params, cfg)
            tensors = trainable_dict(params, atlas)
            adamw_step(state, tensors, grads, lr=schedule.lr(step))
            project_nonnegative(params, atlas)
            step += 1
            ce_sum += breakdown.cross_entropy * idx.size
            loss_sum += breakdown.total * idx.size
            v_sum += breakdown.vertex_term * idx.size
            e_sum += breakdown.edge_term * idx.size
            correct += int((preds == np.array([c.label for c in chunk])).sum())
        history.append(
            {
                "epoch": epoch,
                "loss": loss_sum / n,
                "cross_entropy": ce_sum / n,
                "vertex_term": v_sum / n,
                "edge_term": e_sum / n,
                "train_accuracy": correct / n,
                "lr": schedule.lr(step - 1) if step else cfg.lr,
            }
        )
    return atlas, params, history


# ---------------------------------------------------------------------------
# BoVW mode and evidence decomposition


def bovw_mode_logits(rec: FeatureRecord, atlas: IRAtlas, params: MatcherParams, vocab: VisualVocabulary) -> np.ndarray:
    """Forward pass in the bag-of-visual-words configuration (no conv layers,
    occurrence-count vertex weights). Errors if the parameters are not in that
    configuration."""
    if params.L_G != 0:
        raise ValueError(f"bovw mode requires zero conv layers, got {params.L_G}")
    if float(params.alpha1) != 0.0:
        raise ValueError("bovw mode requires alpha1 = 0")
    from .feat2graph import feat2graph

    graph = feat2graph(rec, vocab, params.feat2graph_params())
    logits, _ = forward(graph, atlas, params)
    return logits


@dataclass
class SharedVertexEvidence:
    ingredient: int
    lam_instance: float
    lam_category: float
    inner: float
    term: float


@dataclass
class CrossTermEvidence:
    category_vertex: int
    instance_vertex: int
    term: float
    shared_neighbors: list[int]


@dataclass
class EvidenceReport:
    class_index: int
    logit: float
    shared: list[SharedVertexEvidence]
    cross_top: list[CrossTermEvidence]
    shared_total: float
    cross_total: float

    @property
    def total(self) -> float:
        return self.shared_total + self.cross_total


def _closed_neighborhoods(g: IRGraph) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {int(v): {int(v)} for v in g.vertices}
    for u, v, w in zip(g.edge_u, g.edge_v, g.edge_w):
        if w != 0.0:
            out[int(u)].add(int(v))
            out[int(v)].add(int(u))
    return out


def explain(
    instance: IRGraph,
    class_index: int,
    atlas: IRAtlas,
    params: MatcherParams,
    top_k: int = 10,
) -> EvidenceReport:
    """Decompose the logit for one class into per-vertex-pair evidence.

    Shared vertices carry the diagonal terms; the remaining cross terms are
    ranked by absolute contribution and annotated with the overlap of the two
    vertices' closed neighborhoods. All terms (reported or not) sum to the
    logit exactly.
    """
    _check_normalized(instance)
    inst = _stack_forward(instance.vertices, instance.weights, instance.dense_adjacency(), params)
    cat_graph = atlas.graphs[class_index]
    cat = _category_trace(cat_graph, params)

    terms = np.outer(cat.lam_norm, inst.lam_norm) * (cat.feats[-1] @ inst.feats[-1].T)
    inst_ids = instance.vertices
    cat_ids = cat_graph.vertices

    shared: list[SharedVertexEvidence] = []
    shared_total = 0.0
    shared_mask = np.zeros_like(terms, dtype=bool)
    common = np.intersect1d(cat_ids, inst_ids)
    for ing in common:
        ui = int(np.searchsorted(cat_ids, ing))
        vi = int(np.searchsorted(inst_ids, ing))
        term = float(terms[ui, vi])
        shared_mask[ui, vi] = True
        shared_total += term
        shared.append(
            SharedVertexEvidence(
                ingredient=int(ing),
                lam_instance=float(inst.lam_norm[vi]),
                lam_category=float(cat.lam_norm[ui]),
                inner=float(cat.feats[-1][ui] @ inst.feats[-1][vi]),
                term=term,
            )
        )
    shared.sort(key=lambda s: -abs(s.term))

    cross_total = float(terms[~shared_mask].sum())
    nb_cat = _closed_neighborhoods(cat_graph)
    nb_inst = _closed_neighborhoods(instance)
    flat = [
        (ui, vi)
        for ui in range(cat_ids.shape[0])
        for vi in range(inst_ids.shape[0])
        if not shared_mask[ui, vi]
    ]
    flat.sort(key=lambda uv: -abs(terms[uv]))
    cross_top = [
        CrossTermEvidence(
            category_vertex=int(cat_ids[ui]),
            instance_vertex=int(inst_ids[vi]),
            term=float(terms[ui, vi]),
            shared_neighbors=sorted(nb_cat[int(cat_ids[ui])] & nb_inst[int(inst_ids[vi])]),
        )
        for ui, vi in flat[:top_k]
    ]
    logit = float(cat.z @ inst.z)
    return EvidenceReport(
        class_index=class_index,
        logit=logit,
        shared=shared,
        cross_top=cross_top,
        shared_total=shared_total,
        cross_total=cross_total,
    )


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_params(path, params: MatcherParams, seed: int = 0, config: TrainConfig | None = None) -> None:
    cfg_blob = json.dumps(asdict(config) if config else {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<IIII", PARAMS_VERSION, params.M, params.d_G, params.L_G))
        f.write(np.ascontiguousarray(params.embed, dtype="<f4").tobytes())
        for lay in params.layers:
            f.write(np.ascontiguousarray(lay.weight, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(lay.gain, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(lay.bias, dtype="<f4").tobytes())
        f.write(
            struct.pack(
                "<ffff",
                float(params.alpha1),
                float(params.alpha2),
                float(params.beta1),
                float(params.beta2),
            )
        )
        f.write(struct.pack("<f", params.epsilon))
        f.write(struct.pack("<Q", seed))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)


def load_params(path) -> tuple[MatcherParams, int, dict]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != PARAMS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {PARAMS_MAGIC!r}")
        version, M, d_G, L_G = struct.unpack("<IIII", _read_exact(f, 16, "params header"))
        if version != PARAMS_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        embed = np.frombuffer(_read_exact(f, 4 * M * d_G, "embedding table"), dtype="<f4")
        layers = []
        for l in range(L_G):
            w = np.frombuffer(_read_exact(f, 4 * d_G * d_G, f"layer {l} weight"), dtype="<f4")
            gain = np.frombuffer(_read_exact(f, 4 * d_G, f"layer {l} gain"), dtype="<f4")
            bias = np.frombuffer(_read_exact(f, 4 * d_G, f"layer {l} bias"), dtype="<f4")
            layers.append(
                LayerParams(
                    weight=w.astype(np.float64).reshape(d_G, d_G),
                    gain=gain.astype(np.float64),
                    bias=bias.astype(np.float64),
                )
            )
        a1, a2, b1, b2 = struct.unpack("<ffff", _read_exact(f, 16, "mixing scalars"))
        (eps,) = struct.unpack("<f", _read_exact(f, 4, "epsilon"))
        (seed,) = struct.unpack("<Q", _read_exact(f, 8, "seed"))
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        cfg = json.loads(_read_exact(f, blob_len, "config echo").decode()) if blob_len else {}
    params = MatcherParams(
        embed=embed.astype(np.float64).reshape(M, d_G),
        layers=layers,
        alpha1=np.asarray(float(a1)),
        alpha2=np.asarray(float(a2)),
        beta1=np.asarray(float(b1)),
        beta2=np.asarray(float(b2)),
        epsilon=float(eps),
    )
    return params, seed, cfg


# ---------------------------------------------------------------------------
# bundled model


@dataclass
class InferenceModel:
    vocab: VisualVocabulary
    atlas: IRAtlas
    params: MatcherParams

    def __post_init__(self):
        if self.vocab.fingerprint != self.atlas.fingerprint:
            raise ValueError("vocabulary fingerprint does not match the atlas")

    def logits(self, rec: FeatureRecord) -> np.ndarray:
        from .feat2graph import feat2graph

        graph = feat2graph(rec, self.vocab, self.params.feat2graph_params())
        out, _ = forward(graph, self.atlas, self.params)
        return out

    def predict(self, rec: FeatureRecord) -> int:
        return int(np.argmax(self.logits(rec)))
