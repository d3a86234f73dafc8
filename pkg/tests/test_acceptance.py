"""Acceptance suite: one test per release criterion, each printing a pass/fail
line with its measured quantity and runtime. Everything runs on synthetic data
at 64-bit precision.
"""

import itertools
import time

import numpy as np
import pytest

from schema_infer.atlas import atlas_regularizers, extend_atlas, save_atlas
from schema_infer.evaluation import (
    edge_only_spec,
    evaluate,
    generate_synthetic,
    orthonormal_embedding,
    planted_relevance_spec,
    random_graph,
    run_perturbation,
    verify_lemma1,
)
from schema_infer.feat2graph import feat2graph, instance_components, normalize_graph
from schema_infer.matcher import (
    InferenceModel,
    MatcherParams,
    TrainConfig,
    explain,
    forward,
    init_atlas_from_components,
    init_matcher_params,
    loss_and_grads,
    save_params,
    train,
    trainable_dict,
)
from schema_infer.numerics import SeededRng, finite_diff_check, layer_norm, softmax_row
from schema_infer.vocabulary import build_vocabulary, kmeans_objective

from conftest import build_record, spread_centers, vocab_for


def report(criterion: str, ok: bool, detail: str, elapsed: float, limit: float):
    status = "PASS" if ok and elapsed < limit else "FAIL"
    print(f"[{status}] {criterion}: {detail} ({elapsed:.1f}s / limit {limit:.0f}s)")
    assert ok, detail
    assert elapsed < limit, f"runtime {elapsed:.1f}s exceeded {limit}s"


def _atlas_of(graphs, M=10):
    from schema_infer.atlas import IRAtlas

    cats = []
    for g in graphs:
        c = g.copy()
        c.kind = "category"
        cats.append(c)
    return IRAtlas(graphs=cats, M=M)


def dense_reference_features(g, params):
    """Independent dense recomputation of the final vertex features."""
    feats = params.embed[g.vertices]
    e = g.dense_adjacency()
    a = np.eye(g.n_vertices) + e
    for layer in params.layers:
        feats = layer_norm(np.maximum(a @ feats @ layer.weight, 0.0), layer.gain, layer.bias)
    return feats


def test_criterion_1_shallow_orthonormal_exactness():
    # L_G=0, alpha1=0, orthonormal table: logits equal the shared-vertex
    # weighted sum exactly on 50 random toy graphs
    start = time.time()
    rng = SeededRng(101)
    M, d_G = 10, 16
    params = MatcherParams(
        embed=orthonormal_embedding(M, d_G, rng),
        layers=[],
        alpha1=np.asarray(0.0),
        alpha2=np.asarray(1.0),
        beta1=np.asarray(0.5),
        beta2=np.asarray(0.5),
    )
    cats = [random_graph(rng, M, kind="category") for _ in range(3)]
    atlas = _atlas_of(cats, M)
    worst = 0.0
    for _ in range(50):
        inst = random_graph(rng, M)
        logits, _ = forward(inst, atlas, params)
        for c, cat in enumerate(cats):
            common, ci, ii = np.intersect1d(cat.vertices, inst.vertices, return_indices=True)
            norms = np.square(params.embed[common]).sum(axis=1)
            expected = float((cat.weights[ci] * inst.weights[ii] * norms).sum())
            worst = max(worst, abs(logits[c] - expected))
    report(
        "criterion 1 shallow/orthonormal exactness",
        worst < 1e-6,
        f"max |logit - shared sum| = {worst:.3e} over 150 pairs",
        time.time() - start,
        10.0,
    )


def test_criterion_2_expansion_oracle_equivalence():
    # pooled logits vs brute-force double sum, graphs <= 10 vertices,
    # depths 0..2, 100 trials each
    start = time.time()
    worst = 0.0
    for depth in (0, 1, 2):
        rng = SeededRng(200 + depth)
        params = init_matcher_params(12, 16, depth, rng)
        for _ in range(100):
            inst = random_graph(rng, 12, max_vertices=10)
            cat = random_graph(rng, 12, max_vertices=10, kind="category")
            logits, _ = forward(inst, _atlas_of([cat], 12), params)
            normed = normalize_graph(cat)
            cat_feats = dense_reference_features(normed, params)
            inst_feats = dense_reference_features(inst, params)
            expanded = 0.0
            for u in range(normed.n_vertices):
                for v in range(inst.n_vertices):
                    expanded += float(
                        normed.weights[u] * inst.weights[v] * (cat_feats[u] @ inst_feats[v])
                    )
            worst = max(worst, abs(logits[0] - expanded))
    report(
        "criterion 2 expansion oracle equivalence",
        worst < 1e-6,
        f"max |pooled - expanded| = {worst:.3e} over 300 trials",
        time.time() - start,
        30.0,
    )


def test_criterion_3_monte_carlo_identities():
    start = time.time()
    rep = verify_lemma1(8, 100_000, SeededRng(77))
    detail = "; ".join(f"{c.name}: {c.estimate:.4f} (exp {c.expected:.0f})" for c in rep.cases)
    report("criterion 3 monte-carlo identities", rep.passed, detail, time.time() - start, 20.0)


def test_criterion_4_gradient_exactness():
    # every trainable tensor against central differences on a 2-class,
    # <=5-vertex toy
    start = time.time()
    rng = SeededRng(6)
    centers = spread_centers(6, 6)
    vocab = vocab_for(centers)
    recs = []
    for label, indices in enumerate(([0, 1, 2, 1, 0, 2], [3, 4, 2, 4, 3, 2])):
        attn = softmax_row(rng.normal((7, 7)))
        recs.append(build_record(indices, centers, 2, 3, attn, label=label, image_id=label))
    cfg = TrainConfig(epochs=0, gamma_v=0.5, gamma_e=0.75, layers=2, dim=6, seed=6)
    params = init_matcher_params(6, 6, 2, rng)
    comps = [instance_components(r, vocab, cfg.epsilon) for r in recs]
    atlas = init_atlas_from_components(comps, params, vocab, cfg)
    tensors = trainable_dict(params, atlas)

    def loss_fn(_):
        breakdown, _ = loss_and_grads(recs, atlas, params, vocab, cfg)
        return breakdown.total

    _, grads = loss_and_grads(recs, atlas, params, vocab, cfg)
    rep = finite_diff_check(loss_fn, tensors, grads, step=1e-5, tol=1e-4)
    n_coords = sum(t.size for t in tensors.values())
    report(
        "criterion 4 gradient exactness",
        rep.passed,
        f"max rel err = {rep.max_rel_err:.3e} over {n_coords} coordinates "
        f"({len(tensors)} tensors, worst {rep.worst_param})",
        time.time() - start,
        60.0,
    )


@pytest.fixture(scope="module")
def edge_task():
    return generate_synthetic(edge_only_spec(seed=0, train_size=400, test_size=200))


def test_criterion_5_edge_signal_separation(edge_task):
    # identical bags: the conv matcher must read the planted attention
    # structure while the bag-of-words mode stays at chance
    start = time.time()
    data = edge_task
    cfg = TrainConfig(epochs=30, batch_size=64, layers=2, dim=256, seed=0)
    atlas, params, _ = train(data.train, data.vocab, cfg)
    full_acc = evaluate(data.test, InferenceModel(data.vocab, atlas, params)).accuracy

    cfg_b = TrainConfig(epochs=30, batch_size=64, bovw_mode=True, dim=256, seed=0)
    atlas_b, params_b, _ = train(data.train, data.vocab, cfg_b)
    bovw_acc = evaluate(data.test, InferenceModel(data.vocab, atlas_b, params_b)).accuracy
    report(
        "criterion 5 edge-signal separation",
        full_acc > 0.95 and 0.40 <= bovw_acc <= 0.60,
        f"conv matcher {full_acc:.3f} (> 0.95), bag mode {bovw_acc:.3f} (in [0.40, 0.60])",
        time.time() - start,
        300.0,
    )


def test_criterion_6_sparsity_regularizer_effect():
    start = time.time()
    data = generate_synthetic(planted_relevance_spec(seed=0, train_size=400, test_size=200))
    entropies = {}
    for gv, ge in ((0.5, 0.75), (0.0, 0.0)):
        cfg = TrainConfig(epochs=20, batch_size=64, layers=2, dim=256, seed=0, gamma_v=gv, gamma_e=ge)
        atlas, _, _ = train(data.train, data.vocab, cfg)
        entropies[(gv, ge)], _ = atlas_regularizers(atlas)
    on, off = entropies[(0.5, 0.75)], entropies[(0.0, 0.0)]
    report(
        "criterion 6 sparsity regularizer effect",
        on < off,
        f"mean vertex entropy {on:.4f} (regularized) < {off:.4f} (unregularized)",
        time.time() - start,
        600.0,
    )


def test_criterion_7_kmeans_micro_optimality():
    start = time.time()
    rng = SeededRng(2027)
    worst_gap = 0.0
    for _ in range(20):
        n = int(rng.integers(4, 9))
        k = int(rng.integers(2, 4))
        points = rng.normal((n, 2))
        best = min(
            kmeans_objective(points, build_vocabulary(points, k, r, rel_tol=0.0).centers)
            for r in rng.split(20)
        )
        optimal = np.inf
        for assign in itertools.product(range(k), repeat=n):
            assign = np.array(assign)
            obj = 0.0
            for c in range(k):
                members = points[assign == c]
                if members.shape[0]:
                    obj += float(np.sum((members - members.mean(axis=0)) ** 2))
            optimal = min(optimal, obj)
        worst_gap = max(worst_gap, abs(best - optimal))
    report(
        "criterion 7 k-means micro optimality",
        worst_gap < 1e-9,
        f"max |best-of-20 - brute force| = {worst_gap:.2e} over 20 instances",
        time.time() - start,
        10.0,
    )


def test_criterion_8_perturbation_ordering():
    start = time.time()
    data = generate_synthetic(planted_relevance_spec(seed=2, train_size=400, test_size=200))
    cfg = TrainConfig(epochs=10, batch_size=64, layers=2, dim=256, seed=2)
    atlas, params, _ = train(data.train, data.vocab, cfg)
    model = InferenceModel(data.vocab, atlas, params)
    base = evaluate(data.test, model).accuracy
    pos = run_perturbation(data.test, model, "pos")
    neg = run_perturbation(data.test, model, "neg")
    ok = pos.auc < neg.auc and pos.accuracy[0] == base and neg.accuracy[0] == base
    report(
        "criterion 8 perturbation ordering",
        ok,
        f"auc+ {pos.auc:.4f} < auc- {neg.auc:.4f}; fraction-0 points both equal base {base:.3f}",
        time.time() - start,
        180.0,
    )


def test_criterion_9_extendability_exactness(edge_task):
    start = time.time()
    data = edge_task
    cfg = TrainConfig(epochs=5, batch_size=64, layers=2, dim=64, seed=4)
    atlas, params, _ = train(data.train[:120], data.vocab, cfg)
    model = InferenceModel(data.vocab, atlas, params)
    held_out = data.test[:50]
    before = [model.logits(r) for r in held_out]

    fp = params.feat2graph_params()
    new_graphs = {2: [feat2graph(r, data.vocab, fp) for r in data.train[120:140]]}
    extended = extend_atlas(atlas, new_graphs)
    model2 = InferenceModel(data.vocab, extended, params)
    after = [model2.logits(r) for r in held_out]
    identical = all(
        np.array_equal(b, a[:2]) and a.shape == (3,) for b, a in zip(before, after)
    )
    report(
        "criterion 9 extendability exactness",
        identical,
        f"old-class logits bit-identical on {len(held_out)} held-out records after extension",
        time.time() - start,
        60.0,
    )


def test_criterion_10_train_determinism(edge_task, tmp_path):
    start = time.time()
    data = edge_task
    blobs = []
    for run in range(2):
        cfg = TrainConfig(epochs=3, batch_size=64, layers=2, dim=64, seed=11)
        atlas, params, _ = train(data.train[:100], data.vocab, cfg)
        a_path = tmp_path / f"atlas{run}.snat"
        p_path = tmp_path / f"matcher{run}.snmp"
        save_atlas(a_path, atlas)
        save_params(p_path, params, seed=cfg.seed, config=cfg)
        blobs.append((a_path.read_bytes(), p_path.read_bytes()))
    ok = blobs[0][0] == blobs[1][0] and blobs[0][1] == blobs[1][1]
    report(
        "criterion 10 train determinism",
        ok,
        f"two runs -> byte-identical checkpoints ({len(blobs[0][0])}+{len(blobs[0][1])} bytes)",
        time.time() - start,
        300.0,
    )


def test_criterion_11_decomposition_completeness():
    start = time.time()
    worst = 0.0
    for depth in (0, 1, 2):
        rng = SeededRng(400 + depth)
        params = init_matcher_params(12, 16, depth, rng)
        cats = [random_graph(rng, 12, kind="category") for _ in range(2)]
        atlas = _atlas_of(cats, 12)
        trials = 34 if depth == 0 else 33
        for _ in range(trials):
            inst = random_graph(rng, 12)
            c = int(rng.integers(0, 2))
            logits, _ = forward(inst, atlas, params)
            rep = explain(inst, c, atlas, params, top_k=5)
            worst = max(worst, abs(rep.total - logits[c]))
    report(
        "criterion 11 decomposition completeness",
        worst < 1e-6,
        f"max |sum of evidence terms - logit| = {worst:.3e} over 100 cases",
        time.time() - start,
        60.0,
    )
