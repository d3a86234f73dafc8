import numpy as np
import pytest

from conftest import build_record, spread_centers, vocab_for
from schema_infer.atlas import IRGraph
from schema_infer.feat2graph import (
    Feat2GraphParams,
    assemble_raw,
    attention_views,
    components_to_graph,
    feat2edge,
    feat2graph,
    feat2vertex,
    instance_components,
    normalize_dense,
    normalize_graph,
    pos,
)
from schema_infer.feature_io import ValidationError
from schema_infer.numerics import SeededRng, softmax_row
from schema_infer.vocabulary import discretize_record


def random_attn(rng, t):
    return softmax_row(rng.normal((t, t)))


# ---------------------------------------------------------------------------
# attention views


def test_symmetric_input_is_fixed_point():
    rng = SeededRng(0)
    raw = rng.normal((5, 5))
    sym = 0.5 * (raw + raw.T)
    rec = build_record([0, 0, 0, 0], spread_centers(1, 2), 2, 2, sym)
    views = attention_views(rec)
    assert np.allclose(views.Psi, sym, atol=1e-7)


def test_two_by_two_off_diagonal_average():
    a, b, c, d = 0.9, 0.1, 0.3, 0.7
    rec = build_record([0], spread_centers(1, 2), 1, 1, np.array([[a, b], [c, d]]))
    views = attention_views(rec)
    assert views.Psi[0, 1] == pytest.approx((b + c) / 2, abs=1e-7)
    assert views.Psi[1, 0] == pytest.approx((b + c) / 2, abs=1e-7)


def test_blocks_partition_psi():
    rng = SeededRng(1)
    zeta, n = 2, 6
    rec = build_record([0] * n, spread_centers(1, 2), 2, 3, random_attn(rng, n + zeta), zeta=zeta)
    views = attention_views(rec)
    assert np.array_equal(views.PsiV, views.Psi[zeta:, zeta:])
    assert np.array_equal(views.PsiStar, views.Psi[:zeta, :zeta])
    assert np.array_equal(views.PsiA, views.Psi[:zeta, zeta:])
    assert np.allclose(views.psi_cls, views.Psi[0, zeta:])
    assert np.allclose(views.Psi, views.Psi.T)


# ---------------------------------------------------------------------------
# vertices


def _seq_views(indices, psi_cls_vals, grid=(1, None)):
    n = len(indices)
    grid_h, grid_w = (1, n) if grid == (1, None) else grid
    centers = spread_centers(10, 10)
    attn = np.zeros((n + 1, n + 1))
    attn[0, 1:] = psi_cls_vals
    attn[1:, 0] = psi_cls_vals  # symmetric so psi_cls is exactly these values
    rec = build_record(indices, centers, grid_h, grid_w, attn)
    vocab = vocab_for(centers)
    return discretize_record(rec, vocab), attention_views(rec)


def test_feat2vertex_bag_mode_counts():
    seq, views = _seq_views([7, 7, 9, 9], [0.1, 0.2, 0.3, 0.4])
    vw = feat2vertex(seq, views, Feat2GraphParams(alpha1=0.0, alpha2=1.0))
    assert vw.vertices.tolist() == [7, 9]
    assert vw.lam.tolist() == [2.0, 2.0]


def test_feat2vertex_cls_mode_full_mass():
    seq, views = _seq_views([4, 4, 4, 4], [0.1, 0.2, 0.3, 0.4])
    vw = feat2vertex(seq, views, Feat2GraphParams(alpha1=1.0, alpha2=0.0))
    assert vw.lam[0] == pytest.approx(1.0, abs=1e-7)


def test_feat2vertex_hand_mix():
    seq, views = _seq_views([7, 7, 9, 9], [0.1, 0.2, 0.3, 0.4])
    vw = feat2vertex(seq, views, Feat2GraphParams(alpha1=0.5, alpha2=0.5))
    lam = dict(zip(vw.vertices.tolist(), vw.lam.tolist()))
    assert lam[7] == pytest.approx(0.5 * 0.3 + 0.5 * 2, abs=1e-7)
    assert lam[9] == pytest.approx(0.5 * 0.7 + 0.5 * 2, abs=1e-7)


# ---------------------------------------------------------------------------
# positions and edges


def test_pos_examples():
    assert pos(0, 3, 4) == (0, 0)
    assert pos(5, 3, 4) == (1, 1)
    r0, c0 = pos(6, 3, 4)
    r1, c1 = pos(7, 3, 4)
    assert np.hypot(r1 - r0, c1 - c0) == 1.0
    with pytest.raises(ValueError):
        pos(12, 3, 4)


def test_adjacent_singletons_eq5():
    # two single-occurrence vertices one patch apart, epsilon = 1
    centers = spread_centers(4, 4)
    attn = softmax_row(np.zeros((3, 3)))
    rec = build_record([0, 1], centers, 1, 2, attn)
    seq = discretize_record(rec, vocab_for(centers))
    ew = feat2edge(seq, attention_views(rec), Feat2GraphParams(epsilon=1.0))
    assert ew.adj_comp[0, 1] == pytest.approx(0.5, abs=1e-12)
    assert ew.adj_comp[1, 0] == pytest.approx(0.5, abs=1e-12)


def test_edge_components_hand_enumeration():
    # sequence (1,2,2) on a 1x3 grid: pairs of (1,2) are positions (0,1),(0,2)
    centers = spread_centers(4, 4)
    rng = SeededRng(8)
    attn = random_attn(rng, 4)
    rec = build_record([1, 2, 2], centers, 1, 3, attn)
    seq = discretize_record(rec, vocab_for(centers))
    views = attention_views(rec)
    eps = 1.0
    ew = feat2edge(seq, views, Feat2GraphParams(epsilon=eps))
    psi_v = views.PsiV
    expected_attn = (psi_v[0, 1] + psi_v[0, 2]) / 2
    expected_adj = (1 / (eps + 1) + 1 / (eps + 2)) / 2
    assert ew.attn_comp[0, 1] == pytest.approx(expected_attn, abs=1e-12)
    assert ew.adj_comp[0, 1] == pytest.approx(expected_adj, abs=1e-12)


def test_edge_symmetry_and_hollow():
    rng = SeededRng(21)
    centers = spread_centers(5, 5)
    indices = rng.integers(0, 5, size=9)
    rec = build_record(indices, centers, 3, 3, random_attn(rng, 10))
    seq = discretize_record(rec, vocab_for(centers))
    ew = feat2edge(seq, attention_views(rec), Feat2GraphParams())
    assert np.allclose(ew.e, ew.e.T)
    assert np.allclose(np.diag(ew.e), 0.0)


def test_edge_mean_is_pair_average_oracle():
    # brute-force the double loop over occurrence pairs
    rng = SeededRng(33)
    centers = spread_centers(3, 3)
    indices = rng.integers(0, 3, size=8)
    rec = build_record(indices, centers, 2, 4, random_attn(rng, 9))
    vocab = vocab_for(centers)
    seq = discretize_record(rec, vocab)
    views = attention_views(rec)
    eps = 1.0
    ew = feat2edge(seq, views, Feat2GraphParams(epsilon=eps))
    verts = ew.vertices.tolist()
    for ui, u in enumerate(verts):
        for vi, v in enumerate(verts):
            if u == v:
                continue
            pairs = [(i, j) for i in seq.occurrences[u] for j in seq.occurrences[v]]
            attn_mean = np.mean([views.PsiV[i, j] for i, j in pairs])
            def dist(i, j):
                pi = np.array(pos(int(seq.token_positions[i]), 2, 4))
                pj = np.array(pos(int(seq.token_positions[j]), 2, 4))
                return float(np.linalg.norm(pi - pj))
            adj_mean = np.mean([1.0 / (eps + dist(i, j)) for i, j in pairs])
            assert ew.attn_comp[ui, vi] == pytest.approx(attn_mean, abs=1e-12)
            assert ew.adj_comp[ui, vi] == pytest.approx(adj_mean, abs=1e-12)


# ---------------------------------------------------------------------------
# normalization


def test_normalize_vertex_weights():
    g = IRGraph(
        vertices=[1, 4], weights=[2.0, 2.0], edge_u=[1], edge_v=[4], edge_w=[3.0]
    )
    out = normalize_graph(g)
    assert out.weights.tolist() == [0.5, 0.5]


def test_normalize_row_stochastic_symmetric_is_fixed_point():
    lam = np.array([0.3, 0.7])
    e = np.array([[0.0, 1.0], [1.0, 0.0]])
    trace = normalize_dense(lam, e)
    assert np.allclose(trace.e_sym, e)
    assert np.allclose(trace.lam_norm, lam)


def test_normalize_three_vertex_recomputation():
    rng = SeededRng(3)
    lam = rng.uniform(3) + 0.1
    e = np.abs(rng.normal((3, 3)))
    e = 0.5 * (e + e.T)
    np.fill_diagonal(e, 0.0)
    trace = normalize_dense(lam, e)
    assert trace.lam_norm.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(trace.e_sym, trace.e_sym.T)
    assert np.allclose(trace.e_norm.sum(axis=1), 1.0)
    expected = 0.5 * (e / e.sum(axis=1, keepdims=True) + (e / e.sum(axis=1, keepdims=True)).T)
    assert np.allclose(trace.e_sym, expected)


def test_normalize_zero_row_maps_to_zero_row():
    lam = np.array([1.0, 1.0, 2.0])
    e = np.zeros((3, 3))
    e[0, 1] = e[1, 0] = 1.0  # vertex 2 isolated
    trace = normalize_dense(lam, e)
    assert np.allclose(trace.e_norm[2], 0.0)
    assert np.allclose(trace.e_sym[2, :2], 0.0)


def test_normalize_degenerate_graph_errors():
    with pytest.raises(ValidationError, match="degenerate"):
        normalize_dense(np.zeros(2), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# full conversion


def _random_record(seed, m=5, n=9, grid=(3, 3)):
    rng = SeededRng(seed)
    centers = spread_centers(m, m)
    indices = rng.integers(0, m, size=n)
    return build_record(indices, centers, grid[0], grid[1], random_attn(rng, n + 1)), vocab_for(centers)


def test_single_ingredient_record():
    centers = spread_centers(3, 3)
    rec = build_record([2, 2, 2, 2], centers, 2, 2, random_attn(SeededRng(0), 5))
    g = feat2graph(rec, vocab_for(centers), Feat2GraphParams())
    assert g.vertices.tolist() == [2]
    assert g.weights.tolist() == [1.0]
    assert g.n_edges == 0


def test_two_ingredient_record_complete_graph():
    centers = spread_centers(3, 3)
    rec = build_record([0, 1, 0, 1], centers, 2, 2, random_attn(SeededRng(4), 5))
    g = feat2graph(rec, vocab_for(centers), Feat2GraphParams())
    assert g.vertices.tolist() == [0, 1]
    assert g.n_edges == 1
    assert g.edge_w[0] > 0


def test_feat2graph_matches_manual_pipeline():
    rec, vocab = _random_record(55)
    params = Feat2GraphParams(alpha1=0.3, alpha2=0.9, beta1=0.2, beta2=0.6)
    g = feat2graph(rec, vocab, params)

    seq = discretize_record(rec, vocab)
    views = attention_views(rec)
    vw = feat2vertex(seq, views, params)
    ew = feat2edge(seq, views, params)
    trace = normalize_dense(vw.lam, ew.e)
    assert np.array_equal(g.vertices, vw.vertices)
    assert np.allclose(g.weights, trace.lam_norm, atol=0)
    assert np.allclose(g.dense_adjacency(), trace.e_sym, atol=0)


def test_feat2graph_pure_and_deterministic():
    rec, vocab = _random_record(77)
    params = Feat2GraphParams()
    a = feat2graph(rec, vocab, params)
    b = feat2graph(rec, vocab, params)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.edge_w, b.edge_w)


def test_joint_alpha_scaling_leaves_normalized_weights_unchanged():
    rec, vocab = _random_record(88)
    g1 = feat2graph(rec, vocab, Feat2GraphParams(alpha1=0.5, alpha2=0.5))
    g2 = feat2graph(rec, vocab, Feat2GraphParams(alpha1=1.0, alpha2=1.0))
    assert np.allclose(g1.weights, g2.weights, atol=1e-14)


def test_components_cache_reassembles_exactly():
    rec, vocab = _random_record(99)
    params = Feat2GraphParams(alpha1=0.7, alpha2=0.1, beta1=0.9, beta2=0.4)
    direct = feat2graph(rec, vocab, params)
    comp = instance_components(rec, vocab, params.epsilon)
    via_cache = components_to_graph(comp, params)
    assert np.array_equal(direct.weights, via_cache.weights)
    assert np.array_equal(direct.edge_w, via_cache.edge_w)
    lam_raw, e_raw = assemble_raw(comp, params)
    assert np.allclose(lam_raw, params.alpha1 * comp.lam_cls + params.alpha2 * comp.lam_bag)
    assert np.allclose(e_raw, e_raw.T)


def test_output_graph_contains_no_embeddings():
    rec, vocab = _random_record(101)
    g = feat2graph(rec, vocab, Feat2GraphParams())
    # only ingredient identities and scalar weights leave the module
    assert set(type(getattr(g, f)) for f in ("vertices", "weights", "edge_u", "edge_v", "edge_w")) == {np.ndarray}
    assert g.vertices.ndim == 1 and g.weights.ndim == 1
