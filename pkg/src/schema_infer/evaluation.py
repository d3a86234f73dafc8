"""Evaluation harness: token-level perturbation curves, synthetic datasets with
planted structure, accuracy metrics, and the Monte-Carlo verifier for the
random-embedding inner-product identities.

The synthetic generator is the desk-scale substrate for acceptance runs. Its
"edge" mode plants two classes with identical ingredient bags whose only
difference is which ingredient pairs attend to each other, so any bag-level
classifier is at chance by construction; the "relevance" mode plants bag-level
class signals carried by tokens with high attention to the classification
token, so relevance-ordered deletion curves separate by polarity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .feat2graph import attention_views
from .feature_io import DatasetHeader, FeatureRecord
from .matcher import InferenceModel
from .numerics import SeededRng, softmax_row
from .vocabulary import Fingerprint, VisualVocabulary

DEFAULT_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(10))


# ---------------------------------------------------------------------------
# perturbation


def perturb_record(rec: FeatureRecord, relevance: np.ndarray, fraction: float, polarity: str) -> FeatureRecord:
    """Drop floor(fraction * n) visual tokens in relevance order.

    Positive polarity drops the most relevant first, negative the least
    relevant first; ties break by position index. Survivors keep their original
    grid coordinates and the attention matrix is sliced, not renormalized (the
    edge components average raw attention values, so renormalizing would change
    their meaning).
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    if polarity not in ("pos", "neg"):
        raise ValueError(f"polarity must be 'pos' or 'neg', got {polarity!r}")
    n = rec.n
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.shape != (n,):
        raise ValueError("relevance length must equal the visual token count")
    k = int(np.floor(fraction * n))
    if k == 0:
        return FeatureRecord(
            image_id=rec.image_id, label=rec.label, X=rec.X, attn=rec.attn,
            zeta=rec.zeta, grid_h=rec.grid_h, grid_w=rec.grid_w,
            visual_positions=rec.visual_positions,
        )
    key = -relevance if polarity == "pos" else relevance
    order = np.lexsort((np.arange(n), key))
    dropped = order[:k]
    survivors = np.setdiff1d(np.arange(n), dropped)
    keep_rows = np.concatenate([np.arange(rec.zeta), rec.zeta + survivors])
    return FeatureRecord(
        image_id=rec.image_id,
        label=rec.label,
        X=rec.X[keep_rows].copy(),
        attn=rec.attn[np.ix_(keep_rows, keep_rows)].copy(),
        zeta=rec.zeta,
        grid_h=rec.grid_h,
        grid_w=rec.grid_w,
        visual_positions=rec.positions()[survivors],
    )


@dataclass
class PerturbationCurve:
    fractions: list[float]
    accuracy: list[float]
    polarity: str
    auc: float

    def to_json(self) -> str:
        return json.dumps(
            {"fractions": self.fractions, "accuracy": self.accuracy,
             "polarity": self.polarity, "auc": self.auc},
            sort_keys=True,
        )


def run_perturbation(
    records,
    model: InferenceModel,
    polarity: str,
    fractions=DEFAULT_FRACTIONS,
) -> PerturbationCurve:
    """Accuracy decay as tokens are dropped in relevance order, plus trapezoidal AUC.

    Relevance per record is its attention-to-CLS vector, the same signal the
    vertex weights use."""
    records = list(records)
    fractions = sorted(float(f) for f in fractions)
    relevances = [attention_views(r).psi_cls for r in records]
    accuracy = []
    for f in fractions:
        correct = 0
        for rec, rel in zip(records, relevances):
            pred = model.predict(perturb_record(rec, rel, f, polarity))
            correct += int(pred == rec.label)
        accuracy.append(correct / len(records))
    auc = float(np.trapezoid(accuracy, fractions))
    return PerturbationCurve(fractions=list(fractions), accuracy=accuracy, polarity=polarity, auc=auc)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    confusion: np.ndarray  # [true, predicted] counts


def evaluate(records, model: InferenceModel) -> EvalResult:
    """Top-1 accuracy with argmax ties broken toward the lowest class index."""
    records = list(records)
    C = model.atlas.class_count
    confusion = np.zeros((C, C), dtype=np.int64)
    correct = 0
    for rec in records:
        pred = model.predict(rec)
        confusion[rec.label, pred] += 1
        correct += int(pred == rec.label)
    return EvalResult(
        accuracy=correct / len(records) if records else 0.0,
        correct=correct,
        total=len(records),
        confusion=confusion,
    )


# ---------------------------------------------------------------------------
# synthetic datasets


@dataclass
class SyntheticSpec:
    """Planted-structure dataset description.

    mode "edge": every class draws the same token multiset (token_ingredients
    rows are identical), and class identity is carried only by which ingredient
    pairs get boosted attention (bonds). mode "relevance": classes differ in
    their signal ingredients, and the CLS attention row is boosted at signal
    positions so relevance ordering finds them.
    """

    mode: str = "edge"
    class_count: int = 2
    grid_h: int = 4
    grid_w: int = 4
    embed_dim: int = 8
    vocab_size: int = 4
    token_ingredients: list[list[int]] = field(default_factory=list)  # per class, length n
    bonds: list[list[tuple[int, int]]] = field(default_factory=list)  # per class
    signal_ingredients: list[list[int]] = field(default_factory=list)  # per class
    center_scale: float = 4.0
    noise: float = 0.2
    attn_base: float = 0.1
    attn_strength: float = 4.0
    relevance_strength: float = 4.0
    train_size: int = 400
    test_size: int = 200
    seed: int = 0

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        raw = json.loads(text)
        raw["bonds"] = [[tuple(p) for p in cls_bonds] for cls_bonds in raw.get("bonds", [])]
        return cls(**raw)


def edge_only_spec(seed: int = 0, train_size: int = 400, test_size: int = 200, noise: float = 0.2) -> SyntheticSpec:
    """Two classes, identical bags {0,1,2,3} x 4, different bonded pairs."""
    shared = [0, 1, 2, 3] * 4
    return SyntheticSpec(
        mode="edge",
        vocab_size=4,
        token_ingredients=[shared, list(shared)],
        bonds=[[(0, 1), (2, 3)], [(0, 2), (1, 3)]],
        signal_ingredients=[[], []],
        noise=noise,
        train_size=train_size,
        test_size=test_size,
        seed=seed,
    )


def planted_relevance_spec(seed: int = 0, train_size: int = 400, test_size: int = 200, noise: float = 0.2) -> SyntheticSpec:
    """Two classes separated by signal ingredients {0,1} vs {2,3} over a shared
    background {4..7}; CLS attention is planted on the signal tokens."""
    background = [4, 5, 6, 7] * 3
    return SyntheticSpec(
        mode="relevance",
        vocab_size=8,
        token_ingredients=[[0, 0, 1, 1] + background, [2, 2, 3, 3] + list(background)],
        bonds=[[], []],
        signal_ingredients=[[0, 1], [2, 3]],
        noise=noise,
        train_size=train_size,
        test_size=test_size,
        seed=seed,
    )


@dataclass
class SyntheticData:
    train: list[FeatureRecord]
    test: list[FeatureRecord]
    vocab: VisualVocabulary
    spec: SyntheticSpec

    def header(self, split: str = "train") -> DatasetHeader:
        records = self.train if split == "train" else self.test
        return DatasetHeader(
            n=self.spec.n,
            zeta=1,
            d=self.spec.embed_dim,
            grid_h=self.spec.grid_h,
            grid_w=self.spec.grid_w,
            layer_index=0,
            record_count=len(records),
        )


def _make_centers(spec: SyntheticSpec, rng: SeededRng) -> np.ndarray:
    if spec.vocab_size <= spec.embed_dim:
        centers = np.zeros((spec.vocab_size, spec.embed_dim))
        centers[np.arange(spec.vocab_size), np.arange(spec.vocab_size)] = spec.center_scale
        return centers
    raw = rng.normal((spec.vocab_size, spec.embed_dim))
    return spec.center_scale * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _synthesize_record(spec: SyntheticSpec, centers: np.ndarray, label: int, image_id: int, rng: SeededRng) -> FeatureRecord:
    n, zeta = spec.n, 1
    ing = np.array(spec.token_ingredients[label], dtype=np.int64)
    ing = ing[rng.permutation(n)]
    x = np.empty((n + zeta, spec.embed_dim))
    x[0] = spec.noise * rng.normal(spec.embed_dim)
    x[zeta:] = centers[ing] + spec.noise * rng.normal((n, spec.embed_dim))

    scores = spec.attn_base * rng.normal((n + zeta, n + zeta))
    if spec.mode == "edge":
        bonded = {frozenset(p) for p in spec.bonds[label]}
        for i in range(n):
            for j in range(n):
                if i != j and frozenset((int(ing[i]), int(ing[j]))) in bonded:
                    scores[zeta + i, zeta + j] += spec.attn_strength
    else:
        signal = set(spec.signal_ingredients[label])
        for i in range(n):
            if int(ing[i]) in signal:
                scores[0, zeta + i] += spec.relevance_strength
    attn = softmax_row(scores)
    return FeatureRecord(
        image_id=image_id,
        label=label,
        X=x.astype(np.float32),
        attn=attn.astype(np.float32),
        zeta=zeta,
        grid_h=spec.grid_h,
        grid_w=spec.grid_w,
    )


def generate_synthetic(spec: SyntheticSpec, rng: SeededRng | None = None) -> SyntheticData:
    """Records whose embeddings are noisy copies of planted centers and whose
    attention encodes the planted structure; labels alternate so splits stay
    balanced. Byte-identical output for a fixed seed."""
    if rng is None:
        rng = SeededRng(spec.seed)
    center_rng, data_rng = rng.split(2)
    centers = _make_centers(spec, center_rng)
    vocab = VisualVocabulary(
        centers=centers,
        fingerprint=Fingerprint(probe_size=spec.train_size, seed=spec.seed, layer_index=0),
    )
    total = spec.train_size + spec.test_size
    records = [
        _synthesize_record(spec, centers, label=i % spec.class_count, image_id=i, rng=data_rng)
        for i in range(total)
    ]
    return SyntheticData(
        train=records[: spec.train_size],
        test=records[spec.train_size :],
        vocab=vocab,
        spec=spec,
    )


# ---------------------------------------------------------------------------
# Monte-Carlo verification of the embedding inner-product identities


@dataclass
class MonteCarloCase:
    name: str
    estimate: float
    expected: float
    std_error: float
    criterion: str
    passed: bool


@dataclass
class Lemma1Report:
    d_G: int
    samples: int
    cases: list[MonteCarloCase]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def format(self) -> str:
        lines = [f"monte-carlo embedding identities: d_G={self.d_G} samples={self.samples}"]
        for c in self.cases:
            status = "pass" if c.passed else "FAIL"
            lines.append(
                f"  [{status}] {c.name}: estimate={c.estimate:.6f} expected={c.expected:.6f} "
                f"se={c.std_error:.6f} ({c.criterion})"
            )
        return "\n".join(lines)


def verify_lemma1(d_G: int, samples: int, rng: SeededRng) -> Lemma1Report:
    """Estimate E[f W^T W g^T] for independent f, g (zero), E[f W^T W f^T] for a
    fixed W (squared Frobenius norm), the identity-W special case (d_G), and the
    per-sample Gaussian-W case (d_G^2), each with its standard error."""
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples for stable estimates")
    w = rng.normal((d_G, d_G))
    fro2 = float((w * w).sum())
    cases = []

    f = rng.normal((samples, d_G))
    g = rng.normal((samples, d_G))
    vals = ((f @ w.T) * (g @ w.T)).sum(axis=1)
    mean, se = float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples))
    cases.append(MonteCarloCase(
        name="independent vectors -> 0",
        estimate=mean, expected=0.0, std_error=se,
        criterion="|mean| <= 4 se", passed=abs(mean) <= 4 * se,
    ))

    vals = np.square(f @ w.T).sum(axis=1)
    mean, se = float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples))
    cases.append(MonteCarloCase(
        name="same vector -> ||W||_F^2",
        estimate=mean, expected=fro2, std_error=se,
        criterion="within 2% of expected", passed=abs(mean - fro2) <= 0.02 * fro2,
    ))

    vals = np.square(f).sum(axis=1)
    mean, se = float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples))
    cases.append(MonteCarloCase(
        name="identity W -> d_G",
        estimate=mean, expected=float(d_G), std_error=se,
        criterion="within 2% of expected", passed=abs(mean - d_G) <= 0.02 * d_G,
    ))

    chunk = 10_000
    acc = []
    for start in range(0, samples, chunk):
        m = min(chunk, samples - start)
        ws = rng.normal((m, d_G, d_G))
        fs = rng.normal((m, d_G))
        acc.append(np.square(np.einsum("mrs,ms->mr", ws, fs)).sum(axis=1))
    vals = np.concatenate(acc)
    mean, se = float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples))
    expected = float(d_G * d_G)
    cases.append(MonteCarloCase(
        name="gaussian W -> d_G^2",
        estimate=mean, expected=expected, std_error=se,
        criterion="within 5% of expected", passed=abs(mean - expected) <= 0.05 * expected,
    ))
    return Lemma1Report(d_G=d_G, samples=samples, cases=cases)


# ---------------------------------------------------------------------------
# random graphs and the pooled-vs-expanded equivalence suite


def random_graph(rng: SeededRng, M: int, max_vertices: int = 10, kind: str = "instance"):
    """Random normalized graph: a vertex subset with simplex weights and
    uniformly weighted edges over all pairs (some zeroed)."""
    from .atlas import IRGraph
    from .feat2graph import normalize_graph

    k = int(rng.integers(1, max_vertices + 1))
    vertices = np.sort(rng.permutation(M)[:k]).astype(np.int64)
    weights = rng.uniform(k) + 0.05
    iu, iv = np.triu_indices(k, 1)
    edge_w = rng.uniform(iu.shape[0]) * (rng.uniform(iu.shape[0]) > 0.3)
    raw = IRGraph(
        vertices=vertices,
        weights=weights,
        edge_u=vertices[iu],
        edge_v=vertices[iv],
        edge_w=edge_w,
        kind=kind,
    )
    return normalize_graph(raw)


@dataclass
class Theorem1Report:
    bovw_max_abs_dev: float
    expansion_max_abs_dev: float
    trials: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.bovw_max_abs_dev < self.tol and self.expansion_max_abs_dev < self.tol

    def format(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"pooled-similarity identities over {self.trials} random graph trials\n"
            f"  [{status}] shallow/orthonormal bag equivalence: max |dev| = {self.bovw_max_abs_dev:.3e} (tol {self.tol:g})\n"
            f"  [{status}] pooled vs expanded double sum:       max |dev| = {self.expansion_max_abs_dev:.3e} (tol {self.tol:g})"
        )


def orthonormal_embedding(M: int, d_G: int, rng: SeededRng) -> np.ndarray:
    """M orthonormal rows in R^{d_G} (requires M <= d_G)."""
    if M > d_G:
        raise ValueError("orthonormal rows require M <= d_G")
    q, _ = np.linalg.qr(rng.normal((d_G, M)))
    return q.T.copy()


def verify_theorem1(rng: SeededRng, trials: int = 50, tol: float = 1e-6) -> Theorem1Report:
    """Check the two exact similarity identities on random graphs.

    With no conv layers and an orthonormal table the logit must equal the
    shared-vertex weighted sum; with any depth the pooled inner product must
    equal the brute-force expansion over all vertex pairs."""
    from .matcher import MatcherParams, _stack_forward, init_matcher_params

    M, d_G = 10, 16
    bovw_dev = 0.0
    expand_dev = 0.0
    table = orthonormal_embedding(M, d_G, rng)
    flat_params = MatcherParams(
        embed=table, layers=[],
        alpha1=np.asarray(0.0), alpha2=np.asarray(1.0),
        beta1=np.asarray(0.5), beta2=np.asarray(0.5),
    )
    for _ in range(trials):
        inst = random_graph(rng, M)
        cat = random_graph(rng, M, kind="category")
        ti = _stack_forward(inst.vertices, inst.weights, inst.dense_adjacency(), flat_params)
        tc = _stack_forward(cat.vertices, cat.weights, cat.dense_adjacency(), flat_params)
        logit = float(tc.z @ ti.z)
        common, ci, ii = np.intersect1d(cat.vertices, inst.vertices, return_indices=True)
        norms = np.square(table[common]).sum(axis=1)
        expected = float((cat.weights[ci] * inst.weights[ii] * norms).sum())
        bovw_dev = max(bovw_dev, abs(logit - expected))

    for depth in (0, 1, 2):
        deep = init_matcher_params(M, d_G, depth, rng)
        for _ in range(trials):
            inst = random_graph(rng, M)
            cat = random_graph(rng, M, kind="category")
            ti = _stack_forward(inst.vertices, inst.weights, inst.dense_adjacency(), deep)
            tc = _stack_forward(cat.vertices, cat.weights, cat.dense_adjacency(), deep)
            logit = float(tc.z @ ti.z)
            expanded = 0.0
            for u in range(cat.n_vertices):
                for v in range(inst.n_vertices):
                    expanded += float(
                        cat.weights[u] * inst.weights[v] * (tc.feats[-1][u] @ ti.feats[-1][v])
                    )
            expand_dev = max(expand_dev, abs(logit - expanded))
    return Theorem1Report(
        bovw_max_abs_dev=bovw_dev, expansion_max_abs_dev=expand_dev, trials=trials, tol=tol
    )
