"""Single executable for the pipeline stages.

Every stage reads/writes the binary formats, so pipelines are resumable and
each stage independently testable. Logs go to stderr; data goes to files or
stdout. A model directory holds vocab.snvw, atlas.snat, matcher.snmp, and
history.json.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from . import evaluation, feature_io, matcher, vocabulary
from .feat2graph import Feat2GraphParams, feat2graph as record_to_graph
from .numerics import SeededRng, parallel_map

log = logging.getLogger("schema_infer")

VOCAB_FILE = "vocab.snvw"
ATLAS_FILE = "atlas.snat"
PARAMS_FILE = "matcher.snmp"
HISTORY_FILE = "history.json"


def _f32_repr(x: float) -> float:
    return float(f"{np.float32(x):.9g}")


def graph_to_json(g: atlas_mod.IRGraph) -> str:
    payload = {
        "kind": g.kind,
        "vertices": [int(v) for v in g.vertices],
        "weights": [_f32_repr(w) for w in g.weights],
        "edges": [
            [int(u), int(v), _f32_repr(w)]
            for u, v, w in zip(g.edge_u, g.edge_v, g.edge_w)
        ],
    }
    return json.dumps(payload, sort_keys=True)


def json_to_graph(text: str) -> atlas_mod.IRGraph:
    raw = json.loads(text)
    edges = raw.get("edges", [])
    # weights travel as 9-significant-digit decimals of float32 values; the
    # round trip is exact only through a float32 cast
    def f32(values):
        return np.asarray(values, dtype=np.float32).astype(np.float64)

    return atlas_mod.IRGraph(
        vertices=np.asarray(raw["vertices"], dtype=np.int64),
        weights=f32(raw["weights"]),
        edge_u=np.asarray([e[0] for e in edges], dtype=np.int64),
        edge_v=np.asarray([e[1] for e in edges], dtype=np.int64),
        edge_w=f32([e[2] for e in edges]),
        kind=raw.get("kind", "instance"),
    )


def graph_to_dot(g: atlas_mod.IRGraph) -> str:
    lines = ["graph ir {"]
    for v, w in zip(g.vertices, g.weights):
        lines.append(f'  v{int(v)} [label="{int(v)} w={w:.4f}"];')
    for u, v, w in zip(g.edge_u, g.edge_v, g.edge_w):
        lines.append(f'  v{int(u)} -- v{int(v)} [label="{w:.4f}"];')
    lines.append("}")
    return "\n".join(lines)


def export_graph(g: atlas_mod.IRGraph, fmt: str) -> str:
    if fmt == "dot":
        return graph_to_dot(g)
    if fmt == "json":
        return graph_to_json(g)
    raise ValueError(f"unknown export format {fmt!r}")


def _load_model(model_dir: str) -> matcher.InferenceModel:
    d = Path(model_dir)
    vocab = vocabulary.load_vocabulary(d / VOCAB_FILE)
    atl = atlas_mod.load_atlas(d / ATLAS_FILE)
    params, _, _ = matcher.load_params(d / PARAMS_FILE)
    return matcher.InferenceModel(vocab=vocab, atlas=atl, params=params)


def _save_model(model_dir: str, vocab, atl, params, history, cfg) -> None:
    d = Path(model_dir)
    d.mkdir(parents=True, exist_ok=True)
    vocabulary.save_vocabulary(d / VOCAB_FILE, vocab)
    atlas_mod.save_atlas(d / ATLAS_FILE, atl)
    matcher.save_params(d / PARAMS_FILE, params, seed=cfg.seed if cfg else 0, config=cfg)
    with open(d / HISTORY_FILE, "w") as f:
        json.dump(history, f, indent=1, sort_keys=True)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("SCHEMA_INFER_THREADS", "1"))


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_build_vocab(args) -> int:
    header, records = feature_io.load_records(args.input)
    size = args.size
    if size is None:
        size = 10 * len({r.label for r in records})  # default: ten words per class
        log.info("no --size given, defaulting to 10 x class count = %d", size)
    rng = SeededRng(args.seed)
    probe_rng, kmeans_rng = rng.split(2)
    tokens = vocabulary.probe_tokens(records, header.zeta, limit=args.probe_limit, rng=probe_rng)
    fp = vocabulary.Fingerprint(probe_size=tokens.shape[0], seed=args.seed, layer_index=header.layer_index)
    vocab = vocabulary.build_vocabulary(
        tokens, size, kmeans_rng, max_iters=args.max_iters, rel_tol=args.rel_tol, fingerprint=fp
    )
    vocabulary.save_vocabulary(args.out, vocab)
    log.info("built vocabulary M=%d d=%d from %d tokens", vocab.M, vocab.d, tokens.shape[0])
    return 0


def _cmd_feat2graph(args) -> int:
    header, records = feature_io.load_records(args.input)
    vocab = vocabulary.load_vocabulary(args.vocab)
    params = Feat2GraphParams(
        alpha1=args.alpha1, alpha2=args.alpha2, beta1=args.beta1, beta2=args.beta2, epsilon=args.epsilon
    )
    graphs = parallel_map(lambda r: record_to_graph(r, vocab, params), records, threads=_threads(args))
    atlas_mod.save_instance_graphs(
        args.out, graphs, [r.label for r in records], [r.image_id for r in records], vocab.M
    )
    log.info("converted %d records to graphs", len(graphs))
    return 0


def _cmd_init_atlas(args) -> int:
    graphs, labels, _, M = atlas_mod.load_instance_graphs(args.graphs)
    vocab = vocabulary.load_vocabulary(args.vocab)
    grouped: dict[int, list] = {}
    for g, label in zip(graphs, labels):
        grouped.setdefault(int(label), []).append(g)
    atl = atlas_mod.average_init(
        grouped, M=M, delta_t=args.delta_t, fingerprint=vocab.fingerprint, max_vertices=args.max_vertices
    )
    atlas_mod.sparsify(atl)
    atlas_mod.save_atlas(args.out, atl)
    log.info("initialized atlas with %d classes", atl.class_count)
    return 0


def _cmd_train(args) -> int:
    header, records = feature_io.load_records(args.input)
    vocab = vocabulary.load_vocabulary(args.vocab)
    cfg = matcher.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        min_lr=args.min_lr,
        weight_decay=args.weight_decay,
        gamma_v=args.gamma_v,
        gamma_e=args.gamma_e,
        delta_t=args.delta_t,
        layers=args.layers,
        dim=args.dim,
        seed=args.seed,
        epsilon=args.epsilon,
        bovw_mode=args.bovw,
        max_vertices=args.max_vertices,
        threads=_threads(args),
    )
    atl, params, history = matcher.train(records, vocab, cfg)
    _save_model(args.out_dir, vocab, atl, params, history, cfg)
    if history:
        log.info("final train accuracy %.4f", history[-1]["train_accuracy"])
    return 0


def _cmd_infer(args) -> int:
    model = _load_model(args.model)
    header, records = feature_io.load_records(args.input)
    result = evaluation.evaluate(records, model)
    preds = [
        {"image_id": int(r.image_id), "label": int(r.label), "prediction": model.predict(r)}
        for r in records
    ]
    print(json.dumps({"accuracy": result.accuracy, "records": preds}, sort_keys=True))
    return 0


def _cmd_explain(args) -> int:
    model = _load_model(args.model)
    header, records = feature_io.load_records(args.input)
    rec = next((r for r in records if r.image_id == args.image_id), None)
    if rec is None:
        raise ValueError(f"image id {args.image_id} not found in {args.input}")
    graph = record_to_graph(rec, model.vocab, model.params.feat2graph_params())
    report = matcher.explain(graph, args.cls, model.atlas, model.params, top_k=args.top_k)
    payload = {
        "class": report.class_index,
        "logit": report.logit,
        "shared_total": report.shared_total,
        "cross_total": report.cross_total,
        "shared": [
            {
                "ingredient": s.ingredient,
                "lam_instance": s.lam_instance,
                "lam_category": s.lam_category,
                "inner": s.inner,
                "term": s.term,
            }
            for s in report.shared
        ],
        "cross_top": [
            {
                "category_vertex": c.category_vertex,
                "instance_vertex": c.instance_vertex,
                "term": c.term,
                "shared_neighbors": c.shared_neighbors,
            }
            for c in report.cross_top
        ],
    }
    print(json.dumps(payload, sort_keys=True))
    return 0


def _cmd_perturb(args) -> int:
    model = _load_model(args.model)
    header, records = feature_io.load_records(args.input)
    polarity = "pos" if args.polarity == "pos" else "neg"
    curve = evaluation.run_perturbation(records, model, polarity)
    with open(args.out, "w") as f:
        json.dump(
            {"fractions": curve.fractions, "accuracy": curve.accuracy, "auc": curve.auc},
            f,
            sort_keys=True,
        )
    log.info("%s perturbation auc %.4f", polarity, curve.auc)
    return 0


def _cmd_extend(args) -> int:
    model = _load_model(args.model)
    graphs, labels, _, M = atlas_mod.load_instance_graphs(args.graphs)
    if M != model.atlas.M:
        raise ValueError(f"graph vocabulary size {M} != model vocabulary size {model.atlas.M}")
    grouped: dict[int, list] = {}
    for g, label in zip(graphs, labels):
        grouped.setdefault(int(label), []).append(g)
    extended = atlas_mod.extend_atlas(model.atlas, grouped, max_vertices=args.max_vertices)
    _save_model(args.out_dir, model.vocab, extended, model.params, [], None)
    log.info("extended atlas from %d to %d classes", model.atlas.class_count, extended.class_count)
    return 0


def _cmd_synth(args) -> int:
    with open(args.spec) as f:
        spec = evaluation.SyntheticSpec.from_json(f.read())
    data = evaluation.generate_synthetic(spec)
    feature_io.write_dataset(args.out, data.header("train"), data.train)
    stem = Path(args.out)
    test_path = args.out_test or str(stem.with_name(stem.stem + "_test" + stem.suffix))
    vocab_path = args.out_vocab or str(stem.with_suffix(".snvw"))
    if spec.test_size:
        feature_io.write_dataset(test_path, data.header("test"), data.test)
    vocabulary.save_vocabulary(vocab_path, data.vocab)
    log.info("wrote %d train / %d test records", len(data.train), len(data.test))
    return 0


def _cmd_export_graph(args) -> int:
    if args.graphs:
        graphs, _, _, _ = atlas_mod.load_instance_graphs(args.graphs)
        if not 0 <= args.index < len(graphs):
            raise ValueError(f"graph index {args.index} out of range (file has {len(graphs)})")
        g = graphs[args.index]
    else:
        atl = atlas_mod.load_atlas(args.atlas)
        if not 0 <= args.index < atl.class_count:
            raise ValueError(f"class index {args.index} out of range (atlas has {atl.class_count})")
        g = atl.graphs[args.index]
    print(export_graph(g, args.format))
    return 0


def _cmd_verify(args) -> int:
    rng = SeededRng(args.seed)
    if args.suite == "lemma1":
        report = evaluation.verify_lemma1(args.dim, args.samples, rng)
    else:
        report = evaluation.verify_theorem1(rng, trials=args.trials)
    print(report.format())
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="schema-infer",
        description="Ingredient-relation graph pipeline: vocabulary, graphs, atlas, matcher.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="increase log verbosity")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (env SCHEMA_INFER_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="k-means visual vocabulary from an SNFX file")
    p.add_argument("--input", required=True)
    p.add_argument("--size", type=int, default=None, help="vocabulary size (default: 10 x class count)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--probe-limit", type=int, default=vocabulary.DEFAULT_PROBE_LIMIT)
    p.set_defaults(func=_cmd_build_vocab)

    p = sub.add_parser("feat2graph", help="convert SNFX records to instance graphs")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha1", type=float, default=0.5)
    p.add_argument("--alpha2", type=float, default=0.5)
    p.add_argument("--beta1", type=float, default=0.5)
    p.add_argument("--beta2", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.set_defaults(func=_cmd_feat2graph)

    p = sub.add_parser("init-atlas", help="class-wise average initialization of the atlas")
    p.add_argument("--graphs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta-t", type=float, default=0.01)
    p.add_argument("--max-vertices", type=int, default=None)
    p.set_defaults(func=_cmd_init_atlas)

    p = sub.add_parser("train", help="train the matcher and atlas")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--min-lr", type=float, default=0.0)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--gamma-v", type=float, default=0.5)
    p.add_argument("--gamma-e", type=float, default=0.75)
    p.add_argument("--delta-t", type=float, default=0.01)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--bovw", action="store_true", help="bag-of-words mode: no conv layers, alpha1 fixed at 0")
    p.add_argument("--max-vertices", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="classify an SNFX file with a trained model")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("explain", help="evidence decomposition of one prediction")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("perturb", help="relevance-ordered token deletion curve")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--polarity", choices=["pos", "neg"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("extend", help="append new classes to a trained model's atlas")
    p.add_argument("--model", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-vertices", type=int, default=None)
    p.set_defaults(func=_cmd_extend)

    p = sub.add_parser("synth", help="generate a planted-structure synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-test", default=None)
    p.add_argument("--out-vocab", default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("export-graph", help="export a graph as DOT or JSON")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--graphs", default=None)
    src.add_argument("--atlas", default=None)
    p.add_argument("--index", type=int, default=0, help="graph index (SNGR) or class index (SNAT)")
    p.add_argument("--format", choices=["dot", "json"], default="json")
    p.set_defaults(func=_cmd_export_graph)

    p = sub.add_parser("verify", help="run a statistical/exactness verification suite")
    p.add_argument("--suite", choices=["lemma1", "theorem1"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--trials", type=int, default=50)
    p.set_defaults(func=_cmd_verify)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (feature_io.FormatError, feature_io.ValidationError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
