#!/usr/bin/env python3
"""Relevance-ordered token deletion curves.

Trains on the planted-relevance dataset, then drops tokens in descending
(positive) and ascending (negative) relevance order and tracks accuracy decay.
Writes both curves as JSON.

Usage: python scripts/perturbation_experiment.py --out curves.json
"""

import argparse
import json

from schema_infer.evaluation import (
    evaluate,
    generate_synthetic,
    planted_relevance_spec,
    run_perturbation,
)
from schema_infer.matcher import InferenceModel, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--train-size", type=int, default=400)
    ap.add_argument("--test-size", type=int, default=200)
    ap.add_argument("--seed", type=int, default=2)
    ap.add_argument("--out", default=None, help="write curves to this JSON file")
    args = ap.parse_args()

    data = generate_synthetic(
        planted_relevance_spec(seed=args.seed, train_size=args.train_size, test_size=args.test_size)
    )
    cfg = TrainConfig(epochs=args.epochs, layers=2, dim=256, seed=args.seed)
    atlas, params, _ = train(data.train, data.vocab, cfg)
    model = InferenceModel(data.vocab, atlas, params)

    payload = {"base_accuracy": evaluate(data.test, model).accuracy}
    for polarity in ("pos", "neg"):
        curve = run_perturbation(data.test, model, polarity)
        payload[polarity] = {
            "fractions": curve.fractions,
            "accuracy": curve.accuracy,
            "auc": curve.auc,
        }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
