"""Ingredient-relation graph inference.

Converts backbone token features into weighted ingredient graphs, learns one
category-level graph per class, and classifies by matching instance graphs
against them with a shallow graph-convolutional matcher. Evidence for every
logit decomposes exactly into per-ingredient terms.
"""

from .atlas import IRAtlas, IRGraph, average_init, entropy, extend_atlas, sparsify
from .evaluation import (
    PerturbationCurve,
    SyntheticSpec,
    edge_only_spec,
    evaluate,
    generate_synthetic,
    perturb_record,
    planted_relevance_spec,
    run_perturbation,
    verify_lemma1,
    verify_theorem1,
)
from .feat2graph import AttentionViews, Feat2GraphParams, attention_views, feat2graph, normalize_graph
from .feature_io import DatasetHeader, FeatureRecord, read_dataset, write_dataset
from .matcher import (
    EvidenceReport,
    InferenceModel,
    LossBreakdown,
    MatcherParams,
    TrainConfig,
    bovw_mode_logits,
    embed_graph,
    explain,
    forward,
    graph_conv,
    loss_and_grads,
    train,
)
from .numerics import AdamWState, CosineSchedule, SeededRng, adamw_step, finite_diff_check
from .vocabulary import VisualVocabulary, assign_ingredient, build_vocabulary, discretize_record

__version__ = "0.1.0"
