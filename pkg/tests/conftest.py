import numpy as np

from schema_infer.feature_io import FeatureRecord
from schema_infer.vocabulary import VisualVocabulary


def spread_centers(m: int, d: int, scale: float = 5.0) -> np.ndarray:
    """m well-separated centers in R^d (m <= d)."""
    centers = np.zeros((m, d))
    centers[np.arange(m), np.arange(m)] = scale
    return centers


def build_record(
    indices,
    centers: np.ndarray,
    grid_h: int,
    grid_w: int,
    attn: np.ndarray,
    zeta: int = 1,
    label: int = 0,
    image_id: int = 0,
) -> FeatureRecord:
    """Record whose visual tokens sit exactly on the given centers."""
    indices = np.asarray(indices)
    n = indices.shape[0]
    assert n == grid_h * grid_w
    d = centers.shape[1]
    x = np.vstack([np.zeros((zeta, d)), centers[indices]])
    return FeatureRecord(
        image_id=image_id,
        label=label,
        X=x.astype(np.float32),
        attn=np.asarray(attn, dtype=np.float32),
        zeta=zeta,
        grid_h=grid_h,
        grid_w=grid_w,
    )


def vocab_for(centers: np.ndarray) -> VisualVocabulary:
    return VisualVocabulary(centers=np.asarray(centers, dtype=np.float64))
