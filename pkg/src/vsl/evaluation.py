"""Evaluation: latent-feature classification, voxel IoU, retrieval scoring."""

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError, ShapeError
from .voxel_io import VoxelGrid


@dataclass
class FeatureMatrix:
    """One feature row per shape plus the shape's category label."""

    rows: np.ndarray
    labels: list

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ShapeError(f"rows must be 2-D, got shape {self.rows.shape}")
        if len(self.labels) != self.rows.shape[0]:
            raise ShapeError(
                f"{self.rows.shape[0]} rows but {len(self.labels)} labels"
            )


@dataclass
class IoUReport:
    per_category: dict
    overall_mean: float
    per_sample: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_category": dict(self.per_category),
            "overall_mean": self.overall_mean,
            "per_sample": {k: list(v) for k, v in self.per_sample.items()},
        }


def _grid_array(g):
    if isinstance(g, VoxelGrid):
        return g.occupancy
    if isinstance(g, torch.Tensor):
        return g.detach().cpu().numpy()
    return np.asarray(g)


def extract_features(model, grids, labels=None, batch_size=64) -> FeatureMatrix:
    """Zero-noise encodings: each row is the concatenated chain of posterior
    means for one grid. Row i depends only on grid i."""
    arrays = [_grid_array(g) for g in grids]
    if not arrays:
        raise DataError("no grids to featurize")
    if labels is None:
        labels = [None] * len(arrays)
    rows = []
    with torch.no_grad():
        for lo in range(0, len(arrays), batch_size):
            batch = np.stack(arrays[lo : lo + batch_size]).astype(np.float32)
            state = model.encode(torch.from_numpy(batch), deterministic=True)
            rows.append(state.z.cpu().numpy())
    return FeatureMatrix(rows=np.concatenate(rows, axis=0), labels=list(labels))


def classify_features(train: FeatureMatrix, test: FeatureMatrix) -> float:
    """Accuracy of an RBF-kernel SVM fit on train rows and scored on test.

    C and the kernel width are picked by 3-fold cross-validation over
    C in {1, 10, 100} and gamma in {0.1, 1, 10}/feature_dim.
    """
    from sklearn.model_selection import GridSearchCV
    from sklearn.svm import SVC

    if train.rows.shape[1] != test.rows.shape[1]:
        raise ShapeError(
            f"train feature dim {train.rows.shape[1]} != test "
            f"{test.rows.shape[1]}"
        )
    if len(set(train.labels)) < 2:
        raise DataError("training features contain a single class")
    dim = train.rows.shape[1]
    search = GridSearchCV(
        SVC(kernel="rbf"),
        {"C": [1, 10, 100], "gamma": [0.1 / dim, 1.0 / dim, 10.0 / dim]},
        cv=3,
    )
    search.fit(train.rows, np.asarray(train.labels))
    predicted = search.predict(test.rows)
    return float(np.mean(predicted == np.asarray(test.labels)))


def iou(pred, gt, threshold: float = 0.5) -> float:
    """Intersection-over-union of binarized occupancy sets; 1.0 when both
    sides are empty."""
    a = _grid_array(pred)
    b = _grid_array(gt)
    if a.shape != b.shape:
        raise ShapeError(f"grid dims {a.shape} != {b.shape}")
    a = a > threshold
    b = b > threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def evaluate_retrieval(model, pairs_by_category: dict, threshold: float = 0.5
                       ) -> IoUReport:
    """Score reconstruct_from_image against ground truth per category.

    pairs_by_category maps a category name to (image, VoxelGrid) pairs.
    The overall mean weights every category equally; empty categories are
    dropped with a warning.
    """
    per_category = {}
    per_sample = {}
    for category, pairs in pairs_by_category.items():
        pairs = list(pairs)
        if not pairs:
            warnings.warn(f"category {category!r} has no samples, skipping")
            continue
        scores = []
        for image, gt in pairs:
            probs = model.reconstruct_from_image(image)
            scores.append(iou(probs[0], gt, threshold))
        per_sample[category] = scores
        per_category[category] = float(np.mean(scores))
    if not per_category:
        raise DataError("no categories with samples")
    overall = float(np.mean(list(per_category.values())))
    return IoUReport(per_category=per_category, overall_mean=overall,
                     per_sample=per_sample)


def nearest_neighbor(query, corpus, threshold: float = 0.5):
    """Index and score of the corpus grid with highest IoU against the query;
    ties go to the lowest index."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("nearest_neighbor needs a non-empty corpus")
    best_idx, best_score = 0, -1.0
    for i, candidate in enumerate(corpus):
        score = iou(query, candidate, threshold)
        if score > best_score:
            best_idx, best_score = i, score
    return best_idx, best_score
