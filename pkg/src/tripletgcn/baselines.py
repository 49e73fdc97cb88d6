"""Feature-independent KNN baseline over the densified processed design."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .preprocess import ProcessedCohort


@dataclass(frozen=True)
class DenseDesign:
    X: np.ndarray
    # one entry per column: (schema feature id, category index or None)
    manifest: tuple[tuple[int, object], ...]

    def rows(self, idx: Sequence[int]) -> "DenseDesign":
        return DenseDesign(self.X[np.asarray(idx, dtype=np.int64)], self.manifest)


def densify(processed: ProcessedCohort) -> DenseDesign:
    """Processed values for numeric/binary features, one-hot columns for categoricals."""
    cols = [processed.value_matrix()]
    manifest = [(f, None) for f in processed.graph_features]
    for k, (f, size) in enumerate(zip(processed.cat_features, processed.cat_sizes)):
        onehot = np.zeros((processed.n_patients, size))
        onehot[np.arange(processed.n_patients), processed.cat_index[:, k]] = 1.0
        cols.append(onehot)
        manifest.extend((f, c) for c in range(size))
    return DenseDesign(np.hstack(cols), tuple(manifest))


def knn_score(train_X: DenseDesign, train_y: Sequence[int], test_X: DenseDesign, k: int = 5) -> np.ndarray:
    """Fraction of positives among the k Euclidean-nearest training rows.

    Equal distances are resolved in favour of the lower training-row index.
    """
    if train_X.manifest != test_X.manifest:
        raise ValueError("train and test designs have different column manifests")
    y = np.asarray(train_y)
    n_train = train_X.X.shape[0]
    if y.shape != (n_train,):
        raise ValueError("train_y must have one label per training row")
    if k < 1 or k > n_train:
        raise ValueError(f"k must lie in [1, {n_train}]")
    scores = np.empty(test_X.X.shape[0])
    for i, row in enumerate(test_X.X):
        dist = np.sqrt(((train_X.X - row) ** 2).sum(axis=1))
        nearest = np.argsort(dist, kind="stable")[:k]
        scores[i] = y[nearest].sum() / k
    return scores


def scores_to_csv(patient_ids: Sequence, scores: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "score"])
    for pid, s in zip(patient_ids, scores):
        w.writerow([pid, f"{float(s):.6f}"])
    return buf.getvalue()
