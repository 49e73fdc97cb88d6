"""Training-split statistics and the per-edge value transform.

Numeric features are median-imputed and z-scored, binary features are effect
coded to +1/-1 with 0 for missing, and categorical features are mode-imputed
into an index that later selects an embedding row (they never become edges).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .schema import Cohort, DataError, FeatureSchema, Kind, schema_fingerprint

log = logging.getLogger(__name__)

STD_FLOOR = 1e-12


def median(values: Sequence[float]) -> float:
    """Lower median: the element at position ``(n - 1) // 2`` once sorted."""
    vals = sorted(values)
    if not vals:
        raise ValueError("median of empty list")
    return vals[(len(vals) - 1) // 2]


@dataclass(frozen=True)
class FeatureStats:
    feature_id: int
    kind: Kind
    median: Optional[float] = None
    mean: Optional[float] = None
    std: Optional[float] = None
    mode: Optional[int] = None
    n_observed: int = 0


@dataclass(frozen=True)
class PreprocessStats:
    features: tuple[FeatureStats, ...]
    fitted_on: int
    schema_fingerprint: str
    stats_after_impute: bool = False

    def to_dict(self) -> dict:
        return {
            "fitted_on": self.fitted_on,
            "schema_fingerprint": self.schema_fingerprint,
            "stats_after_impute": self.stats_after_impute,
            "features": [
                {
                    "feature_id": s.feature_id,
                    "kind": s.kind.value,
                    "median": s.median,
                    "mean": s.mean,
                    "std": s.std,
                    "mode": s.mode,
                    "n_observed": s.n_observed,
                }
                for s in self.features
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PreprocessStats":
        feats = tuple(
            FeatureStats(
                feature_id=f["feature_id"],
                kind=Kind(f["kind"]),
                median=f["median"],
                mean=f["mean"],
                std=f["std"],
                mode=f["mode"],
                n_observed=f["n_observed"],
            )
            for f in obj["features"]
        )
        return cls(feats, obj["fitted_on"], obj["schema_fingerprint"], obj["stats_after_impute"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PreprocessStats":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ProcessedCohort:
    """Per-edge processed values for every (patient, non-categorical feature) pair.

    Edges are stored patient-major with features in ``graph_features`` order.
    ``edge_feature`` holds the feature's graph-node position, not its schema id.
    """

    n_patients: int
    schema: FeatureSchema
    graph_features: tuple[int, ...]
    cat_features: tuple[int, ...]
    cat_sizes: tuple[int, ...]
    edge_patient: np.ndarray
    edge_feature: np.ndarray
    v: np.ndarray
    m: np.ndarray
    cat_index: np.ndarray
    cat_observed: np.ndarray

    @property
    def n_graph_features(self) -> int:
        return len(self.graph_features)

    def value_matrix(self) -> np.ndarray:
        """Dense N x M view of ``v`` in graph-feature order."""
        out = np.zeros((self.n_patients, self.n_graph_features))
        out[self.edge_patient, self.edge_feature] = self.v
        return out


def _observed_by_feature(cohort: Cohort, patients: Sequence[int]) -> dict[int, list]:
    keep = set(int(p) for p in patients)
    obs: dict[int, list] = {s.feature_id: [] for s in cohort.schema}
    for t in cohort.triplets:
        if t.value is not None and t.patient_id in keep:
            obs[t.feature_id].append(t.value)
    return obs


def fit(cohort: Cohort, train_indices: Sequence[int], stats_after_impute: bool = False) -> PreprocessStats:
    train = sorted(set(int(i) for i in train_indices))
    if not train:
        raise DataError("cannot fit preprocessing on an empty training set")
    if train[0] < 0 or train[-1] >= cohort.n_patients:
        raise DataError("training index out of range")
    obs = _observed_by_feature(cohort, train)
    feats = []
    for spec in cohort.schema:
        values = obs[spec.feature_id]
        if spec.kind is Kind.BINARY:
            feats.append(FeatureStats(spec.feature_id, spec.kind, n_observed=len(values)))
            continue
        if not values:
            log.warning("feature %r has no observed training values; using fallback stats", spec.name)
            if spec.kind is Kind.NUMERIC:
                feats.append(FeatureStats(spec.feature_id, spec.kind, 0.0, 0.0, 1.0, n_observed=0))
            else:
                feats.append(FeatureStats(spec.feature_id, spec.kind, mode=0, n_observed=0))
            continue
        if spec.kind is Kind.CATEGORICAL:
            counts = [0] * len(spec.categories)
            for tok in values:
                counts[spec.categories.index(tok)] += 1
            # ties go to the earliest declared category
            feats.append(FeatureStats(spec.feature_id, spec.kind, mode=int(np.argmax(counts)), n_observed=len(values)))
            continue
        med = median(values)
        arr = np.asarray(values, dtype=np.float64)
        if stats_after_impute:
            arr = np.concatenate([arr, np.full(len(train) - len(values), med)])
        mu = float(arr.mean())
        sd = float(arr.std())
        if sd < STD_FLOOR:
            sd = 1.0
        feats.append(FeatureStats(spec.feature_id, spec.kind, float(med), mu, sd, n_observed=len(values)))
    return PreprocessStats(tuple(feats), len(train), schema_fingerprint(cohort.schema), stats_after_impute)


def transform(cohort: Cohort, stats: PreprocessStats) -> ProcessedCohort:
    if stats.schema_fingerprint != schema_fingerprint(cohort.schema):
        raise DataError("preprocessing stats were fitted on a different schema")
    schema = cohort.schema
    graph_features = tuple(s.feature_id for s in schema if s.kind is not Kind.CATEGORICAL)
    cat_features = tuple(s.feature_id for s in schema if s.kind is Kind.CATEGORICAL)
    node_of = {f: j for j, f in enumerate(graph_features)}
    cat_col = {f: k for k, f in enumerate(cat_features)}
    n, m = cohort.n_patients, len(graph_features)

    raw = np.full((n, m), np.nan)
    observed = np.zeros((n, m), dtype=bool)
    cat_index = np.empty((n, len(cat_features)), dtype=np.int64)
    cat_observed = np.zeros((n, len(cat_features)), dtype=bool)
    for k, f in enumerate(cat_features):
        cat_index[:, k] = stats.features[f].mode
    for t in cohort.triplets:
        if t.value is None:
            continue
        spec = schema[t.feature_id]
        if spec.kind is Kind.CATEGORICAL:
            k = cat_col[t.feature_id]
            cat_index[t.patient_id, k] = spec.categories.index(t.value)
            cat_observed[t.patient_id, k] = True
        else:
            j = node_of[t.feature_id]
            raw[t.patient_id, j] = float(t.value)
            observed[t.patient_id, j] = True

    v = np.zeros((n, m))
    for j, f in enumerate(graph_features):
        st = stats.features[f]
        col = raw[:, j]
        obs = observed[:, j]
        if st.kind is Kind.NUMERIC:
            filled = np.where(obs, col, st.median)
            v[:, j] = (filled - st.mean) / st.std
        else:
            v[:, j] = np.where(obs, np.where(col == 1.0, 1.0, -1.0), 0.0)

    ep, ef = np.divmod(np.arange(n * m), m) if m else (np.empty(0, np.int64), np.empty(0, np.int64))
    return ProcessedCohort(
        n_patients=n,
        schema=schema,
        graph_features=graph_features,
        cat_features=cat_features,
        cat_sizes=tuple(len(schema[f].categories) for f in cat_features),
        edge_patient=ep.astype(np.int64),
        edge_feature=ef.astype(np.int64),
        v=v.reshape(-1),
        m=observed.reshape(-1).astype(np.int8),
        cat_index=cat_index,
        cat_observed=cat_observed,
    )
