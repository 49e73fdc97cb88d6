import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripletgcn.preprocess import PreprocessStats, fit, median, transform
from tripletgcn.schema import Cohort, DataError, FeatureSpec, Kind, Triplet, parse_triplets

from conftest import random_cohort

NUM = FeatureSpec(0, "x", Kind.NUMERIC)
BIN = FeatureSpec(1, "b", Kind.BINARY)
CAT = FeatureSpec(2, "sex", Kind.CATEGORICAL, ("M", "F"))
SCHEMA = (NUM, BIN, CAT)


def sort_median(values):
    """Independent oracle: sort, then take the lower middle element."""
    ordered = sorted(values)
    n = len(ordered)
    return ordered[n // 2] if n % 2 else ordered[n // 2 - 1]


@pytest.mark.parametrize("values, expected", [([3, 1, 2], 2), ([1, 2, 3, 4], 2), ([7], 7)])
def test_median_examples(values, expected):
    assert median(values) == expected


def test_median_empty():
    with pytest.raises(ValueError):
        median([])


@settings(max_examples=200)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
def test_median_matches_sort_oracle(values):
    assert median(values) == sort_median(values)


def _cohort(records, n):
    return parse_triplets(records, SCHEMA, n)


def test_fit_median_of_observed():
    c = _cohort([(0, 0, "1"), (1, 0, "2"), (2, 0, "100")], 3)
    st_ = fit(c, [0, 1, 2])
    assert st_.features[0].median == 2


def test_fit_degenerate_sigma_floored():
    c = _cohort([(i, 0, "5") for i in range(4)], 4)
    assert fit(c, range(4)).features[0].std == 1.0


def test_fit_mode():
    c = _cohort([(0, 2, "M"), (1, 2, "M"), (2, 2, "F")], 3)
    assert fit(c, range(3)).features[2].mode == 0


def test_fit_uses_training_rows_only():
    c = _cohort([(0, 0, "1"), (1, 0, "3"), (2, 0, "1000")], 3)
    st_ = fit(c, [0, 1])
    assert st_.features[0].mean == 2.0


def test_fit_empty_training_set():
    with pytest.raises(DataError):
        fit(_cohort([(0, 0, "1")], 1), [])


def test_fit_fallback_for_unobserved(caplog):
    c = _cohort([(0, 1, "1")], 2)
    st_ = fit(c, [0, 1])
    f0, f2 = st_.features[0], st_.features[2]
    assert (f0.median, f0.mean, f0.std, f2.mode) == (0.0, 0.0, 1.0, 0)
    assert "no observed training values" in caplog.text


def test_fit_is_idempotent():
    c = random_cohort(30, seed=1)
    assert fit(c, range(20)) == fit(c, range(20))


def test_transform_examples():
    c = _cohort([(0, 0, "2"), (1, 0, "4"), (0, 1, "0"), (1, 1, "1")], 3)
    stats = fit(c, [0, 1])
    p = transform(c, stats)
    v = p.value_matrix()
    m = p.m.reshape(3, 2)
    # mu = 3, sigma = 1: x = mu maps to 0 is checked on the imputed patient below
    assert v[0, 0] == -1.0 and v[1, 0] == 1.0
    # binary observed 0 -> -1 with m = 1; observed 1 -> +1
    assert v[0, 1] == -1.0 and m[0, 1] == 1
    assert v[1, 1] == 1.0
    # patient 2 has nothing: numeric imputed with median 2 -> (2 - 3) / 1, binary -> 0
    assert v[2, 0] == -1.0 and m[2, 0] == 0
    assert v[2, 1] == 0.0 and m[2, 1] == 0
    # categorical missing -> mode index, observed flag off, and no edge
    assert p.cat_index[2, 0] == stats.features[2].mode
    assert not p.cat_observed[2, 0]
    assert p.graph_features == (0, 1)


def test_transform_centering_identity():
    c = _cohort([(0, 0, "1"), (1, 0, "3"), (2, 0, "2")], 3)
    p = transform(c, fit(c, range(3)))
    assert p.value_matrix()[2, 0] == 0.0


def test_transform_imputed_to_center():
    c = _cohort([(0, 0, "1"), (1, 0, "3"), (2, 0, "2")], 4)
    stats = fit(c, range(3))
    # median 2 == mean 2
    p = transform(c, stats)
    assert p.value_matrix()[3, 0] == 0.0 and p.m.reshape(4, 2)[3, 0] == 0


def test_transform_schema_mismatch():
    c = _cohort([(0, 0, "1")], 1)
    other = Cohort(1, (FeatureSpec(0, "y", Kind.NUMERIC),), (Triplet(0, 0, 1.0),))
    with pytest.raises(DataError, match="different schema"):
        transform(other, fit(c, [0]))


def test_every_pair_has_one_edge():
    c = random_cohort(12, missing=0.5, seed=4)
    p = transform(c, fit(c, range(12)))
    pairs = set(zip(p.edge_patient.tolist(), p.edge_feature.tolist()))
    assert len(pairs) == len(p.v) == 12 * p.n_graph_features


def test_stats_json_roundtrip():
    c = random_cohort(20, seed=2)
    stats = fit(c, range(20))
    assert PreprocessStats.from_json(stats.to_json()) == stats
    json.loads(stats.to_json())


def test_stats_after_impute_shrinks_std():
    c = random_cohort(40, n_numeric=1, n_binary=0, n_cat=0, missing=0.5, seed=5)
    before = fit(c, range(40)).features[0]
    after = fit(c, range(40), stats_after_impute=True).features[0]
    assert after.median == before.median
    assert after.std < before.std


def test_transform_ignores_labels():
    c = random_cohort(10, seed=6)
    unlabeled = Cohort(c.n_patients, c.schema, c.triplets, None)
    stats = fit(c, range(10))
    a, b = transform(c, stats), transform(unlabeled, stats)
    assert np.array_equal(a.v, b.v) and np.array_equal(a.m, b.m)
