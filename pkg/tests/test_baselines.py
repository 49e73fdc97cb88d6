import numpy as np
import pytest

from tripletgcn.baselines import DenseDesign, densify, knn_score, scores_to_csv
from tripletgcn.preprocess import fit, transform

from conftest import random_cohort


def brute_knn(train, y, test, k):
    """Exhaustive oracle: sort (distance, index) pairs for every test row."""
    out = []
    for row in test:
        pairs = sorted((float(np.sqrt(((t - row) ** 2).sum())), j) for j, t in enumerate(train))
        out.append(sum(y[j] for _, j in pairs[:k]) / k)
    return np.array(out)


def _design(x):
    return DenseDesign(np.asarray(x, dtype=float), tuple((j, None) for j in range(np.shape(x)[1])))


def test_densify_one_hot():
    c = random_cohort(10, n_numeric=2, n_binary=1, n_cat=1, n_cats=3, seed=2)
    p = transform(c, fit(c, range(10)))
    d = densify(p)
    assert d.X.shape == (10, 3 + 3)
    assert np.array_equal(d.X[:, 3:].sum(axis=1), np.ones(10))
    assert d.manifest[3:] == ((3, 0), (3, 1), (3, 2))


def test_k_all_gives_prevalence():
    rng = np.random.default_rng(0)
    tr = _design(rng.normal(size=(12, 3)))
    y = np.array([1, 0, 0] * 4)
    s = knn_score(tr, y, _design(rng.normal(size=(5, 3))), k=12)
    assert np.all(s == 4 / 12)


def test_duplicate_training_row():
    tr = _design([[0.0, 0.0], [5.0, 5.0]])
    s = knn_score(tr, [1, 0], _design([[0.0, 0.0]]), k=1)
    assert s[0] == 1.0


def test_tie_breaks_to_lower_index():
    tr = _design([[1.0], [-1.0], [3.0]])
    assert knn_score(tr, [0, 1, 1], _design([[0.0]]), k=1)[0] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    # coarse grid values so ties actually occur
    train = rng.integers(-2, 3, size=(30, 5)).astype(float)
    test = rng.integers(-2, 3, size=(30, 5)).astype(float)
    y = rng.integers(0, 2, 30)
    for k in (1, 5, 30):
        assert np.array_equal(knn_score(_design(train), y, _design(test), k), brute_knn(train, y, test, k))


def test_manifest_mismatch():
    a = _design([[0.0, 1.0]])
    b = DenseDesign(np.zeros((1, 2)), ((0, None), (2, None)))
    with pytest.raises(ValueError, match="manifest"):
        knn_score(a, [1], b, 1)


def test_bad_k():
    with pytest.raises(ValueError):
        knn_score(_design([[0.0]]), [1], _design([[0.0]]), 2)


def test_scores_csv():
    assert scores_to_csv(["a", 3], [0.5, 1 / 3]) == "patient_id,score\na,0.500000\n3,0.333333\n"
