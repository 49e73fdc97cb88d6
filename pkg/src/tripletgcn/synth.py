"""Synthetic triplet cohorts drawn from a known logistic model."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .model import sigmoid
from .schema import Cohort, FeatureSpec, Kind, Triplet, save_cohort

PREVALENCE_TOL = 0.02
_BISECT_STEPS = 100


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 648
    n_numeric: int = 20
    n_binary: int = 6
    n_categorical: int = 2
    n_categories: int = 3
    prevalence: float = 1.0 / 3.0
    signal_strength: float = 1.5
    missing_rate: float = 0.2
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if min(self.n_numeric, self.n_binary, self.n_categorical) < 0:
            raise ValueError("feature counts must be nonnegative")
        if self.n_categorical and self.n_categories < 1:
            raise ValueError("n_categories must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass(frozen=True)
class SynthTruth:
    coefficients: tuple[float, ...]
    intercept: float
    realized_prevalence: float
    realized_missing_rate: float


def _schema(config: SynthConfig) -> tuple[FeatureSpec, ...]:
    specs = []
    for j in range(config.n_numeric):
        specs.append(FeatureSpec(len(specs), f"num_{j:02d}", Kind.NUMERIC))
    for j in range(config.n_binary):
        specs.append(FeatureSpec(len(specs), f"bin_{j:02d}", Kind.BINARY))
    cats = tuple(f"c{c}" for c in range(config.n_categories))
    for j in range(config.n_categorical):
        specs.append(FeatureSpec(len(specs), f"cat_{j:02d}", Kind.CATEGORICAL, cats))
    return tuple(specs)


def _calibrate(score: np.ndarray, u: np.ndarray, target: float) -> float:
    """Intercept whose realized label rate (u < sigmoid(score + b)) is within tolerance.

    The realized rate is monotone in b for fixed uniforms, so bisection works.
    """
    # tiny cohorts cannot resolve the rate finer than half a patient
    tol = max(PREVALENCE_TOL, 0.5 / score.size + 1e-12)
    lo, hi = -50.0 - np.abs(score).max(initial=0.0), 50.0 + np.abs(score).max(initial=0.0)
    best_b, best_gap = None, math.inf
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        rate = float(np.mean(u < sigmoid(score + mid)))
        gap = abs(rate - target)
        if gap < best_gap:
            best_b, best_gap = mid, gap
        if gap <= tol / 4:
            break
        if rate < target:
            lo = mid
        else:
            hi = mid
    if best_gap > tol:
        raise CalibrationError(f"could not reach prevalence {target:.4f} (closest gap {best_gap:.4f})")
    return best_b


def generate_with_truth(config: SynthConfig) -> tuple[Cohort, SynthTruth]:
    rng = np.random.default_rng(config.seed)
    n = config.n_patients
    numeric = rng.standard_normal((n, config.n_numeric))
    binary = (rng.random((n, config.n_binary)) < 0.5).astype(np.int64)
    categorical = rng.integers(0, max(config.n_categories, 1), size=(n, config.n_categorical))

    coef = np.zeros(config.n_numeric)
    coef[: math.ceil(config.n_numeric / 2)] = config.signal_strength
    # latent noise on the linear score, on top of the Bernoulli draw
    score = numeric @ coef + config.noise_std * rng.standard_normal(n)
    u = rng.random(n)
    b = _calibrate(score, u, config.prevalence)
    labels = (u < sigmoid(score + b)).astype(int)

    n_graph = config.n_numeric + config.n_binary
    missing = rng.random((n, n_graph)) < config.missing_rate

    schema = _schema(config)
    trips = []
    for i in range(n):
        for j in range(config.n_numeric):
            if not missing[i, j]:
                trips.append(Triplet(i, j, float(numeric[i, j])))
        for j in range(config.n_binary):
            if not missing[i, config.n_numeric + j]:
                trips.append(Triplet(i, config.n_numeric + j, int(binary[i, j])))
        for j in range(config.n_categorical):
            fid = n_graph + j
            trips.append(Triplet(i, fid, schema[fid].categories[categorical[i, j]]))
    cohort = Cohort(n, schema, tuple(trips), tuple(int(y) for y in labels))
    truth = SynthTruth(
        coefficients=tuple(float(c) for c in coef),
        intercept=float(b),
        realized_prevalence=float(labels.mean()),
        realized_missing_rate=float(missing.mean()) if missing.size else 0.0,
    )
    return cohort, truth


def generate(config: SynthConfig) -> Cohort:
    return generate_with_truth(config)[0]


def provenance_json(config: SynthConfig, truth: SynthTruth) -> str:
    return json.dumps({"config": asdict(config), "truth": asdict(truth)}, indent=2) + "\n"


def write_synthetic(config: SynthConfig, directory: Union[str, Path]) -> dict[str, Path]:
    cohort, truth = generate_with_truth(config)
    paths = save_cohort(cohort, directory)
    paths["provenance"] = Path(directory) / "provenance.json"
    paths["provenance"].write_text(provenance_json(config, truth), encoding="utf-8")
    return paths
