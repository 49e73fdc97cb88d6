"""Parameters and forward pass of the two-layer residual GCN with an MLP head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .graph import BipartiteGraph, spmm
from .preprocess import ProcessedCohort

log = logging.getLogger(__name__)

N_SUMMARY = 4
# keep probabilities strictly inside (0, 1) even for saturated logits
_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelDims:
    n_features: int
    cat_sizes: tuple[int, ...] = ()
    d: int = 64
    feat_embed: int = 32
    cat_embed: int = 4
    mlp_hidden: Optional[int] = None

    def __post_init__(self):
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", math.ceil(self.d / 2))
        if self.d < 1 or self.mlp_hidden < 1:
            raise ValueError("d and mlp_hidden must be at least 1")
        if self.feat_embed < 1 or self.cat_embed < 1:
            raise ValueError("embedding widths must be at least 1")
        if any(c < 1 for c in self.cat_sizes):
            raise ValueError("every categorical feature needs at least one category")

    @property
    def n_cat(self) -> int:
        return len(self.cat_sizes)

    @property
    def patient_in(self) -> int:
        return N_SUMMARY + self.cat_embed * self.n_cat

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Tensor names and shapes, in the fixed serialization order."""
        d, h = self.d, self.mlp_hidden
        out = {"Z": (self.n_features, self.feat_embed), "Psi.W": (self.feat_embed, d), "Psi.b": (d,)}
        for k, size in enumerate(self.cat_sizes):
            out[f"E{k}"] = (size, self.cat_embed)
        out.update(
            {
                "Phi.W": (self.patient_in, d),
                "Phi.b": (d,),
                "W0": (d, d),
                "W1": (d, d),
                "M1.W": (d, h),
                "M1.b": (h,),
                "M2.W": (h, 1),
                "M2.b": (1,),
            }
        )
        return out

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "cat_sizes": list(self.cat_sizes),
            "d": self.d,
            "feat_embed": self.feat_embed,
            "cat_embed": self.cat_embed,
            "mlp_hidden": self.mlp_hidden,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelDims":
        return cls(
            n_features=obj["n_features"],
            cat_sizes=tuple(obj["cat_sizes"]),
            d=obj["d"],
            feat_embed=obj["feat_embed"],
            cat_embed=obj["cat_embed"],
            mlp_hidden=obj["mlp_hidden"],
        )

    @classmethod
    def for_cohort(cls, processed: ProcessedCohort, **kwargs) -> "ModelDims":
        return cls(n_features=processed.n_graph_features, cat_sizes=processed.cat_sizes, **kwargs)


@dataclass
class ModelParams:
    """Named float64 tensors. Gradients and optimizer moments use the same container."""

    dims: ModelDims
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.dims.shapes()
        if not self.tensors:
            self.tensors = {k: np.zeros(s) for k, s in shapes.items()}
        if list(self.tensors) != list(shapes):
            raise ValueError("tensor names do not match the model dims")
        for k, s in shapes.items():
            if self.tensors[k].shape != s:
                raise ValueError(f"{k}: shape {self.tensors[k].shape} != {s}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if value.shape != self.tensors[name].shape:
            raise ValueError(f"{name}: shape mismatch")
        self.tensors[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.dims)

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


Gradients = ModelParams


def init_params(dims: ModelDims, seed: int = 0) -> ModelParams:
    """Glorot-uniform matrices, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in dims.shapes().items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(dims, tensors)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, 1.0, slope)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def patient_summary(processed: ProcessedCohort, i: int) -> np.ndarray:
    """[mean, max, min, population variance] of patient ``i``'s edge values."""
    vals = processed.v[processed.edge_patient == i]
    if vals.size == 0:
        log.warning("patient %d has no incident edges; summary set to zeros", i)
        return np.zeros(N_SUMMARY)
    return np.array([vals.mean(), vals.max(), vals.min(), vals.var()])


def summary_matrix(processed: ProcessedCohort) -> np.ndarray:
    n, m = processed.n_patients, processed.n_graph_features
    if m == 0:
        if n:
            log.warning("no graph features; patient summaries set to zeros")
        return np.zeros((n, N_SUMMARY))
    vals = processed.value_matrix()
    return np.column_stack([vals.mean(axis=1), vals.max(axis=1), vals.min(axis=1), vals.var(axis=1)])


def patient_inputs(processed: ProcessedCohort, params: ModelParams, summary: Optional[np.ndarray] = None) -> np.ndarray:
    """Rows ``[s_i | e_1(c_i1) | ... | e_K(c_iK)]``, the input to the patient projection."""
    dims = params.dims
    if processed.cat_sizes != dims.cat_sizes or processed.n_graph_features != dims.n_features:
        raise ValueError("processed cohort does not match the model dims")
    parts = [summary_matrix(processed) if summary is None else summary]
    for k in range(dims.n_cat):
        idx = processed.cat_index[:, k]
        if idx.size and (idx.min() < 0 or idx.max() >= dims.cat_sizes[k]):
            raise IndexError(f"category index out of range for categorical feature {k}")
        parts.append(params[f"E{k}"][idx])
    return np.concatenate(parts, axis=1)


def init_node_matrix(processed: ProcessedCohort, params: ModelParams, summary: Optional[np.ndarray] = None) -> np.ndarray:
    x_p = patient_inputs(processed, params, summary)
    h_patients = x_p @ params["Phi.W"] + params["Phi.b"]
    h_features = params["Z"] @ params["Psi.W"] + params["Psi.b"]
    return np.vstack([h_patients, h_features])


@dataclass
class ForwardTrace:
    summary: np.ndarray
    x_patients: np.ndarray
    H0: np.ndarray
    AH0: np.ndarray
    P1: np.ndarray
    H1: np.ndarray
    AH1: np.ndarray
    P2: np.ndarray
    H2: np.ndarray
    Q1: np.ndarray
    R1: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    dropout_masks: Optional[tuple[np.ndarray, np.ndarray]]
    leaky_slope: float


def _check(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in layer {name}")
    return x


def _dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def forward(
    graph: BipartiteGraph,
    processed: ProcessedCohort,
    params: ModelParams,
    mode: str = "eval",
    dropout_rate: float = 0.5,
    leaky_slope: float = 0.01,
    rng: Optional[np.random.Generator] = None,
    summary: Optional[np.ndarray] = None,
) -> ForwardTrace:
    """Full-graph forward pass. Eval mode consumes no randomness."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    n = graph.n_patients
    if n != processed.n_patients or graph.n_features != params.dims.n_features:
        raise ValueError("graph, cohort and params disagree on dimensions")
    training = mode == "train" and dropout_rate > 0.0
    if training and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    a = graph.adjacency_norm
    slope = leaky_slope

    s = summary_matrix(processed) if summary is None else summary
    x_p = patient_inputs(processed, params, s)
    h0 = _check("H0", np.vstack([x_p @ params["Phi.W"] + params["Phi.b"], params["Z"] @ params["Psi.W"] + params["Psi.b"]]))

    ah0 = spmm(a, h0)
    p1 = _check("H1", ah0 @ params["W0"])
    h1 = leaky_relu(p1, slope)
    masks = None
    if training:
        m1 = _dropout_mask(h1.shape, dropout_rate, rng)
        h1 = h1 * m1

    ah1 = spmm(a, h1)
    p2 = _check("H2", ah1 @ params["W1"])
    g2 = leaky_relu(p2, slope)
    if training:
        m2 = _dropout_mask(g2.shape, dropout_rate, rng)
        g2 = g2 * m2
        masks = (m1, m2)
    h2 = g2 + h1

    q1 = h2[:n] @ params["M1.W"] + params["M1.b"]
    r1 = leaky_relu(q1, slope)
    logits = _check("logits", (r1 @ params["M2.W"] + params["M2.b"])[:, 0])
    probs = np.clip(sigmoid(logits), _P_LO, _P_HI)
    return ForwardTrace(s, x_p, h0, ah0, p1, h1, ah1, p2, h2, q1, r1, logits, probs, masks, slope)
