"""Focal loss, exact reverse-mode gradients, Adam, and the full-batch training loop."""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .graph import BipartiteGraph, build_graph, spmm
from .metrics import auc as auc_score
from .model import (
    ForwardTrace,
    Gradients,
    ModelDims,
    N_SUMMARY,
    ModelParams,
    NumericalError,
    forward,
    init_params,
    leaky_relu_grad,
    summary_matrix,
)
from .preprocess import PreprocessStats, ProcessedCohort, fit, transform
from .schema import Cohort, DataError

log = logging.getLogger(__name__)

P_CLAMP = 1e-12
_LOG_CLAMP = math.log(P_CLAMP)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    gamma: float = 2.0
    alpha: float = 0.25
    # False weights every sample by alpha instead of alpha / (1 - alpha) by class
    alpha_balanced: bool = True
    dropout_rate: float = 0.5
    leaky_slope: float = 0.01
    seed: int = 0
    grad_clip: Optional[float] = 5.0
    early_stop_patience: Optional[int] = 50
    miss_weight: float = 0.5
    hidden: int = 64
    mlp_hidden: Optional[int] = None
    inductive: bool = False
    literal_degrees: bool = False
    stats_after_impute: bool = False
    deterministic: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0.0 <= self.miss_weight <= 1.0:
            raise ValueError("miss_weight must lie in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# loss


def _alpha_t(labels: np.ndarray, alpha: float, balanced: bool) -> np.ndarray:
    if not balanced:
        return np.full(labels.shape, float(alpha))
    return np.where(labels == 1, alpha, 1.0 - alpha)


def focal_loss(probs, labels, alpha: float = 0.25, gamma: float = 2.0, balanced: bool = True) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError("probs and labels differ in length")
    if probs.size == 0:
        raise ValueError("focal loss of an empty batch")
    p_t = np.where(labels == 1, probs, 1.0 - probs)
    p_t = np.maximum(p_t, P_CLAMP)
    terms = _alpha_t(labels, alpha, balanced) * (1.0 - p_t) ** gamma * np.log(p_t)
    return float(-terms.mean())


def focal_loss_logits(logits, labels, alpha: float, gamma: float, balanced: bool = True) -> tuple[float, np.ndarray]:
    """Focal loss computed from logits, with its derivative w.r.t. each logit.

    Uses ``log p_t = -log(1 + exp(-s z))`` with ``s = +1/-1`` for the label,
    which stays accurate when ``p_t`` is close to 1.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape != y.shape:
        raise ValueError("logits and labels differ in length")
    if z.size == 0:
        raise ValueError("focal loss of an empty batch")
    s = np.where(y == 1, 1.0, -1.0)
    log_pt = -np.logaddexp(0.0, -s * z)
    clamped = log_pt < _LOG_CLAMP
    log_pt_c = np.where(clamped, _LOG_CLAMP, log_pt)
    p_t = np.exp(log_pt)
    q_t = np.exp(-np.logaddexp(0.0, s * z))  # 1 - p_t without cancellation
    a_t = _alpha_t(y, alpha, balanced)
    n = z.size
    loss = float(-(a_t * q_t**gamma * log_pt_c).sum() / n)
    # d/dz of q^g * log p  =  s * (q^(g+1) - g * p * q^g * log p); the first term
    # vanishes where log p is clamped to a constant
    inner = np.where(clamped, 0.0, q_t ** (gamma + 1.0)) - gamma * p_t * q_t**gamma * log_pt_c
    dz = -a_t * s * inner / n
    return loss, dz


# --------------------------------------------------------------------------
# backward


def backward(
    trace: ForwardTrace,
    graph: BipartiteGraph,
    processed: ProcessedCohort,
    params: ModelParams,
    labels: Sequence[int],
    config: TrainConfig,
    loss_indices: Optional[Sequence[int]] = None,
) -> tuple[float, Gradients]:
    """Loss over ``loss_indices`` and its exact gradient for every parameter.

    Dropout masks in the trace are treated as constants. Patient summaries
    are data, so no gradient flows into them.
    """
    n = graph.n_patients
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError("labels must cover every patient in the graph")
    idx = np.arange(n) if loss_indices is None else np.asarray(loss_indices, dtype=np.int64)
    if trace.logits.shape != (n,) or trace.H0.shape != (graph.n_nodes, params.dims.d):
        raise ValueError("trace does not match graph and params")
    slope = trace.leaky_slope
    a = graph.adjacency_norm

    loss, dz_sel = focal_loss_logits(trace.logits[idx], labels[idx], config.alpha, config.gamma, config.alpha_balanced)
    dz = np.zeros(n)
    np.add.at(dz, idx, dz_sel)

    g = params.zeros_like()
    g["M2.W"] = trace.R1.T @ dz[:, None]
    g["M2.b"] = np.array([dz.sum()])
    d_r1 = dz[:, None] @ params["M2.W"].T
    d_q1 = d_r1 * leaky_relu_grad(trace.Q1, slope)
    g["M1.W"] = trace.H2[:n].T @ d_q1
    g["M1.b"] = d_q1.sum(axis=0)

    d_h2 = np.zeros_like(trace.H2)
    d_h2[:n] = d_q1 @ params["M1.W"].T

    # H2 = dropout(leaky(A H1 W1)) + H1
    d_g2 = d_h2 if trace.dropout_masks is None else d_h2 * trace.dropout_masks[1]
    d_p2 = d_g2 * leaky_relu_grad(trace.P2, slope)
    g["W1"] = trace.AH1.T @ d_p2
    # A is symmetric, so A^T x == A x
    d_h1 = d_h2 + spmm(a, d_p2 @ params["W1"].T)

    # H1 = dropout(leaky(A H0 W0))
    d_a1 = d_h1 if trace.dropout_masks is None else d_h1 * trace.dropout_masks[0]
    d_p1 = d_a1 * leaky_relu_grad(trace.P1, slope)
    g["W0"] = trace.AH0.T @ d_p1
    d_h0 = spmm(a, d_p1 @ params["W0"].T)

    d_hp, d_hf = d_h0[:n], d_h0[n:]
    g["Phi.W"] = trace.x_patients.T @ d_hp
    g["Phi.b"] = d_hp.sum(axis=0)
    d_x = d_hp @ params["Phi.W"].T
    dims = params.dims
    for k in range(dims.n_cat):
        lo = N_SUMMARY + dims.cat_embed * k
        e_grad = np.zeros(params[f"E{k}"].shape)
        np.add.at(e_grad, processed.cat_index[:, k], d_x[:, lo : lo + dims.cat_embed])
        g[f"E{k}"] = e_grad
    g["Psi.W"] = params["Z"].T @ d_hf
    g["Psi.b"] = d_hf.sum(axis=0)
    g["Z"] = d_hf @ params["Psi.W"].T

    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite gradient for {name}")
    return loss, g


def finite_diff_grad(loss_fn: Callable[[ModelParams], float], params: ModelParams, h: float = 1e-5) -> Gradients:
    """Central-difference gradient estimate, one entry at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    work = params.copy()
    out = params.zeros_like()
    for name, arr in work.items():
        grad = out[name]
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn(work)
            flat[j] = orig - h
            down = loss_fn(work)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
    return out


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())


def clip_gradients(grads: Gradients, max_norm: Optional[float]) -> Gradients:
    if max_norm is None:
        return grads
    norm = grads.global_norm()
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return Gradients(grads.dims, {k: v * scale for k, v in grads.items()})


def adam_step(
    params: ModelParams,
    grads: Gradients,
    state: AdamState,
    lr: float,
    grad_clip: Optional[float] = None,
) -> tuple[ModelParams, AdamState]:
    grads = clip_gradients(grads, grad_clip)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, g in grads.items():
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_p[k] = params[k] - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    dims = params.dims
    return ModelParams(dims, new_p), AdamState(ModelParams(dims, new_m), ModelParams(dims, new_v), t, b1, b2, state.eps)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainingHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def __len__(self):
        return len(self.epoch)

    def append(self, epoch: int, train_loss: float, val_loss: float, val_auc: float) -> None:
        self.epoch.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_auc.append(val_auc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_auc"])
        for row in zip(self.epoch, self.train_loss, self.val_loss, self.val_auc):
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


@contextlib.contextmanager
def deterministic_blas(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


@dataclass
class _View:
    processed: ProcessedCohort
    graph: BipartiteGraph
    summary: np.ndarray
    labels: np.ndarray
    idx: np.ndarray


def _make_view(cohort: Cohort, stats: PreprocessStats, config: TrainConfig, idx) -> _View:
    processed = transform(cohort, stats)
    graph = build_graph(processed, config.miss_weight, config.literal_degrees)
    return _View(processed, graph, summary_matrix(processed), np.asarray(cohort.labels), np.asarray(idx, dtype=np.int64))


def prepare(cohort: Cohort, stats: PreprocessStats, config: TrainConfig) -> tuple[ProcessedCohort, BipartiteGraph]:
    """Transform a cohort with fixed stats and build its graph."""
    processed = transform(cohort, stats)
    return processed, build_graph(processed, config.miss_weight, config.literal_degrees)


def predict_proba(cohort: Cohort, stats: PreprocessStats, params: ModelParams, config: TrainConfig) -> np.ndarray:
    """Eval-mode probabilities for every patient of ``cohort``."""
    if cohort.n_patients == 0:
        return np.zeros(0)
    processed, graph = prepare(cohort, stats, config)
    trace = forward(graph, processed, params, "eval", config.dropout_rate, config.leaky_slope)
    return trace.probs


def train(
    cohort: Cohort,
    split: tuple[Sequence[int], Sequence[int]],
    config: TrainConfig,
) -> tuple[ModelParams, PreprocessStats, TrainingHistory]:
    """Fit preprocessing on the training split and train with early stopping.

    Returns the parameters with the best validation loss (or the final ones
    when there is no validation split).
    """
    if cohort.labels is None:
        raise DataError("training needs labels")
    train_idx = np.asarray(sorted(int(i) for i in split[0]), dtype=np.int64)
    val_idx = np.asarray(sorted(int(i) for i in split[1]), dtype=np.int64)
    if set(train_idx.tolist()) & set(val_idx.tolist()):
        raise DataError("train and validation splits overlap")
    labels = np.asarray(cohort.labels)
    if train_idx.size == 0 or labels[train_idx].sum() == 0:
        raise DataError("training split has no positive labels")

    with deterministic_blas(config.deterministic):
        stats = fit(cohort, train_idx, config.stats_after_impute)
        if config.inductive:
            tr = _make_view(cohort.subset(train_idx), stats, config, np.arange(train_idx.size))
            seen = np.concatenate([train_idx, val_idx])
            va = _make_view(cohort.subset(seen), stats, config, np.arange(train_idx.size, seen.size))
        else:
            tr = _make_view(cohort, stats, config, train_idx)
            va = _View(tr.processed, tr.graph, tr.summary, tr.labels, val_idx)

        dims = ModelDims.for_cohort(tr.processed, d=config.hidden, mlp_hidden=config.mlp_hidden)
        params = init_params(dims, config.seed)
        history = TrainingHistory()
        if config.epochs == 0:
            return params, stats, history

        state = AdamState.zeros(params)
        rng = np.random.default_rng([config.seed, 1])
        best, best_loss, since_best = params, math.inf, 0
        has_val = va.idx.size > 0
        val_two_class = has_val and 0 < va.labels[va.idx].sum() < va.idx.size

        for epoch in range(config.epochs):
            trace = forward(tr.graph, tr.processed, params, "train", config.dropout_rate, config.leaky_slope, rng, tr.summary)
            loss, grads = backward(trace, tr.graph, tr.processed, params, tr.labels, config, tr.idx)
            if not math.isfinite(loss):
                raise NumericalError(f"training diverged at epoch {epoch}")

            val_loss = val_auc = math.nan
            if has_val:
                ev = forward(va.graph, va.processed, params, "eval", config.dropout_rate, config.leaky_slope, summary=va.summary)
                val_loss, _ = focal_loss_logits(ev.logits[va.idx], va.labels[va.idx], config.alpha, config.gamma, config.alpha_balanced)
                if val_two_class:
                    val_auc = auc_score(ev.probs[va.idx], va.labels[va.idx])
            history.append(epoch, loss, val_loss, val_auc)

            if has_val:
                if val_loss < best_loss:
                    best, best_loss, since_best = params, val_loss, 0
                    history.best_epoch = epoch
                else:
                    since_best += 1
                    if config.early_stop_patience is not None and since_best >= config.early_stop_patience:
                        log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                        break

            params, state = adam_step(params, grads, state, config.learning_rate, config.grad_clip)
            if not params.all_finite():
                raise NumericalError(f"non-finite parameters after epoch {epoch}")

        final = best if has_val else params
    return final.copy(), stats, history
