"""Bipartite patient/feature graph in CSR form.

Node order is fixed: patients occupy rows ``0..N-1`` and graph features rows
``N..N+M-1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
import scipy.sparse as sp

from .preprocess import ProcessedCohort

DEGREE_FLOOR = 1e-12


@dataclass(frozen=True)
class SparseMatrix:
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ro = self.row_offsets
        if len(ro) != self.n_rows + 1 or ro[0] != 0 or ro[-1] != len(self.col_indices):
            raise ValueError("row_offsets inconsistent with matrix shape")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if len(self.values) != len(self.col_indices):
            raise ValueError("values and col_indices differ in length")
        if len(self.col_indices) and (self.col_indices.min() < 0 or self.col_indices.max() >= self.n_cols):
            raise ValueError("column index out of range")
        same_row = np.diff(self.row_indices()) == 0
        if np.any(np.diff(self.col_indices)[same_row] <= 0):
            raise ValueError("columns within a row must be strictly increasing")

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=self.shape)

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))

    @classmethod
    def from_coo(cls, rows, cols, values, shape: tuple[int, int]) -> "SparseMatrix":
        """Canonical CSR from coordinate entries; duplicate coordinates are an error."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if len(rows) > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if np.any(dup):
                raise ValueError("duplicate coordinate in sparse matrix")
        offsets = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(offsets, rows + 1, 1)
        return cls(shape[0], shape[1], np.cumsum(offsets), cols, values)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseMatrix":
        r, c = np.nonzero(dense)
        return cls.from_coo(r, c, dense[r, c], dense.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_indices(), self.col_indices] = self.values
        return out

    def with_values(self, values: np.ndarray) -> "SparseMatrix":
        return SparseMatrix(self.n_rows, self.n_cols, self.row_offsets, self.col_indices, values)


@dataclass(frozen=True)
class BipartiteGraph:
    n_patients: int
    n_features: int
    adjacency_hat: SparseMatrix
    adjacency_norm: SparseMatrix

    @property
    def n_nodes(self) -> int:
        return self.n_patients + self.n_features


def build_adjacency(processed: ProcessedCohort, miss_weight: float = 0.5) -> SparseMatrix:
    """Weighted adjacency with unit self-loops.

    Observed edges carry ``v``; imputed edges carry ``miss_weight * v``.
    Zero-valued edges stay in the sparsity pattern.
    """
    if not 0.0 <= miss_weight <= 1.0:
        raise ValueError("miss_weight must lie in [0, 1]")
    n, m = processed.n_patients, processed.n_graph_features
    size = n + m
    if size >= np.iinfo(np.int64).max // 4:
        raise OverflowError("graph too large to index")
    w = np.where(processed.m == 1, processed.v, miss_weight * processed.v)
    p = processed.edge_patient
    f = processed.edge_feature + n
    diag = np.arange(size)
    rows = np.concatenate([p, f, diag])
    cols = np.concatenate([f, p, diag])
    vals = np.concatenate([w, w, np.ones(size)])
    return SparseMatrix.from_coo(rows, cols, vals, (size, size))


def degree_vector(adj_hat: SparseMatrix, literal: bool = False) -> np.ndarray:
    """Row sums of absolute weights (or signed weights with ``literal``), floored."""
    vals = adj_hat.values if literal else np.abs(adj_hat.values)
    deg = np.zeros(adj_hat.n_rows)
    np.add.at(deg, adj_hat.row_indices(), vals)
    return np.maximum(deg, DEGREE_FLOOR)


def normalize(adj_hat: SparseMatrix, degrees: np.ndarray) -> SparseMatrix:
    if np.any(degrees <= 0):
        raise ValueError("degrees must be positive")
    r = adj_hat.row_indices()
    c = adj_hat.col_indices
    # the product is commutative, so mirrored entries get identical values
    scale = np.sqrt(degrees[r] * degrees[c])
    return adj_hat.with_values(adj_hat.values / scale)


def spmm(a: SparseMatrix, h: np.ndarray) -> np.ndarray:
    """Sparse-dense product.

    Each output row is accumulated serially over that row's stored entries in
    ascending column order (scipy's CSR kernel), so results do not depend on
    threading.
    """
    h = np.asarray(h, dtype=np.float64)
    if a.n_cols != h.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {h.shape}")
    return np.asarray(a._csr @ h)


def build_graph(processed: ProcessedCohort, miss_weight: float = 0.5, literal_degrees: bool = False) -> BipartiteGraph:
    a_hat = build_adjacency(processed, miss_weight)
    a_norm = normalize(a_hat, degree_vector(a_hat, literal=literal_degrees))
    return BipartiteGraph(processed.n_patients, processed.n_graph_features, a_hat, a_norm)


def is_bipartite(graph: BipartiteGraph) -> bool:
    """True when every off-diagonal entry joins a patient row to a feature row."""
    a = graph.adjacency_hat
    r, c = a.row_indices(), a.col_indices
    off = r != c
    return bool(np.all((r[off] < graph.n_patients) != (c[off] < graph.n_patients)))


def dump_text(a: SparseMatrix) -> str:
    lines = [f"{a.n_rows} {a.n_cols} {a.nnz}"]
    for r, c, v in zip(a.row_indices(), a.col_indices, a.values):
        lines.append(f"{r} {c} {float(v)!r}")
    return "\n".join(lines) + "\n"


def parse_dump(text: str) -> SparseMatrix:
    lines = text.strip().splitlines()
    n_rows, n_cols, nnz = (int(x) for x in lines[0].split())
    body = [ln.split() for ln in lines[1:]]
    if len(body) != nnz:
        raise ValueError(f"dump declares {nnz} entries but holds {len(body)}")
    rows = [int(b[0]) for b in body]
    cols = [int(b[1]) for b in body]
    vals = [float(b[2]) for b in body]
    return SparseMatrix.from_coo(rows, cols, vals, (n_rows, n_cols))


def write_dump(a: SparseMatrix, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_text(a), encoding="utf-8")
