"""Embedding matrices, row normalization and the temperature-scaled similarity kernel.

Embeddings are plain ``float64`` arrays of shape ``(rows, dim)``. The
:class:`EmbeddingMatrix` wrapper exists for I/O and for carrying the
``normalized`` flag across module boundaries; the numeric functions accept
either a wrapper or a bare array.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DimensionMismatch, ZeroRowError

DEFAULT_TAU = 0.2
ZERO_NORM = 1e-12
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionMismatch(f"expected a 2-D matrix, got shape {v.shape}")
        if v.shape[1] == 0:
            raise DimensionMismatch("dim must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding matrix contains non-finite values")
        if self.normalized and v.shape[0] and not is_unit_rows(v):
            raise ValueError("matrix flagged normalized but some row norm differs from 1")
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


ArrayLike = Union[EmbeddingMatrix, np.ndarray]


def as_array(m: ArrayLike) -> np.ndarray:
    if isinstance(m, EmbeddingMatrix):
        return m.values
    return np.asarray(m, dtype=np.float64)


def is_unit_rows(m: ArrayLike, tol: float = UNIT_TOL) -> bool:
    a = as_array(m)
    return bool(np.all(np.abs(np.linalg.norm(a, axis=1) - 1.0) <= tol))


def normalize_rows(m: ArrayLike) -> EmbeddingMatrix:
    """Divide every row by its Euclidean norm.

    Raises :class:`ZeroRowError` naming the first row whose norm is below 1e-12.
    """
    a = as_array(m)
    norms = np.linalg.norm(a, axis=1)
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroRowError(int(bad[0]))
    return EmbeddingMatrix(a / norms[:, None], normalized=True)


def similarity(u, v, tau: float = DEFAULT_TAU) -> float:
    """``exp(u.v / tau)`` for unit vectors ``u`` and ``v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"vector shapes differ: {u.shape} vs {v.shape}")
    _check_tau(tau)
    return float(np.exp(np.dot(u, v) / tau))


def pairwise_similarity(m: ArrayLike, tau: float = DEFAULT_TAU) -> np.ndarray:
    a = as_array(m)
    _check_tau(tau)
    if a.shape[0] and not is_unit_rows(a):
        raise ValueError("pairwise_similarity expects unit-norm rows")
    return np.exp(a @ a.T / tau)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def write_matrix(m: ArrayLike, dest) -> None:
    """Write the plain-text matrix format: a ``rows dim`` header, then one row per line."""
    a = as_array(m)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in a]
    text = "\n".join(lines) + "\n"
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w") as fh:
            fh.write(text)
    else:
        dest.write(text)


def read_matrix(src) -> EmbeddingMatrix:
    if isinstance(src, (str, os.PathLike)):
        with open(src) as fh:
            text = fh.read()
    else:
        text = src.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty matrix file")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"bad matrix header: {lines[0]!r}")
    rows, dim = int(header[0]), int(header[1])
    if len(lines) - 1 != rows:
        raise ValueError(f"header declares {rows} rows, found {len(lines) - 1}")
    if rows == 0:
        return EmbeddingMatrix(np.zeros((0, dim)))
    data = np.loadtxt(io.StringIO("\n".join(lines[1:])), dtype=np.float64, ndmin=2)
    if data.shape != (rows, dim):
        raise DimensionMismatch(f"expected {rows}x{dim} values, got {data.shape}")
    return EmbeddingMatrix(data)
