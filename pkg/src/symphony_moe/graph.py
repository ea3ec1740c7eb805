"""Expert social graph: co-selection counting, normalization, EMA and smoothed gating.

The adjacency ``A`` is built from TopK co-selections of the base gate and
is then used to smooth the dense gate, ``r = A @ softmax(scores)``, before
the TopK that decides routing.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ArgumentError, DimensionError, FrozenError, NumericalError
from .router import GateDistribution, SelectionRecord, _truncate, softmax, topk_indices, topk_margin

SINKHORN_DELTA = 1e-8
SINKHORN_TOL = 1e-12  # well inside the 1e-6 contract; keeps A @ 1/M uniform to ~1e-12
SINKHORN_MAX_ITER = 100
EDGE_THRESHOLD = 1e-12
DEFAULT_BETA = 0.9


class NormMode(str, Enum):
    ROW_NORM = "RowNorm"
    SINKHORN = "Sinkhorn"


def row_normalize(counts: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows become identity rows."""
    counts = np.asarray(counts, dtype=np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    empty = sums[:, 0] <= 0
    out = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
    out[empty, :] = 0.0
    out[empty, empty.nonzero()[0]] = 1.0
    return out


def sinkhorn_normalize(counts: np.ndarray, delta=SINKHORN_DELTA, tol=SINKHORN_TOL, max_iter=SINKHORN_MAX_ITER,
                       symmetric=True):
    """Scale ``counts + delta*I`` to a doubly stochastic matrix, then symmetrize.

    ``symmetric=True`` uses the symmetric scaling ``D X D`` with the update
    ``d <- sqrt(d / (X d))`` (geometric mean of a row and a column step);
    it reaches 1e-6 in a few dozen sweeps where plain alternating row/column
    scaling can need hundreds. Returns the matrix and the sweeps used.
    """
    counts = np.asarray(counts, dtype=np.float64)
    m = counts.shape[0]
    if not np.any(counts):
        return np.eye(m), 0
    x = counts + delta * np.eye(m)
    sweeps = 0
    if symmetric:
        x = 0.5 * (x + x.T)
        d = 1.0 / np.sqrt(x.sum(axis=1))
        for sweeps in range(1, max_iter + 1):
            d = np.sqrt(d / (x @ d))
            a = d[:, None] * x * d[None, :]
            if np.abs(a.sum(axis=1) - 1.0).max() < tol:
                break
    else:
        a = x / x.sum(axis=1).max()
        for sweeps in range(1, max_iter + 1):
            a /= a.sum(axis=1, keepdims=True)
            a /= a.sum(axis=0, keepdims=True)
            if np.abs(a.sum(axis=1) - 1.0).max() < tol:
                break
    return 0.5 * (a + a.T), sweeps


@dataclass
class AdjacencyState:
    """Smoothed adjacency plus the raw co-selection accumulator of the current window."""

    n_experts: int
    beta: float = DEFAULT_BETA
    norm_mode: NormMode = NormMode.SINKHORN
    exclude_diagonal: bool = False
    sparsify_threshold: float = 0.0
    A: np.ndarray = field(default=None, repr=False)
    accumulator: np.ndarray = field(default=None, repr=False)
    update_count: int = 0
    frozen: bool = False
    last_sweeps: int = 0

    def __post_init__(self):
        self.norm_mode = NormMode(self.norm_mode)
        if self.n_experts < 1:
            raise ArgumentError("adjacency needs at least one expert")
        if not 0.0 <= self.beta < 1.0:
            raise ArgumentError(f"beta must lie in [0, 1), got {self.beta}")
        m = self.n_experts
        self.A = np.zeros((m, m)) if self.A is None else np.array(self.A, dtype=np.float64)
        self.accumulator = np.zeros((m, m)) if self.accumulator is None else np.array(self.accumulator, dtype=np.float64)
        if self.A.shape != (m, m) or self.accumulator.shape != (m, m):
            raise DimensionError("adjacency matrices must be M x M")

    @classmethod
    def from_matrix(cls, A, norm_mode=NormMode.SINKHORN, beta=DEFAULT_BETA, update_count=1, frozen=False):
        """State holding a given adjacency, e.g. a fixture or a checkpoint."""
        A = np.array(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError(f"adjacency must be square, got {A.shape}")
        return cls(A.shape[0], beta=beta, norm_mode=norm_mode, A=A, update_count=update_count, frozen=frozen)

    def copy(self) -> "AdjacencyState":
        return AdjacencyState(
            self.n_experts, self.beta, self.norm_mode, self.exclude_diagonal, self.sparsify_threshold,
            self.A.copy(), self.accumulator.copy(), self.update_count, self.frozen, self.last_sweeps,
        )

    def freeze(self) -> "AdjacencyState":
        self.frozen = True
        return self

    def unfreeze(self) -> "AdjacencyState":
        self.frozen = False
        return self

    @property
    def bootstrapping(self) -> bool:
        return self.update_count == 0

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.A.tobytes())
        h.update(self.accumulator.tobytes())
        h.update(str((self.update_count, self.norm_mode.value, self.beta)).encode())
        return h.hexdigest()

    def _check_writable(self):
        if self.frozen:
            raise FrozenError("adjacency is frozen; evaluation must not mutate it")

    def accumulate_coselect(self, selections) -> "AdjacencyState":
        """Add ``s_i s_i^T`` for every token's one-hot TopK vector ``s_i``."""
        self._check_writable()
        idx = selections.indices if isinstance(selections, SelectionRecord) else np.asarray(selections)
        if idx.size == 0:
            return self
        idx = np.atleast_2d(idx)
        if idx.min() < 0 or idx.max() >= self.n_experts:
            raise ArgumentError(f"selection index out of range [0, {self.n_experts})")
        s = np.zeros((idx.shape[0], self.n_experts))
        np.put_along_axis(s, idx, 1.0, axis=1)
        counts = s.T @ s
        if self.exclude_diagonal:
            np.fill_diagonal(counts, 0.0)
        self.accumulator += counts
        return self

    def normalized_accumulator(self) -> np.ndarray:
        if self.norm_mode is NormMode.ROW_NORM:
            return row_normalize(self.accumulator)
        out, self.last_sweeps = sinkhorn_normalize(self.accumulator)
        return out

    def normalize_and_ema(self) -> "AdjacencyState":
        """Normalize the window's counts, fold them into ``A`` and reset the window.

        The first update assigns the normalized counts directly so the zero
        initialization does not dilute the first estimate.
        """
        self._check_writable()
        fresh = self.normalized_accumulator()
        if self.sparsify_threshold > 0:
            fresh = np.where(fresh >= self.sparsify_threshold, fresh, 0.0)
            if self.norm_mode is NormMode.ROW_NORM:
                fresh = row_normalize(fresh)
            else:
                fresh, _ = sinkhorn_normalize(fresh, delta=0.0)
        if self.update_count == 0:
            self.A = fresh
        else:
            self.A = self.beta * self.A + (1.0 - self.beta) * fresh
        self.accumulator = np.zeros_like(self.accumulator)
        self.update_count += 1
        return self

    def smooth(self, dense_gates) -> np.ndarray:
        """``A @ g`` for every gate row; identity during bootstrap."""
        g = dense_gates.gates if isinstance(dense_gates, GateDistribution) else np.asarray(dense_gates, dtype=np.float64)
        if g.ndim != 2 or g.shape[1] != self.n_experts:
            raise DimensionError(f"gates of shape {g.shape} do not match {self.n_experts} experts")
        if self.bootstrapping:
            return g
        return g @ self.A.T

    def symphony_gate(self, dense_gates) -> GateDistribution:
        return GateDistribution(self.smooth(dense_gates), sparse=False)

    def symphony_route(self, scores, k: int, renormalize: bool = False, accumulate: Optional[bool] = None):
        """Route on the smoothed gate; count co-selections of the base gate.

        Counting happens when the state is not frozen unless ``accumulate``
        says otherwise. Returns the selection record (renormalized weights)
        and the sparse mixing gates.
        """
        dense = softmax(scores)
        if dense.shape[1] != self.n_experts:
            raise DimensionError(f"scores have {dense.shape[1]} experts, adjacency has {self.n_experts}")
        if accumulate is None:
            accumulate = not self.frozen
        if accumulate:
            self.accumulate_coselect(topk_indices(dense, k))
        smoothed = dense if self.update_count == 0 else dense @ self.A.T
        idx = topk_indices(smoothed, k)
        gates, weights = _truncate(smoothed, idx, renormalize)
        return SelectionRecord(idx, weights), GateDistribution(gates, sparse=True, renormalized=renormalize)

    def spectral_report(self, gate_row=None, k: Optional[int] = None) -> "SpectralReport":
        return spectral_report(self.A, self.norm_mode, gate_row=gate_row, k=k)

    def save(self, path) -> None:
        save_adjacency(path, self.A, self.norm_mode, self.beta, self.update_count)

    @classmethod
    def load(cls, path, frozen=False) -> "AdjacencyState":
        A, mode, beta, updates = load_adjacency(path)
        return cls.from_matrix(A, norm_mode=mode, beta=beta, update_count=updates, frozen=frozen)


@dataclass
class SpectralReport:
    eigenvalues: np.ndarray
    rho: float
    connected: bool
    symmetric_spectrum: bool
    margin_g: Optional[float] = None

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])


def is_connected(A, threshold=EDGE_THRESHOLD) -> bool:
    """Union-find connectivity of the graph with edges ``a_jk > threshold`` (j != k)."""
    A = np.asarray(A)
    m = A.shape[0]
    parent = list(range(m))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    rows, cols = np.nonzero((A > threshold) | (A.T > threshold))
    for j, k in zip(rows.tolist(), cols.tolist()):
        if j != k:
            rj, rk = find(j), find(k)
            if rj != rk:
                parent[rj] = rk
    return len({find(i) for i in range(m)}) == 1


def spectral_report(A, norm_mode=NormMode.SINKHORN, gate_row=None, k=None) -> SpectralReport:
    """Spectrum, second-largest magnitude ``rho``, connectivity and optional TopK margin.

    Sinkhorn matrices use the symmetric eigensolver. RowNorm matrices are not
    symmetric in general, so singular values stand in for ``|lambda|`` and
    ``symmetric_spectrum`` is False.
    """
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise NumericalError("adjacency contains non-finite entries", matrix=A)
    norm_mode = NormMode(norm_mode)
    try:
        if norm_mode is NormMode.SINKHORN:
            vals = np.sort(np.linalg.eigvalsh(0.5 * (A + A.T)))[::-1]
            rho = float(np.abs(vals[1:]).max()) if len(vals) > 1 else 0.0
        else:
            vals = np.linalg.svd(A, compute_uv=False)
            rho = float(vals[1]) if len(vals) > 1 else 0.0
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}\n{np.array2string(A, precision=12)}", matrix=A) from exc
    margin = None
    if gate_row is not None:
        if k is None:
            raise ArgumentError("k is required to compute the TopK margin")
        r = A @ np.asarray(gate_row, dtype=np.float64)
        margin = float(topk_margin(r, k)[0])
    return SpectralReport(vals, rho, is_connected(A), norm_mode is NormMode.SINKHORN, margin)


def is_doubly_stochastic(A, tol=1e-6) -> bool:
    A = np.asarray(A)
    return bool(
        np.all(A >= -tol)
        and np.abs(A.sum(axis=0) - 1).max() <= tol
        and np.abs(A.sum(axis=1) - 1).max() <= tol
    )


# --- plain-text snapshots -------------------------------------------------

def format_matrix_rows(M) -> list[str]:
    return [" ".join(f"{v:.12g}" for v in row) for row in np.atleast_2d(M)]


def save_adjacency(path, A, norm_mode=NormMode.SINKHORN, beta=DEFAULT_BETA, updates=0) -> None:
    A = np.asarray(A)
    header = f"M {A.shape[0]} mode {NormMode(norm_mode).value} beta {beta!r} updates {int(updates)}"
    Path(path).write_text("\n".join([header, *format_matrix_rows(A)]) + "\n")


def load_adjacency(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    tok = lines[0].split()
    if len(tok) != 8 or tok[0] != "M" or tok[2] != "mode" or tok[4] != "beta" or tok[6] != "updates":
        raise ArgumentError(f"{path}: malformed adjacency header {lines[0]!r}")
    m = int(tok[1])
    A = np.array([[float(v) for v in ln.split()] for ln in lines[1 : 1 + m]])
    if A.shape != (m, m):
        raise DimensionError(f"{path}: expected {m} x {m} matrix, got {A.shape}")
    return A, NormMode(tok[3]), float(tok[5]), int(tok[7])


# --- overhead accounting --------------------------------------------------

@dataclass(frozen=True)
class ComplexityEstimate:
    train_flops: int
    infer_flops: int
    train_bytes: int
    infer_bytes: int

    def summary(self) -> str:
        mib, gi = 2.0**20, 2.0**30
        return (
            f"memory: train {self.train_bytes / mib:.6g} MB / infer {self.infer_bytes / mib:.6g} MB; "
            f"compute: train {self.train_flops / gi:.4g}G / infer {self.infer_flops / gi:.4g}G FLOPs"
        )


def estimate_overhead(M: int, K: int, N: int, L: int = 1, bytes_per_entry: int = 4) -> ComplexityEstimate:
    """Extra memory and FLOPs that the social graph adds to an SMoE model.

    Counts are exact integers; ``summary`` reports bytes in binary megabytes
    (2**20) and FLOPs in units of 2**30.
    """
    for name, v in (("M", M), ("K", K), ("N", N), ("L", L), ("bytes_per_entry", bytes_per_entry)):
        if v < 1:
            raise ArgumentError(f"{name} must be >= 1, got {v}")
    if K > M:
        raise ArgumentError("K exceeds expert count")
    pairs = math.comb(K, 2)
    return ComplexityEstimate(
        train_flops=L * N * (M * M + pairs),
        infer_flops=L * N * M * M,
        train_bytes=L * (M * M + N * pairs) * bytes_per_entry,
        infer_bytes=L * M * M * bytes_per_entry,
    )
