"""Base router scores, softmax and TopK sparse gating.

All functions are pure and operate on float64 numpy arrays; batches are
row-major with one token per row.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ArgumentError, DimensionError

NORM_FLOOR = 1e-12


class RouterKind(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"
    RANDOM = "random"


class TieRule(str, Enum):
    LOWEST_INDEX = "lowest_index"


@dataclass(frozen=True)
class TokenBatch:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"token batch must be a non-empty N x D matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ArgumentError("token batch contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class RouterParams:
    """Router parameters for the three router families.

    ``W`` and ``b`` are used by the linear and random routers. The cosine
    router scores ``<e_j, normalize(proj @ x)> / temperature`` using
    ``cosine_proj`` (D_e x D) and ``cosine_experts`` (M x D_e, unit rows).
    """

    kind: RouterKind
    W: np.ndarray
    b: np.ndarray
    cosine_proj: Optional[np.ndarray] = None
    cosine_experts: Optional[np.ndarray] = None
    cosine_temperature: float = 1.0

    def __post_init__(self):
        self.kind = RouterKind(self.kind)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"router W {self.W.shape} and b {self.b.shape} disagree")
        if self.W.shape[0] < 2 and self.kind is not RouterKind.LINEAR:
            raise ArgumentError("router needs at least two experts")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ArgumentError("router parameters contain non-finite entries")
        if self.kind is RouterKind.COSINE:
            if self.cosine_proj is None or self.cosine_experts is None:
                raise ArgumentError("cosine router requires cosine_proj and cosine_experts")
            self.cosine_proj = np.asarray(self.cosine_proj, dtype=np.float64)
            self.cosine_experts = np.asarray(self.cosine_experts, dtype=np.float64)
            if self.cosine_temperature <= 0:
                raise ArgumentError("cosine temperature must be positive")
            de = self.cosine_proj.shape[0]
            if self.cosine_experts.shape != (self.n_experts, de) or self.cosine_proj.shape[1] != self.dim:
                raise DimensionError("cosine projection / expert embedding shapes are inconsistent")
            norms = np.linalg.norm(self.cosine_experts, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ArgumentError("cosine expert embeddings must have unit L2 norm")

    @property
    def n_experts(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    @property
    def trainable(self) -> bool:
        return self.kind is not RouterKind.RANDOM

    @classmethod
    def gaussian_posterior(cls, centers, kind=RouterKind.LINEAR):
        """Linear router whose softmax is the uniform-prior, unit-variance Gaussian posterior.

        Uses ``b_j = -||w_j||^2 / 2`` so that ranking by score equals ranking
        by distance to the centers.
        """
        W = np.array(centers, dtype=np.float64)
        return cls(kind, W, -0.5 * np.sum(W * W, axis=1))

    @classmethod
    def init(cls, kind, n_experts, dim, rng, scale=None, proj_dim=None, temperature=1.0):
        kind = RouterKind(kind)
        scale = 1.0 / np.sqrt(dim) if scale is None else scale
        W = rng.normal(0.0, scale, size=(n_experts, dim))
        b = np.zeros(n_experts)
        if kind is not RouterKind.COSINE:
            return cls(kind, W, b)
        proj_dim = proj_dim or max(2, min(dim, 16))
        proj = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(proj_dim, dim))
        experts = rng.normal(size=(n_experts, proj_dim))
        experts /= np.linalg.norm(experts, axis=1, keepdims=True)
        return cls(kind, W, b, proj, experts, temperature)

    def copy(self) -> "RouterParams":
        return RouterParams(
            self.kind,
            self.W.copy(),
            self.b.copy(),
            None if self.cosine_proj is None else self.cosine_proj.copy(),
            None if self.cosine_experts is None else self.cosine_experts.copy(),
            self.cosine_temperature,
        )


@dataclass(frozen=True)
class GateDistribution:
    """N x M gate matrix; ``sparse`` tags TopK-truncated gates."""

    gates: np.ndarray
    sparse: bool = False
    renormalized: bool = True

    def row_sums(self) -> np.ndarray:
        return self.gates.sum(axis=1)


@dataclass(frozen=True)
class SelectionRecord:
    """Per-token TopK expert indices (ascending) and their mixing weights."""

    indices: np.ndarray
    weights: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def one_hot(self, n_experts: int) -> np.ndarray:
        s = np.zeros((self.n_tokens, n_experts))
        np.put_along_axis(s, self.indices, 1.0, axis=1)
        return s


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"expected a vector or matrix, got shape {arr.shape}")
    return arr


def compute_scores(params: RouterParams, batch) -> np.ndarray:
    x = batch.data if isinstance(batch, TokenBatch) else _as_matrix(batch)
    if x.shape[1] != params.dim:
        raise DimensionError(f"token dim {x.shape[1]} does not match router dim {params.dim}")
    if params.kind is RouterKind.COSINE:
        proj = x @ params.cosine_proj.T
        norms = np.maximum(np.linalg.norm(proj, axis=1, keepdims=True), NORM_FLOOR)
        return (proj / norms) @ params.cosine_experts.T / params.cosine_temperature
    return x @ params.W.T + params.b


def softmax(scores) -> np.ndarray:
    """Row-wise max-subtracted softmax; ``-inf`` logits map to exactly 0."""
    z = _as_matrix(scores)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def topk_indices(values, k: int, tie_rule: TieRule = TieRule.LOWEST_INDEX) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, sorted ascending.

    Ties are broken toward the lowest index.
    """
    v = _as_matrix(values)
    m = v.shape[1]
    if not 1 <= k <= m:
        raise ArgumentError(f"K={k} must lie in [1, {m}]")
    TieRule(tie_rule)
    order = np.argsort(-v, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def topk_select(values, k: int, tie_rule: TieRule = TieRule.LOWEST_INDEX) -> np.ndarray:
    """TopK for a single length-M vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError("topk_select expects a vector; use topk_indices for batches")
    return topk_indices(v, k, tie_rule)[0]


def topk_margin(values, k: int) -> np.ndarray:
    """Smallest selected minus largest unselected value per row (inf when K = M)."""
    v = _as_matrix(values)
    idx = topk_indices(v, k)
    mask = np.zeros(v.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    sel_min = np.where(mask, v, np.inf).min(axis=1)
    rest_max = np.where(mask, -np.inf, v).max(axis=1)
    return sel_min - rest_max


def _truncate(gates: np.ndarray, idx: np.ndarray, renormalize: bool):
    kept = np.take_along_axis(gates, idx, axis=1)
    weights = kept / kept.sum(axis=1, keepdims=True)
    out = np.zeros_like(gates)
    np.put_along_axis(out, idx, weights if renormalize else kept, axis=1)
    return out, weights


def smoe_gate_logits_first(scores, k: int):
    """Mask non-TopK logits to -inf, then softmax the survivors."""
    z = _as_matrix(scores)
    idx = topk_indices(z, k)
    masked = np.full_like(z, -np.inf)
    np.put_along_axis(masked, idx, np.take_along_axis(z, idx, axis=1), axis=1)
    gates = softmax(masked)
    record = SelectionRecord(idx, np.take_along_axis(gates, idx, axis=1))
    return GateDistribution(gates, sparse=True, renormalized=True), record


def smoe_gate_softmax_first(scores, k: int, renormalize: bool = False):
    """Softmax first, then zero the non-TopK gates.

    With ``renormalize=False`` the surviving softmax values are kept as they
    are; the record's weights are always the renormalized survivors.
    """
    dense = softmax(scores)
    idx = topk_indices(dense, k)
    gates, weights = _truncate(dense, idx, renormalize)
    return GateDistribution(gates, sparse=True, renormalized=renormalize), SelectionRecord(idx, weights)
