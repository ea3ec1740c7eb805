"""Desk-scale sparse MoE layer with baseline and symphony routing.

Experts are two-layer rectifier perceptrons. Only the experts a token is
routed to are evaluated. ``backward`` treats the TopK selection and the
adjacency as constants: gradients reach the router through the surviving
gate values, the fixed linear map ``A`` and the dense softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import ArgumentError, DimensionError, StateError
from .graph import AdjacencyState, format_matrix_rows
from .router import (
    NORM_FLOOR,
    RouterKind,
    RouterParams,
    SelectionRecord,
    compute_scores,
    softmax,
    topk_indices,
)

DEFAULT_AUX_WEIGHT = 0.01


class RoutingMode(str, Enum):
    BASELINE = "Baseline"
    SYMPHONY = "Symphony"


@dataclass
class ExpertSet:
    """Stacked parameters of M two-layer rectifier perceptrons."""

    W1: np.ndarray  # M x H x D
    b1: np.ndarray  # M x H
    W2: np.ndarray  # M x D_out x H
    b2: np.ndarray  # M x D_out

    def __post_init__(self):
        m, h, d = self.W1.shape
        if self.b1.shape != (m, h) or self.W2.shape[::2] != (m, h) or self.b2.shape != (m, self.W2.shape[1]):
            raise DimensionError("expert parameter shapes are inconsistent")

    @classmethod
    def init(cls, n_experts, dim, hidden, out_dim, rng):
        return cls(
            rng.normal(0.0, np.sqrt(2.0 / dim), size=(n_experts, hidden, dim)),
            np.zeros((n_experts, hidden)),
            rng.normal(0.0, np.sqrt(1.0 / hidden), size=(n_experts, out_dim, hidden)),
            np.zeros((n_experts, out_dim)),
        )

    @property
    def n_experts(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[2]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def apply(self, j: int, x: np.ndarray):
        pre = x @ self.W1[j].T + self.b1[j]
        h = np.maximum(pre, 0.0)
        return h @ self.W2[j].T + self.b2[j], pre, h

    def apply_all(self, x: np.ndarray) -> np.ndarray:
        """Every expert on every token: N x M x D_out."""
        return np.stack([self.apply(j, x)[0] for j in range(self.n_experts)], axis=1)


@dataclass
class LayerOutput:
    y: np.ndarray
    selections: SelectionRecord
    dense_gates: np.ndarray
    smoothed_gates: np.ndarray
    mixing: np.ndarray  # N x K weights actually applied to expert outputs
    aux_loss: float


def load_balance_loss(dense_gates, selections, n_experts: Optional[int] = None) -> float:
    """``M * sum_j f_j P_j`` with ``f_j`` the fraction of tokens routed to j and ``P_j`` its mean gate."""
    g = np.asarray(dense_gates, dtype=np.float64)
    m = g.shape[1] if n_experts is None else n_experts
    idx = selections.indices if isinstance(selections, SelectionRecord) else np.asarray(selections)
    f = np.bincount(idx.ravel(), minlength=m) / idx.shape[0]
    return float(m * np.dot(f, g.mean(axis=0)))


@dataclass
class LoadBalanceReport:
    frequency: np.ndarray
    cv: float
    entropy_ratio: float


def load_balance_report(selections, n_experts: int) -> LoadBalanceReport:
    idx = selections.indices if isinstance(selections, SelectionRecord) else np.asarray(selections)
    if idx.size == 0:
        raise ArgumentError("load balance needs at least one token")
    counts = np.bincount(np.asarray(idx).ravel(), minlength=n_experts).astype(np.float64)
    f = counts / counts.sum()
    mean = f.mean()
    cv = float(f.std() / mean) if mean > 0 else 0.0
    nz = f[f > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    ratio = entropy / np.log(n_experts) if n_experts > 1 else 1.0
    return LoadBalanceReport(f, cv, float(min(max(ratio, 0.0), 1.0)))


def mse_loss(y, target):
    diff = y - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy_loss(logits, labels):
    p = softmax(logits)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(p[rows, labels], 1e-300))))
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / n


class MoELayer:
    """Single sparse MoE layer routing with either the base gate or the smoothed gate."""

    def __init__(
        self,
        experts: ExpertSet,
        router: RouterParams,
        k: int,
        mode=RoutingMode.BASELINE,
        adjacency: Optional[AdjacencyState] = None,
        renormalize: bool = False,
        aux_weight: float = DEFAULT_AUX_WEIGHT,
    ):
        self.experts = experts
        self.router = router
        self.k = int(k)
        self.mode = RoutingMode(mode)
        self.adjacency = adjacency
        self.renormalize = renormalize
        self.aux_weight = aux_weight
        m = experts.n_experts
        if router.n_experts != m or router.dim != experts.dim:
            raise DimensionError("router and experts disagree on M or D")
        if not 1 <= self.k <= m:
            raise ArgumentError("K exceeds expert count" if self.k > m else "K must be >= 1")
        if self.mode is RoutingMode.SYMPHONY:
            if adjacency is None:
                raise ArgumentError("symphony routing requires an adjacency state")
            if adjacency.n_experts != m:
                raise DimensionError("adjacency size does not match expert count")
        elif adjacency is not None:
            raise ArgumentError("baseline routing takes no adjacency state")
        self._cache = None

    @property
    def n_experts(self) -> int:
        return self.experts.n_experts

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"W1": self.experts.W1, "b1": self.experts.b1, "W2": self.experts.W2, "b2": self.experts.b2}
        if self.router.kind is RouterKind.LINEAR:
            params.update({"router.W": self.router.W, "router.b": self.router.b})
        elif self.router.kind is RouterKind.COSINE:
            params.update({"router.proj": self.router.cosine_proj, "router.experts": self.router.cosine_experts})
        return params

    def forward(self, x, training: bool = False) -> LayerOutput:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.experts.dim:
            raise DimensionError(f"input of shape {x.shape} does not match expert dim {self.experts.dim}")
        n, m = x.shape[0], self.n_experts
        scores = compute_scores(self.router, x)
        dense = softmax(scores)
        symphony = self.mode is RoutingMode.SYMPHONY
        if symphony:
            if training:
                self.adjacency.accumulate_coselect(topk_indices(dense, self.k))
            smoothed = self.adjacency.smooth(dense)
        else:
            smoothed = dense
        idx = topk_indices(smoothed, self.k)
        kept = np.take_along_axis(smoothed, idx, axis=1)
        kept_sum = kept.sum(axis=1, keepdims=True)
        mixing = kept / kept_sum if self.renormalize else kept

        y = np.zeros((n, self.experts.out_dim))
        expert_cache = []
        for j in range(m):
            rows, pos = np.nonzero(idx == j)
            if rows.size == 0:
                expert_cache.append(None)
                continue
            u, pre, h = self.experts.apply(j, x[rows])
            y[rows] += mixing[rows, pos][:, None] * u
            expert_cache.append((rows, pos, pre, h, u))

        aux = load_balance_loss(dense, idx, m)
        self._cache = dict(
            x=x, scores=scores, dense=dense, idx=idx, kept=kept, kept_sum=kept_sum,
            mixing=mixing, experts=expert_cache,
            smoothed_used_A=symphony and not self.adjacency.bootstrapping,
            A=None if not symphony else self.adjacency.A.copy(),
        )
        selections = SelectionRecord(idx, kept / kept_sum)
        return LayerOutput(y, selections, dense, smoothed, mixing, aux)

    def backward(self, dy, aux_weight: Optional[float] = None):
        """Gradients of ``task_loss + aux_weight * aux_loss`` given ``dy = d task_loss / d y``.

        Returns ``(grads, dx)`` where ``grads`` is keyed like ``parameters()``.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        c = self._cache
        aux_weight = self.aux_weight if aux_weight is None else aux_weight
        x, dense, idx = c["x"], c["dense"], c["idx"]
        n, m = dense.shape
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != (n, self.experts.out_dim):
            raise DimensionError(f"output gradient has shape {dy.shape}, expected {(n, self.experts.out_dim)}")

        E = self.experts
        grads = {name: np.zeros_like(p) for name, p in
                 (("W1", E.W1), ("b1", E.b1), ("W2", E.W2), ("b2", E.b2))}
        dx = np.zeros_like(x)
        dmix = np.zeros_like(c["mixing"])
        for j, entry in enumerate(c["experts"]):
            if entry is None:
                continue
            rows, pos, pre, h, u = entry
            g_rows = dy[rows]
            dmix[rows, pos] = np.sum(g_rows * u, axis=1)
            du = c["mixing"][rows, pos][:, None] * g_rows
            grads["b2"][j] = du.sum(axis=0)
            grads["W2"][j] = du.T @ h
            dpre = (du @ E.W2[j]) * (pre > 0)
            grads["b1"][j] = dpre.sum(axis=0)
            grads["W1"][j] = dpre.T @ x[rows]
            dx[rows] += dpre @ E.W1[j]

        if self.renormalize:
            w = c["mixing"]
            dkept = (dmix - np.sum(w * dmix, axis=1, keepdims=True)) / c["kept_sum"]
        else:
            dkept = dmix
        dsmoothed = np.zeros((n, m))
        np.put_along_axis(dsmoothed, idx, dkept, axis=1)
        ddense = dsmoothed @ c["A"] if c["smoothed_used_A"] else dsmoothed
        if aux_weight:
            f = np.bincount(idx.ravel(), minlength=m) / n
            ddense = ddense + aux_weight * m * f[None, :] / n
        dscores = dense * (ddense - np.sum(dense * ddense, axis=1, keepdims=True))

        R = self.router
        if R.kind is RouterKind.COSINE:
            proj = x @ R.cosine_proj.T
            norms = np.linalg.norm(proj, axis=1, keepdims=True)
            clamped = norms < NORM_FLOOR
            safe = np.maximum(norms, NORM_FLOOR)
            unit = proj / safe
            tau = R.cosine_temperature
            grads["router.experts"] = dscores.T @ unit / tau
            dunit = dscores @ R.cosine_experts / tau
            dproj = np.where(clamped, dunit / safe, (dunit - unit * np.sum(unit * dunit, axis=1, keepdims=True)) / safe)
            grads["router.proj"] = dproj.T @ x
            dx += dproj @ R.cosine_proj
        else:
            dx += dscores @ R.W
            if R.kind is RouterKind.LINEAR:
                grads["router.W"] = dscores.T @ x
                grads["router.b"] = dscores.sum(axis=0)
        return grads, dx

    def state_digest(self) -> str:
        return "" if self.adjacency is None else self.adjacency.digest()


class SGDMomentum:
    """Plain SGD with heavy-ball momentum over a dict of parameter arrays (updated in place)."""

    def __init__(self, lr=0.05, momentum=0.9, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self._velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self._velocity[name] = v
            p -= self.lr * v
        if "router.experts" in params:
            e = params["router.experts"]
            e /= np.linalg.norm(e, axis=1, keepdims=True)


# --- checkpoints ----------------------------------------------------------

def _write_matrix(path: Path, name: str, M) -> None:
    M = np.atleast_2d(np.asarray(M))
    header = f"matrix {name} rows {M.shape[0]} cols {M.shape[1]}"
    path.write_text("\n".join([header, *format_matrix_rows(M)]) + "\n")


def _read_matrix(path: Path) -> np.ndarray:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    tok = lines[0].split()
    rows, cols = int(tok[3]), int(tok[5])
    M = np.array([[float(v) for v in ln.split()] for ln in lines[1 : 1 + rows]]).reshape(rows, cols)
    return M


def save_checkpoint(layer: MoELayer, directory, extra: Optional[dict] = None) -> Path:
    """Write the layer as plain-text matrices plus ``checkpoint.yaml``.

    Values carry 12 significant digits, so a reload reproduces the model to
    about 1e-12 relative precision, not bit-exactly.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    E = layer.experts
    for j in range(E.n_experts):
        _write_matrix(d / f"expert{j:03d}_W1.txt", "W1", E.W1[j])
        _write_matrix(d / f"expert{j:03d}_b1.txt", "b1", E.b1[j][None, :])
        _write_matrix(d / f"expert{j:03d}_W2.txt", "W2", E.W2[j])
        _write_matrix(d / f"expert{j:03d}_b2.txt", "b2", E.b2[j][None, :])
    R = layer.router
    _write_matrix(d / "router_W.txt", "W", R.W)
    _write_matrix(d / "router_b.txt", "b", R.b[None, :])
    if R.kind is RouterKind.COSINE:
        _write_matrix(d / "router_proj.txt", "proj", R.cosine_proj)
        _write_matrix(d / "router_experts.txt", "experts", R.cosine_experts)
    if layer.adjacency is not None:
        layer.adjacency.save(d / "adjacency.txt")
    manifest = {
        "n_experts": E.n_experts, "dim": E.dim, "hidden": E.hidden, "out_dim": E.out_dim,
        "k": layer.k, "mode": layer.mode.value, "router_kind": R.kind.value,
        "cosine_temperature": R.cosine_temperature, "renormalize": layer.renormalize,
        "aux_weight": layer.aux_weight,
    }
    if extra:
        manifest.update(extra)
    (d / "checkpoint.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
    return d


def load_checkpoint(directory, frozen: bool = True) -> tuple[MoELayer, dict]:
    d = Path(directory)
    meta = yaml.safe_load((d / "checkpoint.yaml").read_text())
    m = meta["n_experts"]
    W1 = np.stack([_read_matrix(d / f"expert{j:03d}_W1.txt") for j in range(m)])
    b1 = np.stack([_read_matrix(d / f"expert{j:03d}_b1.txt")[0] for j in range(m)])
    W2 = np.stack([_read_matrix(d / f"expert{j:03d}_W2.txt") for j in range(m)])
    b2 = np.stack([_read_matrix(d / f"expert{j:03d}_b2.txt")[0] for j in range(m)])
    kind = RouterKind(meta["router_kind"])
    proj = experts = None
    if kind is RouterKind.COSINE:
        proj = _read_matrix(d / "router_proj.txt")
        experts = _read_matrix(d / "router_experts.txt")
        experts /= np.linalg.norm(experts, axis=1, keepdims=True)
    router = RouterParams(kind, _read_matrix(d / "router_W.txt"), _read_matrix(d / "router_b.txt")[0],
                          proj, experts, meta.get("cosine_temperature", 1.0))
    adjacency = None
    if meta["mode"] == RoutingMode.SYMPHONY.value:
        adjacency = AdjacencyState.load(d / "adjacency.txt", frozen=frozen)
    layer = MoELayer(ExpertSet(W1, b1, W2, b2), router, meta["k"], meta["mode"], adjacency,
                     meta.get("renormalize", False), meta.get("aux_weight", DEFAULT_AUX_WEIGHT))
    return layer, meta
