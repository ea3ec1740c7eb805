"""Run manifests: a YAML key/value file that fully determines a run."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..errors import ArgumentError
from ..graph import DEFAULT_BETA, NormMode
from ..layer import DEFAULT_AUX_WEIGHT, RoutingMode
from ..noise import NoiseKind
from ..router import RouterKind
from .tasks import TaskParams

DEFAULT_EPSILON_GRID = (0.0, 0.01, 0.05, 0.1, 0.2)


@dataclass
class OptimizerParams:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 64


@dataclass
class RunManifest:
    name: str = "run"
    mode: RoutingMode = RoutingMode.SYMPHONY
    router_kind: RouterKind = RouterKind.LINEAR
    n_experts: int = 16
    k: int = 2
    beta: float = DEFAULT_BETA
    norm_mode: NormMode = NormMode.SINKHORN
    renormalize: bool = False
    aux_weight: float = DEFAULT_AUX_WEIGHT
    hidden: int = 16
    router_init_scale: float = 1.0
    task: TaskParams = field(default_factory=TaskParams)
    optimizer: OptimizerParams = field(default_factory=OptimizerParams)
    seed: int = 0
    task_seed: int = 0
    eval_seeds: list = field(default_factory=lambda: list(range(10)))
    epsilon_grid: list = field(default_factory=lambda: list(DEFAULT_EPSILON_GRID))
    noise_kind: NoiseKind = NoiseKind.UNIFORM_BALL

    def __post_init__(self):
        self.mode = RoutingMode(self.mode)
        self.router_kind = RouterKind(self.router_kind)
        self.norm_mode = NormMode(self.norm_mode)
        self.noise_kind = NoiseKind(self.noise_kind)
        if isinstance(self.task, dict):
            self.task = TaskParams(**self.task)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerParams(**self.optimizer)
        self.eval_seeds = [int(s) for s in self.eval_seeds]
        self.epsilon_grid = [float(e) for e in self.epsilon_grid]

    def validate(self) -> "RunManifest":
        if self.n_experts < 1:
            raise ArgumentError("n_experts must be >= 1")
        if self.k > self.n_experts:
            raise ArgumentError("K exceeds expert count")
        if self.k < 1:
            raise ArgumentError("K must be >= 1")
        if not 0.0 <= self.beta < 1.0:
            raise ArgumentError("beta must lie in [0, 1)")
        if self.optimizer.epochs < 1 or self.optimizer.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be positive")
        if any(e < 0 for e in self.epsilon_grid):
            raise ArgumentError("epsilon grid entries must be non-negative")
        if not self.eval_seeds:
            raise ArgumentError("at least one evaluation seed is required")
        return self

    def to_dict(self) -> dict:
        self.__post_init__()  # re-coerce fields assigned after construction
        d = asdict(self)
        for key in ("mode", "router_kind", "norm_mode", "noise_kind"):
            d[key] = getattr(self, key).value
        d["task"] = self.task.to_dict()
        return d

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def with_overrides(self, **kw) -> "RunManifest":
        d = self.to_dict()
        d.update(kw)
        return RunManifest.from_dict(d)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ArgumentError(f"unknown manifest keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.is_file():
            raise ArgumentError(f"manifest not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ArgumentError(f"{path}: manifest must be a key/value mapping")
        try:
            return cls.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise ArgumentError(f"{path}: {exc}") from exc


def reference_manifest(mode=RoutingMode.SYMPHONY, seed: int = 0) -> RunManifest:
    """The robustness reference: 16 experts, top-2 routing, 12 regions."""
    return RunManifest(name=f"reference-{RoutingMode(mode).value.lower()}", mode=mode, seed=seed, task_seed=seed)


def convergence_manifest(seed: int = 0) -> RunManifest:
    """Small regression check: 4 regions, 4 experts, top-2."""
    return RunManifest(
        name="convergence",
        mode=RoutingMode.BASELINE,
        n_experts=4,
        k=2,
        task=TaskParams(n_regions=4),
        seed=seed,
        task_seed=seed,
        eval_seeds=[0],
        epsilon_grid=[0.0],
    )
