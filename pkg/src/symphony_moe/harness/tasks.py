"""Region-structured synthetic tasks where expert specialization is the known optimum."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ..errors import ArgumentError
from ..theory import RegionSpec


class TaskKind(str, Enum):
    MIXTURE_REGRESSION = "MixtureRegression"
    REGION_CLASSIFICATION = "RegionClassification"


@dataclass
class TaskParams:
    kind: TaskKind = TaskKind.MIXTURE_REGRESSION
    dim: int = 2
    n_regions: int = 12
    out_dim: int = 2
    box_half_width: float = 1.0
    noise_sigma: float = 0.0
    map_scale: float = 1.0
    offset_scale: float = 1.0
    n_train: int = 4096
    n_valid: int = 1024
    n_test: int = 2048
    min_separation: float = 0.0

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.dim < 1 or self.n_regions < 1 or self.out_dim < 1:
            raise ArgumentError("task dimensions must be positive")
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise ArgumentError("every split needs at least one token")
        if self.kind is TaskKind.REGION_CLASSIFICATION:
            self.out_dim = self.n_regions

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @property
    def diameter(self) -> float:
        return float(2 * self.box_half_width * np.sqrt(self.dim))


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray  # regression targets, or integer labels for classification
    region: np.ndarray


@dataclass
class SyntheticTask:
    params: TaskParams
    seed: int
    centers: np.ndarray
    maps: np.ndarray  # n_regions x out_dim x dim
    offsets: np.ndarray  # n_regions x out_dim
    train: Split
    valid: Split
    test: Split

    @property
    def box_lo(self) -> np.ndarray:
        return np.full(self.params.dim, -self.params.box_half_width)

    @property
    def box_hi(self) -> np.ndarray:
        return np.full(self.params.dim, self.params.box_half_width)

    @property
    def diameter(self) -> float:
        return self.params.diameter

    def nearest_region(self, x: np.ndarray) -> np.ndarray:
        d2 = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        # argmin returns the first minimum, i.e. ties go to the lowest index
        return np.argmin(d2, axis=1)

    def clean_target(self, x: np.ndarray, region: Optional[np.ndarray] = None) -> np.ndarray:
        region = self.nearest_region(x) if region is None else region
        if self.params.kind is TaskKind.REGION_CLASSIFICATION:
            return region
        return np.einsum("nij,nj->ni", self.maps[region], x) + self.offsets[region]

    def region_spec(self) -> RegionSpec:
        """Balls inscribed in each center's Voronoi cell and the box, for the geometric oracle."""
        c = self.centers
        gaps = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
        np.fill_diagonal(gaps, np.inf)
        wall = np.minimum(c - self.box_lo, self.box_hi - c).min(axis=1)
        radii = np.minimum(gaps.min(axis=1) / 2 if len(c) > 1 else np.inf, wall)
        return RegionSpec(c, np.maximum(radii, 1e-9), self.box_lo, self.box_hi)


def _sample_centers(rng, p: TaskParams) -> np.ndarray:
    lo, hi = -p.box_half_width, p.box_half_width
    if p.min_separation <= 0:
        return rng.uniform(lo, hi, size=(p.n_regions, p.dim))
    centers = []
    tries = 0
    while len(centers) < p.n_regions:
        tries += 1
        if tries > 100_000:
            raise ArgumentError("could not place region centers with the requested separation")
        c = rng.uniform(lo, hi, size=p.dim)
        if all(np.linalg.norm(c - o) >= p.min_separation for o in centers):
            centers.append(c)
    return np.array(centers)


def generate_task(params: TaskParams, seed: int) -> SyntheticTask:
    """Sample region centers, per-region affine targets and the three splits.

    Each split draws from its own child stream of ``SeedSequence(seed)``, so
    regenerating from ``(params, seed)`` is bit-identical and splits never
    share draws.
    """
    p = params
    structure, train_ss, valid_ss, test_ss = np.random.SeedSequence(int(seed)).spawn(4)
    rng = np.random.default_rng(structure)
    centers = _sample_centers(rng, p)
    maps = rng.normal(0.0, p.map_scale / np.sqrt(p.dim), size=(p.n_regions, p.out_dim, p.dim))
    offsets = rng.normal(0.0, p.offset_scale, size=(p.n_regions, p.out_dim))
    task = SyntheticTask(p, int(seed), centers, maps, offsets, None, None, None)

    def make(ss, n):
        r = np.random.default_rng(ss)
        x = r.uniform(-p.box_half_width, p.box_half_width, size=(n, p.dim))
        region = task.nearest_region(x)
        y = task.clean_target(x, region)
        if p.kind is TaskKind.MIXTURE_REGRESSION and p.noise_sigma > 0:
            y = y + r.normal(0.0, p.noise_sigma, size=y.shape)
        return Split(x, y, region)

    task.train = make(train_ss, p.n_train)
    task.valid = make(valid_ss, p.n_valid)
    task.test = make(test_ss, p.n_test)
    return task


def region_measures_mc(task: SyntheticTask, n_samples: int = 2_000_000, seed: int = 12345) -> np.ndarray:
    """Monte Carlo estimate of each region's (Voronoi cell) probability under the uniform box measure."""
    rng = np.random.default_rng(seed)
    counts = np.zeros(task.params.n_regions)
    done = 0
    while done < n_samples:
        n = min(500_000, n_samples - done)
        x = rng.uniform(-task.params.box_half_width, task.params.box_half_width, size=(n, task.params.dim))
        counts += np.bincount(task.nearest_region(x), minlength=task.params.n_regions)
        done += n
    return counts / n_samples
