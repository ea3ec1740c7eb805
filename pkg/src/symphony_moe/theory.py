"""Geometric oracle for co-selection regions and checks of the concentration and contraction bounds.

Expert selection regions are balls ``B_j = {x : ||x - w_j|| <= R_j}`` inside
an axis-aligned box carrying the uniform probability measure; the
co-selection region of experts j and k is ``C_jk = B_j & B_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError
from .graph import AdjacencyState, NormMode, is_connected, is_doubly_stochastic, spectral_report
from .noise import NoiseKind, add_bounded, outward_ball_push, sample_noise
from .router import RouterParams, compute_scores, softmax, topk_indices

MC_CHUNK = 1_000_000
MC_DEFAULT_SAMPLES = 10_000_000


@dataclass
class RegionSpec:
    centers: np.ndarray
    radii: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        self.box_lo = np.asarray(self.box_lo, dtype=np.float64).reshape(-1)
        self.box_hi = np.asarray(self.box_hi, dtype=np.float64).reshape(-1)
        m, d = self.centers.shape
        if self.radii.shape != (m,) or self.box_lo.shape != (d,) or self.box_hi.shape != (d,):
            raise DimensionError("region spec shapes are inconsistent")
        if np.any(self.radii <= 0):
            raise ArgumentError("radii must be positive")
        if np.any(self.box_hi <= self.box_lo):
            raise ArgumentError("box upper bounds must exceed lower bounds")
        if np.any(self.centers - self.radii[:, None] < self.box_lo) or np.any(self.centers + self.radii[:, None] > self.box_hi):
            raise ArgumentError("every ball must lie inside the domain box")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_regions(self) -> int:
        return self.centers.shape[0]

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.box_hi - self.box_lo))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box_hi - self.box_lo))

    def with_radii(self, radii) -> "RegionSpec":
        """Copy with new radii, skipping the containment check (used for expanded/shrunk balls)."""
        out = object.__new__(RegionSpec)
        out.centers, out.box_lo, out.box_hi = self.centers, self.box_lo, self.box_hi
        out.radii = np.asarray(radii, dtype=np.float64)
        return out

    def sample(self, rng, n: int) -> np.ndarray:
        return self.box_lo + (self.box_hi - self.box_lo) * rng.random((n, self.dim))

    def in_ball(self, x: np.ndarray, j: int) -> np.ndarray:
        diff = x - self.centers[j]
        return np.einsum("ij,ij->i", diff, diff) <= self.radii[j] ** 2

    def in_coselect(self, x: np.ndarray, j: int, k: int) -> np.ndarray:
        return self.in_ball(x, j) & self.in_ball(x, k)

    # plain-text format: "dim d M", box bounds, then one "c_1 ... c_d R" line per ball
    def save(self, path) -> None:
        lines = [f"dim {self.dim} {self.n_regions}",
                 " ".join(repr(float(v)) for v in np.concatenate([self.box_lo, self.box_hi]))]
        lines += [" ".join(repr(float(v)) for v in (*c, r)) for c, r in zip(self.centers, self.radii)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RegionSpec":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        head = lines[0].split()
        if len(head) != 3 or head[0] != "dim":
            raise ArgumentError(f"{path}: malformed region header {lines[0]!r}")
        d, m = int(head[1]), int(head[2])
        bounds = [float(v) for v in lines[1].split()]
        if len(bounds) != 2 * d:
            raise DimensionError(f"{path}: expected {2 * d} box bounds")
        rows = np.array([[float(v) for v in ln.split()] for ln in lines[2 : 2 + m]])
        if rows.shape != (m, d + 1):
            raise DimensionError(f"{path}: expected {m} ball lines of {d + 1} numbers")
        return cls(rows[:, :d], rows[:, d], bounds[:d], bounds[d:])


def two_circle_fixture(distance: float = 1.0) -> RegionSpec:
    """Two unit circles ``distance`` apart in the box [-2, 3] x [-2, 2]."""
    return RegionSpec([[0.0, 0.0], [distance, 0.0]], [1.0, 1.0], [-2.0, -2.0], [3.0, 2.0])


def lens_area(r1: float, r2: float, dist: float) -> float:
    """Area of the intersection of two disks (standard circle-intersection formula)."""
    if r1 <= 0 or r2 <= 0:
        return 0.0
    if dist >= r1 + r2:
        return 0.0
    if dist <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    c1 = np.clip((dist * dist + r1 * r1 - r2 * r2) / (2 * dist * r1), -1.0, 1.0)
    c2 = np.clip((dist * dist + r2 * r2 - r1 * r1) / (2 * dist * r2), -1.0, 1.0)
    tri = 0.5 * math.sqrt(max((-dist + r1 + r2) * (dist + r1 - r2) * (dist - r1 + r2) * (dist + r1 + r2), 0.0))
    return float(r1 * r1 * math.acos(c1) + r2 * r2 * math.acos(c2) - tri)


def _check_pair(spec: RegionSpec, j: int, k: int):
    if j == k:
        raise ArgumentError("co-selection measure needs two distinct regions")
    if not (0 <= j < spec.n_regions and 0 <= k < spec.n_regions):
        raise ArgumentError("region index out of range")


def analytic_measure_2d(spec: RegionSpec, j: int, k: int, radii=None) -> float:
    if spec.dim != 2:
        raise DimensionError("the analytic oracle needs d = 2")
    r = spec.radii if radii is None else radii
    dist = float(np.linalg.norm(spec.centers[j] - spec.centers[k]))
    return lens_area(r[j], r[k], dist) / spec.box_volume


def monte_carlo_measure(spec: RegionSpec, j: int, k: int, n_samples=MC_DEFAULT_SAMPLES, seed=0):
    """Uniform-sample estimate of ``mu(C_jk)`` and its standard error."""
    rng = np.random.default_rng(seed)
    hits, done = 0, 0
    while done < n_samples:
        n = min(MC_CHUNK, n_samples - done)
        hits += int(spec.in_coselect(spec.sample(rng, n), j, k).sum())
        done += n
    p = hits / n_samples
    return p, math.sqrt(max(p * (1 - p), 0.0) / n_samples)


def oracle_coselect_measure(spec: RegionSpec, j: int, k: int, oracle_mode="analytic2d",
                            n_samples=MC_DEFAULT_SAMPLES, seed=0, return_stderr=False):
    """``mu(C_jk)`` from the lens formula (d = 2) or dense Monte Carlo."""
    _check_pair(spec, j, k)
    mode = str(oracle_mode).lower()
    if mode in ("analytic2d", "analytic"):
        mu, se = analytic_measure_2d(spec, j, k), 0.0
    elif mode in ("montecarlodense", "montecarlo", "mc"):
        if n_samples < MC_DEFAULT_SAMPLES:
            raise ArgumentError(f"dense Monte Carlo needs at least {MC_DEFAULT_SAMPLES} samples")
        mu, se = monte_carlo_measure(spec, j, k, n_samples, seed)
    else:
        raise ArgumentError(f"unknown oracle mode {oracle_mode!r}")
    return (mu, se) if return_stderr else mu


def perturb(spec: RegionSpec, x: np.ndarray, j: int, k: int, epsilon: float, noise_kind, rng) -> np.ndarray:
    """Apply bounded noise; adversarial noise pushes points of ``C_jk`` out through its nearest boundary.

    Points outside ``C_jk`` are left in place by the adversarial mode.
    """
    kind = NoiseKind(noise_kind)
    if epsilon == 0:
        return x
    if kind is not NoiseKind.ADVERSARIAL:
        return add_bounded(x, sample_noise(rng, x.shape[0], spec.dim, epsilon, kind), epsilon)
    a, b = sorted((j, k))
    inside = spec.in_coselect(x, a, b)
    delta = np.zeros_like(x)
    pair = [a, b]
    delta[inside] = outward_ball_push(x[inside], spec.centers[pair], spec.radii[pair], epsilon)
    return add_bounded(x, delta, epsilon)


def _trial_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(v) for v in keys]]))


def empirical_ajk(spec: RegionSpec, j: int, k: int, N: int, epsilon: float = 0.0,
                  noise_kind=NoiseKind.UNIFORM_BALL, seed=0) -> float:
    """Fraction of N uniform tokens that land in ``C_jk`` after bounded contamination."""
    _check_pair(spec, j, k)
    if N < 1 or epsilon < 0:
        raise ArgumentError("need N >= 1 and epsilon >= 0")
    rng = np.random.default_rng(seed)
    x = spec.sample(rng, N)
    x = perturb(spec, x, j, k, epsilon, noise_kind, rng)
    return float(spec.in_coselect(x, j, k).mean())


def hoeffding_radius(N: int, alpha: float) -> float:
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * N))


def confidence_radius(N: int, epsilon: float, alpha: float, L_tilde: float) -> float:
    return hoeffding_radius(N, alpha) + L_tilde * epsilon


def allowed_violation_rate(alpha: float, trials: int) -> float:
    return alpha + 2.0 * math.sqrt(alpha * (1 - alpha) / trials)


def expansion_measure(spec: RegionSpec, j: int, k: int, epsilon: float, n_samples=MC_DEFAULT_SAMPLES, seed=0,
                      method="montecarlo") -> float:
    """``mu(C^eps_jk) - mu(C_jk)`` with ``C^eps`` the intersection of the radius-expanded balls."""
    if method == "analytic":
        grown = spec.radii + epsilon
        return analytic_measure_2d(spec, j, k, grown) - analytic_measure_2d(spec, j, k)
    grown = spec.with_radii(spec.radii + epsilon)
    rng = np.random.default_rng(seed)
    hits, done = 0, 0
    while done < n_samples:
        n = min(MC_CHUNK, n_samples - done)
        x = spec.sample(rng, n)
        hits += int((grown.in_coselect(x, j, k) & ~spec.in_coselect(x, j, k)).sum())
        done += n
    return hits / n_samples


def calibrate_L_tilde(spec: RegionSpec, pairs: Sequence[tuple[int, int]], eps_ref: float = 0.005,
                      n_samples=MC_DEFAULT_SAMPLES, seed=0, method="montecarlo") -> float:
    """Largest expansion rate ``(mu(C^eps) - mu(C)) / eps`` over the pairs at a reference epsilon."""
    if eps_ref <= 0:
        raise ArgumentError("reference epsilon must be positive")
    return max(expansion_measure(spec, j, k, eps_ref, n_samples, seed + i, method) / eps_ref
               for i, (j, k) in enumerate(pairs))


@dataclass
class BoundCheckResult:
    pair: tuple[int, int]
    a_jk_empirical: float
    mu_oracle: float
    gamma: float
    violated: bool
    N: int
    epsilon: float
    alpha: float
    L_tilde: float
    trial: int = 0
    noise_kind: str = NoiseKind.UNIFORM_BALL.value


@dataclass
class Theorem1Check:
    results: list[BoundCheckResult]
    violation_rate: float
    allowed_rate: float

    @property
    def passed(self) -> bool:
        return self.violation_rate <= self.allowed_rate


def check_theorem1(spec: RegionSpec, pairs, N: int, epsilon: float, alpha: float, trials: int,
                   L_tilde: float = 0.0, noise_kind=NoiseKind.UNIFORM_BALL, seed=0, mu_oracle=None,
                   oracle_mode=None) -> Theorem1Check:
    """Run ``trials`` independent draws of ``a_jk`` per pair and count bound violations."""
    if trials < 1:
        raise ArgumentError("trials must be positive")
    if epsilon > 0 and L_tilde <= 0:
        raise ArgumentError("a positive L_tilde is required when epsilon > 0")
    kind = NoiseKind(noise_kind)
    oracle_mode = oracle_mode or ("analytic2d" if spec.dim == 2 else "montecarlo")
    gamma = confidence_radius(N, epsilon, alpha, L_tilde)
    results = []
    for j, k in pairs:
        mu = (mu_oracle or {}).get((j, k))
        if mu is None:
            mu = oracle_coselect_measure(spec, j, k, oracle_mode, seed=seed)
        for t in range(trials):
            trial_seed = np.random.SeedSequence([int(seed), t, j, k]).generate_state(1)[0]
            a = empirical_ajk(spec, j, k, N, epsilon, kind, int(trial_seed))
            results.append(BoundCheckResult((j, k), a, mu, gamma, abs(a - mu) > gamma, N, epsilon, alpha,
                                            L_tilde, t, kind.value))
    rate = sum(r.violated for r in results) / len(results)
    return Theorem1Check(results, rate, allowed_violation_rate(alpha, trials))


@dataclass
class ConvergenceFit:
    Ns: list[int]
    max_errors: list[float]
    slope: float
    intercept: float


def convergence_slope(spec: RegionSpec, j: int, k: int, Ns=(100, 1000, 10_000, 100_000), trials=64,
                      seed=0, mu=None) -> ConvergenceFit:
    """Least-squares slope of log max|a_jk - mu| against log N at epsilon = 0."""
    if mu is None:
        mu = oracle_coselect_measure(spec, j, k, "analytic2d" if spec.dim == 2 else "montecarlo", seed=seed)
    errs = []
    for n in Ns:
        worst = 0.0
        for t in range(trials):
            trial_seed = np.random.SeedSequence([int(seed), int(n), t]).generate_state(1)[0]
            worst = max(worst, abs(empirical_ajk(spec, j, k, n, 0.0, seed=int(trial_seed)) - mu))
        errs.append(worst)
    slope, intercept = np.polyfit(np.log(np.asarray(Ns, dtype=float)), np.log(errs), 1)
    return ConvergenceFit(list(Ns), errs, float(slope), float(intercept))


def sample_in_coselect(spec: RegionSpec, j: int, k: int, n: int, rng, max_draws=10**9) -> np.ndarray:
    """Uniform samples from ``C_jk`` by rejection from the bounding box of the smaller ball."""
    small = j if spec.radii[j] <= spec.radii[k] else k
    lo = np.maximum(spec.centers[small] - spec.radii[small], spec.box_lo)
    hi = np.minimum(spec.centers[small] + spec.radii[small], spec.box_hi)
    out, drawn, got = [], 0, 0
    while got < n:
        batch = max(4 * (n - got), 1024)
        x = lo + (hi - lo) * rng.random((batch, spec.dim))
        x = x[spec.in_coselect(x, j, k)]
        drawn += batch
        if drawn > max_draws:
            raise ArgumentError("co-selection region is empty or too thin to sample")
        out.append(x)
        got += x.shape[0]
    return np.concatenate(out)[:n]


def escape_fraction(spec: RegionSpec, j: int, k: int, epsilon: float, noise_kind=NoiseKind.ADVERSARIAL,
                    N: int = 100_000, seed=0) -> float:
    """Fraction of tokens drawn inside ``C_jk`` that the noise pushes outside it."""
    _check_pair(spec, j, k)
    if epsilon < 0:
        raise ArgumentError("epsilon must be non-negative")
    if epsilon == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    x = sample_in_coselect(spec, j, k, N, rng)
    moved = perturb(spec, x, j, k, epsilon, noise_kind, rng)
    return float((~spec.in_coselect(moved, j, k)).mean())


def escape_upper_bound(spec: RegionSpec, j: int, k: int, epsilon: float, **kw) -> float:
    """Expansion bound on the escaped fraction: ``(mu(C^eps) - mu(C)) / mu(C)``."""
    mu = analytic_measure_2d(spec, j, k) if spec.dim == 2 else monte_carlo_measure(spec, j, k)[0]
    method = "analytic" if spec.dim == 2 else "montecarlo"
    return expansion_measure(spec, j, k, epsilon, method=method, **kw) / mu if mu > 0 else 0.0


def adversarial_escape_exact_2d(spec: RegionSpec, j: int, k: int, epsilon: float) -> float:
    """Exact escaped fraction under the outward push: the inner epsilon-band of the lens over its area.

    The points within epsilon of the boundary of ``B_j & B_k`` are exactly
    the complement of the intersection of the shrunk balls.
    """
    full = analytic_measure_2d(spec, j, k)
    if full == 0:
        return 0.0
    shrunk = analytic_measure_2d(spec, j, k, np.maximum(spec.radii - epsilon, 0.0))
    return 1.0 - shrunk / full


# --- contraction and TopK stability of the smoothed gate ------------------

@dataclass
class PropertyOutcome:
    passed: bool
    worst_slack: float
    trials: int


@dataclass
class Prop1Report:
    applicable: bool
    reason: str
    rho: float
    connected: bool
    doubly_stochastic: bool
    checks: dict[str, PropertyOutcome] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.applicable and all(c.passed for c in self.checks.values())

    def lines(self) -> list[str]:
        out = [f"rho = {self.rho:.12g}", f"connected = {self.connected}",
               f"doubly_stochastic = {self.doubly_stochastic}"]
        if not self.applicable:
            out.append(f"not applicable: {self.reason}")
        for name, c in self.checks.items():
            out.append(f"{name}: {'PASS' if c.passed else 'FAIL'} (worst slack {c.worst_slack:.3e}, {c.trials} trials)")
        return out


def mean_zero(rng, n: int, m: int) -> np.ndarray:
    v = rng.standard_normal((n, m))
    return v - v.mean(axis=1, keepdims=True)


def check_prop1(A, trials: int = 1000, k: int = 2, seed=0, tol: float = 1e-9, min_margin: float = 1e-3) -> Prop1Report:
    """Contraction, margin-protected TopK invariance, uniform fixed point and norm non-expansion.

    Checks are skipped (and the report flagged) when ``A`` is not symmetric
    doubly stochastic or its graph is disconnected.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError("adjacency must be square")
    m = A.shape[0]
    rep = spectral_report(A, NormMode.SINKHORN)
    ds = is_doubly_stochastic(A) and np.abs(A - A.T).max() <= 1e-9
    report = Prop1Report(False, "", rep.rho, rep.connected, ds)
    if not ds:
        report.reason = "A is not symmetric doubly stochastic within 1e-6"
        return report
    if not rep.connected:
        report.reason = "graph of A is disconnected"
        return report
    report.applicable = True
    rho = rep.rho
    rng = np.random.default_rng(seed)
    evals, evecs = np.linalg.eigh(A)

    # (i) mean-zero contraction, random directions plus the extremal eigen-directions
    v = mean_zero(rng, trials, m)
    ones = np.ones(m) / math.sqrt(m)
    non_perron = [i for i in np.argsort(-np.abs(evals)) if abs(abs(evecs[:, i] @ ones) - 1) > 1e-6][:2]
    for i in non_perron:
        w = evecs[:, i] - (evecs[:, i] @ ones) * ones
        if np.linalg.norm(w) > 0:
            v = np.vstack([v, w / np.linalg.norm(w)])
    slack = rho * np.linalg.norm(v, axis=1) - np.linalg.norm(v @ A.T, axis=1)
    report.checks["contraction"] = PropertyOutcome(bool(slack.min() >= -tol), float(slack.min()), v.shape[0])

    s = rng.dirichlet(np.ones(m), size=trials)
    s2 = rng.dirichlet(np.ones(m), size=trials)
    d = s - s2
    slack = rho * np.linalg.norm(d, axis=1) - np.linalg.norm(d @ A.T, axis=1)
    report.checks["contraction_prob_pairs"] = PropertyOutcome(bool(slack.min() >= -tol), float(slack.min()), trials)

    # (iii) uniform fixed point
    u = np.full(m, 1.0 / m)
    dev = float(np.abs(A @ u - u).max())
    report.checks["uniform_fixed_point"] = PropertyOutcome(dev <= tol, -dev, 1)

    # (iv) ||A s|| <= ||s|| for probability vectors
    slack = np.linalg.norm(s, axis=1) - np.linalg.norm(s @ A.T, axis=1)
    report.checks["norm_nonexpansion"] = PropertyOutcome(bool(slack.min() >= -tol), float(slack.min()), trials)

    # (ii) TopK stability under perturbations below g / (2 rho)
    gates = _gates_with_margin(A, k, min_margin, rng, max(1, trials // 100)) if k < m else []
    if k < m and not gates:
        # A s has no TopK margin above min_margin for any s (e.g. rank-one A), so nothing can flip
        report.checks["topk_stability"] = PropertyOutcome(True, math.inf, 0)
    elif gates:
        changes, tried, worst = 0, 0, math.inf
        for s0, g in gates:
            base = topk_indices(A @ s0, k)[0]
            n_pert = max(1, trials // len(gates))
            radius = g / (2 * rho) if rho > 0 else 10.0
            dirs = mean_zero(rng, n_pert, m)
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            scale = radius * (1 - rng.random(n_pert) * 0.5) * (1 - 1e-9)
            r = (s0[None, :] + dirs * scale[:, None]) @ A.T
            sel = topk_indices(r, k)
            changes += int(np.any(sel != base[None, :], axis=1).sum())
            tried += n_pert
            worst = min(worst, g / 2 - float(np.abs((dirs * scale[:, None]) @ A.T).max()))
        report.checks["topk_stability"] = PropertyOutcome(changes == 0, worst, tried)
    return report


def _gates_with_margin(A, k, min_margin, rng, count, max_tries=100_000):
    m = A.shape[0]
    out = []
    tries = 0
    while len(out) < count and tries < max_tries:
        tries += 1
        alpha = np.full(m, rng.choice([0.2, 0.5, 1.0]))
        s = rng.dirichlet(alpha)
        r = A @ s
        order = np.sort(r)[::-1]
        g = order[k - 1] - order[k]
        if g > min_margin:
            out.append((s, float(g)))
    return out


def random_sinkhorn_adjacency(m: int, rng, n_tokens: Optional[int] = None, k: int = 2) -> np.ndarray:
    """Symmetric doubly stochastic adjacency from simulated co-selections; redrawn until connected."""
    n_tokens = n_tokens or 8 * m * m
    k = min(k, m)
    while True:
        centers = rng.standard_normal((m, 3))
        router = RouterParams.gaussian_posterior(centers)
        x = rng.standard_normal((n_tokens, 3)) * rng.uniform(0.5, 2.0)
        state = AdjacencyState(m, norm_mode=NormMode.SINKHORN)
        state.accumulate_coselect(topk_indices(softmax(compute_scores(router, x)), k))
        state.normalize_and_ema()
        if is_connected(state.A):
            return state.A


# --- tie Algorithm-1 counts to the geometric quantity ---------------------

@dataclass
class ConsistencyResult:
    pair_fraction_graph: np.ndarray  # accumulator / N
    pair_fraction_geometry: np.ndarray  # brute-force two-nearest-balls membership
    covering_holds: bool
    rownorm_recovered: np.ndarray  # RowNorm(A') rescaled back to counts / N

    @property
    def max_abs_diff(self) -> float:
        return float(np.abs(self.pair_fraction_graph - self.pair_fraction_geometry).max())


def coselect_consistency(spec: RegionSpec, N: int, seed=0, k: int = 2) -> ConsistencyResult:
    """Compare social-graph co-selection counts with geometric two-nearest-ball membership.

    Tokens are routed by the nearest-center linear router
    (``b_j = -||w_j||^2 / 2``). The geometric side is computed directly from
    distances and radii, so the two agree exactly when every token lies in
    the balls of its ``k`` nearest centers (``covering_holds``).
    """
    rng = np.random.default_rng(seed)
    x = spec.sample(rng, N)
    router = RouterParams.gaussian_posterior(spec.centers)
    state = AdjacencyState(spec.n_regions, norm_mode=NormMode.ROW_NORM, beta=0.0)
    state.accumulate_coselect(topk_indices(softmax(compute_scores(router, x)), k))
    counts = state.accumulator.copy()
    rowsum = counts.sum(axis=1)
    state.normalize_and_ema()
    recovered = state.A * rowsum[:, None] / N

    m = spec.n_regions
    d2 = ((x[:, None, :] - spec.centers[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    member = np.stack([spec.in_ball(x, j) for j in range(m)], axis=1)
    covering = bool(np.all(np.take_along_axis(member, nearest, axis=1)))
    geo = np.zeros((m, m))
    for j in range(m):
        for kk in range(m):
            both = member[:, j] & member[:, kk]
            chosen = np.any(nearest == j, axis=1) & np.any(nearest == kk, axis=1)
            geo[j, kk] = np.count_nonzero(both & chosen) / N
    return ConsistencyResult(counts / N, geo, covering, recovered)
