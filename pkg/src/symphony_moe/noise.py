"""Bounded additive noise: every displacement has L2 norm at most epsilon."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ArgumentError

# Radii are shrunk by a few ulps so rounding never pushes a norm past epsilon.
_SAFETY = 1.0 - 8 * np.finfo(np.float64).eps


class NoiseKind(str, Enum):
    UNIFORM_BALL = "uniform-ball"
    SPHERE = "sphere-surface"
    ADVERSARIAL = "adversarial"


def random_directions(rng, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    while np.any(norms == 0):
        bad = norms[:, 0] == 0
        v[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norms


def sample_noise(rng, n: int, d: int, epsilon: float, kind=NoiseKind.UNIFORM_BALL) -> np.ndarray:
    """Random displacements uniform in the epsilon-ball or on its sphere."""
    if epsilon < 0:
        raise ArgumentError("epsilon must be non-negative")
    kind = NoiseKind(kind)
    if epsilon == 0:
        return np.zeros((n, d))
    dirs = random_directions(rng, n, d)
    if kind is NoiseKind.UNIFORM_BALL:
        radii = epsilon * rng.random(n) ** (1.0 / d)
    elif kind is NoiseKind.SPHERE:
        radii = np.full(n, epsilon)
    else:
        raise ArgumentError("adversarial noise depends on the region geometry; use adversarial_displacement")
    return dirs * (radii * _SAFETY)[:, None]


def add_bounded(x: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    """``x + delta`` with the realized displacement ``||(x + delta) - x||`` kept within epsilon.

    Rounding in the addition can lengthen a step by an ulp of ``x``; offending
    rows are shrunk until the stored result honours the bound.
    """
    out = x + delta
    for _ in range(60):
        bad = np.linalg.norm(out - x, axis=1) > epsilon
        if not bad.any():
            return out
        delta = delta.copy()
        delta[bad] *= 1.0 - 1e-12 * 2.0 ** _
        out[bad] = x[bad] + delta[bad]
    raise ArgumentError("could not keep the displacement within epsilon")


def clip_norm(delta: np.ndarray, epsilon: float) -> np.ndarray:
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.where(norms > epsilon * _SAFETY, epsilon * _SAFETY / np.maximum(norms, 1e-300), 1.0)
    return delta * scale


def outward_ball_push(x: np.ndarray, centers: np.ndarray, radii: np.ndarray, epsilon: float) -> np.ndarray:
    """Step of length epsilon out of the nearest ball boundary.

    For a point inside several balls the boundary of their intersection
    nearest to it lies on the ball with the smallest ``R_j - ||x - w_j||``;
    the step follows that ball's outward normal.
    """
    diff = x[:, None, :] - centers[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    slack = radii[None, :] - dist
    j = np.argmin(slack, axis=1)
    rows = np.arange(x.shape[0])
    normal = diff[rows, j]
    nn = np.linalg.norm(normal, axis=1, keepdims=True)
    # A point exactly at a center has no defined normal; any direction works.
    fallback = np.zeros_like(normal)
    fallback[:, 0] = 1.0
    normal = np.where(nn > 0, normal / np.maximum(nn, 1e-300), fallback)
    return normal * (epsilon * _SAFETY)


def voronoi_boundary_push(x: np.ndarray, centers: np.ndarray, epsilon: float) -> np.ndarray:
    """Step of length epsilon toward the nearest Voronoi face of the assigned center."""
    diff = x[:, None, :] - centers[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    c1 = centers[order[:, 0]]
    out = np.zeros_like(x)
    if centers.shape[0] < 2:
        return out
    # Distance to the bisector between c1 and every other center; pick the closest face.
    u = centers[None, :, :] - c1[:, None, :]
    un = np.linalg.norm(u, axis=2)
    mid = 0.5 * (centers[None, :, :] + c1[:, None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        face_dist = np.sum((mid - x[:, None, :]) * u, axis=2) / un
    face_dist = np.where(un > 0, face_dist, np.inf)
    f = np.argmin(face_dist, axis=1)
    rows = np.arange(x.shape[0])
    normal = u[rows, f] / un[rows, f][:, None]
    return normal * (epsilon * _SAFETY)
