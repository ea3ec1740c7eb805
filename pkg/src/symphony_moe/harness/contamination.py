"""Bounded additive contamination of token batches."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ArgumentError
from ..noise import NoiseKind, add_bounded, sample_noise, voronoi_boundary_push


def contaminate(x, epsilon: float, noise_kind=NoiseKind.UNIFORM_BALL, seed=0,
                centers: Optional[np.ndarray] = None) -> np.ndarray:
    """Return ``x + delta`` with ``||delta_i||_2 <= epsilon`` for every token.

    Adversarial noise needs the task's region ``centers`` and moves each
    token a full epsilon toward the nearest face of its Voronoi cell.
    ``epsilon = 0`` returns the input unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if epsilon < 0:
        raise ArgumentError("epsilon must be non-negative")
    if epsilon == 0:
        return x.copy()
    kind = NoiseKind(noise_kind)
    if kind is NoiseKind.ADVERSARIAL:
        if centers is None:
            raise ArgumentError("adversarial contamination needs region centers")
        return add_bounded(x, voronoi_boundary_push(x, np.asarray(centers, dtype=np.float64), epsilon), epsilon)
    rng = np.random.default_rng(seed)
    return add_bounded(x, sample_noise(rng, x.shape[0], x.shape[1], epsilon, kind), epsilon)
