"""Paired Baseline-vs-Symphony robustness comparison over matched seeds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from ..layer import RoutingMode
from .manifest import RunManifest
from .training import evaluate, train


@dataclass
class SeedOutcome:
    seed: int
    clean: dict
    attacked: dict
    entropy: dict

    def degradation(self, mode: str) -> float:
        return self.attacked[mode] - self.clean[mode]


@dataclass
class RobustnessComparison:
    outcomes: list[SeedOutcome]
    epsilon_frac: float

    def degradations(self, mode: str) -> np.ndarray:
        return np.array([o.degradation(mode) for o in self.outcomes])

    def entropies(self, mode: str) -> np.ndarray:
        return np.array([o.entropy[mode] for o in self.outcomes])

    @property
    def symphony_wins(self) -> int:
        return int(np.sum(self.degradations("Symphony") < self.degradations("Baseline")))

    @property
    def sign_test_p(self) -> float:
        """One-sided sign test that Symphony degrades less; ties are dropped."""
        s, b = self.degradations("Symphony"), self.degradations("Baseline")
        wins, losses = int(np.sum(s < b)), int(np.sum(s > b))
        if wins + losses == 0:
            return 1.0
        return float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)


def compare_robustness(base: RunManifest, seeds: Sequence[int], epsilon_frac: float = 0.1,
                       eval_seeds: Sequence[int] = (0, 1, 2), noise_kind=None) -> RobustnessComparison:
    """Train both routing modes per seed and compare attacked-minus-clean test loss."""
    noise_kind = noise_kind or base.noise_kind
    outcomes = []
    for seed in seeds:
        clean, attacked, entropy = {}, {}, {}
        for mode in (RoutingMode.BASELINE, RoutingMode.SYMPHONY):
            m = base.with_overrides(mode=mode.value, seed=int(seed), task_seed=int(seed))
            result = train(m)
            rows = evaluate(result.layer, result.task, [0.0, epsilon_frac], eval_seeds, noise_kind)
            clean[mode.value] = float(np.mean([r["loss"] for r in rows if r["epsilon_frac"] == 0.0]))
            attacked[mode.value] = float(np.mean([r["loss"] for r in rows if r["epsilon_frac"] == epsilon_frac]))
            entropy[mode.value] = float(np.mean([r["entropy_ratio"] for r in rows if r["epsilon_frac"] == 0.0]))
        outcomes.append(SeedOutcome(int(seed), clean, attacked, entropy))
    return RobustnessComparison(outcomes, epsilon_frac)
