"""Rule-based undervoltage load shedding used as the comparison controller."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .env import EpisodeTrace, LtvsEnv, Scenario, run_fixed_episode


@dataclass(frozen=True)
class ShedConfig:
    v_threshold: float = 0.90
    block_mw: float = 100.0
    cost_per_mw: float = 0.15

    def __post_init__(self):
        if not self.block_mw > 0:
            raise ValueError("block_mw must be positive")
        if not 0.5 < self.v_threshold < 1.0:
            raise ValueError("v_threshold must lie in (0.5, 1.0)")


def baseline_step(vts, sheddable_mw, config: ShedConfig = ShedConfig()) -> np.ndarray:
    """Shed one block, split equally, if any transmission voltage is below threshold.

    ``sheddable_mw`` is the load still connected at each designated bus; each
    share is clamped to it.
    """
    sheddable = np.maximum(np.asarray(sheddable_mw, dtype=float), 0.0)
    if np.min(vts) >= config.v_threshold:
        return np.zeros_like(sheddable)
    share = config.block_mw / len(sheddable)
    return np.minimum(share, sheddable)


class LoadShedController(BaseEstimator):
    """Stateless shedding rule wrapped for use with :func:`run_fixed_episode`."""

    def __init__(self, v_threshold: float = 0.90, block_mw: float = 100.0, cost_per_mw: float = 0.15):
        self.v_threshold = v_threshold
        self.block_mw = block_mw
        self.cost_per_mw = cost_per_mw

    @property
    def config(self) -> ShedConfig:
        return ShedConfig(self.v_threshold, self.block_mw, self.cost_per_mw)

    def predict(self, vts, sheddable_mw) -> np.ndarray:
        return baseline_step(vts, sheddable_mw, self.config)

    def __call__(self, env: LtvsEnv) -> np.ndarray:
        st = env.state
        sheddable = st.p_nominal[env.sim.curt_idx] - st.curtailed_mw
        return self.predict(env.sim.vts(st), sheddable)

    def run(self, env: LtvsEnv, scenario: Scenario) -> EpisodeTrace:
        prices = np.full(len(env.net.curtailment_buses), self.cost_per_mw)
        return run_fixed_episode(env, self, scenario, "baseline", prices=prices)


def no_control(env: LtvsEnv) -> np.ndarray:
    return np.zeros(len(env.net.curtailment_buses))


def run_uncontrolled(env: LtvsEnv, scenario: Scenario) -> EpisodeTrace:
    return run_fixed_episode(env, no_control, scenario, "none")
