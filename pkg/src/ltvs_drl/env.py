"""Episodic curtailment-control environment on top of the QSS simulator.

An episode starts from a randomised operating condition, applies one large
disturbance at t = 0 and then lets a controller adjust demand-response /
storage curtailment at the participating buses every 5 s for at most 200
steps.  Rewards charge the curtailment bought plus time-discounted penalties
for low voltage and for instability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import Network
from .neural import gaussian_log_prob
from .qss import (DT_CONTROL, V_END, Disturbance, DisturbanceKind, InfeasibleOperatingPoint,
                  OperatingCondition, Simulator, Status, StabilityVerdict)

HORIZON_STEPS = 200
ACTION_SCALE_MW = 100.0
CAPACITY_RANGE_MW = (300.0, 500.0)
PRICE_RANGE = (0.1, 0.2)
TRAINING_BAND = (0.95, 1.05)
UNSTABLE_PENALTY = 500.0
LOW_VOLTAGE_PENALTY = 1.0
PENALTY_DECAY = 0.99

# ltvs5 analogs of the line and generator trips used for training, plus the
# held-out disturbance reserved for generalisation testing.
DISTURBANCE_MENUS = {
    "ltvs5": (
        Disturbance(DisturbanceKind.LINE_TRIP, 1),
        Disturbance(DisturbanceKind.LINE_TRIP, 2),
        Disturbance(DisturbanceKind.LINE_TRIP, 4),
        Disturbance(DisturbanceKind.GENERATOR_TRIP, 2),
    ),
}
HOLDOUT_DISTURBANCES = {
    "ltvs5": (Disturbance(DisturbanceKind.LOAD_STEP, 4, magnitude=200.0),),
}


class Mode(str, Enum):
    STOCHASTIC = "Stochastic"
    DETERMINISTIC = "Deterministic"
    DETERMINISTIC_THRESHOLDED = "DeterministicThresholded"


# --------------------------------------------------------------------------- #
# market and dispatch


@dataclass
class CurtailmentMarket:
    buses: tuple[int, ...]
    capacity_mw: np.ndarray
    price_per_mw: np.ndarray
    remaining_mw: np.ndarray = None

    def __post_init__(self):
        self.capacity_mw = np.asarray(self.capacity_mw, dtype=float)
        self.price_per_mw = np.asarray(self.price_per_mw, dtype=float)
        if self.remaining_mw is None:
            self.remaining_mw = self.capacity_mw.copy()
        else:
            self.remaining_mw = np.asarray(self.remaining_mw, dtype=float)

    @property
    def curtailed_mw(self) -> np.ndarray:
        return self.capacity_mw - self.remaining_mw

    def copy(self) -> "CurtailmentMarket":
        return CurtailmentMarket(self.buses, self.capacity_mw.copy(), self.price_per_mw.copy(),
                                 self.remaining_mw.copy())

    def apply(self, deltas) -> None:
        self.remaining_mw = np.clip(self.remaining_mw - np.asarray(deltas, dtype=float), 0.0, self.capacity_mw)


def dispatch_curtailment(market: CurtailmentMarket, total_delta_mw: float) -> np.ndarray:
    """Split a signed total curtailment change over the participating buses.

    More curtailment is bought cheapest-first up to each bus's remaining
    capacity; a negative total releases load most-expensive-first, never more
    than what is currently curtailed.
    """
    n = len(market.buses)
    out = np.zeros(n)
    order = np.argsort(market.price_per_mw, kind="stable")
    left = float(total_delta_mw)
    if left > 0:
        for i in order:
            take = min(left, market.remaining_mw[i])
            out[i] = take
            left -= take
            if left <= 0:
                break
    elif left < 0:
        curtailed = market.curtailed_mw
        for i in order[::-1]:
            give = min(-left, curtailed[i])
            out[i] = -give
            left += give
            if left >= 0:
                break
    return out


def action_cost(per_bus_delta, prices) -> float:
    """C_a: minus the price of newly curtailed MW (restoration is free)."""
    return -float(np.sum(np.asarray(prices) * np.maximum(np.asarray(per_bus_delta, dtype=float), 0.0)))


def reward(c_a: float, unstable: bool, any_vts_below_090: bool, t: int) -> float:
    if unstable:
        return c_a - UNSTABLE_PENALTY * PENALTY_DECAY**t
    if any_vts_below_090:
        return c_a - LOW_VOLTAGE_PENALTY * PENALTY_DECAY**t
    return c_a


# --------------------------------------------------------------------------- #
# state normalisation


class RunningNormalizer(TransformerMixin, BaseEstimator):
    """Per-feature standardiser whose statistics freeze after ``max_samples`` rows.

    Rows beyond the budget are ignored by :meth:`partial_fit`; once frozen the
    mean and standard deviation never change again.
    """

    def __init__(self, max_samples: int = 10_000, std_floor: float = 1e-6, clip: float | None = 10.0):
        self.max_samples = max_samples
        self.std_floor = std_floor
        self.clip = clip

    def _reset(self, n_features: int) -> None:
        self.n_features_in_ = n_features
        self.n_samples_seen_ = 0
        self.mean_ = np.zeros(n_features)
        self.m2_ = np.zeros(n_features)

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self._reset(X.shape[1])
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=float, ensure_2d=False)
        if X.ndim == 1:
            X = X[None, :]
        if not hasattr(self, "n_samples_seen_"):
            self._reset(X.shape[1])
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        room = self.max_samples - self.n_samples_seen_
        for row in X[:max(room, 0)]:
            # Welford, one row at a time so statistics do not depend on batching
            self.n_samples_seen_ += 1
            d = row - self.mean_
            self.mean_ = self.mean_ + d / self.n_samples_seen_
            self.m2_ = self.m2_ + d * (row - self.mean_)
        return self

    @property
    def frozen_(self) -> bool:
        return getattr(self, "n_samples_seen_", 0) >= self.max_samples

    @property
    def std_(self) -> np.ndarray:
        check_is_fitted(self, "mean_")
        n = max(self.n_samples_seen_, 1)
        return np.maximum(np.sqrt(self.m2_ / n), self.std_floor)

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[-1]}")
        z = (X - self.mean_) / self.std_
        if self.clip is not None:
            z = np.clip(z, -self.clip, self.clip)
        return z

    def state_dict(self) -> dict:
        return {"max_samples": self.max_samples, "std_floor": self.std_floor, "clip": self.clip,
                "n": int(getattr(self, "n_samples_seen_", 0)),
                "mean": self.mean_.tolist() if hasattr(self, "mean_") else None,
                "m2": self.m2_.tolist() if hasattr(self, "m2_") else None}

    @classmethod
    def from_state_dict(cls, d: dict) -> "RunningNormalizer":
        norm = cls(d["max_samples"], d["std_floor"], d["clip"])
        if d["mean"] is not None:
            norm._reset(len(d["mean"]))
            norm.n_samples_seen_ = d["n"]
            norm.mean_ = np.array(d["mean"], dtype=float)
            norm.m2_ = np.array(d["m2"], dtype=float)
        return norm


def build_state(obs_t, obs_prev, normalizer: RunningNormalizer, update: bool = True) -> np.ndarray:
    """Normalised current observation stacked with the normalised previous one."""
    obs_t = np.asarray(obs_t, dtype=float)
    obs_prev = np.asarray(obs_prev, dtype=float)
    if obs_t.shape != obs_prev.shape:
        raise ValueError("observation shapes differ")
    if update and not normalizer.frozen_:
        normalizer.partial_fit(obs_t[None, :])
    if not hasattr(normalizer, "mean_"):
        raise NotFittedError("normalizer has no statistics yet")
    return np.concatenate([normalizer.transform(obs_t), normalizer.transform(obs_prev)])


# --------------------------------------------------------------------------- #
# scenarios


@dataclass(frozen=True)
class Scenario:
    oc: OperatingCondition
    disturbance: Disturbance
    capacity_mw: tuple[float, ...]
    price_per_mw: tuple[float, ...]
    seed: int = 0

    def market(self, buses) -> CurtailmentMarket:
        return CurtailmentMarket(tuple(buses), np.array(self.capacity_mw), np.array(self.price_per_mw))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "load_multipliers": list(self.oc.load_multipliers),
                "disturbance": self.disturbance.to_dict(),
                "capacity_mw": list(self.capacity_mw), "price_per_mw": list(self.price_per_mw)}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(OperatingCondition(tuple(float(x) for x in d["load_multipliers"]), int(d["seed"])),
                   Disturbance.from_dict(d["disturbance"]),
                   tuple(float(x) for x in d["capacity_mw"]), tuple(float(x) for x in d["price_per_mw"]),
                   int(d["seed"]))


def sample_scenario(net: Network, rng: np.random.Generator, band=TRAINING_BAND,
                    menu: Sequence[Disturbance] | None = None, seed: int = 0,
                    max_retries: int = 50, sim: Simulator | None = None) -> Scenario:
    """Draw an operating condition, a disturbance and market data.

    Draws are redone (up to ``max_retries`` times) while the operating
    condition has no power-flow solution.
    """
    menu = tuple(menu) if menu is not None else default_menu(net)
    if not menu:
        raise ValueError("empty disturbance menu")
    sim = sim or Simulator(net)
    lo, hi = band
    n_loads = len(net.load_buses)
    n_c = len(net.curtailment_buses)
    for _ in range(max_retries):
        mult = tuple(float(x) for x in rng.uniform(lo, hi, size=n_loads)) if hi > lo else (float(lo),) * n_loads
        dist = menu[int(rng.integers(len(menu)))]
        cap = tuple(float(x) for x in rng.uniform(*CAPACITY_RANGE_MW, size=n_c))
        price = tuple(float(x) for x in rng.uniform(*PRICE_RANGE, size=n_c))
        oc = OperatingCondition(mult, seed)
        try:
            sim.init(oc)
        except InfeasibleOperatingPoint:
            continue
        return Scenario(oc, dist, cap, price, seed)
    raise InfeasibleOperatingPoint(f"no feasible operating condition after {max_retries} draws")


def default_menu(net: Network) -> tuple[Disturbance, ...]:
    try:
        return DISTURBANCE_MENUS[net.name]
    except KeyError:
        raise ValueError(f"no default disturbance menu for network {net.name!r}") from None


def default_holdout(net: Network) -> tuple[Disturbance, ...]:
    try:
        return HOLDOUT_DISTURBANCES[net.name]
    except KeyError:
        raise ValueError(f"no default holdout disturbance for network {net.name!r}") from None


# --------------------------------------------------------------------------- #
# environment


@dataclass
class StepOutcome:
    reward: float
    terminal: bool
    verdict: StabilityVerdict
    applied_mw: np.ndarray
    cost: float
    vts_min: float


class LtvsEnv:
    """Wraps a :class:`Simulator` with market bookkeeping and the reward rule."""

    def __init__(self, net: Network, horizon_steps: int = HORIZON_STEPS, dt_control_s: float = DT_CONTROL,
                 action_scale_mw: float = ACTION_SCALE_MW):
        self.net = net
        self.sim = Simulator(net)
        self.horizon_steps = horizon_steps
        self.dt_control_s = dt_control_s
        self.action_scale_mw = action_scale_mw
        self.state = None
        self.market = None
        self.t = 0

    @property
    def observation_size(self) -> int:
        return self.sim.observation_size()

    @property
    def state_size(self) -> int:
        return 2 * self.observation_size

    def reset(self, scenario: Scenario) -> np.ndarray:
        st = self.sim.init(scenario.oc)
        self.state = self.sim.apply_disturbance(st, scenario.disturbance)
        self.market = scenario.market(self.net.curtailment_buses)
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return self.sim.measure(self.state, self.market.price_per_mw, self.market.remaining_mw)

    def apply(self, per_bus_delta, prices=None) -> StepOutcome:
        """Advance one control step with the given per-bus curtailment change.

        ``prices`` overrides the market prices for costing (used by the
        load-shedding baseline, whose MW do not come from the market).
        """
        if self.state is None or not self.state.alive:
            raise RuntimeError("environment must be reset")
        before = self.state.curtailed_mw.copy()
        st, verdict = self.sim.step(self.state, per_bus_delta, self.dt_control_s)
        applied = st.curtailed_mw - before
        use_market = prices is None
        cost = action_cost(applied, self.market.price_per_mw if use_market else prices)
        if use_market:
            self.market.apply(applied)
        last = self.t == self.horizon_steps - 1
        if verdict.status is Status.ONGOING and last:
            verdict = self.sim.final_verdict(st)
        unstable = verdict.unstable
        r = reward(cost, unstable, st.step_min_vts < V_END, self.t)
        self.state = st
        self.t += 1
        return StepOutcome(r, unstable or last, verdict, applied, cost, st.step_min_vts)


# --------------------------------------------------------------------------- #
# episodes


@dataclass
class EpisodeTrace:
    scenario: Scenario
    method: str
    states: list = field(default_factory=list)  # normalised, one more than steps
    obs: list = field(default_factory=list)  # raw observations, one more than steps
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    terminals: list = field(default_factory=list)
    delta_mw: list = field(default_factory=list)
    per_bus_delta: list = field(default_factory=list)
    vts_min: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    times: list = field(default_factory=list)
    curtailed: list = field(default_factory=list)  # cumulative per bus after each step
    final_status: Status = Status.ONGOING

    @property
    def n_steps(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(math.fsum(self.rewards))

    @property
    def crashed(self) -> bool:
        return self.final_status.unstable

    @property
    def total_curtailment_mw(self) -> float:
        return float(np.sum(self.curtailed[-1])) if self.curtailed else 0.0

    def rows(self):
        """One JSON-ready record per control step."""
        for t in range(self.n_steps):
            yield {
                "t": t,
                "state_raw": [float(x) for x in self.obs[t]],
                "action_raw": None if self.actions[t] is None else float(self.actions[t]),
                "delta_mw": float(self.delta_mw[t]),
                "per_bus_delta": [float(x) for x in self.per_bus_delta[t]],
                "reward": float(self.rewards[t]),
                "vts_min": float(self.vts_min[t]),
                "verdict": self.verdicts[t],
            }

    def write_jsonl(self, fh) -> None:
        for row in self.rows():
            fh.write(json.dumps(row) + "\n")


Policy = Callable[[np.ndarray], tuple[float, float]]


def run_episode(env: LtvsEnv, policy: Policy, scenario: Scenario, mode: Mode | str,
                normalizer: RunningNormalizer, rng: np.random.Generator | None = None,
                update_normalizer: bool = False, threshold_mw: float = 10.0,
                method: str = "drl") -> EpisodeTrace:
    """Roll out one episode with a Gaussian policy returning ``(mu, sigma)`` per state."""
    mode = Mode(mode)
    if mode is Mode.STOCHASTIC and rng is None:
        raise ValueError("stochastic rollouts need an rng")
    trace = EpisodeTrace(scenario, method)
    obs = env.reset(scenario)
    if getattr(normalizer, "n_features_in_", len(obs)) != len(obs):
        raise ValueError("normalizer dimension does not match the environment")
    state = build_state(obs, obs, normalizer, update_normalizer)
    trace.obs.append(obs)
    trace.states.append(state)
    for t in range(env.horizon_steps):
        mu, sigma = policy(state)
        if mode is Mode.STOCHASTIC:
            a = mu + sigma * rng.standard_normal()
        else:
            a = mu
        logp = float(gaussian_log_prob(mu, sigma, a)[0])
        if not np.isfinite(a):
            raise FloatingPointError(f"non-finite action at step {t}")
        delta = env.action_scale_mw * a
        if mode is Mode.DETERMINISTIC_THRESHOLDED and abs(delta) < threshold_mw:
            delta = 0.0
        out = env.apply(dispatch_curtailment(env.market, delta))
        next_obs = env.observe()
        next_state = build_state(next_obs, obs, normalizer, update_normalizer)
        trace.actions.append(float(a))
        trace.log_probs.append(logp)
        _record(trace, env, out, delta)
        trace.obs.append(next_obs)
        trace.states.append(next_state)
        obs, state = next_obs, next_state
        if out.terminal:
            trace.final_status = out.verdict.status
            break
    return trace


def run_fixed_episode(env: LtvsEnv, controller, scenario: Scenario, method: str,
                      prices=None) -> EpisodeTrace:
    """Roll out an episode where ``controller(env) -> per-bus MW deltas`` (baseline / no control)."""
    trace = EpisodeTrace(scenario, method)
    obs = env.reset(scenario)
    trace.obs.append(obs)
    for _ in range(env.horizon_steps):
        deltas = np.asarray(controller(env), dtype=float)
        out = env.apply(deltas, prices=prices)
        trace.actions.append(None)
        trace.log_probs.append(0.0)
        _record(trace, env, out, float(np.sum(deltas)))
        obs = env.observe()
        trace.obs.append(obs)
        if out.terminal:
            trace.final_status = out.verdict.status
            break
    return trace


def _record(trace: EpisodeTrace, env: LtvsEnv, out: StepOutcome, delta: float) -> None:
    trace.rewards.append(out.reward)
    trace.terminals.append(out.terminal)
    trace.delta_mw.append(float(delta))
    trace.per_bus_delta.append(out.applied_mw)
    trace.vts_min.append(out.vts_min)
    trace.verdicts.append(out.verdict.status.value)
    trace.times.append(env.state.time_s)
    trace.curtailed.append(env.state.curtailed_mw.copy())
