import io
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from ltvs_drl.env import (CAPACITY_RANGE_MW, DISTURBANCE_MENUS, PRICE_RANGE, CurtailmentMarket, Mode,
                          RunningNormalizer, Scenario, action_cost, build_state, default_menu,
                          dispatch_curtailment, reward, run_episode, run_fixed_episode, sample_scenario)
from ltvs_drl.qss import Disturbance, DisturbanceKind, OperatingCondition, Status

CORRIDOR = Disturbance(DisturbanceKind.LINE_TRIP, 1)
QUIET = Disturbance(DisturbanceKind.LOAD_STEP, 4, magnitude=0.0)


def market(remaining=(400.0, 350.0), prices=(0.12, 0.18)):
    return CurtailmentMarket((4, 5), np.array(remaining), np.array(prices))


def scenario(dist=CORRIDOR, mult=1.0, cap=(400.0, 350.0), price=(0.12, 0.18)):
    return Scenario(OperatingCondition((mult, mult)), dist, cap, price)


def zero_policy(state):
    return 0.0, 0.5


# --------------------------------------------------------------------------- #
# dispatch


def test_dispatch_fill_then_spill():
    assert np.array_equal(dispatch_curtailment(market(), 450.0), [400.0, 50.0])


def test_dispatch_clamps_at_remaining():
    out = dispatch_curtailment(market(), 1000.0)
    assert np.array_equal(out, [400.0, 350.0])
    assert 1000.0 - out.sum() == 250.0


def test_dispatch_restore_reverse_order():
    m = market()
    m.apply(dispatch_curtailment(m, 450.0))
    assert np.array_equal(dispatch_curtailment(m, -100.0), [-50.0, -50.0])


def test_dispatch_prefers_cheapest_regardless_of_position():
    assert np.array_equal(dispatch_curtailment(market(prices=(0.19, 0.11)), 100.0), [0.0, 100.0])


def test_dispatch_nothing_to_restore():
    assert np.array_equal(dispatch_curtailment(market(), -50.0), [0.0, 0.0])


def _oracle_dispatch(remaining, curtailed, prices, delta):
    """Enumerate every MW split on a 1 MW grid and keep the rule-consistent one."""
    n_cheap, n_dear = (0, 1) if prices[0] <= prices[1] else (1, 0)
    best = None
    if delta >= 0:
        for x, y in itertools.product(range(int(remaining[0]) + 1), range(int(remaining[1]) + 1)):
            amt = (x, y)
            if x + y > delta:
                continue
            # the pricier bus is used only once the cheap one is exhausted
            if amt[n_dear] > 0 and amt[n_cheap] < remaining[n_cheap]:
                continue
            if best is None or x + y > sum(best):
                best = amt
        return np.array(best, dtype=float)
    for x, y in itertools.product(range(int(curtailed[0]) + 1), range(int(curtailed[1]) + 1)):
        amt = (x, y)
        if x + y > -delta:
            continue
        if amt[n_cheap] > 0 and amt[n_dear] < curtailed[n_dear]:
            continue
        if best is None or x + y > sum(best):
            best = amt
    return -np.array(best, dtype=float)


@settings(max_examples=30)
@given(rem=st.tuples(st.integers(0, 40), st.integers(0, 40)), cur=st.tuples(st.integers(0, 40), st.integers(0, 40)),
       prices=st.tuples(st.sampled_from([0.1, 0.15, 0.2]), st.sampled_from([0.12, 0.17])),
       delta=st.integers(-90, 90))
def test_dispatch_matches_enumeration(rem, cur, prices, delta):
    m = CurtailmentMarket((4, 5), np.add(rem, cur).astype(float), np.array(prices, dtype=float),
                          np.array(rem, dtype=float))
    got = dispatch_curtailment(m, float(delta))
    assert np.array_equal(got, _oracle_dispatch(rem, cur, prices, delta))


@given(total=st.floats(-2000, 2000), rem=st.tuples(st.floats(0, 500), st.floats(0, 500)))
def test_dispatch_bounds(total, rem):
    m = CurtailmentMarket((4, 5), np.array([500.0, 500.0]), np.array([0.13, 0.16]), np.array(rem))
    out = dispatch_curtailment(m, total)
    assert np.all(out <= m.remaining_mw + 1e-9)
    assert np.all(-out <= m.curtailed_mw + 1e-9)
    assert abs(out.sum()) <= abs(total) + 1e-9
    assert np.all(np.sign(out) * np.sign(total) >= 0)


# --------------------------------------------------------------------------- #
# reward


def test_reward_unstable_at_zero():
    assert reward(0.0, True, True, 0) == -500.0


def test_reward_all_healthy():
    assert reward(0.0, False, False, 7) == 0.0


def test_reward_low_voltage_at_t2():
    assert abs(reward(0.0, False, True, 2) - (-0.9801)) < 1e-12


def test_reward_shedding_cost():
    c = action_cost([50.0, 50.0], [0.15, 0.15])
    assert abs(reward(c, False, False, 3) - (-15.0)) < 1e-12


def test_action_cost_ignores_restores():
    assert action_cost([-40.0, 10.0], [0.12, 0.18]) == pytest.approx(-1.8)


@given(c=st.floats(-200, 0), unstable=st.booleans(), low=st.booleans(), t=st.integers(0, 199))
def test_reward_branch_exclusive(c, unstable, low, t):
    r = reward(c, unstable, low, t)
    if unstable:
        assert r == c - 500 * 0.99**t
    elif low:
        assert r == c - 0.99**t
    else:
        assert r == c


# --------------------------------------------------------------------------- #
# normaliser and state


def test_normalizer_frozen_example():
    n = RunningNormalizer(max_samples=2).fit(np.array([[-1.0], [3.0]]))
    assert n.frozen_
    assert n.mean_[0] == 1.0 and n.std_[0] == 2.0
    assert n.transform(np.array([3.0]))[0] == 1.0


def test_normalizer_constant_dimension():
    n = RunningNormalizer().fit(np.full((50, 2), 4.2))
    assert np.array_equal(n.std_, [1e-6, 1e-6])
    assert np.all(n.transform(np.array([4.2, 4.2])) == 0.0)


def test_normalizer_matches_numpy(rng):
    x = rng.normal(3.0, 2.0, size=(500, 4))
    n = RunningNormalizer(clip=None).fit(x)
    assert np.allclose(n.mean_, x.mean(0), atol=1e-12)
    assert np.allclose(n.std_, x.std(0), atol=1e-12)


def test_normalizer_batching_invariant(rng):
    x = rng.normal(size=(300, 3))
    a = RunningNormalizer().fit(x)
    b = RunningNormalizer()
    for chunk in np.array_split(x, 7):
        b.partial_fit(chunk)
    assert np.array_equal(a.mean_, b.mean_) and np.array_equal(a.m2_, b.m2_)


def test_normalizer_freeze_exact(rng):
    n = RunningNormalizer()
    n.partial_fit(rng.normal(size=(9_999, 3)))
    assert not n.frozen_
    n.partial_fit(rng.normal(size=(1, 3)))
    assert n.frozen_ and n.n_samples_seen_ == 10_000
    mean, std = n.mean_.copy(), n.std_.copy()
    n.partial_fit(rng.normal(50.0, 9.0, size=(5_000, 3)))
    assert n.n_samples_seen_ == 10_000
    assert mean.tobytes() == n.mean_.tobytes() and std.tobytes() == n.std_.tobytes()


def test_normalizer_state_dict_round_trip(rng):
    n = RunningNormalizer(max_samples=100).fit(rng.normal(size=(40, 3)))
    m = RunningNormalizer.from_state_dict(json.loads(json.dumps(n.state_dict())))
    assert np.array_equal(m.transform(np.ones(3)), n.transform(np.ones(3)))
    assert m.n_samples_seen_ == 40


def test_normalizer_dimension_mismatch():
    n = RunningNormalizer().fit(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        n.transform(np.zeros(3))
    with pytest.raises(ValueError):
        n.partial_fit(np.zeros((1, 3)))


def test_build_state_layout_and_update():
    n = RunningNormalizer(max_samples=2).fit(np.array([[-1.0, 0.0], [3.0, 2.0]]))
    s = build_state([3.0, 1.0], [1.0, 3.0], n)
    assert np.array_equal(s, [1.0, 0.0, 0.0, 2.0])
    assert n.n_samples_seen_ == 2


def test_build_state_needs_stats():
    with pytest.raises(NotFittedError):
        build_state([1.0], [1.0], RunningNormalizer(), update=False)
    with pytest.raises(ValueError):
        build_state([1.0, 2.0], [1.0], RunningNormalizer())


# --------------------------------------------------------------------------- #
# scenarios


def test_sample_scenario_reproducible(ltvs5):
    a = sample_scenario(ltvs5, np.random.default_rng(7), seed=7)
    b = sample_scenario(ltvs5, np.random.default_rng(7), seed=7)
    assert a == b
    assert Scenario.from_dict(json.loads(json.dumps(a.to_dict()))) == a


def test_sample_scenario_fixed_band(ltvs5, rng):
    for _ in range(5):
        sc = sample_scenario(ltvs5, rng, band=(1.0, 1.0))
        assert sc.oc.load_multipliers == (1.0, 1.0)


def test_sample_scenario_ranges(ltvs5, rng):
    for _ in range(50):
        sc = sample_scenario(ltvs5, rng)
        assert all(0.95 <= m <= 1.05 for m in sc.oc.load_multipliers)
        assert all(CAPACITY_RANGE_MW[0] <= c <= CAPACITY_RANGE_MW[1] for c in sc.capacity_mw)
        assert all(PRICE_RANGE[0] <= p <= PRICE_RANGE[1] for p in sc.price_per_mw)
        assert sc.disturbance in DISTURBANCE_MENUS["ltvs5"]


def test_disturbance_histogram_uniform(ltvs5):
    from ltvs_drl.qss import Simulator
    sim = Simulator(ltvs5)
    rng = np.random.default_rng(99)
    menu = default_menu(ltvs5)
    counts = dict.fromkeys(menu, 0)
    n = 10_000
    for _ in range(n):
        counts[sample_scenario(ltvs5, rng, sim=sim).disturbance] += 1
    p = 1 / len(menu)
    sigma = np.sqrt(n * p * (1 - p))
    for c in counts.values():
        assert abs(c - n * p) <= 3 * sigma


def test_sample_scenario_gives_up(ltvs5, rng):
    from ltvs_drl.qss import InfeasibleOperatingPoint
    with pytest.raises(InfeasibleOperatingPoint):
        sample_scenario(ltvs5, rng, band=(10.0, 12.0), max_retries=3)


def test_empty_menu_rejected(ltvs5, rng):
    with pytest.raises(ValueError):
        sample_scenario(ltvs5, rng, menu=())


# --------------------------------------------------------------------------- #
# episodes


def test_stable_scenario_ideal_policy(env):
    tr = run_episode(env, zero_policy, scenario(QUIET), Mode.DETERMINISTIC, RunningNormalizer(),
                     update_normalizer=True)
    assert tr.n_steps == 200
    assert tr.total_reward == 0.0 and tr.total_curtailment_mw == 0.0
    assert tr.final_status is Status.STABLE_AT_END
    assert tr.times[-1] == 1000.0


def test_collapse_with_zero_action(env):
    tr = run_episode(env, zero_policy, scenario(), Mode.DETERMINISTIC, RunningNormalizer(), update_normalizer=True)
    t_crash = tr.n_steps - 1
    assert tr.n_steps < 200 and tr.crashed
    assert tr.total_reward <= -500 * 0.99**t_crash
    assert tr.terminals[-1] and not any(tr.terminals[:-1])


def test_threshold_suppresses_small_actions(env):
    tr = run_episode(env, lambda s: (0.06, 0.5), scenario(), Mode.DETERMINISTIC_THRESHOLDED,
                     RunningNormalizer(), update_normalizer=True)
    assert tr.total_curtailment_mw == 0.0
    assert all(d == 0.0 for d in tr.delta_mw)


def test_unthresholded_small_actions_apply(env):
    tr = run_episode(env, lambda s: (0.06, 0.5), scenario(), Mode.DETERMINISTIC, RunningNormalizer(),
                     update_normalizer=True)
    assert tr.per_bus_delta[0][0] == pytest.approx(6.0)


def test_stochastic_needs_rng(env):
    with pytest.raises(ValueError):
        run_episode(env, zero_policy, scenario(), Mode.STOCHASTIC, RunningNormalizer())


def test_stacking_at_raw_level(env):
    tr = run_episode(env, lambda s: (0.3, 0.5), scenario(), Mode.DETERMINISTIC, RunningNormalizer(),
                     update_normalizer=True)
    norm = RunningNormalizer().fit(np.array(tr.obs))
    n = env.observation_size
    for t in range(1, len(tr.obs)):
        s = build_state(tr.obs[t], tr.obs[t - 1], norm, update=False)
        prev = build_state(tr.obs[t - 1], tr.obs[max(t - 2, 0)], norm, update=False)
        assert np.array_equal(s[n:], prev[:n])
    assert len(tr.states[0]) == env.state_size == 2 * n
    assert np.array_equal(tr.states[0][:n], tr.states[0][n:])


def test_market_observed_in_state(env):
    tr = run_episode(env, lambda s: (2.0, 0.5), scenario(), Mode.DETERMINISTIC, RunningNormalizer(),
                     update_normalizer=True)
    # first step: 200 MW go to the cheaper bus 4
    assert np.allclose(tr.per_bus_delta[0], [200.0, 0.0])
    assert tr.obs[1][-3] == pytest.approx(200.0) and tr.obs[1][-4] == 0.12
    assert tr.rewards[0] <= -0.12 * 200.0 + 1e-9


@settings(max_examples=8)
@given(seed=st.integers(0, 10_000))
def test_episode_reward_lower_bound_and_accounting(seed, ltvs5):
    from ltvs_drl.env import LtvsEnv
    env = LtvsEnv(ltvs5)
    rng = np.random.default_rng(seed)
    sc = sample_scenario(ltvs5, rng)
    # non-negative actions: free restores followed by re-purchases could otherwise buy capacity twice
    tr = run_episode(env, lambda s: (abs(float(rng.normal(0.5, 1.0))), 0.5), sc, Mode.DETERMINISTIC,
                     RunningNormalizer(), update_normalizer=True)
    bound = -500 - max(sc.price_per_mw) * sum(sc.capacity_mw) - sum(0.99**t for t in range(200))
    assert tr.total_reward >= bound
    assert tr.total_curtailment_mw == pytest.approx(np.sum(tr.per_bus_delta), abs=1e-9)
    assert np.all(tr.curtailed[-1] <= np.array(sc.capacity_mw) + 1e-9)


def test_signed_actions_track_net_curtailment(env, rng):
    tr = run_episode(env, lambda s: (float(rng.normal(0.5, 1.0)), 0.5), scenario(), Mode.DETERMINISTIC,
                     RunningNormalizer(), update_normalizer=True)
    assert np.allclose(tr.curtailed[-1], np.sum(tr.per_bus_delta, axis=0), atol=1e-9)
    bought = sum(np.sum(np.maximum(d, 0) * [0.12, 0.18]) for d in tr.per_bus_delta)
    penalties = sum(r + 0.0 for r in tr.rewards) + bought
    assert penalties <= 1e-9


def test_trace_jsonl(env):
    tr = run_episode(env, zero_policy, scenario(), Mode.DETERMINISTIC, RunningNormalizer(), update_normalizer=True)
    buf = io.StringIO()
    tr.write_jsonl(buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == tr.n_steps
    row = json.loads(lines[-1])
    assert set(row) == {"t", "state_raw", "action_raw", "delta_mw", "per_bus_delta", "reward", "vts_min", "verdict"}
    assert row["verdict"] in (Status.UNSTABLE_LOW_VOLTAGE.value, Status.UNSTABLE_NO_EQUILIBRIUM.value)


def test_fixed_episode_with_explicit_prices(env):
    calls = iter([np.array([50.0, 50.0])])
    tr = run_fixed_episode(env, lambda e: next(calls, np.zeros(2)), scenario(QUIET), "shed",
                           prices=np.array([0.15, 0.15]))
    assert tr.rewards[0] == pytest.approx(-15.0, abs=1e-12)
    assert tr.total_curtailment_mw == 100.0
    # market untouched when explicit prices are given
    assert np.array_equal(env.market.remaining_mw, [400.0, 350.0])


def test_apply_before_reset_rejected(env):
    with pytest.raises(RuntimeError):
        env.apply(np.zeros(2))
