"""Quasi-steady-state long-term simulation.

Fast dynamics are replaced by their equilibrium (the AC power flow); only
the slow devices are integrated: LTC tap changers with deadband and delays,
over-excitation limiters with a latching timer, and exponential-recovery
loads.  The controller interacts every ``dt_control_s`` seconds; internally
the state advances in ``dt_inner_s`` sub-steps.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .grid import BusKind, Network
from .powerflow import (PQ, PV, SLACK, Admittances, BusInjections, PowerFlowSolution,
                        SolverOptions, admittances, finish_polar, newton_polar)

log = logging.getLogger(__name__)

V_COLLAPSE = 0.7
V_END = 0.90
DT_CONTROL = 5.0
DT_INNER = 1.0


class InfeasibleOperatingPoint(RuntimeError):
    """The requested operating condition has no power-flow solution."""


class SimulationError(RuntimeError):
    pass


class Status(str, enum.Enum):
    ONGOING = "Ongoing"
    STABLE_AT_END = "StableAtEnd"
    UNSTABLE_LOW_VOLTAGE = "UnstableLowVoltage"
    UNSTABLE_NO_EQUILIBRIUM = "UnstableNoEquilibrium"

    @property
    def unstable(self) -> bool:
        return self in (Status.UNSTABLE_LOW_VOLTAGE, Status.UNSTABLE_NO_EQUILIBRIUM)


@dataclass(frozen=True)
class StabilityVerdict:
    status: Status
    violating_bus: int | None = None
    at_time_s: float = 0.0

    @property
    def unstable(self) -> bool:
        return self.status.unstable


class DisturbanceKind(str, enum.Enum):
    LINE_TRIP = "LineTrip"
    GENERATOR_TRIP = "GeneratorTrip"
    LOAD_STEP = "LoadStep"


@dataclass(frozen=True)
class Disturbance:
    kind: DisturbanceKind
    target: int
    apply_time_s: float = 0.0
    magnitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DisturbanceKind(self.kind))
        if self.apply_time_s < 0:
            raise ValueError("apply_time_s must be >= 0")

    @property
    def label(self) -> str:
        if self.kind is DisturbanceKind.LOAD_STEP:
            return f"{self.kind.value}:{self.target}:{self.magnitude:g}"
        return f"{self.kind.value}:{self.target}"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "target": self.target,
                "apply_time_s": self.apply_time_s, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, d: dict) -> "Disturbance":
        return cls(DisturbanceKind(d["kind"]), int(d["target"]),
                   float(d.get("apply_time_s", 0.0)), float(d.get("magnitude", 0.0)))


@dataclass(frozen=True)
class OperatingCondition:
    load_multipliers: tuple[float, ...]  # one per entry of Network.load_buses
    seed: int = 0


@dataclass
class SimulationState:
    time_s: float
    taps: np.ndarray
    ltc_timers: np.ndarray
    ltc_moved: np.ndarray
    oel_timers: np.ndarray
    oel_active: np.ndarray
    load_scale: np.ndarray  # per bus
    curtailed_mw: np.ndarray  # per curtailment bus
    last_solution: PowerFlowSolution
    min_vts_seen: float
    alive: bool = True
    branch_in_service: np.ndarray = None
    gen_in_service: np.ndarray = None
    p_nominal: np.ndarray = None  # MW per bus after OC multipliers and load steps
    q_nominal: np.ndarray = None
    v_load_ref: np.ndarray = None  # pre-disturbance voltage, the load characteristic's reference
    step_min_vts: float = float("inf")  # lowest V_TS during the last control step
    warnings: tuple[str, ...] = ()
    _adm: Admittances | None = field(default=None, repr=False)

    def copy(self) -> "SimulationState":
        arrays = {k: v.copy() for k, v in self.__dict__.items() if isinstance(v, np.ndarray)}
        return replace(self, **arrays)


# --------------------------------------------------------------------------- #


class Simulator:
    """Binds a :class:`Network` to the QSS update rules.

    The network is never mutated; topology changes live in the state.
    """

    def __init__(self, net: Network, opts: SolverOptions | None = None,
                 dt_inner_s: float = DT_INNER):
        self.net = net
        self.opts = opts or SolverOptions(flat_start=False)
        self.dt_inner_s = dt_inner_s
        nb = len(net.buses)
        self.base = net.mva_base
        self.bus_kind = np.array([{BusKind.SLACK: SLACK, BusKind.PV: PV, BusKind.PQ: PQ}[b.kind]
                                  for b in net.buses])
        self.v_set = np.array([b.v_setpoint for b in net.buses], dtype=float)
        self.vts_idx = np.array([net.bus_index(i) for i in net.transmission_buses], dtype=int)
        self.vts_ids = np.array(net.transmission_buses, dtype=int)
        self.curt_idx = np.array([net.bus_index(i) for i in net.curtailment_buses], dtype=int)
        self.load_idx = np.array([net.bus_index(i) for i in net.load_buses], dtype=int)

        self.alpha_p = np.zeros(nb)
        self.alpha_q = np.zeros(nb)
        self.recovery_t = np.zeros(nb)
        for lm in net.load_models:
            i = net.bus_index(lm.bus)
            self.alpha_p[i] = lm.alpha_p
            self.alpha_q[i] = lm.alpha_q
            self.recovery_t[i] = lm.recovery_time_s if lm.restores_to_nominal else 0.0

        self.gen_bus = np.array([net.bus_index(g.bus) for g in net.generators], dtype=int)
        self.gen_p = np.array([g.p_gen for g in net.generators], dtype=float)
        self.gen_qmin = np.array([g.q_min for g in net.generators], dtype=float)
        self.gen_qmax = np.array([g.q_max for g in net.generators], dtype=float)
        self.oel_limit = np.array([g.oel.q_limit if g.oel else np.inf for g in net.generators])
        self.oel_delay = np.array([g.oel.delay_s if g.oel else np.inf for g in net.generators])
        for b in net.buses:
            if b.kind is BusKind.PV and sum(g.bus == b.id for g in net.generators) > 1:
                raise ValueError(f"bus {b.id}: more than one generator on a PV bus is not supported")

        self.rec_idx = np.flatnonzero(self.recovery_t > 0)
        self._gen_cache: dict = {}
        self._zeros = np.zeros(nb)
        self.ltc_branch = np.array([net.branch_index(t.branch) for t in net.ltcs], dtype=int)
        self.ltc_ctrl = np.array([net.bus_index(t.controlled_bus) for t in net.ltcs], dtype=int)
        # +1: raising the tap lowers the controlled voltage (controlled bus on the to side)
        self.ltc_sign = np.array([1.0 if net.branches[net.branch_index(t.branch)].to_bus == t.controlled_bus
                                  else -1.0 for t in net.ltcs])

    # ------------------------------------------------------------------ #

    def _admittances(self, st: SimulationState) -> Admittances:
        if st._adm is None:
            st._adm = admittances(self.net, st.taps, st.branch_in_service)
        return st._adm

    def _gen_pattern(self, on: np.ndarray):
        """Bus kinds and active generation for a generator in-service mask (cached)."""
        key = on.tobytes()
        hit = self._gen_cache.get(key)
        if hit is None:
            kind = self.bus_kind.copy()
            p_gen = np.zeros(len(kind))
            np.add.at(p_gen, self.gen_bus[on], self.gen_p[on])
            for i in np.flatnonzero(kind == PV):
                if not np.any(on & (self.gen_bus == i)):
                    kind[i] = PQ
            hit = self._gen_cache[key] = (kind, p_gen)
        return hit

    def _injections(self, st: SimulationState, constant_power: bool = False) -> BusInjections:
        nb = len(self.bus_kind)
        kind, p_gen = self._gen_pattern(st.gen_in_service)
        scale = np.ones(nb) if constant_power else st.load_scale.copy()
        if len(self.curt_idx):
            p_c = st.p_nominal[self.curt_idx]
            safe = np.where(p_c > 0, p_c, 1.0)
            scale[self.curt_idx] *= np.where(p_c > 0, 1.0 - st.curtailed_mw / safe, 0.0)
        if constant_power:
            alpha_p = alpha_q = self._zeros
        else:
            alpha_p, alpha_q = self.alpha_p, self.alpha_q
        return BusInjections(kind=kind.copy(), v_set=self.v_set, p_gen=p_gen, q_gen=np.zeros(nb),
                             p_load=st.p_nominal * scale, q_load=st.q_nominal * scale,
                             alpha_p=alpha_p, alpha_q=alpha_q, v_ref=st.v_load_ref)

    def gen_q(self, sol: PowerFlowSolution) -> np.ndarray:
        """Reactive output of each generator (its bus's injection plus local load)."""
        return sol.q_inj[self.gen_bus] + sol.q_load[self.gen_bus]

    def _solve(self, st: SimulationState, inj: BusInjections, vm0, va0) -> PowerFlowSolution:
        """Power flow with generator reactive limits (OEL-latched units held at q_limit)."""
        adm = self._admittances(st)
        q_fixed: dict[int, float] = {}
        for g in np.flatnonzero(st.oel_active & st.gen_in_service):
            q_fixed[g] = self.oel_limit[g]
        for _ in range(len(self.gen_bus) + 2):
            inj_k = inj
            if q_fixed:
                inj_k = inj.copy()
                for g, q in q_fixed.items():
                    b = self.gen_bus[g]
                    if inj_k.kind[b] != SLACK:
                        inj_k.kind[b] = PQ
                        inj_k.q_gen[b] += q
            vm, va, ok, it, norm = newton_polar(adm.g, adm.b, inj_k, vm0, va0, self.base, self.opts)
            sol = finish_polar(adm, inj_k, vm, va, ok, it, norm, self.base)
            if not ok:
                return sol
            q = self.gen_q(sol)
            changed = False
            for g in range(len(self.gen_bus)):
                if g in q_fixed or not st.gen_in_service[g] or self.bus_kind[self.gen_bus[g]] == SLACK:
                    continue
                if q[g] > self.gen_qmax[g] + 1e-9:
                    q_fixed[g] = self.gen_qmax[g]
                    changed = True
                elif q[g] < self.gen_qmin[g] - 1e-9:
                    q_fixed[g] = self.gen_qmin[g]
                    changed = True
            if not changed:
                return sol
            vm0, va0 = vm, va
        return sol

    # ------------------------------------------------------------------ #

    def init(self, oc: OperatingCondition) -> SimulationState:
        net = self.net
        if len(oc.load_multipliers) != len(self.load_idx):
            raise ValueError(f"expected {len(self.load_idx)} load multipliers, got {len(oc.load_multipliers)}")
        nb = len(net.buses)
        mult = np.ones(nb)
        mult[self.load_idx] = oc.load_multipliers
        p_nom = np.array([b.p_load for b in net.buses]) * mult
        q_nom = np.array([b.q_load for b in net.buses]) * mult
        st = SimulationState(
            time_s=0.0,
            taps=np.array([net.branches[k].tap_ratio for k in self.ltc_branch], dtype=float),
            ltc_timers=np.zeros(len(net.ltcs)),
            ltc_moved=np.zeros(len(net.ltcs), dtype=bool),
            oel_timers=np.zeros(len(net.generators)),
            oel_active=np.zeros(len(net.generators), dtype=bool),
            load_scale=np.ones(nb),
            curtailed_mw=np.zeros(len(self.curt_idx)),
            last_solution=None,
            min_vts_seen=float("inf"),
            branch_in_service=np.array([br.in_service for br in net.branches], dtype=bool),
            gen_in_service=np.array([g.in_service for g in net.generators], dtype=bool),
            p_nominal=p_nom,
            q_nominal=q_nom,
            v_load_ref=np.ones(nb),
        )
        inj = self._injections(st, constant_power=True)
        sol = self._solve(st, inj, np.where(inj.kind == PQ, 1.0, inj.v_set), np.zeros(nb))
        if not sol.converged:
            raise InfeasibleOperatingPoint("no power-flow solution for the operating condition")
        st.v_load_ref = sol.v_mag.copy()
        st.last_solution = sol
        st.min_vts_seen = float(np.min(sol.v_mag[self.vts_idx])) if len(self.vts_idx) else float("inf")
        st.step_min_vts = st.min_vts_seen
        if len(self.vts_idx) and st.min_vts_seen < V_COLLAPSE:
            raise InfeasibleOperatingPoint("operating condition starts below the collapse voltage")
        return st

    def apply_disturbance(self, state: SimulationState, d: Disturbance) -> SimulationState:
        if abs(d.apply_time_s - state.time_s) > 1e-9:
            raise SimulationError(f"disturbance scheduled at {d.apply_time_s}s applied at {state.time_s}s")
        st = state.copy()
        net = self.net
        if d.kind is DisturbanceKind.LINE_TRIP:
            try:
                k = net.branch_index(d.target)
            except KeyError:
                raise SimulationError(f"unknown branch {d.target}") from None
            if not st.branch_in_service[k]:
                st.warnings = st.warnings + (f"branch {d.target} already out of service",)
                log.warning("branch %s already out of service", d.target)
                return st
            st.branch_in_service[k] = False
            st._adm = None
        elif d.kind is DisturbanceKind.GENERATOR_TRIP:
            try:
                g = net.generator_index(d.target)
            except KeyError:
                raise SimulationError(f"unknown generator {d.target}") from None
            if self.bus_kind[self.gen_bus[g]] == SLACK:
                raise SimulationError("tripping the slack generator is not allowed")
            if not st.gen_in_service[g]:
                st.warnings = st.warnings + (f"generator {d.target} already out of service",)
                return st
            st.gen_in_service[g] = False
        elif d.kind is DisturbanceKind.LOAD_STEP:
            try:
                i = net.bus_index(d.target)
            except KeyError:
                raise SimulationError(f"unknown bus {d.target}") from None
            p0 = st.p_nominal[i]
            pf_ratio = st.q_nominal[i] / p0 if p0 else 0.0
            st.p_nominal[i] += d.magnitude
            st.q_nominal[i] += d.magnitude * pf_ratio
        return st

    def step(self, state: SimulationState, curtailment_delta_mw: Sequence[float] | None = None,
             dt_control_s: float = DT_CONTROL) -> tuple[SimulationState, StabilityVerdict]:
        if not state.alive:
            raise SimulationError("cannot step a collapsed simulation")
        st = state.copy()
        n_sub = int(round(dt_control_s / self.dt_inner_s))
        st.step_min_vts = float("inf")
        for k in range(n_sub):
            dt = self.dt_inner_s
            sol = st.last_solution
            # 1) restorative loads, explicit Euler on the previous equilibrium
            rec = self.rec_idx
            if len(rec):
                x = sol.v_mag[rec] / st.v_load_ref[rec]
                ls = st.load_scale[rec]
                st.load_scale[rec] = ls + dt * (1.0 - ls * x ** self.alpha_p[rec]) / self.recovery_t[rec]
            # 2) curtailment
            if k == 0 and curtailment_delta_mw is not None and len(self.curt_idx):
                delta = np.asarray(curtailment_delta_mw, dtype=float)
                st.curtailed_mw = np.clip(st.curtailed_mw + delta, 0.0, st.p_nominal[self.curt_idx])
            # 3) equilibrium
            inj = self._injections(st)
            new = self._solve(st, inj, sol.v_mag, sol.v_ang)
            st.time_s = state.time_s + (k + 1) * dt
            if not new.converged:
                st.alive = False
                return st, StabilityVerdict(Status.UNSTABLE_NO_EQUILIBRIUM, None, st.time_s)
            st.last_solution = new
            # 4) over-excitation limiters
            q = self.gen_q(new)
            over = (q > self.oel_limit + 1e-9) & st.gen_in_service & ~st.oel_active
            st.oel_timers = np.where(over, st.oel_timers + dt, np.where(st.oel_active, st.oel_timers, 0.0))
            fire = over & (st.oel_timers >= self.oel_delay - 1e-9)
            st.oel_active = st.oel_active | fire
            # 5) tap changers
            self._update_ltcs(st, new, dt)
            # 6) stability bookkeeping
            if len(self.vts_idx):
                vts = new.v_mag[self.vts_idx]
                j = int(np.argmin(vts))
                st.step_min_vts = min(st.step_min_vts, float(vts[j]))
                st.min_vts_seen = min(st.min_vts_seen, float(vts[j]))
                if vts[j] < V_COLLAPSE:
                    st.alive = False
                    return st, StabilityVerdict(Status.UNSTABLE_LOW_VOLTAGE, int(self.vts_ids[j]), st.time_s)
        return st, StabilityVerdict(Status.ONGOING, None, st.time_s)

    def _update_ltcs(self, st: SimulationState, sol: PowerFlowSolution, dt: float) -> None:
        moved_any = False
        for i, ltc in enumerate(self.net.ltcs):
            if not st.branch_in_service[self.ltc_branch[i]]:
                st.ltc_timers[i] = 0.0
                continue
            dev = sol.v_mag[self.ltc_ctrl[i]] - ltc.v_ref
            if abs(dev) <= ltc.deadband:
                st.ltc_timers[i] = 0.0
                st.ltc_moved[i] = False
                continue
            st.ltc_timers[i] += dt
            delay = ltc.subsequent_delay_s if st.ltc_moved[i] else ltc.initial_delay_s
            if st.ltc_timers[i] + 1e-9 < delay:
                continue
            new_tap = st.taps[i] + self.ltc_sign[i] * np.sign(dev) * ltc.tap_step
            new_tap = round(new_tap, 10)
            st.ltc_timers[i] = 0.0
            if ltc.tap_min - 1e-12 <= new_tap <= ltc.tap_max + 1e-12:
                st.taps[i] = new_tap
                st.ltc_moved[i] = True
                moved_any = True
        if moved_any:
            st._adm = None

    def final_verdict(self, state: SimulationState) -> StabilityVerdict:
        """End-of-horizon classification: any transmission voltage below 0.90 pu is unstable."""
        sol = state.last_solution
        if not state.alive:
            raise SimulationError("simulation already collapsed")
        if len(self.vts_idx):
            vts = sol.v_mag[self.vts_idx]
            j = int(np.argmin(vts))
            if vts[j] < V_END:
                return StabilityVerdict(Status.UNSTABLE_LOW_VOLTAGE, int(self.vts_ids[j]), state.time_s)
        return StabilityVerdict(Status.STABLE_AT_END, None, state.time_s)

    def vts(self, state: SimulationState) -> np.ndarray:
        return state.last_solution.v_mag[self.vts_idx]

    def measure(self, state: SimulationState, prices=None, remaining=None) -> np.ndarray:
        """Raw observation: bus voltages, branch from-end P and Q, then price/remaining per curtailment bus."""
        sol = state.last_solution
        flows = sol.branch_flows[:, :2] * state.branch_in_service[:, None]
        parts = [sol.v_mag, flows.ravel()]
        n_c = len(self.curt_idx)
        if n_c:
            prices = np.zeros(n_c) if prices is None else np.asarray(prices, dtype=float)
            remaining = np.zeros(n_c) if remaining is None else np.asarray(remaining, dtype=float)
            parts.append(np.column_stack([prices, remaining]).ravel())
        return np.concatenate(parts)

    def observation_size(self) -> int:
        return len(self.net.buses) + 2 * len(self.net.branches) + 2 * len(self.curt_idx)


# module-level functional surface ------------------------------------------- #


def init(net: Network, oc: OperatingCondition) -> SimulationState:
    return Simulator(net).init(oc)


def apply_disturbance(net: Network, state: SimulationState, d: Disturbance) -> SimulationState:
    return Simulator(net).apply_disturbance(state, d)


def step(state: SimulationState, net: Network, curtailment_delta_mw=None,
         dt_control_s: float = DT_CONTROL) -> tuple[SimulationState, StabilityVerdict]:
    return Simulator(net).step(state, curtailment_delta_mw, dt_control_s)


def trajectory_header(net: Network) -> list[str]:
    cols = ["time_s"]
    cols += [f"bus_{b.id}_v" for b in net.buses]
    for br in net.branches:
        cols += [f"branch_{br.id}_p", f"branch_{br.id}_q"]
    cols += [f"curtail_{b}" for b in net.curtailment_buses]
    cols.append("verdict")
    return cols


def trajectory_row(state: SimulationState, verdict: StabilityVerdict) -> list:
    sol = state.last_solution
    flows = sol.branch_flows[:, :2] * state.branch_in_service[:, None]
    return ([repr(float(state.time_s))] + [repr(float(v)) for v in sol.v_mag]
            + [repr(float(x)) for x in flows.ravel()]
            + [repr(float(c)) for c in state.curtailed_mw] + [verdict.status.value])


def write_trajectory_csv(path, net: Network, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_header(net))
        w.writerows(rows)
