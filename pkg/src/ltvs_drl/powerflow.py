"""Bus admittance matrix and polar Newton-Raphson AC power flow.

Loads may be voltage dependent with the exponential characteristic
``P = P0 * (V / V_ref) ** alpha_p`` (likewise for Q); ``alpha = 0`` gives a
constant-power load.  All powers crossing this module's API are in MW/Mvar;
internally everything is per unit on the network's MVA base.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import BusKind, Network

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

SLACK, PV, PQ = 0, 1, 2
_KIND_CODE = {BusKind.SLACK: SLACK, BusKind.PV: PV, BusKind.PQ: PQ}


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iterations: int = 20
    flat_start: bool = True

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class BusInjections:
    """Per-bus power specification in MW/Mvar, in network bus order.

    ``kind`` holds the bus type actually used by the solve (after any PV->PQ
    switching done by the caller).  ``q_gen`` is only honoured at PQ buses.
    """

    kind: np.ndarray
    v_set: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    alpha_p: np.ndarray
    alpha_q: np.ndarray
    v_ref: np.ndarray

    def copy(self) -> "BusInjections":
        return BusInjections(**{k: v.copy() for k, v in self.__dict__.items()})


@dataclass
class Admittances:
    ybus: np.ndarray
    yf: np.ndarray  # from-end branch currents: I_f = yf @ V
    yt: np.ndarray
    f_idx: np.ndarray
    t_idx: np.ndarray

    def __post_init__(self):
        self.g = np.ascontiguousarray(self.ybus.real)
        self.b = np.ascontiguousarray(self.ybus.imag)


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray  # MW, net injection (generation - load)
    q_inj: np.ndarray  # Mvar
    iterations: int
    converged: bool
    max_mismatch: float
    p_load: np.ndarray = field(default=None, repr=False)  # MW actually consumed
    q_load: np.ndarray = field(default=None, repr=False)
    adm: Admittances | None = field(default=None, repr=False, compare=False)
    base: float = 100.0
    _flows: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    @property
    def branch_flows(self) -> np.ndarray:
        """(n_branch, 4) array of p_from, q_from, p_to, q_to in MW / Mvar, computed on first use."""
        if self._flows is None:
            adm, v = self.adm, self.voltage
            sf = v[adm.f_idx] * np.conj(adm.yf @ v) * self.base
            st = v[adm.t_idx] * np.conj(adm.yt @ v) * self.base
            self._flows = (np.column_stack([sf.real, sf.imag, st.real, st.imag]) if len(sf)
                           else np.zeros((0, 4)))
        return self._flows


def branch_taps(net: Network, taps=None) -> np.ndarray:
    """Effective off-nominal ratio of every branch, LTC taps overriding fixed ratios."""
    ratio = np.array([br.tap_ratio for br in net.branches], dtype=float)
    if taps is not None:
        for ltc, tap in zip(net.ltcs, taps):
            if not ltc.tap_min - 1e-12 <= tap <= ltc.tap_max + 1e-12:
                raise ValueError(f"tap {tap} of ltc on branch {ltc.branch} outside its range")
            ratio[net.branch_index(ltc.branch)] = tap
    return ratio


def admittances(net: Network, taps=None, in_service=None) -> Admittances:
    nb, nl = len(net.buses), len(net.branches)
    ratio = branch_taps(net, taps)
    status = (np.array([br.in_service for br in net.branches], dtype=bool)
              if in_service is None else np.asarray(in_service, dtype=bool))
    f_idx = np.array([net.bus_index(br.from_bus) for br in net.branches], dtype=int)
    t_idx = np.array([net.bus_index(br.to_bus) for br in net.branches], dtype=int)

    ys = np.array([1.0 / complex(br.r, br.x) for br in net.branches]) if nl else np.zeros(0, complex)
    bc = np.array([br.b_shunt for br in net.branches], dtype=float)
    ys = ys * status
    bc = bc * status
    ytt = ys + 0.5j * bc
    yff = ytt / ratio**2
    yft = -ys / ratio
    ytf = -ys / ratio

    yf = np.zeros((nl, nb), dtype=complex)
    yt = np.zeros((nl, nb), dtype=complex)
    rows = np.arange(nl)
    yf[rows, f_idx] = yff
    yf[rows, t_idx] = yft
    yt[rows, f_idx] = ytf
    yt[rows, t_idx] = ytt

    ybus = np.zeros((nb, nb), dtype=complex)
    np.add.at(ybus, (f_idx, f_idx), yff)
    np.add.at(ybus, (f_idx, t_idx), yft)
    np.add.at(ybus, (t_idx, f_idx), ytf)
    np.add.at(ybus, (t_idx, t_idx), ytt)
    ybus[np.diag_indices(nb)] += 1j * np.array([b.b_shunt for b in net.buses])
    return Admittances(ybus, yf, yt, f_idx, t_idx)


def build_ybus(net: Network, taps=None) -> np.ndarray:
    """Complex bus admittance matrix (pu) with LTC taps on the from side."""
    return admittances(net, taps).ybus


def nominal_injections(net: Network) -> BusInjections:
    """Injections straight from the network data: nominal loads held at constant power."""
    nb = len(net.buses)
    kind = np.array([_KIND_CODE[b.kind] for b in net.buses], dtype=int)
    p_gen = np.zeros(nb)
    for g in net.generators:
        if g.in_service:
            p_gen[net.bus_index(g.bus)] += g.p_gen
    for i, b in enumerate(net.buses):
        if kind[i] == PV and not any(g.in_service and g.bus == b.id for g in net.generators):
            kind[i] = PQ
    return BusInjections(
        kind=kind,
        v_set=np.array([b.v_setpoint for b in net.buses], dtype=float),
        p_gen=p_gen,
        q_gen=np.zeros(nb),
        p_load=np.array([b.p_load for b in net.buses], dtype=float),
        q_load=np.array([b.q_load for b in net.buses], dtype=float),
        alpha_p=np.zeros(nb),
        alpha_q=np.zeros(nb),
        v_ref=np.ones(nb),
    )


def _load_terms(vm, inj: BusInjections, base):
    """Consumed load (pu) and its derivative with respect to |V|."""
    xp = vm / inj.v_ref
    pl = inj.p_load / base * xp**inj.alpha_p
    ql = inj.q_load / base * xp**inj.alpha_q
    dpl = np.where(inj.alpha_p != 0, inj.alpha_p * pl / vm, 0.0)
    dql = np.where(inj.alpha_q != 0, inj.alpha_q * ql / vm, 0.0)
    return pl, ql, dpl, dql


def mismatch(ybus, v, inj: BusInjections, base: float) -> np.ndarray:
    """Complex power mismatch S_calc - S_spec (pu) at every bus."""
    vm = np.abs(v)
    pl, ql, _, _ = _load_terms(vm, inj, base)
    s_spec = (inj.p_gen / base - pl) + 1j * (inj.q_gen / base - ql)
    return v * np.conj(ybus @ v) - s_spec


@njit(cache=True)
def _nr_kernel(g, b, kind, p_spec, q_spec, pl0, ql0, alpha_p, alpha_q, v_ref, vm, va, tol, max_it):
    """Real-arithmetic polar Newton iteration; ``vm``/``va`` are updated in place.

    ``p_spec``/``q_spec`` hold generation in pu; ``pl0``/``ql0`` the load at
    ``v_ref``.  Returns ``(converged, iterations, max_mismatch)``.
    """
    n = vm.shape[0]
    pvpq = np.empty(n, np.int64)
    pq = np.empty(n, np.int64)
    npv = 0
    npq = 0
    for i in range(n):
        if kind[i] != 0:
            pvpq[npv] = i
            npv += 1
        if kind[i] == 2:
            pq[npq] = i
            npq += 1
    m = npv + npq
    p = np.empty(n)
    q = np.empty(n)
    f = np.empty(m)
    jac = np.empty((m, m))
    dpl = np.empty(n)
    dql = np.empty(n)
    it = 0
    while True:
        for i in range(n):
            pi = 0.0
            qi = 0.0
            for k in range(n):
                if g[i, k] == 0.0 and b[i, k] == 0.0:
                    continue
                th = va[i] - va[k]
                c = np.cos(th)
                s = np.sin(th)
                pi += vm[k] * (g[i, k] * c + b[i, k] * s)
                qi += vm[k] * (g[i, k] * s - b[i, k] * c)
            p[i] = vm[i] * pi
            q[i] = vm[i] * qi
            x = vm[i] / v_ref[i]
            lp = pl0[i] * x ** alpha_p[i] if alpha_p[i] != 0.0 else pl0[i]
            lq = ql0[i] * x ** alpha_q[i] if alpha_q[i] != 0.0 else ql0[i]
            dpl[i] = alpha_p[i] * lp / vm[i]
            dql[i] = alpha_q[i] * lq / vm[i]
            p[i] -= p_spec[i] - lp
            q[i] -= q_spec[i] - lq
        norm = 0.0
        for r in range(npv):
            f[r] = p[pvpq[r]]
            if abs(f[r]) > norm:
                norm = abs(f[r])
        for r in range(npq):
            f[npv + r] = q[pq[r]]
            if abs(f[npv + r]) > norm:
                norm = abs(f[npv + r])
        if not np.isfinite(norm):
            return False, it, np.inf
        if norm < tol:
            return True, it, norm
        if it >= max_it:
            return False, it, norm
        it += 1
        # p, q currently hold mismatches; recover the calculated injections
        for i in range(n):
            x = vm[i] / v_ref[i]
            lp = pl0[i] * x ** alpha_p[i] if alpha_p[i] != 0.0 else pl0[i]
            lq = ql0[i] * x ** alpha_q[i] if alpha_q[i] != 0.0 else ql0[i]
            p[i] += p_spec[i] - lp
            q[i] += q_spec[i] - lq
        for r in range(m):
            i = pvpq[r] if r < npv else pq[r - npv]
            is_p = r < npv
            for c in range(m):
                k = pvpq[c] if c < npv else pq[c - npv]
                by_angle = c < npv
                if i == k:
                    if is_p and by_angle:
                        val = -q[i] - b[i, i] * vm[i] ** 2
                    elif is_p:
                        val = p[i] / vm[i] + g[i, i] * vm[i] + dpl[i]
                    elif by_angle:
                        val = p[i] - g[i, i] * vm[i] ** 2
                    else:
                        val = q[i] / vm[i] - b[i, i] * vm[i] + dql[i]
                else:
                    th = va[i] - va[k]
                    c_ = np.cos(th)
                    s_ = np.sin(th)
                    gik = g[i, k]
                    bik = b[i, k]
                    if is_p and by_angle:
                        val = vm[i] * vm[k] * (gik * s_ - bik * c_)
                    elif is_p:
                        val = vm[i] * (gik * c_ + bik * s_)
                    elif by_angle:
                        val = -vm[i] * vm[k] * (gik * c_ + bik * s_)
                    else:
                        val = vm[i] * (gik * s_ - bik * c_)
                jac[r, c] = val
        dx = np.linalg.solve(jac, -f)
        for r in range(npv):
            va[pvpq[r]] += dx[r]
        for r in range(npq):
            vm[pq[r]] += dx[npv + r]
            if not vm[pq[r]] > 0.0:
                return False, it, np.inf


def newton_raphson(ybus, inj: BusInjections, v0, base: float, opts: SolverOptions):
    """Polar Newton-Raphson on the full Jacobian.

    Returns ``(v, converged, iterations, max_mismatch)``.  Never raises on
    divergence or a singular Jacobian; reports ``converged=False`` instead.
    """
    v0 = np.asarray(v0, dtype=complex)
    vm, va, ok, it, norm = newton_polar(np.ascontiguousarray(ybus.real), np.ascontiguousarray(ybus.imag),
                                        inj, np.abs(v0), np.angle(v0), base, opts)
    return vm * np.exp(1j * va), ok, it, norm


def newton_polar(g, b, inj: BusInjections, vm0, va0, base: float, opts: SolverOptions):
    """Same as :func:`newton_raphson` on split admittance and polar start; returns ``(vm, va, ok, it, norm)``."""
    # voltage-controlled buses always restart from their set-point
    vm = np.where(np.asarray(inj.kind) == PQ, np.asarray(vm0, dtype=float), inj.v_set).astype(float)
    va = np.array(va0, dtype=float)
    try:
        ok, it, norm = _nr_kernel(
            g, b, np.asarray(inj.kind, dtype=np.int64),
            inj.p_gen / base, inj.q_gen / base, inj.p_load / base, inj.q_load / base,
            np.asarray(inj.alpha_p, dtype=float), np.asarray(inj.alpha_q, dtype=float),
            np.asarray(inj.v_ref, dtype=float), vm, va, opts.tolerance, opts.max_iterations)
    except (np.linalg.LinAlgError, ZeroDivisionError):
        ok, it, norm = False, opts.max_iterations, float("inf")
    return vm, va, bool(ok), int(it), float(norm)


def initial_voltage(inj: BusInjections) -> np.ndarray:
    return np.where(inj.kind == PQ, 1.0, inj.v_set).astype(complex)


def finish_solution(adm: Admittances, inj: BusInjections, v, converged, it, norm, base) -> PowerFlowSolution:
    v = np.asarray(v, dtype=complex)
    return finish_polar(adm, inj, np.abs(v), np.angle(v), converged, it, norm, base)


def finish_polar(adm: Admittances, inj: BusInjections, vm, va, converged, it, norm, base) -> PowerFlowSolution:
    v = vm * np.exp(1j * va)
    s_calc = v * np.conj(adm.ybus @ v) * base
    xp = vm / inj.v_ref
    return PowerFlowSolution(
        v_mag=vm, v_ang=va, p_inj=s_calc.real, q_inj=s_calc.imag,
        iterations=it, converged=bool(converged), max_mismatch=float(norm),
        p_load=inj.p_load * xp**inj.alpha_p, q_load=inj.q_load * xp**inj.alpha_q, adm=adm, base=base,
    )


def solve(net: Network, injections: BusInjections | None = None, taps=None,
          opts: SolverOptions | None = None, v0=None, in_service=None) -> PowerFlowSolution:
    """Solve the AC power flow of ``net``.

    ``v0`` (complex, per bus) seeds the iteration when ``opts.flat_start`` is
    false; PV/slack magnitudes are reset to their set-points either way.
    """
    opts = opts or SolverOptions()
    inj = injections if injections is not None else nominal_injections(net)
    adm = admittances(net, taps, in_service)
    start = initial_voltage(inj)
    if not opts.flat_start and v0 is not None:
        v0 = np.asarray(v0, dtype=complex)
        mag = np.where(inj.kind == PQ, np.abs(v0), inj.v_set)
        start = mag * np.exp(1j * np.angle(v0))
    v, ok, it, norm = newton_raphson(adm.ybus, inj, start, net.mva_base, opts)
    return finish_solution(adm, inj, v, ok, it, norm, net.mva_base)
