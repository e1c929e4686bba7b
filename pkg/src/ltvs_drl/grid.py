"""Static grid description, the ``.grid`` file format and built-in cases.

A ``.grid`` file is JSON with a ``"schema": "grid-v1"`` marker and the
top-level keys ``mva_base``, ``buses``, ``branches``, ``generators``,
``ltcs`` and ``load_models``.  The optional ``curtailment_buses`` key lists
the load buses whose demand can be curtailed by the controller.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

SCHEMA = "grid-v1"


class GridError(ValueError):
    """Raised when a grid file cannot be parsed or violates an invariant."""


class BusKind(str, enum.Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    base_kv: float
    v_setpoint: float = 1.0
    is_transmission: bool = False
    p_load: float = 0.0
    q_load: float = 0.0
    b_shunt: float = 0.0  # pu susceptance at 1 pu voltage


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    tap_ratio: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class OelConfig:
    q_limit: float
    delay_s: float = 20.0


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_gen: float
    q_min: float
    q_max: float
    oel: OelConfig | None = None
    in_service: bool = True


@dataclass(frozen=True)
class LtcConfig:
    branch: int
    controlled_bus: int
    v_ref: float = 1.0
    deadband: float = 0.02
    tap_step: float = 0.01
    tap_min: float = 0.85
    tap_max: float = 1.15
    initial_delay_s: float = 30.0
    subsequent_delay_s: float = 10.0


@dataclass(frozen=True)
class LoadModel:
    bus: int
    alpha_p: float = 1.0
    alpha_q: float = 2.0
    recovery_time_s: float = 60.0
    restores_to_nominal: bool = True


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    ltcs: tuple[LtcConfig, ...] = ()
    load_models: tuple[LoadModel, ...] = ()
    mva_base: float = 100.0
    curtailment_buses: tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self):
        # positional lookups used on every simulation step
        object.__setattr__(self, "_bus_pos", {b.id: i for i, b in enumerate(self.buses)})
        object.__setattr__(self, "_branch_pos", {br.id: i for i, br in enumerate(self.branches)})
        object.__setattr__(self, "_gen_pos", {g.id: i for i, g in enumerate(self.generators)})

    def bus_index(self, bus_id: int) -> int:
        return self._bus_pos[bus_id]

    def branch_index(self, branch_id: int) -> int:
        return self._branch_pos[branch_id]

    def generator_index(self, gen_id: int) -> int:
        return self._gen_pos[gen_id]

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind is BusKind.SLACK)

    @property
    def transmission_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.is_transmission]

    @property
    def load_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.p_load != 0.0 or b.q_load != 0.0]

    def load_model(self, bus_id: int) -> LoadModel | None:
        for lm in self.load_models:
            if lm.bus == bus_id:
                return lm
        return None


# --------------------------------------------------------------------------- #
# validation


def validate(net: Network) -> Network:
    """Check every structural invariant; raise :class:`GridError` on the first violation."""
    if net.mva_base <= 0:
        raise GridError("mva_base must be positive")
    bus_ids = [b.id for b in net.buses]
    if len(set(bus_ids)) != len(bus_ids):
        raise GridError("duplicate bus id")
    n_slack = sum(b.kind is BusKind.SLACK for b in net.buses)
    if n_slack == 0:
        raise GridError("no slack bus")
    if n_slack > 1:
        raise GridError("multiple slack buses")
    for b in net.buses:
        if b.base_kv <= 0:
            raise GridError(f"bus {b.id}: base_kv must be positive")
        if b.kind is not BusKind.PQ and not 0.8 <= b.v_setpoint <= 1.2:
            raise GridError(f"bus {b.id}: v_setpoint {b.v_setpoint} outside [0.8, 1.2]")

    known = set(bus_ids)
    br_ids = [br.id for br in net.branches]
    if len(set(br_ids)) != len(br_ids):
        raise GridError("duplicate branch id")
    for br in net.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise GridError(f"branch {br.id}: unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise GridError(f"branch {br.id}: from_bus equals to_bus")
        if br.x == 0:
            raise GridError(f"branch {br.id}: x must be non-zero")
        if not 0.8 <= br.tap_ratio <= 1.2:
            raise GridError(f"branch {br.id}: tap_ratio {br.tap_ratio} outside [0.8, 1.2]")

    gen_ids = [g.id for g in net.generators]
    if len(set(gen_ids)) != len(gen_ids):
        raise GridError("duplicate generator id")
    for g in net.generators:
        if g.bus not in known:
            raise GridError(f"generator {g.id}: unknown bus {g.bus}")
        if g.q_min > g.q_max:
            raise GridError(f"generator {g.id}: q_min > q_max")
        if g.oel is not None:
            if g.oel.delay_s < 0:
                raise GridError(f"generator {g.id}: OEL delay_s must be >= 0")
            if g.oel.q_limit > g.q_max:
                raise GridError(f"generator {g.id}: OEL q_limit exceeds q_max")
    for b in net.buses:
        if b.kind is not BusKind.PQ and not any(g.bus == b.id for g in net.generators):
            raise GridError(f"bus {b.id}: {b.kind.value} bus without generator")

    known_br = set(br_ids)
    for ltc in net.ltcs:
        if ltc.branch not in known_br:
            raise GridError(f"ltc on branch {ltc.branch}: unknown branch")
        if ltc.controlled_bus not in known:
            raise GridError(f"ltc on branch {ltc.branch}: unknown controlled bus {ltc.controlled_bus}")
        if not ltc.deadband > ltc.tap_step / 2:
            raise GridError(f"ltc on branch {ltc.branch}: deadband must exceed tap_step/2")
        if not ltc.tap_min < ltc.tap_max:
            raise GridError(f"ltc on branch {ltc.branch}: tap_min must be below tap_max")
        if ltc.initial_delay_s <= 0 or ltc.subsequent_delay_s <= 0:
            raise GridError(f"ltc on branch {ltc.branch}: delays must be positive")
        tap0 = net.branches[net.branch_index(ltc.branch)].tap_ratio
        if not ltc.tap_min <= tap0 <= ltc.tap_max:
            raise GridError(f"ltc on branch {ltc.branch}: initial tap outside range")
    if len({ltc.branch for ltc in net.ltcs}) != len(net.ltcs):
        raise GridError("more than one ltc per branch")

    for lm in net.load_models:
        if lm.bus not in known:
            raise GridError(f"load model: unknown bus {lm.bus}")
        if lm.alpha_p < 0 or lm.alpha_q < 0:
            raise GridError(f"load model at bus {lm.bus}: negative exponent")
        if lm.recovery_time_s < 0:
            raise GridError(f"load model at bus {lm.bus}: negative recovery_time_s")
    for cb in net.curtailment_buses:
        if cb not in known:
            raise GridError(f"curtailment bus {cb} unknown")

    _check_connected(net)
    return net


def _check_connected(net: Network) -> None:
    adj: dict[int, set[int]] = {b.id: set() for b in net.buses}
    for br in net.branches:
        if br.in_service:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    start = net.slack_bus.id
    seen = {start}
    queue = deque([start])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != len(net.buses):
        missing = sorted(set(adj) - seen)
        raise GridError(f"network not connected: buses {missing} unreachable")


# --------------------------------------------------------------------------- #
# (de)serialisation


def _req(d: dict, key: str, where: str) -> Any:
    try:
        return d[key]
    except (KeyError, TypeError):
        raise GridError(f"{where}: missing field '{key}'") from None


def _build(cls, raw: Any, where: str, required: tuple[str, ...], convert: dict | None = None):
    if not isinstance(raw, dict):
        raise GridError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise GridError(f"{where}: unknown field(s) {sorted(unknown)}")
    for key in required:
        _req(raw, key, where)
    kwargs = dict(raw)
    for key, fn in (convert or {}).items():
        if key in kwargs and kwargs[key] is not None:
            try:
                kwargs[key] = fn(kwargs[key])
            except (ValueError, TypeError) as exc:
                raise GridError(f"{where}.{key}: {exc}") from None
    for f in fields(cls):
        if f.name in kwargs and f.type in ("float", "int") and not isinstance(kwargs[f.name], (int, float)):
            raise GridError(f"{where}.{f.name}: expected a number, got {kwargs[f.name]!r}")
    return cls(**kwargs)


def network_from_dict(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise GridError("top level: expected an object")
    if doc.get("schema") != SCHEMA:
        raise GridError(f"top level: schema must be '{SCHEMA}', got {doc.get('schema')!r}")
    allowed = {"schema", "name", "mva_base", "buses", "branches", "generators",
               "ltcs", "load_models", "curtailment_buses"}
    unknown = set(doc) - allowed
    if unknown:
        raise GridError(f"top level: unknown key(s) {sorted(unknown)}")

    def oel(raw):
        return _build(OelConfig, raw, "oel", ("q_limit",))

    buses = tuple(_build(Bus, b, f"buses[{i}]", ("id", "kind", "base_kv"), {"kind": BusKind})
                  for i, b in enumerate(_req(doc, "buses", "top level")))
    branches = tuple(_build(Branch, b, f"branches[{i}]", ("id", "from_bus", "to_bus", "r", "x"))
                     for i, b in enumerate(_req(doc, "branches", "top level")))
    gens = tuple(_build(Generator, g, f"generators[{i}]", ("id", "bus", "p_gen", "q_min", "q_max"),
                        {"oel": oel})
                 for i, g in enumerate(doc.get("generators", [])))
    ltcs = tuple(_build(LtcConfig, t, f"ltcs[{i}]", ("branch", "controlled_bus"))
                 for i, t in enumerate(doc.get("ltcs", [])))
    loads = tuple(_build(LoadModel, lm, f"load_models[{i}]", ("bus",))
                  for i, lm in enumerate(doc.get("load_models", [])))
    net = Network(
        buses=buses,
        branches=branches,
        generators=gens,
        ltcs=ltcs,
        load_models=loads,
        mva_base=float(_req(doc, "mva_base", "top level")),
        curtailment_buses=tuple(doc.get("curtailment_buses", ())),
        name=doc.get("name", ""),
    )
    return validate(net)


def network_to_dict(net: Network) -> dict:
    def clean(obj) -> dict:
        d = asdict(obj)
        if "kind" in d:
            d["kind"] = obj.kind.value
        return d

    doc: dict[str, Any] = {"schema": SCHEMA}
    if net.name:
        doc["name"] = net.name
    doc["mva_base"] = net.mva_base
    doc["buses"] = [clean(b) for b in net.buses]
    doc["branches"] = [clean(b) for b in net.branches]
    doc["generators"] = [clean(g) for g in net.generators]
    doc["ltcs"] = [clean(t) for t in net.ltcs]
    doc["load_models"] = [clean(lm) for lm in net.load_models]
    doc["curtailment_buses"] = list(net.curtailment_buses)
    return doc


def dumps_network(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=2) + "\n"


def parse_network(text: str, source: str = "<string>") -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return network_from_dict(doc)
    except GridError as exc:
        raise GridError(f"{source}: {exc}") from None


def load_network(path: str | Path) -> Network:
    """Read and validate a ``.grid`` file."""
    path = Path(path)
    return parse_network(path.read_text(), source=str(path))


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(dumps_network(net))


BUILTIN_CASES = ("ltvs5",)


def builtin_case_text(name: str) -> str:
    if name not in BUILTIN_CASES:
        raise GridError(f"unknown case {name!r}; available: {', '.join(BUILTIN_CASES)}")
    return resources.files("ltvs_drl.data").joinpath(f"{name}.grid").read_text()


def builtin_case(name: str) -> Network:
    """Return a shipped test case by name (currently only ``"ltvs5"``)."""
    return parse_network(builtin_case_text(name), source=f"builtin:{name}")


def with_branch_status(net: Network, branch_id: int, in_service: bool) -> Network:
    branches = tuple(replace(br, in_service=in_service) if br.id == branch_id else br
                     for br in net.branches)
    return replace(net, branches=branches)


__all__ = [
    "Branch", "Bus", "BusKind", "Generator", "GridError", "LoadModel", "LtcConfig",
    "Network", "OelConfig", "SCHEMA", "builtin_case", "dumps_network", "load_network",
    "network_from_dict", "network_to_dict", "parse_network", "save_network", "validate",
]
