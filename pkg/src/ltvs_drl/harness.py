"""Experiment orchestration: configuration, test sets, evaluation, metrics and plot data."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baseline import LoadShedController, run_uncontrolled
from .env import (TRAINING_BAND, EpisodeTrace, LtvsEnv, Mode, Scenario, default_holdout, default_menu,
                  sample_scenario)
from .grid import Network, builtin_case, load_network
from .ppo import ConfigError, PPOController, PpoConfig, read_training_log, stream_seed
from .qss import Disturbance

METHODS = ("drl", "drl_thresholded", "baseline", "none")
TESTSET_NAMES = ("set1", "set2", "set3")
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class ExperimentConfig:
    case: str = "ltvs5"
    case_file: str | None = None
    band: tuple = TRAINING_BAND
    widened_band: tuple = (0.90, 1.10)
    menu: tuple | None = None  # Disturbance tuples; None = case default
    holdout: tuple | None = None
    ppo: PpoConfig = field(default_factory=PpoConfig)
    episodes: int = 6400
    checkpoint_every: int = 640
    testset_size: int = 100
    methods: tuple = METHODS
    threshold_mw: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("band", "widened_band"):
            b = tuple(float(x) for x in getattr(self, name))
            if len(b) != 2 or not 0 < b[0] <= b[1]:
                raise ConfigError(f"{name} must be [low, high] with 0 < low <= high")
            object.__setattr__(self, name, b)
        for name in ("menu", "holdout"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(
                    d if isinstance(d, Disturbance) else Disturbance.from_dict(d) for d in v))
        object.__setattr__(self, "methods", tuple(self.methods))
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        if self.episodes <= 0 or self.episodes % self.ppo.batch_episodes:
            raise ConfigError(f"episodes ({self.episodes}) must be a positive multiple of "
                              f"batch_episodes ({self.ppo.batch_episodes})")
        if self.checkpoint_every % self.ppo.batch_episodes:
            raise ConfigError("checkpoint_every must be a multiple of batch_episodes")
        if self.testset_size < 1:
            raise ConfigError("testset_size must be positive")
        if self.threshold_mw < 0:
            raise ConfigError("threshold_mw must be non-negative")
        if self.menu is not None and self.holdout is not None and set(self.menu) & set(self.holdout):
            raise ConfigError("holdout disturbances must not appear in the training menu")

    # -- network and menus -------------------------------------------------

    def network(self) -> Network:
        return load_network(self.case_file) if self.case_file else builtin_case(self.case)

    def training_menu(self, net: Network) -> tuple:
        return self.menu if self.menu is not None else default_menu(net)

    def holdout_menu(self, net: Network) -> tuple:
        hold = self.holdout if self.holdout is not None else default_holdout(net)
        if set(hold) & set(self.training_menu(net)):
            raise ConfigError("holdout disturbances must not appear in the training menu")
        return hold

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "ppo":
                v = v.to_dict()
            elif f.name in ("menu", "holdout") and v is not None:
                v = [x.to_dict() for x in v]
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "ppo" in d:
            d["ppo"] = PpoConfig.from_dict(d["ppo"])
        try:
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(doc)


def set_dotted(d: dict, key: str, raw: str) -> None:
    """Set a dotted field path (``ppo.gamma``, ``band``) in a config dict from a JSON or bare string value."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = d
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config field {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config field {key!r}")
    node[parts[-1]] = value


def apply_overrides(cfg: ExperimentConfig, items) -> ExperimentConfig:
    """Apply ``(dotted_key, raw_value)`` pairs together; validation runs once on the result."""
    d = cfg.to_dict()
    for key, raw in items:
        set_dotted(d, key, raw)
    return ExperimentConfig.from_dict(d)


def apply_override(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    return apply_overrides(cfg, [(key, raw)])


# --------------------------------------------------------------------------- #
# manifest


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def update_manifest(out: Path, cfg: ExperimentConfig, artifacts) -> None:
    """Record artifacts (paths relative to ``out``) with their digest and the config hash."""
    mpath = out / MANIFEST
    doc = json.loads(mpath.read_text()) if mpath.exists() else {"artifacts": {}}
    for p in artifacts:
        p = Path(p)
        doc["artifacts"][str(p.relative_to(out))] = {"sha256": file_digest(p), "config_hash": cfg.config_hash()}
    doc["artifacts"] = dict(sorted(doc["artifacts"].items()))
    mpath.write_text(json.dumps(doc, indent=2) + "\n")


# --------------------------------------------------------------------------- #
# test sets


@dataclass
class TestSet:
    name: str
    band: tuple
    menu: tuple
    scenarios: list

    def to_dict(self) -> dict:
        return {"name": self.name, "band": list(self.band), "menu": [d.to_dict() for d in self.menu],
                "scenarios": [s.to_dict() for s in self.scenarios]}

    @classmethod
    def from_dict(cls, d: dict) -> "TestSet":
        return cls(d["name"], tuple(d["band"]), tuple(Disturbance.from_dict(x) for x in d["menu"]),
                   [Scenario.from_dict(s) for s in d["scenarios"]])


def make_testsets(cfg: ExperimentConfig, net: Network | None = None) -> list[TestSet]:
    """Same-distribution, widened-band and holdout-disturbance sets, each seeded per scenario."""
    net = net or cfg.network()
    train_menu = cfg.training_menu(net)
    specs = [("set1", cfg.band, train_menu), ("set2", cfg.widened_band, train_menu),
             ("set3", cfg.band, cfg.holdout_menu(net))]
    env = LtvsEnv(net)
    sets = []
    for name, band, menu in specs:
        scenarios = []
        for i in range(cfg.testset_size):
            s = stream_seed(cfg.seed, f"testset-{name}", i)
            scenarios.append(sample_scenario(net, np.random.default_rng(s), band, menu, seed=s, sim=env.sim))
        sets.append(TestSet(name, band, menu, scenarios))
    return sets


def write_testsets(sets: list[TestSet], directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for ts in sets:
        p = directory / f"{ts.name}.json"
        p.write_text(json.dumps(ts.to_dict(), indent=1) + "\n")
        paths.append(p)
    return paths


def read_testsets(directory: Path, names=TESTSET_NAMES) -> list[TestSet]:
    out = []
    for name in names:
        p = Path(directory) / f"{name}.json"
        if not p.exists():
            raise FileNotFoundError(f"missing test set {p}")
        out.append(TestSet.from_dict(json.loads(p.read_text())))
    return out


# --------------------------------------------------------------------------- #
# evaluation


def run_method(method: str, env: LtvsEnv, scenario: Scenario, controller: PPOController | None,
               threshold_mw: float = 10.0) -> EpisodeTrace:
    if method == "drl":
        return controller.rollout(env, scenario, Mode.DETERMINISTIC)
    if method == "drl_thresholded":
        return controller.rollout(env, scenario, Mode.DETERMINISTIC_THRESHOLDED, threshold_mw)
    if method == "baseline":
        return LoadShedController().run(env, scenario)
    if method == "none":
        return run_uncontrolled(env, scenario)
    raise ConfigError(f"unknown method {method!r}")


@dataclass
class MethodMetrics:
    mean_reward: float
    avg_curtailment_mw: float
    stabilization_rate: float
    n_stable: int
    n_unstable: int

    @classmethod
    def from_traces(cls, traces: list[EpisodeTrace]) -> "MethodMetrics":
        n_bad = sum(t.crashed for t in traces)
        return cls(math.fsum(t.total_reward for t in traces) / len(traces),
                   math.fsum(t.total_curtailment_mw for t in traces) / len(traces),
                   (len(traces) - n_bad) / len(traces), len(traces) - n_bad, n_bad)


def relative_difference(baseline: float, drl: float) -> float:
    """(baseline - drl) / |drl| in percent."""
    return 100.0 * (baseline - drl) / abs(drl) if drl != 0 else float("nan")


@dataclass
class MetricsReport:
    metrics: dict  # set -> method -> MethodMetrics

    def relative(self) -> dict:
        out = {}
        for s, per in self.metrics.items():
            rel = {}
            if "drl" in per and "baseline" in per:
                rel["baseline_vs_drl_reward_pct"] = relative_difference(per["baseline"].mean_reward,
                                                                        per["drl"].mean_reward)
                rel["baseline_vs_drl_curtailment_pct"] = relative_difference(
                    per["baseline"].avg_curtailment_mw, per["drl"].avg_curtailment_mw)
            if "drl" in per and "drl_thresholded" in per:
                rel["thresholded_vs_drl_reward_pct"] = relative_difference(per["drl_thresholded"].mean_reward,
                                                                           per["drl"].mean_reward)
                rel["thresholded_vs_drl_curtailment_pct"] = relative_difference(
                    per["drl_thresholded"].avg_curtailment_mw, per["drl"].avg_curtailment_mw)
            out[s] = rel
        return out

    def to_dict(self) -> dict:
        return {"metrics": {s: {m: vars(v) for m, v in per.items()} for s, per in self.metrics.items()},
                "relative": self.relative()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        rows = ["set,method,mean_reward,avg_curtailment_mw,stabilization_rate,n_stable,n_unstable"]
        for s, per in self.metrics.items():
            for m, v in per.items():
                rows.append(f"{s},{m},{v.mean_reward!r},{v.avg_curtailment_mw!r},{v.stabilization_rate!r},"
                            f"{v.n_stable},{v.n_unstable}")
        return "\n".join(rows) + "\n"


def evaluate(controller: PPOController | None, testsets: list[TestSet], methods, net: Network,
             threshold_mw: float = 10.0, trace_dir: Path | None = None) -> tuple[MetricsReport, dict]:
    """Run every scenario with every method; returns the report and the traces per (set, method)."""
    env = LtvsEnv(net)
    if controller is not None and env.state_size != controller.n_features_in_:
        raise ValueError(f"checkpoint expects {controller.n_features_in_} state features, "
                         f"case {net.name!r} has {env.state_size}")
    if controller is None and any(m.startswith("drl") for m in methods):
        raise ConfigError("drl methods need a checkpoint")
    metrics, traces = {}, {}
    for ts in testsets:
        metrics[ts.name] = {}
        for m in methods:
            tr = [run_method(m, env, sc, controller, threshold_mw) for sc in ts.scenarios]
            metrics[ts.name][m] = MethodMetrics.from_traces(tr)
            traces[(ts.name, m)] = tr
            if trace_dir is not None:
                write_traces(tr, trace_dir / ts.name / f"{m}.jsonl")
    return MetricsReport(metrics), traces


def write_traces(traces: list[EpisodeTrace], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i, tr in enumerate(traces):
            for row in tr.rows():
                fh.write(json.dumps({"scenario": i, "final": tr.final_status.value, **row}) + "\n")


def read_traces(path: Path) -> dict[int, list[dict]]:
    out: dict[int, list[dict]] = {}
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            out.setdefault(row["scenario"], []).append(row)
    return out


# --------------------------------------------------------------------------- #
# plot data


def export_plots(trace_dir: Path, out_dir: Path, net: Network, testset: str = "set1", scenario: int = 0,
                 bus: int | None = None, training_log: Path | None = None,
                 dt_control_s: float = 5.0) -> list[Path]:
    """CSV series: voltage per method, curtailed load per bus per method, training moving averages."""
    out_dir.mkdir(parents=True, exist_ok=True)
    bus = bus if bus is not None else net.transmission_buses[len(net.transmission_buses) // 2]
    col = net.bus_index(bus)
    series = {}
    written = []
    for path in sorted((trace_dir / testset).glob("*.jsonl")):
        rows = read_traces(path).get(scenario)
        if rows:
            series[path.stem] = rows
    if series:
        methods = [m for m in METHODS if m in series]
        n = max(len(series[m]) for m in methods)
        p = out_dir / f"voltage_{testset}_{scenario}_bus{bus}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s"] + methods)
            for k in range(n):
                row = [k * dt_control_s]
                for m in methods:
                    rs = series[m]
                    row.append(repr(rs[k]["state_raw"][col]) if k < len(rs) else "")
                w.writerow(row)
        written.append(p)
        for m in methods:
            p = out_dir / f"load_{testset}_{scenario}_{m}.csv"
            cum = np.zeros(len(net.curtailment_buses))
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["time_s"] + [f"curtailed_bus_{b}_mw" for b in net.curtailment_buses])
                w.writerow([0.0] + [repr(0.0)] * len(cum))
                for k, r in enumerate(series[m]):
                    cum = cum + np.array(r["per_bus_delta"])
                    w.writerow([(k + 1) * dt_control_s] + [repr(float(c)) for c in cum])
            written.append(p)
    if training_log is not None and Path(training_log).exists():
        p = out_dir / "training_moving_averages.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "ma250_reward", "ma250_crash"])
            for r in read_training_log(training_log):
                w.writerow([r["episode"], repr(r["ma250_reward"]), repr(r["ma250_crash"])])
        written.append(p)
    return written
