"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .env import LtvsEnv, Scenario
from .grid import GridError
from .ppo import ConfigError, PPOController, TrainingDiverged, train, trailing_mean

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("ltvs_drl")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file (JSON)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--case", help="built-in case name")
    common.add_argument("--case-file", help="path to a .grid network file")
    common.add_argument("--episodes", type=int, help="training episode budget")
    common.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                        help="override any config field by dotted path, e.g. ppo.gamma=0.98")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ltvs-drl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a PPO policy")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    sub.add_parser("make-testsets", parents=[common], help="write the three evaluation scenario sets")

    e = sub.add_parser("evaluate", parents=[common], help="evaluate methods on the test sets")
    e.add_argument("--checkpoint", type=Path, help="defaults to <out>/checkpoint.json")
    e.add_argument("--testsets", type=Path, help="defaults to <out>/testsets")
    e.add_argument("--methods", nargs="+", choices=harness.METHODS)

    x = sub.add_parser("export-plots", parents=[common], help="write CSV series for plotting")
    x.add_argument("--traces", type=Path, help="defaults to <out>/traces")
    x.add_argument("--testset", default="set1", choices=harness.TESTSET_NAMES)
    x.add_argument("--scenario", type=int, default=0)
    x.add_argument("--bus", type=int, help="bus whose voltage is exported")

    s = sub.add_parser("simulate", parents=[common], help="run one scenario with one method")
    s.add_argument("--method", default="none", choices=harness.METHODS)
    s.add_argument("--checkpoint", type=Path)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario-file", type=Path, help="JSON file holding one scenario")
    src.add_argument("--testset-file", type=Path, help="test set file; combine with --index")
    s.add_argument("--index", type=int, default=0)
    return p


def resolve_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    flat = {"seed": args.seed, "case": args.case, "case_file": args.case_file, "episodes": args.episodes}
    items = [(key, json.dumps(value)) for key, value in flat.items() if value is not None]
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects FIELD=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        items.append((key.strip(), raw))
    return harness.apply_overrides(cfg, items)


def cmd_train(cfg, args) -> None:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    net = cfg.network()
    env = LtvsEnv(net)
    ckpt = out / "checkpoint.json"
    log_path = out / "training_log.csv"
    resume = ckpt if args.resume else None
    if args.resume and not ckpt.exists():
        raise ConfigError(f"--resume given but {ckpt} does not exist")

    def progress(ts):
        h = ts.history
        print(f"episode {ts.episodes_done:6d}  ma250 reward {trailing_mean([r['total_reward'] for r in h]):9.2f}"
              f"  ma250 crash {trailing_mean([float(r['crashed']) for r in h]):.3f}", flush=True)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    train(env, cfg.ppo, cfg.episodes, cfg.seed, band=cfg.band, menu=cfg.training_menu(net), log_path=log_path,
          checkpoint_path=ckpt, checkpoint_every=cfg.checkpoint_every, resume_from=resume, progress=progress)
    harness.update_manifest(out, cfg, [out / "config.json", log_path, ckpt])


def cmd_make_testsets(cfg, args) -> None:
    paths = harness.write_testsets(harness.make_testsets(cfg), args.out / "testsets")
    harness.update_manifest(args.out, cfg, paths)
    for p in paths:
        print(p)


def cmd_evaluate(cfg, args) -> None:
    methods = tuple(args.methods) if args.methods else cfg.methods
    ckpt = args.checkpoint or args.out / "checkpoint.json"
    controller = None
    if any(m.startswith("drl") for m in methods):
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint {ckpt} not found")
        controller = PPOController.from_checkpoint(ckpt)
    sets = harness.read_testsets(args.testsets or args.out / "testsets")
    trace_dir = args.out / "traces"
    report, _ = harness.evaluate(controller, sets, methods, cfg.network(), cfg.threshold_mw, trace_dir)
    (args.out / "metrics.json").write_text(report.to_json())
    (args.out / "metrics.csv").write_text(report.to_csv())
    artifacts = [args.out / "metrics.json", args.out / "metrics.csv", *sorted(trace_dir.rglob("*.jsonl"))]
    harness.update_manifest(args.out, cfg, artifacts)
    print(report.to_csv(), end="")


def cmd_export_plots(cfg, args) -> None:
    trace_dir = args.traces or args.out / "traces"
    if not trace_dir.exists():
        raise FileNotFoundError(f"trace directory {trace_dir} not found")
    paths = harness.export_plots(trace_dir, args.out / "plots", cfg.network(), args.testset, args.scenario,
                                 args.bus, args.out / "training_log.csv")
    harness.update_manifest(args.out, cfg, paths)
    for p in paths:
        print(p)


def cmd_simulate(cfg, args) -> None:
    if args.scenario_file:
        sc = Scenario.from_dict(json.loads(args.scenario_file.read_text()))
    else:
        ts = harness.TestSet.from_dict(json.loads(args.testset_file.read_text()))
        if not 0 <= args.index < len(ts.scenarios):
            raise ConfigError(f"--index {args.index} outside test set of {len(ts.scenarios)}")
        sc = ts.scenarios[args.index]
    controller = None
    if args.method.startswith("drl"):
        ckpt = args.checkpoint or args.out / "checkpoint.json"
        controller = PPOController.from_checkpoint(ckpt)
    net = cfg.network()
    env = LtvsEnv(net)
    tr = harness.run_method(args.method, env, sc, controller, cfg.threshold_mw)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"simulate_{args.method}.jsonl"
    with open(path, "w") as fh:
        tr.write_jsonl(fh)
    harness.update_manifest(args.out, cfg, [path])
    print(f"{sc.disturbance.label} -> {tr.final_status.value} after {tr.n_steps} steps, "
          f"reward {tr.total_reward:.3f}, curtailed {tr.total_curtailment_mw:.1f} MW, "
          f"min V_TS {np.min(tr.vts_min):.4f}")


COMMANDS = {"train": cmd_train, "make-testsets": cmd_make_testsets, "evaluate": cmd_evaluate,
            "export-plots": cmd_export_plots, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, GridError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg, args)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        log.exception("unexpected failure")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
