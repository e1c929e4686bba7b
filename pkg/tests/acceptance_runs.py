"""Long-running training and evaluation shared by the acceptance suite.

Results are cached under ``$LTVS_ACCEPTANCE_CACHE`` (default
``<repo>/.acceptance_cache``) in a directory keyed by a digest of the package
sources and the experiment configuration, so any code change retrains.
Set ``LTVS_ACCEPTANCE_CACHE=off`` to always recompute.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

import ltvs_drl
from ltvs_drl.env import LtvsEnv
from ltvs_drl.harness import ExperimentConfig, evaluate, make_testsets
from ltvs_drl.ppo import PPOController, read_training_log, train

SEEDS = (1, 2, 3)
REPO = Path(__file__).resolve().parents[1]


def source_digest() -> str:
    h = hashlib.sha256()
    root = Path(ltvs_drl.__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".grid"):
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _cache_dir(cfg: ExperimentConfig):
    where = os.environ.get("LTVS_ACCEPTANCE_CACHE", str(REPO / ".acceptance_cache"))
    if where == "off":
        return None
    return Path(where) / f"{source_digest()}-{cfg.config_hash()}"


def _work_dir(cfg, tmp_root: Path) -> Path:
    d = _cache_dir(cfg) or tmp_root
    d.mkdir(parents=True, exist_ok=True)
    return d


def trained_seed(cfg: ExperimentConfig, seed: int, tmp_root: Path) -> dict:
    """Train (or reuse) one seed; returns paths, the log rows and the wall time of the training."""
    d = _work_dir(cfg, tmp_root) / f"seed{seed}"
    meta = d / "meta.json"
    if not meta.exists():
        d.mkdir(parents=True, exist_ok=True)
        env = LtvsEnv(cfg.network())
        t0 = time.perf_counter()
        train(env, cfg.ppo, cfg.episodes, seed, band=cfg.band, menu=cfg.training_menu(env.net),
              log_path=d / "training_log.csv", checkpoint_path=d / "checkpoint.json",
              checkpoint_every=cfg.checkpoint_every)
        meta.write_text(json.dumps({"seed": seed, "seconds": time.perf_counter() - t0}))
    info = json.loads(meta.read_text())
    info["log"] = read_training_log(d / "training_log.csv")
    info["checkpoint"] = d / "checkpoint.json"
    return info


def crash_free_tail(log_rows, tail: int = 500) -> bool:
    """Centered 250-episode crash average reaches 0 and stays 0 over the final ``tail`` episodes."""
    ma = np.array([r["ma250_crash"] for r in log_rows])
    return len(ma) >= tail and bool(np.all(ma[-tail:] == 0.0))


def final_reward(log_rows, tail: int = 500) -> float:
    return float(np.mean([r["total_reward"] for r in log_rows[-tail:]]))


def evaluated(cfg: ExperimentConfig, checkpoint: Path, tmp_root: Path) -> tuple[dict, float]:
    """Metrics of one checkpoint on the three test sets (cached next to the checkpoint)."""
    out = checkpoint.parent / "metrics.json"
    if not out.exists():
        ctrl = PPOController.from_checkpoint(checkpoint)
        t0 = time.perf_counter()
        report, _ = evaluate(ctrl, make_testsets(cfg), cfg.methods, cfg.network(), cfg.threshold_mw)
        doc = report.to_dict()
        doc["seconds"] = time.perf_counter() - t0
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    doc = json.loads(out.read_text())
    return doc["metrics"], doc["seconds"]
