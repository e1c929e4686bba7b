"""Clipped PPO with one-step TD advantages and separate actor / critic networks."""

from __future__ import annotations

import csv
import io
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .env import (TRAINING_BAND, EpisodeTrace, LtvsEnv, Mode, RunningNormalizer, Scenario, default_menu,
                  run_episode, sample_scenario)
from .neural import (AdamState, Mlp, adam_step, gaussian_log_prob, load_checkpoint, make_actor, make_critic,
                     save_checkpoint)
from .qss import Disturbance

log = logging.getLogger(__name__)

MA_WINDOW = 250
LOG_COLUMNS = ("episode", "total_reward", "crashed", "curtailed_mw", "ma250_reward", "ma250_crash")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    clip_eps: float = 0.2
    epochs: int = 5
    batch_episodes: int = 64
    actor_lr: float = 5e-4
    critic_lr: float = 5e-3
    actor_hidden: tuple = (64, 32)
    critic_hidden: tuple = (128,)
    initial_sigma: float = 0.5
    normalizer_samples: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be positive")
        if self.epochs < 1 or self.batch_episodes < 1:
            raise ConfigError("epochs and batch_episodes must be at least 1")
        if not (self.actor_lr > 0 and self.critic_lr > 0):
            raise ConfigError("learning rates must be positive")
        object.__setattr__(self, "actor_hidden", tuple(int(h) for h in self.actor_hidden))
        object.__setattr__(self, "critic_hidden", tuple(int(h) for h in self.critic_hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ppo fields: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- #
# seeding


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode())


def stream_seed(master: int, name: str, *counter: int) -> int:
    """Counter-based seed for a named stream; independent of how many draws other streams made."""
    ss = np.random.SeedSequence([int(master), stream_id(name), *[int(c) for c in counter]])
    return int(ss.generate_state(1, np.uint32)[0])


def stream_rng(master: int, name: str, *counter: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, name, *counter))


# --------------------------------------------------------------------------- #
# batch and losses


@dataclass
class RolloutBatch:
    states: np.ndarray
    next_states: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    episode_ends: np.ndarray  # exclusive end offset of every episode

    @property
    def size(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_traces(cls, traces: list[EpisodeTrace]) -> "RolloutBatch":
        s, ns, a, lp, r, term, ends = [], [], [], [], [], [], []
        n = 0
        for tr in traces:
            k = tr.n_steps
            st = np.asarray(tr.states)
            s.append(st[:k])
            ns.append(st[1:k + 1])
            a.append(tr.actions)
            lp.append(tr.log_probs)
            r.append(tr.rewards)
            term.append(tr.terminals)
            n += k
            ends.append(n)
        return cls(np.concatenate(s), np.concatenate(ns), np.concatenate(a).astype(float),
                   np.concatenate(lp).astype(float), np.concatenate(r).astype(float),
                   np.concatenate(term).astype(bool), np.array(ends, dtype=int))


def compute_advantages(batch: RolloutBatch, critic: Mlp, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """One-step TD errors and targets; bootstrapping is masked on terminal transitions."""
    v = critic(batch.states)[0][:, 0]
    v_next = critic(batch.next_states)[0][:, 0]
    target = batch.rewards + gamma * v_next * (~batch.terminals)
    return target - v, target


def clipped_objective(batch: RolloutBatch, actor: Mlp, advantages: np.ndarray, clip_eps: float):
    """Mean clipped surrogate ``J`` and its gradient (ascent direction) for every actor parameter.

    Returns ``(J, grads, info)`` where ``info`` carries the ratios and the
    fraction of samples on the clipped branch.
    """
    (mu, sigma), cache = actor.forward(batch.states)
    mu, sigma = mu[:, 0], sigma[:, 0]
    logp, d_mu, d_sigma = gaussian_log_prob(mu, sigma, batch.actions)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(logp - batch.log_prob_old)
    if not np.all(np.isfinite(ratio)):
        bad = int(np.argmin(np.isfinite(ratio)))
        raise FloatingPointError(f"non-finite probability ratio at transition {bad} "
                                 f"(sigma={sigma[bad]:.3g}, mu={mu[bad]:.3g})")
    adv = advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    use_unclipped = unclipped_term <= clipped_term
    terms = np.where(use_unclipped, unclipped_term, clipped_term)
    m = len(terms)
    j = float(np.mean(terms))
    d_logp = np.where(use_unclipped, unclipped_term, 0.0) / m
    grads = actor.backward(cache, [(d_logp * d_mu)[:, None], (d_logp * d_sigma)[:, None]])
    info = {"ratio": ratio, "clip_fraction": float(np.mean(~use_unclipped & (adv != 0))),
            "sigma_min": float(np.min(sigma))}
    return j, grads, info


def critic_loss(batch: RolloutBatch, critic: Mlp, targets: np.ndarray):
    """Mean squared TD error against fixed targets, with its gradient."""
    (v,), cache = critic.forward(batch.states)
    err = v[:, 0] - targets
    loss = float(np.mean(err**2))
    grads = critic.backward(cache, [(2.0 * err / len(err))[:, None]])
    return loss, grads


def ppo_update(actor: Mlp, critic: Mlp, actor_opt: AdamState, critic_opt: AdamState,
               batch: RolloutBatch, config: PpoConfig) -> dict:
    """K epochs of full-batch actor ascent and critic descent on one rollout batch."""
    advantages, targets = compute_advantages(batch, critic, config.gamma)
    stats = {"first_ratio_dev": None, "objective": [], "critic_loss": []}
    for k in range(config.epochs):
        j, g_actor, info = clipped_objective(batch, actor, advantages, config.clip_eps)
        if k == 0:
            stats["first_ratio_dev"] = float(np.max(np.abs(info["ratio"] - 1.0)))
        loss, g_critic = critic_loss(batch, critic, targets)
        if not (math.isfinite(j) and math.isfinite(loss)):
            raise FloatingPointError(f"non-finite loss (J={j}, L={loss})")
        actor.set_params(adam_step(actor.params, [-g for g in g_actor], actor_opt))
        critic.set_params(adam_step(critic.params, g_critic, critic_opt))
        stats["objective"].append(j)
        stats["critic_loss"].append(loss)
        if info["sigma_min"] < 1e-3:
            log.warning("policy sigma collapsed to %.3g", info["sigma_min"])
    return stats


# --------------------------------------------------------------------------- #
# training loop


def centered_moving_average(x, window: int = MA_WINDOW) -> np.ndarray:
    """Mean over ``[i - window//2, i + window - window//2)``, truncated at the ends."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(n)
    lo = np.maximum(idx - window // 2, 0)
    hi = np.minimum(idx + window - window // 2, n)
    return (c[hi] - c[lo]) / (hi - lo)


def trailing_mean(x, window: int = MA_WINDOW) -> float:
    return float(np.mean(x[-window:])) if len(x) else float("nan")


def format_training_log(history: list[dict]) -> str:
    rewards = [h["total_reward"] for h in history]
    crashes = [float(h["crashed"]) for h in history]
    ma_r = centered_moving_average(rewards)
    ma_c = centered_moving_average(crashes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for i, h in enumerate(history):
        w.writerow([h["episode"], repr(float(h["total_reward"])), int(h["crashed"]),
                    repr(float(h["curtailed_mw"])), repr(float(ma_r[i])), repr(float(ma_c[i]))])
    return buf.getvalue()


def read_training_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"episode": int(r["episode"]), "total_reward": float(r["total_reward"]),
                 "crashed": bool(int(r["crashed"])), "curtailed_mw": float(r["curtailed_mw"]),
                 "ma250_reward": float(r["ma250_reward"]), "ma250_crash": float(r["ma250_crash"])}
                for r in csv.DictReader(fh)]


class GaussianPolicy:
    """Callable adapter returning ``(mu, sigma)`` for a single state."""

    def __init__(self, actor: Mlp):
        self.actor = actor

    def __call__(self, state):
        mu, sigma = self.actor(state)
        return float(mu[0, 0]), float(sigma[0, 0])


@dataclass
class TrainState:
    config: PpoConfig
    seed: int
    actor: Mlp
    critic: Mlp
    actor_opt: AdamState
    critic_opt: AdamState
    normalizer: RunningNormalizer
    history: list = field(default_factory=list)
    band: tuple = TRAINING_BAND
    menu: tuple = ()
    case: str = ""
    last_update: dict | None = field(default=None, repr=False)  # diagnostics of the latest update, not saved

    @property
    def episodes_done(self) -> int:
        return len(self.history)

    def to_payload(self) -> dict:
        return {"kind": "ppo-train", "config": self.config.to_dict(), "seed": self.seed, "case": self.case,
                "band": list(self.band), "menu": [d.to_dict() for d in self.menu],
                "actor": self.actor.to_dict(), "critic": self.critic.to_dict(),
                "actor_opt": self.actor_opt.to_dict(), "critic_opt": self.critic_opt.to_dict(),
                "normalizer": self.normalizer.state_dict(), "history": self.history}

    @classmethod
    def from_payload(cls, d: dict) -> "TrainState":
        actor = Mlp.from_dict(d["actor"])
        critic = Mlp.from_dict(d["critic"])
        return cls(PpoConfig.from_dict(d["config"]), int(d["seed"]), actor, critic,
                   AdamState.from_dict(d["actor_opt"], actor.params),
                   AdamState.from_dict(d["critic_opt"], critic.params),
                   RunningNormalizer.from_state_dict(d["normalizer"]), list(d["history"]),
                   tuple(d["band"]), tuple(Disturbance.from_dict(x) for x in d["menu"]), d.get("case", ""))


def init_train_state(env: LtvsEnv, config: PpoConfig, seed: int, band=TRAINING_BAND, menu=None) -> TrainState:
    rng = stream_rng(seed, "policy-init")
    n = env.state_size
    actor = make_actor(n, rng, config.actor_hidden, config.initial_sigma)
    critic = make_critic(n, rng, config.critic_hidden)
    menu = tuple(menu) if menu is not None else default_menu(env.net)
    return TrainState(config, int(seed), actor, critic, AdamState(config.actor_lr), AdamState(config.critic_lr),
                      RunningNormalizer(config.normalizer_samples), [], tuple(band), menu, env.net.name)


def episode_scenario(env: LtvsEnv, ts: TrainState, episode: int) -> Scenario:
    s = stream_seed(ts.seed, "scenario", episode)
    return sample_scenario(env.net, np.random.default_rng(s), ts.band, ts.menu, seed=s, sim=env.sim)


def collect_batch(env: LtvsEnv, ts: TrainState, first_episode: int) -> list[EpisodeTrace]:
    """Sample one batch of episodes under the current policy snapshot."""
    policy = GaussianPolicy(ts.actor)
    traces = []
    for e in range(first_episode, first_episode + ts.config.batch_episodes):
        sc = episode_scenario(env, ts, e)
        rng = stream_rng(ts.seed, "policy-sampling", e)
        traces.append(run_episode(env, policy, sc, Mode.STOCHASTIC, ts.normalizer, rng=rng,
                                  update_normalizer=True))
    return traces


def train(env: LtvsEnv, config: PpoConfig, total_episodes: int, seed: int, *, band=TRAINING_BAND, menu=None,
          log_path=None, checkpoint_path=None, checkpoint_every: int = 0, resume_from=None,
          stop_after: int | None = None, progress: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run PPO until ``total_episodes`` have been collected.

    ``checkpoint_every`` (episodes, a multiple of the batch size) controls
    periodic checkpoints; the final state is always checkpointed when a path
    is given.  ``stop_after`` ends the run early after that many episodes,
    which is how interruption is simulated for resume tests.
    """
    n = config.batch_episodes
    if total_episodes <= 0 or total_episodes % n:
        raise ConfigError(f"total_episodes ({total_episodes}) must be a positive multiple of {n}")
    if checkpoint_every % n:
        raise ConfigError(f"checkpoint interval must be a multiple of {n}")
    if resume_from is not None:
        ts = TrainState.from_payload(load_checkpoint(resume_from))
        if ts.config != config or ts.seed != seed:
            raise ConfigError("checkpoint was produced with a different configuration or seed")
        if ts.case != env.net.name:
            raise ConfigError(f"checkpoint case {ts.case!r} does not match {env.net.name!r}")
    else:
        ts = init_train_state(env, config, seed, band, menu)
    end = total_episodes if stop_after is None else min(total_episodes, stop_after)
    last_good = None
    while ts.episodes_done < end:
        start = ts.episodes_done
        traces = collect_batch(env, ts, start)
        for i, tr in enumerate(traces):
            ts.history.append({"episode": start + i + 1, "total_reward": tr.total_reward,
                               "crashed": tr.crashed, "curtailed_mw": tr.total_curtailment_mw})
        batch = RolloutBatch.from_traces(traces)
        try:
            ts.last_update = ppo_update(ts.actor, ts.critic, ts.actor_opt, ts.critic_opt, batch, config)
        except FloatingPointError as exc:
            if checkpoint_path is not None and last_good is not None:
                save_checkpoint(checkpoint_path, last_good)
            raise TrainingDiverged(f"update after episode {ts.episodes_done} failed: {exc}") from exc
        if checkpoint_path is not None:
            last_good = ts.to_payload()
            if checkpoint_every and ts.episodes_done % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, last_good)
        if progress is not None:
            progress(ts)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, ts.to_payload())
    if log_path is not None:
        Path(log_path).write_text(format_training_log(ts.history))
    return ts


# --------------------------------------------------------------------------- #
# estimator facade


class PPOController(BaseEstimator):
    """Estimator-style wrapper: ``fit`` trains on an environment, ``predict`` maps states to actions."""

    def __init__(self, gamma=0.99, clip_eps=0.2, epochs=5, batch_episodes=64, actor_lr=5e-4, critic_lr=5e-3,
                 actor_hidden=(64, 32), critic_hidden=(128,), initial_sigma=0.5, normalizer_samples=10_000,
                 random_state=0):
        self.gamma = gamma
        self.clip_eps = clip_eps
        self.epochs = epochs
        self.batch_episodes = batch_episodes
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.actor_hidden = actor_hidden
        self.critic_hidden = critic_hidden
        self.initial_sigma = initial_sigma
        self.normalizer_samples = normalizer_samples
        self.random_state = random_state

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(self.gamma, self.clip_eps, self.epochs, self.batch_episodes, self.actor_lr,
                         self.critic_lr, tuple(self.actor_hidden), tuple(self.critic_hidden),
                         self.initial_sigma, self.normalizer_samples)

    def fit(self, env: LtvsEnv, total_episodes: int, **train_kwargs) -> "PPOController":
        ts = train(env, self.ppo_config(), total_episodes, self.random_state, **train_kwargs)
        self._set_fitted(ts)
        return self

    def _set_fitted(self, ts: TrainState) -> None:
        self.train_state_ = ts
        self.actor_ = ts.actor
        self.critic_ = ts.critic
        self.normalizer_ = ts.normalizer
        self.history_ = ts.history
        self.n_features_in_ = ts.actor.n_in

    @classmethod
    def from_checkpoint(cls, path) -> "PPOController":
        ts = TrainState.from_payload(load_checkpoint(path))
        c = ts.config
        est = cls(c.gamma, c.clip_eps, c.epochs, c.batch_episodes, c.actor_lr, c.critic_lr, c.actor_hidden,
                  c.critic_hidden, c.initial_sigma, c.normalizer_samples, ts.seed)
        est._set_fitted(ts)
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "actor_")
        save_checkpoint(path, self.train_state_.to_payload())

    def predict(self, states) -> np.ndarray:
        """Deterministic (mean) normalised action for each already-normalised state row."""
        check_is_fitted(self, "actor_")
        mu, _ = self.actor_(np.atleast_2d(states))
        return mu[:, 0]

    def predict_mw(self, states, action_scale_mw: float = 100.0) -> np.ndarray:
        return action_scale_mw * self.predict(states)

    def policy(self) -> GaussianPolicy:
        check_is_fitted(self, "actor_")
        return GaussianPolicy(self.actor_)

    def rollout(self, env: LtvsEnv, scenario: Scenario, mode: Mode | str = Mode.DETERMINISTIC,
                threshold_mw: float = 10.0) -> EpisodeTrace:
        """Evaluate one scenario without touching the normaliser statistics."""
        check_is_fitted(self, "actor_")
        if env.state_size != self.n_features_in_:
            raise ValueError(f"policy expects {self.n_features_in_} state features, case has {env.state_size}")
        mode = Mode(mode)
        if mode is Mode.STOCHASTIC:
            raise ValueError("evaluation rollouts are deterministic")
        method = "drl_thresholded" if mode is Mode.DETERMINISTIC_THRESHOLDED else "drl"
        return run_episode(env, self.policy(), scenario, mode, self.normalizer_, update_normalizer=False,
                           threshold_mw=threshold_mw, method=method)
