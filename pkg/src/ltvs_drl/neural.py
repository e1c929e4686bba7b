"""Small fully connected networks with hand-written backprop and Adam.

Only what the actor and critic need: a ReLU trunk followed by one or more
single-layer output heads, each with a linear or softplus activation.
Everything is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_SCHEMA = "ckpt-v1"
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ForwardCache:
    inputs: list  # input to every trunk layer plus the trunk output
    pre: list  # trunk pre-activations
    head_pre: list
    version: int


class Mlp:
    """ReLU trunk with linear/softplus heads.

    ``trunk_dims`` is ``[n_in, h1, h2, ...]``; ``heads`` is a list of
    ``(activation, n_out)`` attached to the last trunk layer.  Parameters are
    kept in :attr:`params` as ``[W1, b1, W2, b2, ..., Wh1, bh1, ...]``.
    """

    def __init__(self, trunk_dims, heads, rng=None, head_bias=None):
        self.trunk_dims = [int(d) for d in trunk_dims]
        self.heads = [(str(a), int(n)) for a, n in heads]
        for act, _ in self.heads:
            if act not in ("linear", "softplus"):
                raise ValueError(f"unknown head activation {act!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        params = []
        for fan_in, fan_out in zip(self.trunk_dims[:-1], self.trunk_dims[1:]):
            lim = 1.0 / math.sqrt(fan_in)
            params += [rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)]
        last = self.trunk_dims[-1]
        for h, (_, n_out) in enumerate(self.heads):
            lim = 1.0 / math.sqrt(last)
            b = np.zeros(n_out)
            if head_bias is not None and head_bias[h] is not None:
                b[:] = head_bias[h]
            params += [rng.uniform(-lim, lim, size=(last, n_out)), b]
        self.params = params
        self.version = 0

    @property
    def n_trunk(self) -> int:
        return len(self.trunk_dims) - 1

    @property
    def n_in(self) -> int:
        return self.trunk_dims[0]

    def set_params(self, params) -> None:
        if len(params) != len(self.params):
            raise ValueError("parameter list length mismatch")
        for old, new in zip(self.params, params):
            if np.shape(old) != np.shape(new):
                raise ValueError("parameter shape mismatch")
        self.params = [np.array(p, dtype=float) for p in params]
        self.version += 1

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.trunk_dims = list(self.trunk_dims)
        other.heads = list(self.heads)
        other.params = [p.copy() for p in self.params]
        other.version = 0
        return other

    def forward(self, x):
        """Return ``(outputs, cache)``; ``outputs`` has one ``(batch, n_out)`` array per head."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ValueError(f"input width {x.shape[1]} != {self.n_in}")
        inputs, pre = [x], []
        h = x
        for i in range(self.n_trunk):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(z)
            h = np.maximum(z, 0.0)
            inputs.append(h)
        outs, head_pre = [], []
        base = 2 * self.n_trunk
        for k, (act, _) in enumerate(self.heads):
            z = h @ self.params[base + 2 * k] + self.params[base + 2 * k + 1]
            head_pre.append(z)
            outs.append(softplus(z) if act == "softplus" else z)
        return outs, ForwardCache(inputs, pre, head_pre, self.version)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, out_grads) -> list:
        """Gradients of ``sum(out_grads[k] * outputs[k])`` with respect to every parameter."""
        if cache.version != self.version:
            raise StaleCacheError("forward cache predates the current parameters")
        grads = [None] * len(self.params)
        h = cache.inputs[-1]
        base = 2 * self.n_trunk
        dh = np.zeros_like(h)
        for k, (act, _) in enumerate(self.heads):
            g = out_grads[k]
            if g is None:
                continue
            g = np.asarray(g, dtype=float).reshape(cache.head_pre[k].shape)
            if act == "softplus":
                g = g * sigmoid(cache.head_pre[k])
            grads[base + 2 * k] = h.T @ g
            grads[base + 2 * k + 1] = g.sum(axis=0)
            dh += g @ self.params[base + 2 * k].T
        for k in range(len(self.heads)):
            if grads[base + 2 * k] is None:
                grads[base + 2 * k] = np.zeros_like(self.params[base + 2 * k])
                grads[base + 2 * k + 1] = np.zeros_like(self.params[base + 2 * k + 1])
        for i in reversed(range(self.n_trunk)):
            dz = dh * (cache.pre[i] > 0.0)  # subgradient 0 at exactly 0
            grads[2 * i] = cache.inputs[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            if i:
                dh = dz @ self.params[2 * i].T
        return grads

    def to_dict(self) -> dict:
        return {
            "trunk_dims": self.trunk_dims,
            "heads": [list(h) for h in self.heads],
            "params": [{"shape": list(p.shape), "data": p.ravel().tolist()} for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls.__new__(cls)
        net.trunk_dims = [int(x) for x in d["trunk_dims"]]
        net.heads = [(str(a), int(n)) for a, n in d["heads"]]
        net.params = [np.array(p["data"], dtype=float).reshape(p["shape"]) for p in d["params"]]
        net.version = 0
        return net


def make_actor(n_in: int, rng=None, hidden=(64, 32), initial_sigma: float = 0.5) -> Mlp:
    """Gaussian policy network: ``mu`` (linear head) and ``sigma`` (softplus head)."""
    return Mlp([n_in, *hidden], [("linear", 1), ("softplus", 1)], rng=rng,
               head_bias=[0.0, inverse_softplus(initial_sigma)])


def make_critic(n_in: int, rng=None, hidden=(128,)) -> Mlp:
    return Mlp([n_in, *hidden], [("linear", 1)], rng=rng)


# --------------------------------------------------------------------------- #
# Gaussian policy helpers


def gaussian_log_prob(mu, sigma, action):
    """log N(action; mu, sigma^2) together with its partials w.r.t. mu and sigma."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    z = (np.asarray(action, dtype=float) - mu) / sigma
    logp = -0.5 * z**2 - np.log(sigma) - LOG_SQRT_2PI
    d_mu = z / sigma
    d_sigma = (z**2 - 1.0) / sigma
    return logp, d_mu, d_sigma


# --------------------------------------------------------------------------- #
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
                "m": [a.ravel().tolist() for a in self.m], "v": [a.ravel().tolist() for a in self.v]}

    @classmethod
    def from_dict(cls, d: dict, like: list) -> "AdamState":
        st = cls(lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"], t=d["t"])
        st.m = [np.array(a, dtype=float).reshape(p.shape) for a, p in zip(d["m"], like)] if d["m"] else []
        st.v = [np.array(a, dtype=float).reshape(p.shape) for a, p in zip(d["v"], like)] if d["v"] else []
        return st


def adam_step(params, grads, state: AdamState, lr: float | None = None) -> list:
    """One bias-corrected Adam descent step; returns new parameter arrays and advances ``state``."""
    if len(grads) != len(params):
        raise ValueError("grads/params length mismatch")
    for i, g in enumerate(grads):
        if np.shape(g) != np.shape(params[i]):
            raise ValueError(f"gradient {i} shape {np.shape(g)} != parameter shape {np.shape(params[i])}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {i}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


# --------------------------------------------------------------------------- #
# checkpoints


def save_checkpoint(path, payload: dict) -> None:
    doc = {"schema": CKPT_SCHEMA, **payload}
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CKPT_SCHEMA:
        raise ValueError(f"{path}: not a {CKPT_SCHEMA} checkpoint")
    return doc
