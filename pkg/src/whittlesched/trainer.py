"""Batch REINFORCE training of a per-class index network.

Each batch freezes a context (lambda, v_tpt, v_tsls): lambda is the current
network's output at a uniformly drawn state.  Every episode of the batch
starts from its own random queue, acts with probability
sigma_m(f(s_t) - lambda), and accumulates a discounted return G_e and a score
vector h_e.  The update is Adam ascent on sum_e (G_e - mean G) h_e.

Randomness is keyed by (seed, batch) for the context and (seed, batch,
episode) for each episode, so serial and parallel runs agree bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import (
    CQI_MAX, CQI_MIN, DEFAULT_CAPACITY, CapacityMap, ChannelProcess, ServiceClassSpec,
    bytes_per_tti_to_mbps, capacity, default_class,
)
from .net import N_FEATURES, WhittleNetwork, adam_step
from .oracle import TabularMDP

log = logging.getLogger(__name__)

LOG_COLUMNS = ("batch", "mean_return", "mean_tpt_mbps", "grad_norm")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: WhittleNetwork, history: list):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


class EpisodeError(RuntimeError):
    pass


# environments ------------------------------------------------------------

class ServiceEnv:
    """Single UE of one service class, high/low grant per TTI."""

    def __init__(self, spec: ServiceClassSpec, channel: ChannelProcess | None = None,
                 high_rbs: int = 9, low_rbs: int = 2, cmap: CapacityMap = DEFAULT_CAPACITY):
        self.spec = spec
        self.channel_template = channel or ChannelProcess.random_walk()
        self.high_rbs, self.low_rbs = high_rbs, low_rbs
        self.cmap = cmap
        self.ref_bytes = cmap.mean(CQI_MAX, high_rbs)
        self.max_buffer = spec.max_buffer_bytes
        self.tsls_bound = spec.tsls_bound_L

    def make_network(self, rng) -> WhittleNetwork:
        return WhittleNetwork.for_features(rng, max_buffer=self.max_buffer, tsls_bound=self.tsls_bound,
                                           class_id=self.spec.class_id)

    def random_state(self, rng) -> tuple:
        return (float(rng.integers(0, int(self.max_buffer) + 1)), int(rng.integers(CQI_MIN, CQI_MAX + 1)),
                int(rng.integers(0, self.tsls_bound + 1)))

    def reset(self, rng):
        buf, cqi, _ = self.random_state(rng)
        self.buffer = int(buf)
        self.tsls = 0
        self.channel = self.channel_template.copy()
        if self.channel.source == "random_walk":
            self.channel.current_cqi = min(self.channel.cqi_max, max(self.channel.cqi_min, cqi))
        self.traffic = self.spec.traffic.fresh()

    def features(self, v_tpt, v_tsls):
        return (float(self.buffer), float(self.channel.current_cqi), float(self.tsls), v_tpt, v_tsls)

    def step(self, action: int, rng):
        """Returns (reward_component, served_mbps, tpt_violation, tsls_violation)."""
        cqi = self.channel.current_cqi
        rbs = self.high_rbs if action else self.low_rbs
        cap = capacity(cqi, rbs, rng, self.cmap)
        served = min(self.buffer, cap)
        need = self.spec.tpt_bound_B * min(self.cmap.mean(cqi, self.high_rbs), self.buffer)
        self.buffer += self.traffic.arrivals(rng) - served
        self.tsls = 0 if action else self.tsls + 1
        self.channel.advance(rng)
        return (served / self.ref_bytes, bytes_per_tti_to_mbps(served),
                served < need, self.tsls > self.tsls_bound)


class TabularEnv:
    """The oracle's queue as a simulator; reward matches the oracle's exactly."""

    def __init__(self, mdp: TabularMDP):
        self.mdp = mdp
        self.max_buffer = mdp.max_queue
        self.tsls_bound = 1

    def make_network(self, rng) -> WhittleNetwork:
        return WhittleNetwork.for_features(rng, max_buffer=self.mdp.max_queue, tsls_bound=1)

    def random_state(self, rng) -> tuple:
        return (float(rng.integers(0, self.mdp.max_queue + 1)), CQI_MAX, 0)

    def reset(self, rng):
        self.s = int(rng.integers(0, self.mdp.max_queue + 1))

    def features(self, v_tpt, v_tsls):
        return (float(self.s), float(CQI_MAX), 0.0, v_tpt, v_tsls)

    def step(self, action: int, rng):
        m = self.mdp
        served = min(self.s, m.r1 if action else m.r0)
        arrival = 1 if rng.random() < m.beta else 0
        self.s = min(m.max_queue, self.s - served + arrival)
        r = (1.0 + m.mu_r) * served - (0.0 if action else m.mu_l)
        return r, float(served), False, False


# configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    class_id: str = "embb"
    episodes_total: int = 20_000
    episode_len: int = 5_000
    batch_size: int = 20
    lr: float | None = None
    lr_decay: bool = False
    m: float = 5.0
    gamma: float = 0.99
    weights: tuple[float, float, float] | None = None
    seed: int = 0
    reward_violations: str = "constant"
    fixed_violations: tuple[float, float] | None = None
    common_random_numbers: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.reward_violations not in ("constant", "realized"):
            raise ValueError("reward_violations must be 'constant' or 'realized'")
        if self.episodes_total < 1 or self.episode_len < 1 or self.batch_size < 1:
            raise ValueError("episode counts, length and batch size must be positive")
        if self.m <= 0:
            raise ValueError("m must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.weights is not None:
            if len(self.weights) != 3 or abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError(f"weights {self.weights} must sum to 1")

    @property
    def n_batches(self) -> int:
        return max(1, self.episodes_total // self.batch_size)

    def resolved(self, spec: ServiceClassSpec | None) -> "TrainConfig":
        lr = self.lr if self.lr is not None else (spec.learning_rate if spec else 0.01)
        weights = self.weights if self.weights is not None else (spec.weights if spec else (1.0, 0.0, 0.0))
        return replace(self, lr=lr, weights=tuple(weights))


@dataclass
class BatchContext:
    s0: tuple
    lam: float
    v_tpt: float
    v_tsls: float


@dataclass
class EpisodeRecord:
    G: float
    h: np.ndarray
    seed: tuple
    mean_tpt_mbps: float
    n_active: int = 0


@dataclass
class TrainResult:
    net: WhittleNetwork
    history: list = field(default_factory=list)
    sensitivity: dict = field(default_factory=dict)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.history:
                w.writerow([row["batch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])


# algorithm -------------------------------------------------------------------

def sample_batch_context(net: WhittleNetwork, env, rng: np.random.Generator,
                         fixed_violations: tuple[float, float] | None = None) -> BatchContext:
    s0 = env.random_state(rng)
    v_tpt, v_tsls = float(rng.random()), float(rng.random())
    if fixed_violations is not None:
        v_tpt, v_tsls = map(float, fixed_violations)
    lam = net.forward(np.array([s0[0], s0[1], s0[2], v_tpt, v_tsls], dtype=float))
    return BatchContext(s0, lam, v_tpt, v_tsls)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def run_episode(net, ctx: BatchContext, cfg: TrainConfig, rng: np.random.Generator, env,
                seed: tuple = ()) -> EpisodeRecord:
    """One episode of T steps under the soft threshold policy at cost ctx.lam.

    ``net`` needs ``forward(x)`` and ``weighted_grad(X, coeffs)``; any index
    function with those two methods can drive an episode.
    """
    T, m, lam, gamma = cfg.episode_len, cfg.m, ctx.lam, cfg.gamma
    w_r, w_tpt, w_tsls = cfg.weights
    realized = cfg.reward_violations == "realized"
    const_part = 0.0 if realized else w_tpt * ctx.v_tpt + w_tsls * ctx.v_tsls

    env.reset(rng)
    X = np.empty((T, N_FEATURES))
    coeff = np.empty(T)
    cache: dict[tuple, float] = {}
    G = 0.0
    disc = 1.0
    tpt_sum = 0.0
    n_active = 0
    for t in range(T):
        x = env.features(ctx.v_tpt, ctx.v_tsls)
        f = cache.get(x)
        if f is None:
            f = net.forward(np.array(x))
            cache[x] = f
        p = min(max(_sigmoid(m * (f - lam)), 1e-12), 1.0 - 1e-12)
        a = 1 if rng.random() < p else 0
        X[t] = x
        coeff[t] = (a - _sigmoid(m * (f - lam))) * m
        r, tpt, viol_tpt, viol_tsls = env.step(a, rng)
        if realized:
            reward = w_r * r - w_tpt * ctx.v_tpt * viol_tpt - w_tsls * ctx.v_tsls * viol_tsls - lam * a
        else:
            reward = w_r * r + const_part - lam * a
        if not math.isfinite(reward):
            raise EpisodeError(f"non-finite reward at t={t}: r={r}, lam={lam}, a={a}")
        G += disc * reward
        disc *= gamma
        tpt_sum += tpt
        n_active += a
    h = net.weighted_grad(X, coeff)
    if not np.all(np.isfinite(h)):
        raise EpisodeError("non-finite score accumulator")
    return EpisodeRecord(G, h, seed, tpt_sum / T, n_active)


def _episode_job(net, ctx, cfg, env, seed):
    return run_episode(net, ctx, cfg, np.random.default_rng(list(seed)), env, seed)


def batch_update(records: list[EpisodeRecord]) -> tuple[np.ndarray, float]:
    """sum_e (G_e - mean G) h_e, and the batch-mean return."""
    G = np.array([r.G for r in records])
    g_bar = float(G.mean())
    # centre on the first return before averaging, so identical returns give
    # exactly zero advantages (Adam would blow up a rounding residue to lr)
    rel = G - G[0]
    adv = rel - rel.mean()
    grad = np.zeros_like(records[0].h)
    for a, r in zip(adv, records):
        grad += a * r.h
    return grad, g_bar


def make_env(cfg: TrainConfig, spec: ServiceClassSpec | None = None, channel: ChannelProcess | None = None,
             mdp: TabularMDP | None = None):
    if mdp is not None:
        return TabularEnv(mdp)
    return ServiceEnv(spec or default_class(cfg.class_id), channel)


def train(cfg: TrainConfig, env=None, net: WhittleNetwork | None = None, progress=None) -> TrainResult:
    spec = getattr(env, "spec", None)
    if env is None:
        spec = default_class(cfg.class_id)
        env = ServiceEnv(spec)
    cfg = cfg.resolved(spec)
    net = net or env.make_network(np.random.default_rng([cfg.seed, 2**31 - 1]))
    history = []
    pool = None
    if cfg.jobs > 1:
        from joblib import Parallel, delayed
        pool = Parallel(n_jobs=cfg.jobs)
    for b in range(cfg.n_batches):
        ctx = sample_batch_context(net, env, np.random.default_rng([cfg.seed, b]), cfg.fixed_violations)
        seeds = [(cfg.seed, b) if cfg.common_random_numbers else (cfg.seed, b, e) for e in range(cfg.batch_size)]
        if pool is None:
            records = [_episode_job(net, ctx, cfg, env, s) for s in seeds]
        else:
            records = pool(delayed(_episode_job)(net, ctx, cfg, env, s) for s in seeds)
        grad, g_bar = batch_update(records)
        lr = cfg.lr / math.sqrt(b + 1) if cfg.lr_decay else cfg.lr
        last_good = net.copy()
        adam_step(net, grad, lr)
        row = {"batch": b, "mean_return": g_bar,
               "mean_tpt_mbps": float(np.mean([r.mean_tpt_mbps for r in records])),
               "grad_norm": float(np.linalg.norm(grad)), "lam": ctx.lam}
        history.append(row)
        if not np.all(np.isfinite(net.theta)) or np.max(np.abs(net.theta)) > 1e6:
            raise TrainingDiverged(f"parameters diverged at batch {b}", last_good, history)
        if progress:
            progress(row)
    sens = {}
    if hasattr(env, "spec"):
        sens = feature_sensitivity(net, env, np.random.default_rng([cfg.seed, 2**31 - 2]))
        if sens["v_tpt"] < 0 or sens["v_tsls"] < 0:
            log.warning("index decreases with violation features on average: %s", sens)
    return TrainResult(net, history, sens)


def feature_sensitivity(net: WhittleNetwork, env, rng, n: int = 256, h: float = 1e-4) -> dict:
    """Average d f / d v_tpt and d f / d v_tsls over random states."""
    X = np.array([list(env.random_state(rng)) + [rng.random(), rng.random()] for _ in range(n)])
    X[:, 3:] = np.clip(X[:, 3:], h, 1 - h)
    out = {}
    for name, col in (("v_tpt", 3), ("v_tsls", 4)):
        up, dn = X.copy(), X.copy()
        up[:, col] += h
        dn[:, col] -= h
        out[name] = float(np.mean((net.forward_batch(up) - net.forward_batch(dn)) / (2 * h)))
    return out
