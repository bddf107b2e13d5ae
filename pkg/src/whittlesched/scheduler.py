"""Index scheduling of N UEs under an RBG budget, plus baselines and slicing.

Every TTI the UEs are ranked by a scalar priority.  The first ``top_R`` get
the high grant, the next ones get the low grant while the budget lasts, and
the rest get nothing.  Ties go to the lower UE id.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .env import (
    CQI_MAX, DEFAULT_CAPACITY, CapacityMap, ChannelProcess, ServiceClassSpec, UEState,
    bytes_per_tti_to_mbps, step_ue,
)
from .metrics import MetricsRecorder, MetricsReport
from .net import WhittleNetwork
from .oracle import ServiceGapArm, TabularMDP, index_table

BASELINES = ("max_cqi", "prop_fair", "max_weight", "round_robin")
POLICIES = ("windex",) + BASELINES
POLICY_ALIASES = {"maxcqi": "max_cqi", "pf": "prop_fair", "maxweight": "max_weight", "rr": "round_robin"}


class ScenarioError(ValueError):
    pass


class IndexPolicy(Protocol):
    class_id: str

    def index(self, state: UEState) -> float: ...


def canonical_policy(name: str) -> str:
    name = POLICY_ALIASES.get(name, name)
    if name not in POLICIES:
        raise ScenarioError(f"unknown policy {name!r}; expected one of {POLICIES + tuple(POLICY_ALIASES)}")
    return name


# scenario description ---------------------------------------------------------

@dataclass(frozen=True)
class RBProfile:
    high: int = 9
    low: int = 2
    zero: int = 0

    def __post_init__(self):
        if not 0 <= self.zero <= self.low <= self.high or self.high < 1:
            raise ScenarioError(f"rb profile must satisfy 0 <= zero <= low <= high, high >= 1: {self}")


@dataclass
class UEConfig:
    spec: ServiceClassSpec
    channel: ChannelProcess
    model: str | None = None


@dataclass
class ScenarioSpec:
    ues: list[UEConfig]
    total_rbgs: int
    rb_profile: RBProfile = field(default_factory=RBProfile)
    top_R: int | None = None
    horizon: int = 10_000
    window: int = 1
    eta: float = 0.05
    name: str = ""

    def __post_init__(self):
        if not self.ues:
            raise ScenarioError("scenario needs at least one UE")
        if self.total_rbgs < self.rb_profile.high:
            raise ScenarioError(f"total_rbgs {self.total_rbgs} cannot fit one high grant of {self.rb_profile.high}")
        if self.top_R is None:
            self.top_R = self.total_rbgs // self.rb_profile.high
        self.top_R = min(self.top_R, len(self.ues))
        if self.top_R < 1 or self.top_R * self.rb_profile.high > self.total_rbgs:
            raise ScenarioError(f"top_R={self.top_R} high grants exceed {self.total_rbgs} RBGs")
        if self.horizon < 0 or self.window < 1 or self.eta <= 0:
            raise ScenarioError("horizon >= 0, window >= 1 and eta > 0 required")

    @property
    def class_ids(self) -> list[str]:
        return [u.spec.class_id for u in self.ues]


@dataclass(frozen=True)
class Slice:
    name: str
    classes: tuple[str, ...]
    rbgs: int
    scheduler: str = "prop_fair"
    top_R: int | None = None


@dataclass(frozen=True)
class SliceConfig:
    slices: tuple[Slice, ...]

    def validate(self, spec: ScenarioSpec) -> None:
        if sum(s.rbgs for s in self.slices) != spec.total_rbgs:
            raise ScenarioError(f"slice shares sum to {sum(s.rbgs for s in self.slices)}, "
                                f"not {spec.total_rbgs}")
        seen = [c for s in self.slices for c in s.classes]
        if len(seen) != len(set(seen)):
            raise ScenarioError("a service class appears in more than one slice")
        missing = set(spec.class_ids) - set(seen)
        if missing:
            raise ScenarioError(f"classes {sorted(missing)} have no slice")
        for s in self.slices:
            canonical_policy(s.scheduler)
            if s.rbgs < spec.rb_profile.high and any(c in s.classes for c in spec.class_ids):
                raise ScenarioError(f"slice {s.name!r} cannot fit one high grant")


# allocation -------------------------------------------------------------------

@dataclass(frozen=True)
class AllocationDecision:
    grants: tuple[str, ...]
    rbs: tuple[int, ...]
    indices: tuple[float, ...]
    tti: int = 0

    @property
    def total_rbs(self) -> int:
        return sum(self.rbs)

    def selected(self) -> list[int]:
        return [i for i, g in enumerate(self.grants) if g == "high"]


def allocate_by_index(indices: Sequence[float], top_R: int, total_rbgs: int,
                      profile: RBProfile = RBProfile(), tti: int = 0) -> AllocationDecision:
    """Top-R high, then low grants in index order while the budget lasts."""
    idx = np.asarray(indices, dtype=float)
    if idx.ndim != 1 or idx.size == 0:
        raise ScenarioError("need at least one index")
    if np.any(np.isnan(idx)):
        raise ScenarioError("NaN index")
    order = np.argsort(-idx, kind="stable")
    n_high = min(top_R, idx.size)
    left = total_rbgs - n_high * profile.high
    if left < 0:
        raise ScenarioError("top_R high grants exceed the budget")
    grants = ["zero"] * idx.size
    rbs = [profile.zero] * idx.size
    for rank, i in enumerate(order):
        if rank < n_high:
            grants[i], rbs[i] = "high", profile.high
        elif profile.low > 0 and left >= profile.low:
            grants[i], rbs[i] = "low", profile.low
            left -= profile.low
    return AllocationDecision(tuple(grants), tuple(rbs), tuple(float(x) for x in idx), tti)


def windex_allocate(states: Sequence[UEState], nets: Sequence[IndexPolicy], top_R: int,
                    total_rbgs: int | None = None, profile: RBProfile = RBProfile(), tti: int = 0,
                    executor: ThreadPoolExecutor | None = None) -> AllocationDecision:
    if len(states) != len(nets) or not states:
        raise ScenarioError("need one index function per UE and at least one UE")
    if executor is None:
        indices = [n.index(s) for n, s in zip(nets, states)]
    else:
        indices = list(executor.map(lambda p: p[0].index(p[1]), zip(nets, states)))
    if total_rbgs is None:
        total_rbgs = top_R * profile.high + (len(states) - top_R) * profile.low
    return allocate_by_index(indices, top_R, total_rbgs, profile, tti)


@dataclass
class SchedulerHistory:
    """Per-UE EWMA of CQI for proportional fair and the round-robin cursor."""

    n: int
    alpha: float = 0.01
    avg_cqi: np.ndarray | None = None
    rr_cursor: int = 0

    def observe(self, cqis) -> None:
        c = np.asarray(cqis, dtype=float)
        if self.avg_cqi is None:
            self.avg_cqi = c.copy()
        else:
            self.avg_cqi = (1.0 - self.alpha) * self.avg_cqi + self.alpha * c


def baseline_weights(kind: str, states: Sequence[UEState], history: SchedulerHistory) -> np.ndarray:
    cqi = np.array([s.cqi for s in states], dtype=float)
    if kind == "max_cqi":
        return cqi
    if kind == "max_weight":
        return cqi * np.array([s.buffer_bytes for s in states], dtype=float)
    if kind == "prop_fair":
        avg = history.avg_cqi if history.avg_cqi is not None else cqi
        return cqi / avg
    if kind == "round_robin":
        n = len(states)
        # rank by distance from the cursor, cursor first
        return -((np.arange(n) - history.rr_cursor) % n).astype(float)
    raise ScenarioError(f"unknown baseline {kind!r}")


def baseline_allocate(kind: str, states: Sequence[UEState], history: SchedulerHistory, top_R: int,
                      total_rbgs: int | None = None, profile: RBProfile = RBProfile(),
                      tti: int = 0) -> AllocationDecision:
    """Weight rule of ``kind``, then the shared top-R selection; updates history."""
    kind = canonical_policy(kind)
    if kind == "windex":
        raise ScenarioError("windex is not a baseline")
    if kind == "prop_fair" and history.avg_cqi is None:
        history.observe([s.cqi for s in states])
    w = baseline_weights(kind, states, history)
    if total_rbgs is None:
        total_rbgs = top_R * profile.high + (len(states) - top_R) * profile.low
    decision = allocate_by_index(w, top_R, total_rbgs, profile, tti)
    if kind == "prop_fair":
        history.observe([s.cqi for s in states])
    if kind == "round_robin":
        history.rr_cursor = (history.rr_cursor + min(top_R, len(states))) % len(states)
    return decision


def update_violation_features(v_tpt: float, v_tsls: float, frac_tpt: float, frac_tsls: float,
                              eta: float) -> tuple[float, float]:
    """Clamped proportional update of the violation features after a window.

    A window with violations pushes v up by eta * fraction; a clean window
    decays v by eta * v.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")

    def one(v, frac):
        v = v + eta * frac if frac > 0 else v - eta * v
        return min(1.0, max(0.0, v))

    return one(v_tpt, frac_tpt), one(v_tsls, frac_tsls)


# oracle-derived index -----------------------------------------------------------

@lru_cache(maxsize=None)
def _oracle_queue_index(max_queue: int, beta: float, gamma: float) -> tuple[float, ...]:
    mdp = TabularMDP(max_queue=max_queue, beta=beta, gamma=gamma)
    return tuple(float(x) for x in index_table(mdp, tol=1e-7).index)


@lru_cache(maxsize=None)
def _oracle_gap_index(bound_L: int, gamma: float) -> tuple[float, ...]:
    return tuple(float(x) for x in index_table(ServiceGapArm(bound_L, gamma), tol=1e-7).index)


class OracleIndexPolicy:
    """Index assembled from exact tabular indices, in place of a trained network.

    The per-UE reward has three parts weighted by the class weights
    (w_r, w_tpt, w_tsls): served bytes, a throughput-violation penalty scaled
    by v_tpt, and a TSLS-violation penalty scaled by v_tsls.  Each part is an
    arm with its own exact index:

    * served bytes: the queue arm, backlog counted in high grants at CQI 15,
      arrival probability = mean arrivals per TTI in those units; the served
      amount and hence the index scale with the capacity ratio to CQI 15;
    * throughput violation: avoided this TTI only by serving a backlogged UE,
      so its index is the penalty itself;
    * TSLS violation: the service-gap arm with bound L.

    The sum of the three is the UE's priority.
    """

    def __init__(self, spec: ServiceClassSpec, *, high_rbs: int = 9, max_queue: int = 30,
                 gamma: float = 0.9, cmap: CapacityMap = DEFAULT_CAPACITY):
        self.class_id = spec.class_id
        self.cmap = cmap
        self.high_rbs = high_rbs
        self.weights = tuple(spec.weights)
        self.unit = cmap.mean(CQI_MAX, high_rbs)
        beta = min(0.999, spec.traffic.mean_bytes_per_tti / self.unit)
        self.queue_index = np.array(_oracle_queue_index(max_queue, round(beta, 6), gamma))
        self.gap_index = np.array(_oracle_gap_index(spec.tsls_bound_L, gamma))
        self.max_queue = max_queue

    def queue_state(self, buffer_bytes: float) -> int:
        return min(self.max_queue, math.ceil(buffer_bytes / self.unit))

    def index(self, state: UEState) -> float:
        w_r, w_tpt, w_tsls = self.weights
        rho = self.cmap.mean(state.cqi, self.high_rbs) / self.unit
        backlogged = 1.0 if state.buffer_bytes > 0 else 0.0
        tau = min(state.tsls, len(self.gap_index) - 1)
        return (w_r * rho * self.queue_index[self.queue_state(state.buffer_bytes)]
                + w_tpt * state.v_tpt * backlogged
                + w_tsls * state.v_tsls * self.gap_index[tau])


# simulation loop -------------------------------------------------------------------

def tpt_threshold_mbps(spec: ServiceClassSpec, state: UEState, high_rbs: int,
                       cmap: CapacityMap = DEFAULT_CAPACITY) -> float:
    """B times what a high grant would carry now, capped by the backlog."""
    return bytes_per_tti_to_mbps(spec.tpt_bound_B * min(cmap.mean(state.cqi, high_rbs), state.buffer_bytes))


def load_index_policies(spec: ScenarioSpec, nets: Sequence[IndexPolicy] | None = None,
                        model_dir: str | Path | None = None) -> list[IndexPolicy]:
    """One index function per UE: given, loaded from model files, or the oracle's."""
    if nets is not None:
        if len(nets) != len(spec.ues):
            raise ScenarioError(f"{len(nets)} index functions for {len(spec.ues)} UEs")
        out = list(nets)
    else:
        out = []
        cache: dict[str, IndexPolicy] = {}
        for u in spec.ues:
            if u.model in (None, "oracle"):
                key = f"oracle:{u.spec.class_id}:{u.spec.traffic.rate_mbps}"
                if key not in cache:
                    cache[key] = OracleIndexPolicy(u.spec, high_rbs=spec.rb_profile.high)
            else:
                path = Path(model_dir or ".") / u.model
                key = str(path)
                if key not in cache:
                    cache[key] = WhittleNetwork.load(path)
            out.append(cache[key])
    for i, (u, n) in enumerate(zip(spec.ues, out)):
        cid = getattr(n, "class_id", "")
        if cid and cid != u.spec.class_id:
            raise ScenarioError(f"UE {i} is {u.spec.class_id} but its model was trained for {cid}")
    return out


@dataclass
class _Group:
    members: list[int]
    policy: str
    rbgs: int
    top_R: int
    history: SchedulerHistory


def _groups(spec: ScenarioSpec, policy: str, slices: SliceConfig | None) -> list[_Group]:
    n = len(spec.ues)
    if slices is None:
        return [_Group(list(range(n)), policy, spec.total_rbgs, spec.top_R, SchedulerHistory(n))]
    slices.validate(spec)
    out = []
    for s in slices.slices:
        members = [i for i, c in enumerate(spec.class_ids) if c in s.classes]
        if not members:
            continue
        top_R = s.top_R if s.top_R is not None else s.rbgs // spec.rb_profile.high
        out.append(_Group(members, canonical_policy(s.scheduler), s.rbgs, min(top_R, len(members)),
                          SchedulerHistory(len(members))))
    return out


def run_scenario(spec: ScenarioSpec, policy: str = "windex", seed: int = 0, *,
                 slices: SliceConfig | None = None, nets: Sequence[IndexPolicy] | None = None,
                 model_dir: str | Path | None = None, threads: int = 1,
                 trace: list | None = None, cmap: CapacityMap = DEFAULT_CAPACITY) -> MetricsReport:
    """Simulate ``spec.horizon`` TTIs and return the violation report.

    Windex decides once per ``spec.window`` TTIs and holds the grants in
    between; baselines decide every TTI.  Violation features are updated at
    the end of every window from that window's per-TTI violation fractions.
    If ``trace`` is a list, each TTI's (decision, states) pair is appended.
    """
    policy = canonical_policy(policy)
    groups = _groups(spec, policy, slices)
    uses_index = any(g.policy == "windex" for g in groups)
    policies = load_index_policies(spec, nets, model_dir) if uses_index else None
    n = len(spec.ues)
    prof = spec.rb_profile
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]
    channels = [u.channel.copy() for u in spec.ues]
    traffics = [u.spec.traffic.fresh() for u in spec.ues]
    states = [UEState(0, ch.current_cqi, 0, 0.0, 0.0) for ch in channels]
    label = policy if slices is None else "sliced:" + ",".join(
        f"{s.name}={canonical_policy(s.scheduler)}" for s in slices.slices)
    rec = MetricsRecorder(spec.class_ids, spec.horizon, label, seed)
    win_tpt = [0] * n
    win_tsls = [0] * n
    win_len = 0
    pool = ThreadPoolExecutor(threads) if threads > 1 and uses_index else None
    rbs = [0] * n
    grants = ["zero"] * n
    try:
        for t in range(spec.horizon):
            for g in groups:
                if g.policy == "windex":
                    if t % spec.window:
                        continue
                    d = windex_allocate([states[i] for i in g.members], [policies[i] for i in g.members],
                                        g.top_R, g.rbgs, prof, t, pool)
                else:
                    d = baseline_allocate(g.policy, [states[i] for i in g.members], g.history,
                                          g.top_R, g.rbgs, prof, t)
                if d.total_rbs > g.rbgs or d.grants.count("high") > g.top_R:
                    raise AssertionError(f"TTI {t}: allocation {d.rbs} exceeds budget {g.rbgs}")
                for k, i in enumerate(g.members):
                    rbs[i], grants[i] = d.rbs[k], d.grants[k]
            assert sum(rbs) <= spec.total_rbgs, f"TTI {t}: {sum(rbs)} RBGs granted of {spec.total_rbgs}"
            if trace is not None:
                trace.append((tuple(grants), tuple(states)))
            for i, u in enumerate(spec.ues):
                need = tpt_threshold_mbps(u.spec, states[i], prof.high, cmap)
                res = step_ue(states[i], channels[i], traffics[i], rbs[i], rngs[i], high_rbs=prof.high, cmap=cmap)
                states[i] = res.state
                v_t = res.realized_tpt_mbps < need
                v_l = res.state.tsls > u.spec.tsls_bound_L
                rec.record(t, i, res.realized_tpt_mbps, res.state.tsls, need, u.spec.tsls_bound_L)
                win_tpt[i] += v_t
                win_tsls[i] += v_l
            win_len += 1
            if win_len == spec.window or t == spec.horizon - 1:
                for i in range(n):
                    vt, vl = update_violation_features(states[i].v_tpt, states[i].v_tsls,
                                                       win_tpt[i] / win_len, win_tsls[i] / win_len, spec.eta)
                    states[i] = UEState(states[i].buffer_bytes, states[i].cqi, states[i].tsls, vt, vl)
                win_tpt, win_tsls, win_len = [0] * n, [0] * n, 0
    finally:
        if pool is not None:
            pool.shutdown()
    return rec.finalize()
