"""Exact tabular solution of the single-UE relaxed scheduling problem.

The single-arm model is a discrete queue.  In state ``s`` (queue length) the
low action serves ``min(s, r0)`` units and the high action ``min(s, r1)``
units; afterwards one unit arrives with probability ``beta``.  The queue is
clamped to ``[0, max_queue]`` (an arrival into a full queue is dropped).

Per-step reward for activation cost ``lam``::

    (1 + mu_r) * served(s, a)  -  mu_l * [a == 0]  -  lam * a

The TSLS multiplier enters as a constant penalty on the low action, so it acts
as a shift of the activation cost.  Everything here is pure and cheap: state
spaces are tens of states, so value iteration runs to a 1e-9 sup-norm residual.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_TOL = 1e-9
DEFAULT_INDEX_TOL = 1e-6
DEFAULT_SLACK = 1e-8


class NonConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"value iteration did not converge after {iterations} iterations "
            f"(residual {residual:.3e})"
        )
        self.residual = residual
        self.iterations = iterations


class BracketError(ValueError):
    pass


@dataclass(frozen=True)
class TabularMDP:
    max_queue: int
    beta: float
    gamma: float
    r0: int = 0
    r1: int = 1
    mu_r: float = 0.0
    mu_l: float = 0.0

    def __post_init__(self):
        if int(self.max_queue) != self.max_queue or self.max_queue < 1:
            raise ValueError(f"max_queue must be a positive integer, got {self.max_queue}")
        if int(self.r0) != self.r0 or int(self.r1) != self.r1:
            raise ValueError("service amounts r0, r1 must be integers")
        if not 0 <= self.r0 < self.r1:
            raise ValueError(f"need 0 <= r0 < r1, got r0={self.r0}, r1={self.r1}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.mu_r < 0 or self.mu_l < 0:
            raise ValueError("penalty multipliers mu_r, mu_l must be non-negative")

    @property
    def n_states(self) -> int:
        return self.max_queue + 1

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.n_states)

    def served(self, action: int) -> np.ndarray:
        amount = self.r1 if action else self.r0
        return np.minimum(self.states, amount)

    def successors(self, action: int) -> tuple[np.ndarray, np.ndarray]:
        """Next states without and with an arrival, for every current state."""
        base = self.states - self.served(action)
        return np.clip(base, 0, self.max_queue), np.clip(base + 1, 0, self.max_queue)

    def reward(self, lam: float) -> np.ndarray:
        """(n_states, 2) per-step reward table."""
        r = np.empty((self.n_states, 2))
        r[:, 0] = (1.0 + self.mu_r) * self.served(0) - self.mu_l
        r[:, 1] = (1.0 + self.mu_r) * self.served(1) - lam
        return r

    def transition_matrix(self, action: int) -> np.ndarray:
        nxt0, nxt1 = self.successors(action)
        p = np.zeros((self.n_states, self.n_states))
        np.add.at(p, (self.states, nxt0), 1.0 - self.beta)
        np.add.at(p, (self.states, nxt1), self.beta)
        return p


@dataclass(frozen=True)
class ServiceGapArm:
    """Deterministic time-since-last-service arm.

    State ``tau`` counts TTIs since the last high grant, capped at
    ``bound_L + 2``.  The high action resets it to 0; the low action advances
    it and costs ``cost`` whenever the new value exceeds ``bound_L``.
    Same solver interface as :class:`TabularMDP` (with ``beta = 0``).
    """

    bound_L: int
    gamma: float
    cost: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if int(self.bound_L) != self.bound_L or self.bound_L < 1:
            raise ValueError("bound_L must be a positive integer")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")

    @property
    def max_queue(self) -> int:
        return self.bound_L + 2

    @property
    def n_states(self) -> int:
        return self.max_queue + 1

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.n_states)

    def successors(self, action: int) -> tuple[np.ndarray, np.ndarray]:
        nxt = np.zeros(self.n_states, dtype=np.intp) if action else np.minimum(self.states + 1, self.max_queue)
        return nxt, nxt

    def reward(self, lam: float) -> np.ndarray:
        r = np.empty((self.n_states, 2))
        r[:, 0] = -self.cost * (np.minimum(self.states + 1, self.max_queue) > self.bound_L)
        r[:, 1] = -lam
        return r

    def index_bounds(self) -> tuple[float, float]:
        span = self.cost / (1.0 - self.gamma) + 1.0
        return -span, span


@dataclass
class ValueTable:
    values: np.ndarray
    policy: np.ndarray
    lam: float
    residual: float
    q_values: np.ndarray
    mdp: TabularMDP
    iterations: int = 0

    def dv(self) -> np.ndarray:
        """V((s - r1)^+) - V((s - r0)^+) for every state s."""
        s = self.mdp.states
        v = self.values
        return v[np.maximum(s - self.mdp.r1, 0)] - v[np.maximum(s - self.mdp.r0, 0)]


@dataclass
class IndexTable:
    index: np.ndarray
    tolerance: float
    mdp: TabularMDP | None = None

    def __call__(self, state: int) -> float:
        return float(self.index[state])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state", "index"])
            for s, w_s in enumerate(self.index):
                w.writerow([s, repr(float(w_s))])

    @classmethod
    def from_csv(cls, path: str | Path, tolerance: float = DEFAULT_INDEX_TOL) -> "IndexTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        states = [int(r["state"]) for r in rows]
        if states != list(range(len(states))):
            raise ValueError(f"{path}: states must be 0..n-1 in order")
        return cls(np.array([float(r["index"]) for r in rows]), tolerance)


@dataclass
class CheckReport:
    lemma: str
    passed: bool
    violations: list = field(default_factory=list)
    threshold: int | None = None

    def __bool__(self) -> bool:
        return self.passed


def _successor_table(mdp: TabularMDP) -> tuple[np.ndarray, np.ndarray]:
    """(n_states, 2) next-state tables without / with an arrival."""
    no_arr = np.empty((mdp.n_states, 2), dtype=np.intp)
    arr = np.empty_like(no_arr)
    for a in (0, 1):
        no_arr[:, a], arr[:, a] = mdp.successors(a)
    return no_arr, arr


def _q_values(mdp, reward, values, succ=None) -> np.ndarray:
    no_arr, arr = _successor_table(mdp) if succ is None else succ
    return reward + mdp.gamma * ((1.0 - mdp.beta) * values[no_arr] + mdp.beta * values[arr])


def greedy_policy(q_values: np.ndarray, tie_tol: float = 0.0) -> np.ndarray:
    # ties (within tie_tol) go to the low action
    return (q_values[:, 1] - q_values[:, 0] > tie_tol).astype(np.int8)


def value_iterate(
    mdp: TabularMDP,
    lam: float,
    tol: float = DEFAULT_TOL,
    max_iters: int = 200_000,
    v0: np.ndarray | None = None,
) -> ValueTable:
    """Solve the lam-relaxed single-arm problem by value iteration.

    Iterates until the sup-norm Bellman residual ``|T V - V|`` is at most
    ``tol``.  The returned policy is greedy with respect to the converged
    values, breaking ties in favour of the low action.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    reward = mdp.reward(lam)
    succ = _successor_table(mdp)
    v = np.zeros(mdp.n_states) if v0 is None else np.array(v0, dtype=float)
    residual = np.inf
    for it in range(1, max_iters + 1):
        q = _q_values(mdp, reward, v, succ)
        v_new = q.max(axis=1)
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual <= tol:
            break
    else:
        raise NonConvergenceError(residual, max_iters)
    q = _q_values(mdp, reward, v, succ)
    residual = float(np.max(np.abs(q.max(axis=1) - v)))
    return ValueTable(
        values=v,
        policy=greedy_policy(q),
        lam=float(lam),
        residual=residual,
        q_values=q,
        mdp=mdp,
        iterations=it,
    )


def check_concavity(vt: ValueTable, slack: float = DEFAULT_SLACK) -> CheckReport:
    """Decreasing differences: V(s+1) - V(s) <= V(s) - V(s-1) + slack."""
    v = np.asarray(vt.values, dtype=float)
    d = np.diff(v)
    excess = d[1:] - d[:-1]
    bad = np.flatnonzero(excess > slack) + 1
    violations = [(int(s), float(excess[s - 1])) for s in bad]
    return CheckReport("concavity", not violations, violations)


def check_threshold(vt: ValueTable) -> CheckReport:
    """Policy is 0 below some state s* and 1 from s* on.

    ``threshold`` is s* (``len(policy)`` when the policy is all-zero).
    """
    pol = np.asarray(vt.policy)
    active = np.flatnonzero(pol == 1)
    s_star = int(active[0]) if active.size else len(pol)
    violations = [int(s) for s in np.flatnonzero(pol[s_star:] == 0) + s_star]
    return CheckReport("threshold", not violations, violations, threshold=s_star)


def solve_grid(
    mdp: TabularMDP,
    lambda_grid: Sequence[float],
    tol: float = DEFAULT_TOL,
    max_iters: int = 200_000,
) -> list[ValueTable]:
    """Value tables along a cost grid, each warm-started from the previous."""
    tables = []
    v0 = None
    for lam in lambda_grid:
        vt = value_iterate(mdp, lam, tol=tol, max_iters=max_iters, v0=v0)
        v0 = vt.values
        tables.append(vt)
    return tables


def _validate_grid(lambda_grid) -> np.ndarray:
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("lambda_grid must be a non-empty 1-d sequence")
    if np.any(grid < 0):
        raise ValueError("lambda_grid must be non-negative")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("lambda_grid must be strictly increasing")
    return grid


def check_indexability_tables(tables: Sequence[ValueTable], slack: float = DEFAULT_SLACK) -> CheckReport:
    """Indexability checks on value tables solved along an increasing grid.

    Between adjacent costs lam < lam + delta: every state inactive at lam must
    stay inactive at lam + delta, and
    ``DV_{lam+delta}(s) - DV_lam(s) <= delta / gamma + slack`` for all s.
    Violations are tuples ``(kind, lam, state, amount)``.
    """
    violations = []
    max_excess = -np.inf
    for prev, vt in zip(tables, tables[1:]):
        delta = vt.lam - prev.lam
        for s in np.flatnonzero((prev.policy == 0) & (vt.policy == 1)):
            violations.append(("nesting", vt.lam, int(s), 1.0))
        excess = vt.dv() - prev.dv() - delta / vt.mdp.gamma
        max_excess = max(max_excess, float(excess.max()))
        for s in np.flatnonzero(excess > slack):
            violations.append(("dv_bound", vt.lam, int(s), float(excess[s])))
    report = CheckReport("indexability", not violations, violations)
    report.max_dv_excess = max_excess
    return report


def check_indexability(
    mdp: TabularMDP,
    lambda_grid: Sequence[float],
    tol: float = DEFAULT_TOL,
    slack: float = DEFAULT_SLACK,
    max_iters: int = 200_000,
) -> CheckReport:
    """Nested inactive sets along an increasing cost grid, plus the DV bound."""
    grid = _validate_grid(lambda_grid)
    return check_indexability_tables(solve_grid(mdp, grid, tol, max_iters), slack)


def index_bounds(mdp: TabularMDP) -> tuple[float, float]:
    """A cost interval guaranteed to contain every state's index."""
    if hasattr(mdp, "index_bounds"):
        return mdp.index_bounds()
    span = (1.0 + mdp.mu_r) * mdp.r1 / (1.0 - mdp.gamma) + mdp.mu_l + 1.0
    return -span, span


def whittle_index(
    mdp: TabularMDP,
    state: int,
    bracket: tuple[float, float] | None = None,
    tol: float = DEFAULT_INDEX_TOL,
    vi_tol: float = DEFAULT_TOL,
) -> float:
    """Cost at which high and low actions are indifferent in ``state``.

    Bisects on the sign of Q_high - Q_low, which is non-increasing in the cost
    for an indexable arm.
    """
    if not 0 <= state < mdp.n_states:
        raise ValueError(f"state {state} outside [0, {mdp.n_states - 1}]")
    lo, hi = index_bounds(mdp) if bracket is None else map(float, bracket)
    if not lo < hi:
        raise ValueError("bracket must satisfy lo < hi")

    cache: dict[str, np.ndarray] = {}

    def gap(lam: float) -> float:
        vt = value_iterate(mdp, lam, tol=vi_tol, v0=cache.get("v"))
        cache["v"] = vt.values
        return float(vt.q_values[state, 1] - vt.q_values[state, 0])

    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo <= 0:
        raise BracketError(f"state {state} always inactive on bracket [{lo}, {hi}]")
    if g_hi > 0:
        raise BracketError(f"state {state} always active on bracket [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def index_table(
    mdp: TabularMDP,
    tol: float = DEFAULT_INDEX_TOL,
    bracket: tuple[float, float] | None = None,
) -> IndexTable:
    idx = np.array([whittle_index(mdp, s, bracket=bracket, tol=tol) for s in mdp.states])
    return IndexTable(idx, tol, mdp)


def random_instance(rng: np.random.Generator, max_queue_max: int = 30) -> TabularMDP:
    """Draw an instance from the ranges used by the verification sweep."""
    return TabularMDP(
        max_queue=int(rng.integers(2, max_queue_max + 1)),
        beta=float(rng.uniform(0.05, 0.9)),
        gamma=float(rng.uniform(0.8, 0.99)),
        mu_r=float(rng.uniform(0.0, 2.0)),
        mu_l=float(rng.uniform(0.0, 2.0)),
    )


@dataclass
class SweepResult:
    n_instances: int
    n_lambdas: int
    concavity_failures: list = field(default_factory=list)
    threshold_failures: list = field(default_factory=list)
    indexability_failures: list = field(default_factory=list)
    max_dv_excess: float = -np.inf

    @property
    def passed(self) -> bool:
        return not (self.concavity_failures or self.threshold_failures or self.indexability_failures)


def verify_sweep(
    instances: Sequence[TabularMDP],
    lambda_grid: Sequence[float],
    tol: float = DEFAULT_TOL,
    slack: float = DEFAULT_SLACK,
) -> SweepResult:
    """Run the concavity, threshold and indexability checks on every instance."""
    grid = _validate_grid(lambda_grid)
    res = SweepResult(len(instances), len(grid))
    for k, mdp in enumerate(instances):
        tables = solve_grid(mdp, grid, tol)
        for vt in tables:
            c = check_concavity(vt, slack)
            if not c:
                res.concavity_failures.append((k, vt.lam, c.violations))
            t = check_threshold(vt)
            if not t:
                res.threshold_failures.append((k, vt.lam, t.violations))
        ix = check_indexability_tables(tables, slack)
        res.max_dv_excess = max(res.max_dv_excess, ix.max_dv_excess)
        if not ix:
            res.indexability_failures.append((k, ix.violations))
    return res
