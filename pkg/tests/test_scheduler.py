import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whittlesched.config import parse_config, shipped_config
from whittlesched.env import ChannelProcess, TrafficModel, UEState, default_class
from whittlesched.net import WhittleNetwork
from whittlesched.scheduler import (
    OracleIndexPolicy, RBProfile, ScenarioError, ScenarioSpec, SchedulerHistory, Slice, SliceConfig,
    UEConfig, allocate_by_index, baseline_allocate, canonical_policy, run_scenario,
    update_violation_features, windex_allocate,
)


def scenario4(**kw):
    spec = parse_config(shipped_config("scenario4.yaml")).scenario_spec()
    for k, v in kw.items():
        setattr(spec, k, v)
    return spec


def ues(n, cls="embb", cqi=None):
    ch = ChannelProcess.constant(cqi) if cqi else ChannelProcess.random_walk()
    return [UEConfig(default_class(cls), ch) for _ in range(n)]


class Const:
    def __init__(self, v, class_id=""):
        self.v, self.class_id = v, class_id

    def index(self, state):
        return self.v


# allocation --------------------------------------------------------------------

def test_single_ue_gets_high():
    d = allocate_by_index([-3.0], 1, 9)
    assert d.grants == ("high",) and d.rbs == (9,)


def test_ties_go_to_lower_ids():
    d = allocate_by_index([0.5] * 6, 2, 30)
    assert d.selected() == [0, 1]


def test_highest_index_wins():
    assert allocate_by_index([2.0, 0.5, 1.1], 1, 9).selected() == [0]
    d = windex_allocate([UEState()] * 3, [Const(2.0), Const(0.5), Const(1.1)], 1)
    assert d.grants == ("high", "low", "low")
    d = windex_allocate([UEState()] * 3, [Const(2.0), Const(0.5), Const(1.1)], 1, total_rbgs=11)
    assert d.grants == ("high", "zero", "low")


def test_scenario4_budget_tiers():
    # 17 RBGs: one high grant (9), four low grants (8), the sixth UE gets nothing
    spec = scenario4()
    assert spec.top_R == 1
    d = allocate_by_index([6, 5, 4, 3, 2, 1], spec.top_R, spec.total_rbgs, spec.rb_profile)
    assert d.grants == ("high", "low", "low", "low", "low", "zero")
    assert d.total_rbs == 17


@settings(max_examples=60, deadline=None)
@given(idx=st.lists(st.integers(-50, 50), min_size=1, max_size=12), top_R=st.integers(1, 4),
       k=st.integers(-3, 3))
def test_selection_monotone_and_scale_invariant(idx, top_R, k):
    top_R = min(top_R, len(idx))
    total = top_R * 9 + 2 * len(idx)
    d = allocate_by_index(idx, top_R, total)
    chosen = d.selected()
    assert len(chosen) == top_R
    rest = [i for i in range(len(idx)) if i not in chosen]
    assert all(idx[c] >= idx[r] for c in chosen for r in rest)
    # powers of two keep the scaled indices exact
    assert allocate_by_index([x * 2.0 ** k for x in idx], top_R, total).grants == d.grants


@settings(max_examples=60, deadline=None)
@given(idx=st.lists(st.floats(-10, 10), min_size=2, max_size=10), who=st.integers(0, 9),
       bump=st.floats(0, 5), top_R=st.integers(1, 3))
def test_raising_an_index_keeps_selection(idx, who, bump, top_R):
    who %= len(idx)
    top_R = min(top_R, len(idx))
    before = allocate_by_index(idx, top_R, 9 * top_R).selected()
    raised = list(idx)
    raised[who] += bump
    after = allocate_by_index(raised, top_R, 9 * top_R).selected()
    assert who not in before or who in after


def test_allocation_errors():
    with pytest.raises(ScenarioError):
        allocate_by_index([], 1, 9)
    with pytest.raises(ScenarioError):
        allocate_by_index([1.0, float("nan")], 1, 9)
    with pytest.raises(ScenarioError):
        allocate_by_index([1.0, 2.0], 2, 9)


# violation features -------------------------------------------------------------

def test_violation_update_fixed_point_and_growth():
    assert update_violation_features(0.0, 0.0, 0.0, 0.0, 0.05) == (0.0, 0.0)
    assert update_violation_features(0.0, 0.0, 1.0, 1.0, 0.1) == (0.1, 0.1)
    assert update_violation_features(0.98, 0.5, 1.0, 0.0, 0.05) == (1.0, 0.475)
    with pytest.raises(ValueError):
        update_violation_features(0, 0, 0, 0, 0.0)


def test_violation_update_half_violating_windows():
    # every window has half its TTIs violating: v climbs by eta/2 per window
    eta, v, got = 0.1, 0.0, []
    for _ in range(10):
        v, _ = update_violation_features(v, 0.0, 0.5, 0.0, eta)
        got.append(v)
    assert got == pytest.approx([0.05 * k for k in range(1, 11)], abs=1e-12)


def test_violation_update_alternating_windows():
    # violated windows (fraction 0.5) alternate with clean ones
    eta, v, got = 0.1, 0.0, []
    for w in range(10):
        v, _ = update_violation_features(v, 0.0, 0.5 if w % 2 == 0 else 0.0, 0.0, eta)
        got.append(v)
    expect, x = [], 0.0
    for w in range(10):
        x = x + eta * 0.5 if w % 2 == 0 else x * (1 - eta)
        expect.append(x)
    assert got == pytest.approx(expect, abs=1e-15)
    assert got[:4] == pytest.approx([0.05, 0.045, 0.095, 0.0855])


# baselines ------------------------------------------------------------------------

def test_max_cqi_ties_and_order():
    states = [UEState(100, c) for c in (7, 12, 12, 3)]
    d = baseline_allocate("maxcqi", states, SchedulerHistory(4), 2)
    assert d.selected() == [1, 2]


def test_max_weight_skips_empty_buffers():
    states = [UEState(0, 15), UEState(10, 1), UEState(0, 14)]
    assert baseline_allocate("max_weight", states, SchedulerHistory(3), 1).selected() == [1]


def test_round_robin_cycles():
    hist = SchedulerHistory(4)
    served = [0] * 4
    for t in range(8):
        for i in baseline_allocate("rr", [UEState()] * 4, hist, 1).selected():
            served[i] += 1
    assert served == [2, 2, 2, 2]


def test_prop_fair_prefers_above_average():
    hist = SchedulerHistory(2)
    baseline_allocate("pf", [UEState(1, 8), UEState(1, 8)], hist, 1)
    assert baseline_allocate("pf", [UEState(1, 6), UEState(1, 9)], hist, 1).selected() == [1]


def test_unknown_policy():
    with pytest.raises(ScenarioError):
        canonical_policy("fifo")
    with pytest.raises(ScenarioError):
        baseline_allocate("windex", [UEState()], SchedulerHistory(1), 1)


# oracle index -----------------------------------------------------------------------

def test_oracle_index_components():
    pol = OracleIndexPolicy(default_class("urllc"))
    assert pol.index(UEState(0, 15, 0, 0.0, 0.0)) == pytest.approx(0.0, abs=1e-6)
    # flat queue index: one unit of backlog is as good as many
    assert pol.index(UEState(100, 15)) == pytest.approx(0.2, abs=1e-6)
    assert pol.index(UEState(50_000, 15)) == pytest.approx(0.2, abs=1e-6)
    gap = sum(0.9 ** k for k in range(default_class("urllc").tsls_bound_L + 1))
    s = UEState(100, 15, 10, 1.0, 1.0)
    assert pol.index(s) == pytest.approx(0.2 + 0.2 + 0.6 * gap, abs=1e-6)
    assert pol.index(UEState(100, 7)) < pol.index(UEState(100, 15))


# simulation -----------------------------------------------------------------------------

def test_zero_horizon_empty_report():
    rep = run_scenario(scenario4(horizon=0), "rr")
    assert all(u.samples == 0 for u in rep.ues)
    assert rep.total_violation() == 0.0


def test_single_backlogged_ue_never_starves():
    spec = ScenarioSpec([UEConfig(default_class("urllc", 0.5), ChannelProcess.constant(15))], 9, horizon=500)
    spec.ues[0].spec = spec.ues[0].spec.__class__(
        "urllc", TrafficModel.cbr(20.0), 0.5, spec.ues[0].spec.tsls_bound_L, (0.2, 0.2, 0.6))
    for policy in ("windex", "rr", "pf"):
        rep = run_scenario(spec, policy, seed=1)
        assert rep.ues[0].tsls_violations == 0


def test_model_class_mismatch_fails_before_simulation(tmp_path):
    net = WhittleNetwork(class_id="xr")
    net.save(tmp_path / "m.json")
    spec = ScenarioSpec(ues(2, "embb"), 18, horizon=10)
    for u in spec.ues:
        u.model = "m.json"
    with pytest.raises(ScenarioError, match="trained for xr"):
        run_scenario(spec, "windex", model_dir=tmp_path)
    with pytest.raises(ScenarioError):
        run_scenario(spec, "windex", nets=[Const(1.0, "urllc"), Const(1.0, "embb")])


def test_budget_respected_every_tti():
    trace = []
    spec = scenario4(horizon=300)
    run_scenario(spec, "windex", seed=2, trace=trace)
    prof = spec.rb_profile
    for grants, _ in trace:
        rbs = sum({"high": prof.high, "low": prof.low, "zero": 0}[g] for g in grants)
        assert rbs <= spec.total_rbgs and grants.count("high") == spec.top_R


def test_window_holds_grants():
    trace = []
    run_scenario(scenario4(horizon=40, window=5), "windex", seed=3, trace=trace)
    for w in range(8):
        assert len({trace[t][0] for t in range(5 * w, 5 * w + 5)}) == 1


@pytest.mark.parametrize("policy", ["windex", "prop_fair", "round_robin"])
def test_one_slice_equals_unsliced(policy):
    spec = scenario4(horizon=400)
    one = SliceConfig((Slice("all", ("embb", "urllc", "xr"), spec.total_rbgs, policy),))
    a, b = [], []
    ra = run_scenario(spec, policy, seed=4, trace=a)
    rb = run_scenario(spec, policy, seed=4, slices=one, trace=b)
    assert a == b
    assert [u.__dict__ for u in ra.ues] == [u.__dict__ for u in rb.ues]


def test_slice_validation():
    spec = scenario4()
    with pytest.raises(ScenarioError, match="sum"):
        SliceConfig((Slice("a", ("embb", "urllc", "xr"), 10),)).validate(spec)
    with pytest.raises(ScenarioError, match="no slice"):
        SliceConfig((Slice("a", ("embb", "urllc"), 17),)).validate(spec)
    with pytest.raises(ScenarioError, match="more than one"):
        SliceConfig((Slice("a", ("embb", "xr"), 9), Slice("b", ("xr", "urllc"), 8))).validate(spec)


def test_runs_deterministic_and_threads_agree():
    spec = scenario4(horizon=300)
    a = run_scenario(spec, "windex", seed=5).to_dict()
    assert a == run_scenario(spec, "windex", seed=5).to_dict()
    assert a == run_scenario(spec, "windex", seed=5, threads=2).to_dict()
    assert a != run_scenario(spec, "windex", seed=6).to_dict()


def test_scenario_validation():
    with pytest.raises(ScenarioError):
        ScenarioSpec([], 17)
    with pytest.raises(ScenarioError):
        ScenarioSpec(ues(2), 8)
    with pytest.raises(ScenarioError):
        ScenarioSpec(ues(2), 17, top_R=2)
    with pytest.raises(ScenarioError):
        RBProfile(high=2, low=5)
