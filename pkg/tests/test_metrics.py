import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whittlesched.metrics import (
    CSV_COLUMNS, MetricsRecorder, MetricsReport, ReportIOError, UEMetrics, export, load_report, merge,
)


def test_tsls_at_bound_is_not_a_violation():
    rec = MetricsRecorder(["urllc"], 3)
    for t, tsls in enumerate((4, 4, 5)):
        rec.record(t, 0, 1.0, tsls, 0.5, 4)
    u = rec.finalize().ues[0]
    assert u.tsls_violations == 1 and u.max_tsls == 5


def test_tpt_threshold_is_strict():
    rec = MetricsRecorder(["embb"], 2)
    rec.record(0, 0, 2.0, 0, 2.0, 4)
    rec.record(1, 0, 1.999, 0, 2.0, 4)
    assert rec.finalize().ues[0].tpt_violations == 1


def test_fractions():
    rec = MetricsRecorder(["xr", "xr"], 100)
    for t in range(100):
        rec.record(t, 0, 0.0, 9, 1.0, 4)
        rec.record(t, 1, 0.0 if t < 37 else 5.0, 0, 1.0, 4)
    rep = rec.finalize()
    assert rep.ues[0].tpt_violation_frac == 1.0 and rep.ues[0].tsls_violation_frac == 1.0
    assert rep.ues[1].tpt_violation_frac == 0.37
    assert rep.classes["xr"]["tpt_violation_frac"] == pytest.approx(0.685)
    assert rep.total_violation() == pytest.approx(2.37)


def test_empty_report():
    rep = MetricsRecorder(["embb", "urllc"], 0).finalize()
    assert rep.total_violation() == 0.0
    assert all(u.mean_tpt_mbps == 0.0 for u in rep.ues)
    with pytest.raises(ValueError):
        MetricsRecorder(["embb"], 0).record(0, 0, 1.0, 0, 1.0, 4)


def sample_report():
    rec = MetricsRecorder(["embb", "urllc", "xr"], 50, "windex", 3)
    rng = np.random.default_rng(0)
    for t in range(50):
        for i in range(3):
            rec.record(t, i, float(rng.uniform(0, 7)), int(rng.integers(0, 8)), 3.3, 4)
    return rec.finalize()


def test_export_import_export_byte_identical(tmp_path):
    rep = sample_report()
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    export(rep, a)
    export(load_report(a), b)
    assert a.read_bytes() == b.read_bytes()
    export(rep, tmp_path / "a.csv", "csv")
    export(load_report(a), tmp_path / "b.csv", "csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_golden_csv():
    rep = MetricsReport("rr", 0, 4, [UEMetrics(0, "embb", 4, 1, 2, 10.0, 6), UEMetrics(1, "xr", 4, 0, 0, 25.0, 1)])
    assert rep.to_csv_text() == (
        ",".join(CSV_COLUMNS) + "\n"
        "0,embb,4,1,2,0.25,0.5,2.5,6\n"
        "1,xr,4,0,0,0.0,0.0,6.25,1\n"
    )


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), h1=st.integers(0, 40), h2=st.integers(0, 40))
def test_merge_equals_concatenated_stream(seed, h1, h2):
    rng = np.random.default_rng(seed)
    rows = [(float(rng.uniform(0, 4)), int(rng.integers(0, 7))) for _ in range(h1 + h2)]
    whole = MetricsRecorder(["mmtc"], h1 + h2)
    parts = [MetricsRecorder(["mmtc"], h1), MetricsRecorder(["mmtc"], h2)]
    for t, (tpt, tsls) in enumerate(rows):
        whole.record(t, 0, tpt, tsls, 2.0, 4)
        if t < h1:
            parts[0].record(t, 0, tpt, tsls, 2.0, 4)
        else:
            parts[1].record(t - h1, 0, tpt, tsls, 2.0, 4)
    merged = merge([p.finalize() for p in parts])
    w = whole.finalize()
    m, u = merged.ues[0], w.ues[0]
    assert (m.samples, m.tpt_violations, m.tsls_violations, m.max_tsls) == \
        (u.samples, u.tpt_violations, u.tsls_violations, u.max_tsls)
    assert m.tpt_sum_mbps == pytest.approx(u.tpt_sum_mbps)
    assert merged.horizon == w.horizon


def test_merge_rejects_mismatched_ues():
    with pytest.raises(ValueError):
        merge([MetricsRecorder(["embb"], 1).finalize(), MetricsRecorder(["xr"], 1).finalize()])
    with pytest.raises(ValueError):
        merge([])


def test_bad_schema_and_io_errors(tmp_path):
    d = sample_report().to_dict()
    d["schema_version"] = 2
    with pytest.raises(ValueError, match="schema"):
        MetricsReport.from_dict(d)
    missing = tmp_path / "nope" / "r.json"
    with pytest.raises(ReportIOError, match="nope"):
        export(sample_report(), missing)
    with pytest.raises(ReportIOError, match="nope"):
        load_report(missing)
    with pytest.raises(ValueError):
        export(sample_report(), tmp_path / "r.x", "xml")
