"""Per-UE violation accounting and report serialization.

A TTI is a throughput violation when the realized rate is strictly below the
UE's threshold for that TTI, and a TSLS violation when tsls > L (strict).
Fractions are violation counts over accounted TTIs; counts are stored so that
reports merge exactly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "ue_id", "class_id", "samples", "tpt_violations", "tsls_violations",
    "tpt_violation_frac", "tsls_violation_frac", "mean_tpt_mbps", "max_tsls",
)


class ReportIOError(OSError):
    pass


@dataclass
class UEMetrics:
    ue_id: int
    class_id: str
    samples: int = 0
    tpt_violations: int = 0
    tsls_violations: int = 0
    tpt_sum_mbps: float = 0.0
    max_tsls: int = 0

    @property
    def tpt_violation_frac(self) -> float:
        return self.tpt_violations / self.samples if self.samples else 0.0

    @property
    def tsls_violation_frac(self) -> float:
        return self.tsls_violations / self.samples if self.samples else 0.0

    @property
    def mean_tpt_mbps(self) -> float:
        return self.tpt_sum_mbps / self.samples if self.samples else 0.0


@dataclass
class MetricsReport:
    policy: str
    seed: int | None
    horizon: int
    ues: list[UEMetrics] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def classes(self) -> dict[str, dict[str, float]]:
        """Arithmetic means of member-UE statistics per service class."""
        groups: dict[str, list[UEMetrics]] = {}
        for u in self.ues:
            groups.setdefault(u.class_id, []).append(u)
        out = {}
        for cid, members in sorted(groups.items()):
            n = len(members)
            out[cid] = {
                "n_ues": n,
                "tpt_violation_frac": sum(u.tpt_violation_frac for u in members) / n,
                "tsls_violation_frac": sum(u.tsls_violation_frac for u in members) / n,
                "mean_tpt_mbps": sum(u.mean_tpt_mbps for u in members) / n,
            }
        return out

    def total_violation(self) -> float:
        """Sum over UEs of throughput plus TSLS violation fractions."""
        return sum(u.tpt_violation_frac + u.tsls_violation_frac for u in self.ues)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "policy": self.policy,
            "seed": self.seed,
            "horizon": self.horizon,
            "ues": [asdict(u) for u in self.ues],
            "classes": self.classes,
            "total_violation": self.total_violation(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(d["policy"], d["seed"], d["horizon"], [UEMetrics(**u) for u in d["ues"]])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for u in self.ues:
            w.writerow([u.ue_id, u.class_id, u.samples, u.tpt_violations, u.tsls_violations,
                        repr(u.tpt_violation_frac), repr(u.tsls_violation_frac),
                        repr(u.mean_tpt_mbps), u.max_tsls])
        return buf.getvalue()


class MetricsRecorder:
    def __init__(self, class_ids: list[str], horizon: int, policy: str = "", seed: int | None = None):
        self.horizon = horizon
        self.policy = policy
        self.seed = seed
        self.ues = [UEMetrics(i, c) for i, c in enumerate(class_ids)]

    def record(self, tti: int, ue_id: int, realized_tpt: float, tsls: int,
               tpt_threshold: float, tsls_bound: int) -> None:
        if not 0 <= tti < self.horizon:
            raise ValueError(f"tti {tti} outside horizon {self.horizon}")
        u = self.ues[ue_id]
        u.samples += 1
        u.tpt_sum_mbps += realized_tpt
        if realized_tpt < tpt_threshold:
            u.tpt_violations += 1
        if tsls > tsls_bound:
            u.tsls_violations += 1
        u.max_tsls = max(u.max_tsls, tsls)

    def finalize(self) -> MetricsReport:
        return MetricsReport(self.policy, self.seed, self.horizon,
                             [UEMetrics(**asdict(u)) for u in self.ues])


def merge(reports: list[MetricsReport]) -> MetricsReport:
    """Combine runs of the same UE set (e.g. different seeds) by summing counts."""
    if not reports:
        raise ValueError("nothing to merge")
    base = reports[0]
    ues = [UEMetrics(u.ue_id, u.class_id) for u in base.ues]
    for r in reports:
        if [u.class_id for u in r.ues] != [u.class_id for u in ues]:
            raise ValueError("reports cover different UE sets")
        for acc, u in zip(ues, r.ues):
            acc.samples += u.samples
            acc.tpt_violations += u.tpt_violations
            acc.tsls_violations += u.tsls_violations
            acc.tpt_sum_mbps += u.tpt_sum_mbps
            acc.max_tsls = max(acc.max_tsls, u.max_tsls)
    return MetricsReport(base.policy, None, sum(r.horizon for r in reports), ues)


def export(report: MetricsReport, path: str | Path, format: str = "structured") -> None:
    path = Path(path)
    if format == "structured":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    elif format == "csv":
        text = report.to_csv_text()
    else:
        raise ValueError(f"unknown export format {format!r}")
    try:
        path.write_text(text)
    except OSError as e:
        raise ReportIOError(f"cannot write report to {path}: {e}") from e


def load_report(path: str | Path) -> MetricsReport:
    path = Path(path)
    try:
        return MetricsReport.from_dict(json.loads(path.read_text()))
    except OSError as e:
        raise ReportIOError(f"cannot read report {path}: {e}") from e
