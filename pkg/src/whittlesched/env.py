"""Downlink environment at 1 ms TTI granularity.

Per-UE backlog queues fed by service-class traffic generators, CQI processes
(trace replay, reflecting random walk, constant) and a CQI x RB -> bytes map.

Every UE owns its random generator and every TTI consumes the same number of
draws from it whatever the grant, so two schedulers run under one seed see
identical arrivals, channel paths and capacity noise.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

TTI_S = 1e-3
CQI_MIN, CQI_MAX = 1, 15
SERVICE_CLASSES = ("embb", "urllc", "mmtc", "xr")

# spectral efficiency (bits/symbol) of the 4-bit CQI table, CQI 1..15
CQI_EFFICIENCY = (
    0.1523, 0.2344, 0.3770, 0.6016, 0.8770, 1.1758, 1.4766, 1.9141,
    2.4063, 2.7305, 3.3223, 3.9023, 4.5234, 5.1152, 5.5547,
)


def mbps_to_bytes_per_tti(rate_mbps: float) -> float:
    return rate_mbps * 1e6 * TTI_S / 8.0


def bytes_per_tti_to_mbps(nbytes: float) -> float:
    return nbytes * 8.0 / TTI_S / 1e6


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class CapacityMap:
    """Mean and standard deviation of deliverable bytes per RB per TTI."""

    mean_per_rb: tuple[float, ...]
    sigma_per_rb: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean_per_rb) != 15 or len(self.sigma_per_rb) != 15:
            raise ValueError("capacity map needs one entry per CQI 1..15")
        if any(b < a for a, b in zip(self.mean_per_rb, self.mean_per_rb[1:])):
            raise ValueError("capacity map means must be non-decreasing in CQI")

    @classmethod
    def default(cls, peak_mbps: float = 6.5, peak_rbs: int = 9, sigma_frac: float = 0.05) -> "CapacityMap":
        """Integer bytes/RB table scaled so CQI 15 on ``peak_rbs`` RBs gives ~``peak_mbps``."""
        per_rb_peak = round(mbps_to_bytes_per_tti(peak_mbps) / peak_rbs)
        means = tuple(float(round(e / CQI_EFFICIENCY[-1] * per_rb_peak)) for e in CQI_EFFICIENCY)
        return cls(means, tuple(sigma_frac * m for m in means))

    def mean(self, cqi: int, rbs: int) -> float:
        return self.mean_per_rb[cqi - 1] * rbs

    def sigma(self, cqi: int, rbs: int) -> float:
        return self.sigma_per_rb[cqi - 1] * rbs


DEFAULT_CAPACITY = CapacityMap.default()


def capacity(cqi: int, rbs: int, rng: np.random.Generator, cmap: CapacityMap = DEFAULT_CAPACITY) -> int:
    """Bytes deliverable this TTI: floor(max(0, Normal(mean*rbs, sigma*rbs)))."""
    if not CQI_MIN <= cqi <= CQI_MAX:
        raise ValueError(f"cqi {cqi} outside [1, 15]")
    if rbs < 0:
        raise ValueError("rbs must be non-negative")
    z = rng.standard_normal()  # always drawn to keep streams aligned
    if rbs == 0:
        return 0
    return int(max(0.0, cmap.mean(cqi, rbs) + cmap.sigma(cqi, rbs) * z))


@dataclass
class TrafficModel:
    kind: str
    rate_mbps: float
    burst_prob: float | None = None
    burst_bytes: float | None = None
    _carry: float = field(default=0.0, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("constant_bitrate", "bursty"):
            raise ValueError(f"unknown traffic kind {self.kind!r}")
        if self.rate_mbps < 0:
            raise ValueError("rate_mbps must be non-negative")
        if self.kind == "bursty":
            if self.burst_prob is None or not 0 < self.burst_prob <= 1:
                raise ValueError("bursty traffic needs burst_prob in (0, 1]")
            if self.burst_bytes is None:
                self.burst_bytes = mbps_to_bytes_per_tti(self.rate_mbps) / self.burst_prob

    @classmethod
    def cbr(cls, rate_mbps: float) -> "TrafficModel":
        return cls("constant_bitrate", rate_mbps)

    @classmethod
    def bursty(cls, rate_mbps: float, burst_prob: float = 0.01) -> "TrafficModel":
        return cls("bursty", rate_mbps, burst_prob)

    @property
    def mean_bytes_per_tti(self) -> float:
        return mbps_to_bytes_per_tti(self.rate_mbps)

    def fresh(self) -> "TrafficModel":
        return replace(self, _carry=0.0)

    def arrivals(self, rng: np.random.Generator) -> int:
        """Whole bytes arriving this TTI; fractional CBR bytes carry over."""
        u = rng.random()
        if self.kind == "constant_bitrate":
            total = self._carry + self.mean_bytes_per_tti
        else:
            total = self._carry + (self.burst_bytes if u < self.burst_prob else 0.0)
        whole = int(total)
        self._carry = total - whole
        return whole


class ChannelProcess:
    """CQI source: trace replay (wrapping), reflecting random walk, or constant."""

    def __init__(self, source: str, *, cqi: int | None = None, values: Sequence[int] | None = None,
                 cqi_min: int = CQI_MIN, cqi_max: int = CQI_MAX, step_prob: float = 0.5,
                 start: int | None = None, name: str = ""):
        if source not in ("trace", "random_walk", "constant"):
            raise ValueError(f"unknown channel source {source!r}")
        self.source = source
        self.name = name
        self.clamped_count = 0
        self._pos = 0
        if source == "trace":
            if not values:
                raise ValueError("trace channel needs at least one value")
            raw = [int(v) for v in values]
            self.values = [min(CQI_MAX, max(CQI_MIN, v)) for v in raw]
            self.clamped_count = sum(a != b for a, b in zip(raw, self.values))
            self.current_cqi = self.values[0]
        elif source == "random_walk":
            if not CQI_MIN <= cqi_min <= cqi_max <= CQI_MAX:
                raise ValueError("random walk bounds must satisfy 1 <= min <= max <= 15")
            if not 0 <= step_prob <= 1:
                raise ValueError("step_prob must lie in [0, 1]")
            self.cqi_min, self.cqi_max, self.step_prob = cqi_min, cqi_max, step_prob
            mid = (cqi_min + cqi_max) // 2
            self.current_cqi = min(cqi_max, max(cqi_min, mid if start is None else start))
        else:
            if cqi is None or not CQI_MIN <= cqi <= CQI_MAX:
                raise ValueError("constant channel needs cqi in [1, 15]")
            self.current_cqi = int(cqi)

    @classmethod
    def constant(cls, cqi: int) -> "ChannelProcess":
        return cls("constant", cqi=cqi)

    @classmethod
    def random_walk(cls, cqi_min: int = CQI_MIN, cqi_max: int = CQI_MAX, step_prob: float = 0.5,
                    start: int | None = None) -> "ChannelProcess":
        return cls("random_walk", cqi_min=cqi_min, cqi_max=cqi_max, step_prob=step_prob, start=start)

    @classmethod
    def trace(cls, values: Sequence[int], name: str = "") -> "ChannelProcess":
        return cls("trace", values=values, name=name)

    def copy(self) -> "ChannelProcess":
        new = object.__new__(ChannelProcess)
        new.__dict__.update(self.__dict__)
        return new

    def advance(self, rng: np.random.Generator) -> int:
        u = rng.random()
        if self.source == "trace":
            self._pos = (self._pos + 1) % len(self.values)
            self.current_cqi = self.values[self._pos]
        elif self.source == "random_walk":
            if u < self.step_prob:
                step = -1 if u < 0.5 * self.step_prob else 1
                nxt = self.current_cqi + step
                if nxt < self.cqi_min or nxt > self.cqi_max:
                    nxt = self.current_cqi - step
                self.current_cqi = min(self.cqi_max, max(self.cqi_min, nxt))
        return self.current_cqi


def _read_trace_column(path: Path, column: str) -> list[int]:
    if not path.is_file():
        raise TraceError(f"{path}: no such trace file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceError(f"{path}: empty trace file") from None
        header = [h.strip() for h in header]
        if column not in header:
            raise TraceError(f"{path}: column {column!r} not in header {header}")
        col = header.index(column)
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TraceError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            cell = row[col].strip()
            try:
                out.append(int(cell))
            except ValueError:
                raise TraceError(f"{path}:{lineno}: CQI {cell!r} is not an integer") from None
    if not out:
        raise TraceError(f"{path}: trace has no rows")
    return out


def load_trace(path: str | Path, column: str) -> ChannelProcess:
    """Replay one column of a CSV trace (header of UE names, one CQI row per TTI)."""
    path = Path(path)
    ch = ChannelProcess.trace(_read_trace_column(path, column), name=f"{path.name}:{column}")
    if ch.clamped_count:
        log.warning("%s: %d CQI values clamped to [1, 15]", ch.name, ch.clamped_count)
    return ch


def load_trace_mix(paths: Sequence[str | Path], column: str) -> ChannelProcess:
    """Concatenate the same column of several traces into one replay."""
    values: list[int] = []
    for p in paths:
        values.extend(_read_trace_column(Path(p), column))
    ch = ChannelProcess.trace(values, name="+".join(Path(p).name for p in paths))
    if ch.clamped_count:
        log.warning("%s: %d CQI values clamped to [1, 15]", ch.name, ch.clamped_count)
    return ch


@dataclass(frozen=True)
class ServiceClassSpec:
    class_id: str
    traffic: TrafficModel
    tpt_bound_B: float
    tsls_bound_L: int
    weights: tuple[float, float, float]
    learning_rate: float = 0.1
    max_buffer_bytes: float = 50_000.0

    def __post_init__(self):
        if self.class_id not in SERVICE_CLASSES:
            raise ValueError(f"unknown service class {self.class_id!r}")
        if not 0.0 <= self.tpt_bound_B <= 1.0:
            raise ValueError("tpt_bound_B must lie in [0, 1]")
        if self.tsls_bound_L < 1:
            raise ValueError("tsls_bound_L must be at least 1")
        if len(self.weights) != 3 or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights {self.weights} must be three reals summing to 1")


def default_class(class_id: str, tpt_bound_B: float = 0.9) -> ServiceClassSpec:
    """Per-class defaults: bitrates, reward weights and learning rates."""
    table = {
        "embb": (TrafficModel.cbr(5.8), 20, (0.2, 0.6, 0.2), 0.1),
        "xr": (TrafficModel.cbr(6.2), 4, (0.2, 0.6, 0.2), 0.1),
        "urllc": (TrafficModel.bursty(2.0, 0.01), 4, (0.2, 0.2, 0.6), 0.75),
        "mmtc": (TrafficModel.bursty(3.5, 0.01), 50, (0.2, 0.2, 0.6), 0.25),
    }
    if class_id not in table:
        raise ValueError(f"unknown service class {class_id!r}")
    traffic, L, weights, lr = table[class_id]
    return ServiceClassSpec(class_id, traffic, tpt_bound_B, L, weights, lr)


@dataclass(frozen=True)
class UEState:
    """Index-network input: backlog, channel, time since last high grant, violation features."""

    buffer_bytes: int = 0
    cqi: int = CQI_MAX
    tsls: int = 0
    v_tpt: float = 0.0
    v_tsls: float = 0.0

    def __post_init__(self):
        if self.buffer_bytes < 0 or self.tsls < 0:
            raise ValueError("buffer and tsls must be non-negative")
        if not CQI_MIN <= self.cqi <= CQI_MAX:
            raise ValueError(f"cqi {self.cqi} outside [1, 15]")
        for name in ("v_tpt", "v_tsls"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, float(min(1.0, max(0.0, v))))

    def as_vector(self) -> np.ndarray:
        return np.array([self.buffer_bytes, self.cqi, self.tsls, self.v_tpt, self.v_tsls], dtype=float)


@dataclass(frozen=True)
class StepResult:
    state: UEState
    served_bytes: int
    realized_tpt_mbps: float
    arrivals: int
    capacity_bytes: int


def step_ue(ue: UEState, channel: ChannelProcess, traffic: TrafficModel, rbs_granted: int,
            rng: np.random.Generator, *, high_rbs: int = 9,
            cmap: CapacityMap = DEFAULT_CAPACITY) -> StepResult:
    """Advance one UE by one TTI.

    Service uses the CQI at the start of the TTI; arrivals land after service;
    TSLS resets only on a high grant (``rbs_granted >= high_rbs``).
    Draw order per TTI: capacity noise, arrival, channel step.
    """
    rbs = max(0, int(rbs_granted))
    cap = capacity(ue.cqi, rbs, rng, cmap)
    served = min(ue.buffer_bytes, cap)
    arrived = traffic.arrivals(rng)
    tsls = 0 if rbs >= high_rbs > 0 else ue.tsls + 1
    cqi = channel.advance(rng)
    nxt = replace(ue, buffer_bytes=ue.buffer_bytes - served + arrived, cqi=cqi, tsls=tsls)
    return StepResult(nxt, served, bytes_per_tti_to_mbps(served), arrived, cap)
