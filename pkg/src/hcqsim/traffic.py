"""Traffic entities, the two-stage flow classifier, and seeded trace generation.

Flows run between five topology zones. Stage 1 buckets a flow into zone
class A (internal: local servers / private cloud / network core), B (touches
the public cloud) or C (everything else). Stage 2 attaches the application
kind (web / database / file / service) for classes A and B only.

Synthetic traces come from independent on/off-modulated Poisson sources,
one per (zone class, app kind) pair, each driven by its own seeded
substream so traces are bit-identical for identical inputs.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional


class Zone(Enum):
    LOCAL_SERVER = "LocalServer"
    PRIVATE_CLOUD = "PrivateCloud"
    NETWORK_CORE = "NetworkCore"
    PUBLIC_CLOUD = "PublicCloud"
    INTERNET = "Internet"


class ZoneClass(Enum):
    A = "A"
    B = "B"
    C = "C"


class AppKind(Enum):
    WEB = "Web"
    DATABASE = "Database"
    FILE = "File"
    SERVICE = "Service"


# Zones whose mutual traffic is class A.
INTERNAL_ZONES = frozenset({Zone.LOCAL_SERVER, Zone.PRIVATE_CLOUD, Zone.NETWORK_CORE})

# Fixed class order used for deterministic tie-breaking everywhere:
# A-Database, A-Web, A-File, A-Service, then B same kind order, then C.
_KIND_ORDER = (AppKind.DATABASE, AppKind.WEB, AppKind.FILE, AppKind.SERVICE)
_CLASS_ORDER = (ZoneClass.A, ZoneClass.B, ZoneClass.C)


@dataclass(frozen=True)
class FlowEvent:
    """One unit of offered traffic."""

    id: int
    arrival_time: float
    size: int
    src: Zone
    dst: Zone
    app: AppKind

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"flow size must be >= 1 byte, got {self.size}")
        if not (self.arrival_time >= 0.0 and math.isfinite(self.arrival_time)):
            raise ValueError(f"arrival_time must be finite and >= 0, got {self.arrival_time}")


@dataclass(frozen=True, order=False)
class TrafficClassLabel:
    """(zone class, app kind) pair from the two-stage classifier.

    app_kind is present exactly when zone_class is A or B; class C carries
    no application kind.
    """

    zone_class: ZoneClass
    app_kind: Optional[AppKind] = None

    def __post_init__(self):
        has_kind = self.app_kind is not None
        if self.zone_class is ZoneClass.C and has_kind:
            raise ValueError("class C traffic carries no app kind")
        if self.zone_class is not ZoneClass.C and not has_kind:
            raise ValueError(f"class {self.zone_class.value} traffic requires an app kind")

    def sort_key(self) -> tuple[int, int]:
        c = _CLASS_ORDER.index(self.zone_class)
        k = _KIND_ORDER.index(self.app_kind) if self.app_kind is not None else 0
        return (c, k)

    def __str__(self) -> str:
        if self.app_kind is None:
            return self.zone_class.value
        return f"{self.zone_class.value}:{self.app_kind.value}"

    @staticmethod
    def parse(text: str) -> "TrafficClassLabel":
        if ":" in text:
            cls, kind = text.split(":", 1)
            return TrafficClassLabel(ZoneClass(cls), AppKind(kind))
        return TrafficClassLabel(ZoneClass(text))


def canonical_class_order(labels) -> tuple[TrafficClassLabel, ...]:
    """Labels sorted into the fixed deterministic class order."""
    return tuple(sorted(labels, key=lambda lab: lab.sort_key()))


def classify_stage1(flow: FlowEvent) -> ZoneClass:
    """Zone-membership classification: A internal, B public-cloud, C other."""
    if flow.src in INTERNAL_ZONES and flow.dst in INTERNAL_ZONES:
        return ZoneClass.A
    if flow.src is Zone.PUBLIC_CLOUD or flow.dst is Zone.PUBLIC_CLOUD:
        return ZoneClass.B
    return ZoneClass.C


def classify_stage2(flow: FlowEvent, stage1: ZoneClass) -> TrafficClassLabel:
    """Attach the application kind for classes A/B; class C stays bare."""
    if stage1 is ZoneClass.C:
        return TrafficClassLabel(ZoneClass.C)
    return TrafficClassLabel(stage1, flow.app)


def classify(flow: FlowEvent) -> TrafficClassLabel:
    return classify_stage2(flow, classify_stage1(flow))


@dataclass(frozen=True)
class SizeDistribution:
    """Flow-size distribution descriptor (bytes).

    Families: fixed (size_bytes), uniform (low/high), exponential
    (mean_bytes), lognormal (mean_bytes + log-space sigma).
    """

    family: str
    size_bytes: float = 0.0
    low: float = 0.0
    high: float = 0.0
    mean_bytes: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.family == "fixed":
            if self.size_bytes <= 0:
                raise ValueError("fixed size distribution requires size_bytes > 0")
        elif self.family == "uniform":
            if not (0 < self.low <= self.high):
                raise ValueError("uniform size distribution requires 0 < low <= high")
        elif self.family == "exponential":
            if self.mean_bytes <= 0:
                raise ValueError("exponential size distribution requires mean_bytes > 0")
        elif self.family == "lognormal":
            if self.mean_bytes <= 0 or self.sigma <= 0:
                raise ValueError("lognormal size distribution requires mean_bytes > 0 and sigma > 0")
        else:
            raise ValueError(f"unknown size distribution family {self.family!r}")

    def mean(self) -> float:
        if self.family == "fixed":
            return self.size_bytes
        if self.family == "uniform":
            return 0.5 * (self.low + self.high)
        return self.mean_bytes

    def sample(self, rng: random.Random) -> int:
        if self.family == "fixed":
            raw = self.size_bytes
        elif self.family == "uniform":
            raw = rng.uniform(self.low, self.high)
        elif self.family == "exponential":
            raw = rng.expovariate(1.0 / self.mean_bytes)
        else:  # lognormal with the requested mean
            mu = math.log(self.mean_bytes) - 0.5 * self.sigma * self.sigma
            raw = rng.lognormvariate(mu, self.sigma)
        return max(1, int(round(raw)))


# Representative endpoint pairs per zone class; every pair classifies back
# to its class under classify_stage1.
_ZONE_PAIRS = {
    ZoneClass.A: (
        (Zone.LOCAL_SERVER, Zone.PRIVATE_CLOUD),
        (Zone.PRIVATE_CLOUD, Zone.LOCAL_SERVER),
        (Zone.LOCAL_SERVER, Zone.NETWORK_CORE),
        (Zone.PRIVATE_CLOUD, Zone.NETWORK_CORE),
    ),
    ZoneClass.B: (
        (Zone.PRIVATE_CLOUD, Zone.PUBLIC_CLOUD),
        (Zone.PUBLIC_CLOUD, Zone.PRIVATE_CLOUD),
        (Zone.LOCAL_SERVER, Zone.PUBLIC_CLOUD),
        (Zone.PUBLIC_CLOUD, Zone.LOCAL_SERVER),
    ),
    ZoneClass.C: (
        (Zone.INTERNET, Zone.INTERNET),
        (Zone.INTERNET, Zone.LOCAL_SERVER),
        (Zone.LOCAL_SERVER, Zone.INTERNET),
    ),
}


@dataclass(frozen=True)
class ClassProfile:
    """Arrival process for one traffic class.

    rate_per_s is the long-run mean arrival rate; with on/off modulation the
    on-period rate is scaled up by (burst_s + idle_s) / burst_s so the
    long-run mean is preserved. idle_s = 0 means an unmodulated Poisson
    source. Burst durations are exponential with mean burst_s, or exactly
    burst_s when burst_dist is "fixed" (periodic bulk transfers); idle gaps
    are always exponential.
    """

    label: TrafficClassLabel
    rate_per_s: float
    size_dist: SizeDistribution
    burst_s: float = 1.0
    idle_s: float = 0.0
    burst_dist: str = "exponential"

    def __post_init__(self):
        if self.rate_per_s <= 0:
            raise ValueError(f"rate_per_s must be > 0, got {self.rate_per_s}")
        if self.burst_s <= 0:
            raise ValueError(f"burst_s must be > 0, got {self.burst_s}")
        if self.idle_s < 0:
            raise ValueError(f"idle_s must be >= 0, got {self.idle_s}")
        if self.burst_dist not in ("exponential", "fixed"):
            raise ValueError(f"burst_dist must be exponential or fixed, got {self.burst_dist!r}")

    def offered_bytes_per_s(self) -> float:
        return self.rate_per_s * self.size_dist.mean()


@dataclass(frozen=True)
class TrafficProfile:
    classes: tuple[ClassProfile, ...]

    def __post_init__(self):
        if not self.classes:
            raise ValueError("traffic profile needs at least one class")
        labels = [cp.label for cp in self.classes]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate class labels in traffic profile")

    def labels(self) -> tuple[TrafficClassLabel, ...]:
        return canonical_class_order(cp.label for cp in self.classes)


def _class_arrivals(cp: ClassProfile, duration_s: float, rng: random.Random):
    """Yield (time, size, src, dst, app) tuples for one class, time-ordered."""
    pairs = _ZONE_PAIRS[cp.label.zone_class]
    kinds = tuple(AppKind)

    def emit(t):
        size = cp.size_dist.sample(rng)
        src, dst = pairs[rng.randrange(len(pairs))]
        app = cp.label.app_kind if cp.label.app_kind is not None else kinds[rng.randrange(len(kinds))]
        return (t, size, src, dst, app)

    out = []
    if cp.idle_s == 0:
        t = rng.expovariate(cp.rate_per_s)
        while t < duration_s:
            out.append(emit(t))
            t += rng.expovariate(cp.rate_per_s)
        return out

    duty = cp.burst_s / (cp.burst_s + cp.idle_s)
    on_rate = cp.rate_per_s / duty
    t = 0.0
    on = True
    while t < duration_s:
        if on:
            seg = cp.burst_s if cp.burst_dist == "fixed" else rng.expovariate(1.0 / cp.burst_s)
        else:
            seg = rng.expovariate(1.0 / cp.idle_s)
        seg_end = min(t + seg, duration_s)
        if on:
            tt = t + rng.expovariate(on_rate)
            while tt < seg_end:
                out.append(emit(tt))
                tt += rng.expovariate(on_rate)
        t = seg_end
        on = not on
    return out


def generate_trace(profile: TrafficProfile, duration_s: float, seed: int) -> list[FlowEvent]:
    """Generate a time-sorted synthetic trace.

    Each class draws from its own substream derived from (seed, label), so
    adding a class never perturbs the others. Identical inputs produce a
    bit-identical trace.
    """
    if duration_s <= 0:
        raise ValueError(f"duration must be > 0, got {duration_s}")
    merged = []
    for cp in profile.classes:
        rng = random.Random(f"{seed}/{cp.label}")
        for tup in _class_arrivals(cp, duration_s, rng):
            merged.append((tup[0], cp.label.sort_key(), tup))
    merged.sort(key=lambda rec: (rec[0], rec[1]))
    flows = []
    for fid, (_, _, (t, size, src, dst, app)) in enumerate(merged):
        flows.append(FlowEvent(id=fid, arrival_time=t, size=size, src=src, dst=dst, app=app))
    return flows


TRACE_CSV_HEADER = ["id", "arrival_time", "size", "src", "dst", "app"]


def write_trace_csv(flows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_CSV_HEADER)
        for f in flows:
            w.writerow([f.id, "%.17g" % f.arrival_time, f.size, f.src.value, f.dst.value, f.app.value])


def read_trace_csv(path) -> list[FlowEvent]:
    flows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != TRACE_CSV_HEADER:
            raise ValueError(f"unexpected trace header {header!r} in {path}")
        for row in r:
            flows.append(
                FlowEvent(
                    id=int(row[0]),
                    arrival_time=float(row[1]),
                    size=int(row[2]),
                    src=Zone(row[3]),
                    dst=Zone(row[4]),
                    app=AppKind(row[5]),
                )
            )
    return flows
