"""Event-driven fluid simulation of one bottleneck link.

The link serves flows byte-by-byte at its full rate, one flow at a time.
In closed mode each traffic class has its own drop-tail queue and a
controller re-issues bandwidth shares and a strict priority order at every
epoch boundary; a class may move at most share * capacity * epoch bytes per
epoch. In open mode all flows share a single drop-tail FIFO with no shares
or priorities.

All byte counters are integers, so the conservation identity
arrived == delivered + dropped + queued holds exactly per class. Service
interrupted mid-flow rounds down to whole bytes (the sub-byte remainder
stays queued). Event ties are broken by kind (epoch boundary, then service
completion, then flow arrival, then query step), then insertion order.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Optional

import numpy as np

from .control import ControlBounds, ControlDecision, MpcController
from .traffic import (
    AppKind,
    FlowEvent,
    TrafficClassLabel,
    ZoneClass,
    canonical_class_order,
    classify,
)

# Control messages ride the link as class-A service traffic.
CONTROL_LABEL = TrafficClassLabel(ZoneClass.A, AppKind.SERVICE)


class SimulationError(RuntimeError):
    pass


class FeedbackMode(Enum):
    OPEN = "open"
    CLOSED = "closed"


class EventKind(IntEnum):
    EPOCH_BOUNDARY = 0
    SERVICE_COMPLETION = 1
    FLOW_ARRIVAL = 2
    QUERY_STEP = 3


@dataclass(frozen=True)
class LinkSpec:
    capacity_bps: float
    queue_capacity_bytes: int
    propagation_delay_s: float = 0.0
    epoch_s: float = 1.0

    def __post_init__(self):
        if self.capacity_bps <= 0:
            raise ValueError(f"capacity_bps must be > 0, got {self.capacity_bps}")
        if self.queue_capacity_bytes <= 0:
            raise ValueError(f"queue_capacity_bytes must be > 0, got {self.queue_capacity_bytes}")
        if self.propagation_delay_s < 0:
            raise ValueError(f"propagation_delay_s must be >= 0, got {self.propagation_delay_s}")
        if self.epoch_s <= 0:
            raise ValueError(f"epoch_s must be > 0, got {self.epoch_s}")

    @property
    def byte_rate(self) -> float:
        return self.capacity_bps / 8.0

    @property
    def bytes_per_epoch(self) -> float:
        return self.byte_rate * self.epoch_s


@dataclass
class ClassCounters:
    """Cumulative per-class byte accounting (all integers)."""

    arrived: int = 0
    delivered: int = 0
    dropped: int = 0
    queued: int = 0
    control_arrived: int = 0
    control_delivered: int = 0

    def conserved(self) -> bool:
        return self.arrived == self.delivered + self.dropped + self.queued


@dataclass
class EpochRecord:
    epoch: int
    label: TrafficClassLabel
    arrived: int
    delivered: int
    dropped: int
    queued: int
    share: Optional[float]
    priority_rank: Optional[int]
    utilization: float


EPOCH_CSV_HEADER = [
    "epoch",
    "class",
    "arrived",
    "delivered",
    "dropped",
    "queued",
    "share",
    "priority_rank",
    "utilization",
]

EVENT_CSV_HEADER = ["time", "event", "class", "flow_id", "bytes"]


@dataclass
class SimMetrics:
    """Everything one run produced, sufficient to rebuild every report."""

    scenario_id: str
    mode: FeedbackMode
    seed: int
    link: LinkSpec
    classes: tuple[TrafficClassLabel, ...]
    epochs: list[EpochRecord] = field(default_factory=list)
    totals: dict = field(default_factory=dict)
    latencies_s: dict = field(default_factory=dict)
    link_utilization: list[float] = field(default_factory=list)
    flows_offered: int = 0
    flows_completed: int = 0
    control_bytes_injected: int = 0
    failed_flow_ids: list[int] = field(default_factory=list)
    max_flow_size: int = 0
    state_history: list = field(default_factory=list)

    @property
    def n_epochs(self) -> int:
        return len(self.link_utilization)

    def arrived_bytes(self) -> int:
        return sum(c.arrived for c in self.totals.values())

    def delivered_bytes(self) -> int:
        return sum(c.delivered for c in self.totals.values())

    def dropped_bytes(self) -> int:
        return sum(c.dropped for c in self.totals.values())

    def drop_fraction(self) -> float:
        arrived = self.arrived_bytes()
        return self.dropped_bytes() / arrived if arrived else 0.0

    def assert_conservation(self) -> None:
        for label, c in self.totals.items():
            if not c.conserved():
                raise SimulationError(
                    f"byte conservation violated for {label}: arrived={c.arrived} "
                    f"delivered={c.delivered} dropped={c.dropped} queued={c.queued}"
                )

    def write_epochs_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPOCH_CSV_HEADER)
            for r in self.epochs:
                w.writerow(
                    [
                        r.epoch,
                        str(r.label),
                        r.arrived,
                        r.delivered,
                        r.dropped,
                        r.queued,
                        "" if r.share is None else "%.9g" % r.share,
                        "" if r.priority_rank is None else r.priority_rank,
                        "%.9g" % r.utilization,
                    ]
                )


def observe_state(q, link: LinkSpec, last_epoch_delivered) -> np.ndarray:
    """State vector: per-class backlog fractions, then per-class utilization
    of the just-ended epoch. Iteration order is the mapping's (canonical)
    key order."""
    per_epoch = link.bytes_per_epoch
    backlog = [q[label].queued / link.queue_capacity_bytes for label in q]
    util = [last_epoch_delivered[label] / per_epoch for label in q]
    return np.array(backlog + util)


def feedback_overhead(mode: FeedbackMode, message_bytes: int, epochs: int) -> int:
    """Control-plane bytes injected over `epochs` epochs; open mode has no
    control traffic."""
    if mode is FeedbackMode.OPEN:
        return 0
    return message_bytes * epochs


class _QueuedFlow:
    __slots__ = ("flow_id", "label", "remaining", "accepted", "arrival", "control", "callback")

    def __init__(self, flow_id, label, accepted, arrival, control, callback):
        self.flow_id = flow_id
        self.label = label
        self.remaining = accepted
        self.accepted = accepted
        self.arrival = arrival
        self.control = control
        self.callback = callback


class _ServicePlan:
    __slots__ = ("start", "end", "label", "flow", "limit")

    def __init__(self, start, end, label, flow, limit):
        self.start = start
        self.end = end
        self.label = label
        self.flow = flow
        self.limit = limit


_OPEN_QUEUE = "fifo"


class LinkSimulator:
    """Deterministic single-link simulator; see module docstring."""

    def __init__(
        self,
        link: LinkSpec,
        classes,
        mode: FeedbackMode,
        controller=None,
        scenario_id: str = "run",
        seed: int = 0,
        control_message_bytes: int = 0,
        debug: bool = False,
    ):
        self.link = link
        self.classes = canonical_class_order(classes)
        if not self.classes:
            raise ValueError("simulator needs at least one traffic class")
        self.mode = mode
        self.controller = controller
        self.control_message_bytes = int(control_message_bytes)
        if mode is FeedbackMode.CLOSED:
            if controller is None:
                raise ValueError("closed mode requires a controller")
            m = getattr(controller, "m", None)
            if m is not None and m != len(self.classes):
                raise ValueError(
                    f"controller emits {m} shares but the run has {len(self.classes)} classes"
                )
            if self.control_message_bytes > 0 and CONTROL_LABEL not in self.classes:
                raise ValueError(f"control overhead needs {CONTROL_LABEL} among the classes")
        elif controller is not None:
            raise ValueError("open mode takes no controller")
        self.debug = debug
        self.event_log: list[tuple] = []

        self.now = 0.0
        self._heap: list[tuple] = []
        self._seq = 0
        self._pending_external = 0
        self._plan: Optional[_ServicePlan] = None

        self.counters = {label: ClassCounters() for label in self.classes}
        self._queues = (
            {_OPEN_QUEUE: deque()}
            if mode is FeedbackMode.OPEN
            else {label: deque() for label in self.classes}
        )
        self._queued_bytes = {key: 0 for key in self._queues}
        self._budget = {label: 0 for label in self.classes}
        self._priority = list(self.classes)
        self._rank = {label: i for i, label in enumerate(self.classes)}
        self._shares: Optional[tuple] = None

        self._epoch_arrived = {label: 0 for label in self.classes}
        self._epoch_delivered = {label: 0 for label in self.classes}
        self._epoch_dropped = {label: 0 for label in self.classes}
        self._last_epoch_delivered = {label: 0 for label in self.classes}

        self._inject_id = -1

        self.metrics = SimMetrics(
            scenario_id=scenario_id,
            mode=mode,
            seed=seed,
            link=link,
            classes=self.classes,
            totals=self.counters,
            latencies_s={label: [] for label in self.classes},
        )

    # -- event plumbing ----------------------------------------------------

    def _push(self, time: float, kind: EventKind, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, int(kind), self._seq, payload))
        if kind in (EventKind.FLOW_ARRIVAL, EventKind.QUERY_STEP):
            self._pending_external += 1

    def add_flows(self, flows) -> None:
        """Schedule trace flows; each is classified on entry."""
        for f in flows:
            label = classify(f)
            if label not in self.counters:
                raise ValueError(f"flow {f.id} has class {label} not configured for this run")
            self._push(f.arrival_time, EventKind.FLOW_ARRIVAL, (label, f.size, False, None, f.id))

    def inject_flow(self, time, size, label, control=False, callback=None) -> int:
        """Dynamically offer a flow (control messages, query fetches)."""
        if label not in self.counters:
            raise ValueError(f"injected flow class {label} not configured for this run")
        if size < 1:
            raise ValueError("injected flow size must be >= 1")
        fid = self._inject_id
        self._inject_id -= 1
        self._push(time, EventKind.FLOW_ARRIVAL, (label, int(size), control, callback, fid))
        return fid

    def schedule_at(self, time, fn) -> None:
        self._push(time, EventKind.QUERY_STEP, fn)

    # -- fluid service -----------------------------------------------------

    def _queue_key(self, label):
        return _OPEN_QUEUE if self.mode is FeedbackMode.OPEN else label

    def _replan(self, now: float) -> None:
        self._plan = None
        pick = None
        if self.mode is FeedbackMode.OPEN:
            q = self._queues[_OPEN_QUEUE]
            if q:
                flow = q[0]
                pick = (flow.label, flow, flow.remaining)
        else:
            for label in self._priority:
                if self._queued_bytes[label] > 0 and self._budget[label] > 0:
                    flow = self._queues[label][0]
                    pick = (label, flow, min(flow.remaining, self._budget[label]))
                    break
        if pick is None:
            return
        label, flow, limit = pick
        end = now + limit / self.link.byte_rate
        self._plan = _ServicePlan(now, end, label, flow, limit)
        self._push(end, EventKind.SERVICE_COMPLETION, None)

    def _serve(self, label, flow, nbytes: int, when: float) -> None:
        key = self._queue_key(label)
        flow.remaining -= nbytes
        self._queued_bytes[key] -= nbytes
        c = self.counters[flow.label]
        c.delivered += nbytes
        c.queued -= nbytes
        if flow.control:
            c.control_delivered += nbytes
        self._epoch_delivered[flow.label] += nbytes
        if self.mode is FeedbackMode.CLOSED:
            self._budget[label] -= nbytes
        if self.debug:
            self.event_log.append((when, "serve", str(flow.label), flow.flow_id, nbytes))
            self._assert_conserved()
        if flow.remaining == 0:
            q = self._queues[key]
            assert q[0] is flow
            q.popleft()
            delivery = when + self.link.propagation_delay_s
            self.metrics.latencies_s[flow.label].append(delivery - flow.arrival)
            self.metrics.flows_completed += 1
            if flow.callback is not None:
                flow.callback(self, delivery)

    def _advance(self, t: float) -> None:
        """Apply continuous service from the plan's start up to time t.

        Whole segments (flow completion or budget exhaustion) transfer their
        exact integer byte count; a partially elapsed segment moves whole
        bytes and keeps the sub-byte remainder in the plan, so nothing is
        lost unless a replan cuts the segment short.
        """
        while self._plan is not None and self._plan.end <= t:
            plan = self._plan
            self._serve(plan.label, plan.flow, plan.limit, plan.end)
            self._replan(plan.end)
        plan = self._plan
        if plan is not None and t > plan.start:
            # A partial segment never finishes the plan; the exact last byte
            # is always transferred by the completion branch above.
            nbytes = min(plan.limit - 1, int(self.link.byte_rate * (t - plan.start)))
            if nbytes > 0:
                self._serve(plan.label, plan.flow, nbytes, t)
                plan.limit -= nbytes
                plan.start += nbytes / self.link.byte_rate

    # -- event handlers ----------------------------------------------------

    def _handle_arrival(self, t: float, payload) -> None:
        label, size, control, callback, fid = payload
        key = self._queue_key(label)
        cap = self.link.queue_capacity_bytes
        free = cap - self._queued_bytes[key]
        accepted = min(size, free)
        dropped = size - accepted
        c = self.counters[label]
        c.arrived += size
        if control:
            c.control_arrived += size
            self.metrics.control_bytes_injected += size
        self._epoch_arrived[label] += size
        self.metrics.flows_offered += 1
        self.metrics.max_flow_size = max(self.metrics.max_flow_size, size)
        if dropped:
            c.dropped += dropped
            self._epoch_dropped[label] += dropped
            if self.debug:
                self.event_log.append((t, "drop", str(label), fid, dropped))
        if accepted > 0:
            flow = _QueuedFlow(fid, label, accepted, t, control, callback)
            self._queues[key].append(flow)
            self._queued_bytes[key] += accepted
            c.queued += accepted
            if self.debug:
                self.event_log.append((t, "arrival", str(label), fid, accepted))
            plan = self._plan
            if plan is None:
                self._replan(t)
            elif (
                self.mode is FeedbackMode.CLOSED
                and self._budget[label] > 0
                and self._rank[label] < self._rank[plan.label]
            ):
                # Serviceable higher-priority work preempts; the cut
                # segment's sub-byte progress is dropped.
                self._replan(t)
        else:
            self.metrics.failed_flow_ids.append(fid)
        if self.debug:
            self._assert_conserved()

    def apply_decision(self, decision: ControlDecision) -> None:
        """Install shares and priority order for the upcoming epoch."""
        k = len(self.classes)
        if len(decision.u) != k:
            raise SimulationError(f"decision has {len(decision.u)} shares for {k} classes")
        if not ControlBounds.simplex(k).contains(decision.u, tol=1e-9):
            raise SimulationError(f"decision shares outside the control set: {decision.u}")
        if sorted(decision.priority_order) != list(range(k)):
            raise SimulationError(f"invalid priority order: {decision.priority_order}")
        per_epoch = self.link.bytes_per_epoch
        for i, label in enumerate(self.classes):
            # 1e-6-byte nudge absorbs float representation error in u_i.
            self._budget[label] = int(decision.u[i] * per_epoch + 1e-6)
        self._priority = [self.classes[i] for i in decision.priority_order]
        self._rank = {label: pos for pos, label in enumerate(self._priority)}
        self._shares = tuple(decision.u)

    def _finalize_epoch(self, index: int) -> None:
        per_epoch = self.link.bytes_per_epoch
        rank_of = {label: pos for pos, label in enumerate(self._priority)}
        total_delivered = 0
        for i, label in enumerate(self.classes):
            delivered = self._epoch_delivered[label]
            total_delivered += delivered
            share = None
            rank = None
            if self.mode is FeedbackMode.CLOSED and self._shares is not None:
                share = self._shares[i]
                rank = rank_of[label]
            self.metrics.epochs.append(
                EpochRecord(
                    epoch=index,
                    label=label,
                    arrived=self._epoch_arrived[label],
                    delivered=delivered,
                    dropped=self._epoch_dropped[label],
                    queued=self.counters[label].queued,
                    share=share,
                    priority_rank=rank,
                    utilization=delivered / per_epoch,
                )
            )
        self.metrics.link_utilization.append(total_delivered / per_epoch)
        self._last_epoch_delivered = dict(self._epoch_delivered)
        for label in self.classes:
            self._epoch_arrived[label] = 0
            self._epoch_delivered[label] = 0
            self._epoch_dropped[label] = 0

    def _begin_epoch(self, t: float, index: int) -> None:
        if self.mode is not FeedbackMode.CLOSED:
            return
        x = observe_state(self.counters, self.link, self._last_epoch_delivered)
        decision = self.controller.decide(x, index)
        self.apply_decision(decision)
        self.metrics.state_history.append((x, np.array(decision.u)))
        if self.control_message_bytes > 0:
            self.inject_flow(t, self.control_message_bytes, CONTROL_LABEL, control=True)
        self._replan(t)

    def _active(self) -> bool:
        return self._pending_external > 0 or any(v > 0 for v in self._queued_bytes.values())

    def _assert_conserved(self) -> None:
        for label, c in self.counters.items():
            if not c.conserved():
                raise SimulationError(f"conservation violated mid-run for {label}")

    # -- run loops ----------------------------------------------------------

    def _pop_loop(self, until: Optional[float], n_epochs: Optional[int], max_epochs: int) -> None:
        eps = self.link.epoch_s
        if n_epochs is not None:
            for e in range(n_epochs + 1):
                self._push(e * eps, EventKind.EPOCH_BOUNDARY, e)
        else:
            self._push(0.0, EventKind.EPOCH_BOUNDARY, 0)
        while self._heap:
            time, kind, _, payload = self._heap[0]
            if until is not None and time > until:
                break
            heapq.heappop(self._heap)
            if kind in (int(EventKind.FLOW_ARRIVAL), int(EventKind.QUERY_STEP)):
                self._pending_external -= 1
            self.now = time
            self._advance(time)
            if kind == int(EventKind.EPOCH_BOUNDARY):
                e = payload
                if e > max_epochs:
                    raise SimulationError(f"exceeded max_epochs={max_epochs} without draining")
                if e > 0:
                    self._finalize_epoch(e - 1)
                if n_epochs is not None:
                    if e < n_epochs:
                        self._begin_epoch(time, e)
                else:
                    if self._active():
                        self._begin_epoch(time, e)
                        self._push((e + 1) * eps, EventKind.EPOCH_BOUNDARY, e + 1)
            elif kind == int(EventKind.FLOW_ARRIVAL):
                self._handle_arrival(time, payload)
            elif kind == int(EventKind.QUERY_STEP):
                payload(self, time)
                if self._plan is None:
                    self._replan(time)
            # SERVICE_COMPLETION is a pure wake-up: _advance did the work.
            if kind == int(EventKind.SERVICE_COMPLETION) and self._plan is None:
                self._replan(time)

    def run_epochs(self, n_epochs: int) -> SimMetrics:
        """Run exactly n_epochs control epochs, then stop."""
        if n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")
        self._pop_loop(until=n_epochs * self.link.epoch_s, n_epochs=n_epochs, max_epochs=n_epochs)
        self.metrics.assert_conservation()
        return self.metrics

    def run_until_idle(self, max_epochs: int = 1_000_000) -> SimMetrics:
        """Run epoch by epoch until no backlog or pending events remain."""
        self._pop_loop(until=None, n_epochs=None, max_epochs=max_epochs)
        self.metrics.assert_conservation()
        return self.metrics

    def write_event_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVENT_CSV_HEADER)
            for time, event, label, fid, nbytes in self.event_log:
                w.writerow(["%.9g" % time, event, label, fid, nbytes])


def run_simulation(
    trace,
    link: LinkSpec,
    mode: FeedbackMode,
    model=None,
    weights=None,
    seed: int = 0,
    *,
    scenario_id: str = "run",
    n_epochs: Optional[int] = None,
    horizon: int = 3,
    grid: int = 11,
    control_message_bytes: int = 0,
    classes=None,
    controller=None,
    debug: bool = False,
) -> SimMetrics:
    """Simulate one trace over the link and return its metrics.

    Closed mode builds a receding-horizon controller from (model, weights)
    unless an explicit controller is given; the model must match the class
    count (n = 2k states, m = k shares). n_epochs=None runs until idle.
    """
    if classes is None:
        labels = {classify(f) for f in trace}
        if mode is FeedbackMode.CLOSED and control_message_bytes > 0:
            labels.add(CONTROL_LABEL)
        classes = canonical_class_order(labels)
    else:
        classes = canonical_class_order(classes)
    if mode is FeedbackMode.CLOSED and controller is None:
        if model is None or weights is None:
            raise ValueError("closed mode requires model and weights (or a controller)")
        k = len(classes)
        if model.n != 2 * k or model.m != k:
            raise ValueError(
                f"model is {model.n}x{model.m} but {k} classes need n={2 * k}, m={k}"
            )
        controller = MpcController(model, weights, horizon, grid)
    sim = LinkSimulator(
        link,
        classes,
        mode,
        controller=controller if mode is FeedbackMode.CLOSED else None,
        scenario_id=scenario_id,
        seed=seed,
        control_message_bytes=control_message_bytes if mode is FeedbackMode.CLOSED else 0,
        debug=debug,
    )
    sim.add_flows(trace)
    if n_epochs is not None:
        return sim.run_epochs(n_epochs)
    return sim.run_until_idle()
