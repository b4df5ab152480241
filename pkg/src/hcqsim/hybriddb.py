"""Synthetic articles corpus and the local vs hybrid query experiment.

The corpus models articles of 100 KB to 3 MB with a main author and 0-9
coauthors. A local query answers entirely from the local store (metadata
lookup plus one bulk transfer at local-store speed). A hybrid query looks
up metadata locally, then fetches each article body from blob storage
across the simulated bottleneck link, so its latency depends on the link's
current queues and shares. Both protocols resolve the same article set;
only timing differs.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .netsim import FeedbackMode, LinkSimulator, LinkSpec
from .traffic import AppKind, TrafficClassLabel, ZoneClass, canonical_class_order, classify

MIN_BODY_BYTES = 100 * 1024
MAX_BODY_BYTES = 3 * 1024 * 1024
MEAN_BODY_BYTES = (MIN_BODY_BYTES + MAX_BODY_BYTES) / 2.0
MAX_COAUTHORS = 9

# Full-scale corpus footprint the desk-scale knob divides down (26667.25 MB).
FULL_CORPUS_BYTES = round(26667.25 * 1024 * 1024)
DEFAULT_DESK_SCALE = 1e-3
DEFAULT_METADATA_BYTES = 2048

# Blob fetches ride the link as public-cloud database traffic.
QUERY_LABEL = TrafficClassLabel(ZoneClass.B, AppKind.DATABASE)


class ExperimentError(RuntimeError):
    pass


class BodyLocation(Enum):
    LOCAL_STORE = "LocalStore"
    CLOUD_BLOB = "CloudBlob"


class Protocol(Enum):
    LOCAL_4STEP = "local"
    HYBRID_5STEP = "hybrid"


@dataclass(frozen=True)
class ArticleRecord:
    article_id: int
    body_size: int
    main_author: int
    coauthors: tuple[int, ...]
    body_location: BodyLocation = BodyLocation.CLOUD_BLOB

    def __post_init__(self):
        if not (MIN_BODY_BYTES <= self.body_size <= MAX_BODY_BYTES):
            raise ValueError(
                f"body_size {self.body_size} outside [{MIN_BODY_BYTES}, {MAX_BODY_BYTES}]"
            )
        if len(self.coauthors) > MAX_COAUTHORS:
            raise ValueError(f"at most {MAX_COAUTHORS} coauthors, got {len(self.coauthors)}")
        if self.main_author in self.coauthors:
            raise ValueError("main author cannot also be a coauthor")
        if len(set(self.coauthors)) != len(self.coauthors):
            raise ValueError("duplicate coauthors")


@dataclass(frozen=True)
class CorpusSpec:
    """Corpus sizing: give article_count explicitly or let it derive from
    the total body-bytes target (target / mean article size)."""

    total_body_bytes_target: int
    metadata_bytes_per_article: int = DEFAULT_METADATA_BYTES
    seed: int = 0
    article_count: Optional[int] = None

    def __post_init__(self):
        if self.total_body_bytes_target <= 0:
            raise ValueError("total_body_bytes_target must be > 0")
        if self.metadata_bytes_per_article <= 0:
            raise ValueError("metadata_bytes_per_article must be > 0")
        if self.article_count is not None and self.article_count < 1:
            raise ValueError(f"article_count must be >= 1, got {self.article_count}")

    @staticmethod
    def desk_scale(scale: float = DEFAULT_DESK_SCALE, seed: int = 0,
                   metadata_bytes_per_article: int = DEFAULT_METADATA_BYTES) -> "CorpusSpec":
        if scale <= 0:
            raise ValueError("scale must be > 0")
        return CorpusSpec(
            total_body_bytes_target=max(MIN_BODY_BYTES, round(FULL_CORPUS_BYTES * scale)),
            metadata_bytes_per_article=metadata_bytes_per_article,
            seed=seed,
        )

    def derived_count(self) -> int:
        if self.article_count is not None:
            return self.article_count
        return max(1, round(self.total_body_bytes_target / MEAN_BODY_BYTES))


@dataclass
class Corpus:
    spec: CorpusSpec
    articles: tuple[ArticleRecord, ...]
    author_index: dict

    def total_body_bytes(self) -> int:
        return sum(a.body_size for a in self.articles)

    def article(self, article_id: int) -> ArticleRecord:
        return self.articles[article_id]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["article_id", "body_size", "main_author", "coauthor_count", "location"])
            for a in self.articles:
                w.writerow([a.article_id, a.body_size, a.main_author, len(a.coauthors),
                            a.body_location.value])


def build_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic corpus: sizes uniform in the body range, coauthor
    counts uniform in 0-9, author index covering main and co-authorship."""
    count = spec.derived_count()
    rng = random.Random(f"corpus/{spec.seed}")
    n_authors = max(10, 2 * count)
    articles = []
    index: dict[int, list[int]] = {}
    for aid in range(count):
        size = rng.randint(MIN_BODY_BYTES, MAX_BODY_BYTES)
        main = rng.randrange(n_authors)
        n_co = rng.randint(0, MAX_COAUTHORS)
        others = rng.sample(range(n_authors - 1), n_co)
        coauthors = tuple(o if o < main else o + 1 for o in others)
        articles.append(ArticleRecord(aid, size, main, coauthors))
        for author in (main, *coauthors):
            index.setdefault(author, []).append(aid)
    author_index = {a: tuple(ids) for a, ids in sorted(index.items())}
    return Corpus(spec=spec, articles=tuple(articles), author_index=author_index)


def sample_query_authors(corpus: Corpus, n: int, seed: int) -> list[int]:
    """n author parameters drawn (with replacement) from authors that have
    at least one article."""
    rng = random.Random(f"queries/{seed}")
    known = sorted(corpus.author_index)
    return [known[rng.randrange(len(known))] for _ in range(n)]


@dataclass(frozen=True)
class BackendLatency:
    """Latency stand-ins for the metadata store, blob store and local store."""

    metadata_lookup_s: float
    metadata_per_row_s: float
    blob_first_byte_s: float
    blob_bytes_per_s: float
    local_bytes_per_s: float

    def __post_init__(self):
        for name in ("metadata_lookup_s", "metadata_per_row_s", "blob_first_byte_s",
                     "blob_bytes_per_s", "local_bytes_per_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class QueryPlan:
    query_id: int
    author: int
    article_ids: tuple[int, ...]
    protocol: Protocol


def plan_query(corpus: Corpus, query_id: int, author: int, protocol: Protocol) -> QueryPlan:
    ids = corpus.author_index.get(author, ())
    return QueryPlan(query_id=query_id, author=author, article_ids=tuple(ids), protocol=protocol)


@dataclass(frozen=True)
class QueryResult:
    query_id: int
    author: int
    protocol: Protocol
    latency_s: float
    bytes_moved: int
    meta_s: float
    transfer_s: float
    queue_s: float
    article_ids: tuple[int, ...]


def execute_local(plan: QueryPlan, corpus: Corpus, backends: BackendLatency) -> QueryResult:
    """Local protocol: lookup, then metadata plus all bodies over the local
    store path. Never touches the bottleneck link."""
    rows = len(plan.article_ids)
    meta_s = backends.metadata_lookup_s + rows * backends.metadata_per_row_s
    nbytes = rows * corpus.spec.metadata_bytes_per_article + sum(
        corpus.article(i).body_size for i in plan.article_ids
    )
    transfer_s = nbytes / backends.local_bytes_per_s
    return QueryResult(
        query_id=plan.query_id,
        author=plan.author,
        protocol=Protocol.LOCAL_4STEP,
        latency_s=meta_s + transfer_s,
        bytes_moved=nbytes,
        meta_s=meta_s,
        transfer_s=transfer_s,
        queue_s=0.0,
        article_ids=plan.article_ids,
    )


class HybridQueryDriver:
    """Runs hybrid queries inside a link simulation.

    Queries run one after another (a single client session); within a query
    the per-article blob fetches are sequential by default. Each fetch is a
    serial pipeline: blob first-byte + read at blob speed, then transit of
    the bottleneck link subject to its queues, then propagation. transfer_s
    collects the queue-free pipeline time and queue_s the residual waiting,
    so components always sum to the total exactly.
    """

    def __init__(self, sim: LinkSimulator, corpus: Corpus, backends: BackendLatency,
                 plans, label: TrafficClassLabel = QUERY_LABEL, parallel: bool = False):
        self.sim = sim
        self.corpus = corpus
        self.backends = backends
        self.plans = list(plans)
        self.label = label
        self.parallel = parallel
        self.results: list[QueryResult] = []

    def start(self, time: float) -> None:
        if self.plans:
            self.sim.schedule_at(time, lambda sim, t, qi=0: self._submit(qi, t))

    def _submit(self, qi: int, t: float) -> None:
        plan = self.plans[qi]
        b = self.backends
        rows = len(plan.article_ids)
        meta_s = b.metadata_lookup_s + rows * b.metadata_per_row_s
        meta_transfer = rows * self.corpus.spec.metadata_bytes_per_article / b.local_bytes_per_s
        state = {
            "qi": qi,
            "plan": plan,
            "submit": t,
            "meta_s": meta_s,
            "transfer_s": meta_transfer,
            "remaining": rows,
        }
        meta_done = t + meta_s + meta_transfer
        if rows == 0:
            self._finish(state, meta_done)
            return
        if self.parallel:
            for idx in range(rows):
                self._dispatch_fetch(state, idx, meta_done)
        else:
            self._dispatch_fetch(state, 0, meta_done)

    def _dispatch_fetch(self, state, idx: int, t: float) -> None:
        plan = state["plan"]
        b = self.backends
        size = self.corpus.article(plan.article_ids[idx]).body_size
        blob_stage = b.blob_first_byte_s + size / b.blob_bytes_per_s
        ideal_link = size / self.sim.link.byte_rate + self.sim.link.propagation_delay_s
        state["transfer_s"] += blob_stage + ideal_link

        def on_delivered(sim, delivery, state=state, idx=idx):
            if state["remaining"] == 0:
                raise ExperimentError("fetch completion after query already finished")
            state["remaining"] -= 1
            if not self.parallel and idx + 1 < len(state["plan"].article_ids):
                self._dispatch_fetch(state, idx + 1, delivery)
            elif state["remaining"] == 0:
                self._finish(state, delivery)
            # parallel mode finishes when the slowest fetch lands

        self.sim.inject_flow(t + blob_stage, size, self.label, callback=on_delivered)

    def _finish(self, state, t: float) -> None:
        plan = state["plan"]
        nbytes = len(plan.article_ids) * self.corpus.spec.metadata_bytes_per_article + sum(
            self.corpus.article(i).body_size for i in plan.article_ids
        )
        latency = t - state["submit"]
        queue_s = latency - state["meta_s"] - state["transfer_s"]
        self.results.append(
            QueryResult(
                query_id=plan.query_id,
                author=plan.author,
                protocol=Protocol.HYBRID_5STEP,
                latency_s=latency,
                bytes_moved=nbytes,
                meta_s=state["meta_s"],
                transfer_s=state["transfer_s"],
                queue_s=queue_s,
                article_ids=plan.article_ids,
            )
        )
        nxt = state["qi"] + 1
        if nxt < len(self.plans):
            self.sim.schedule_at(t, lambda sim, tt, qi=nxt: self._submit(qi, tt))


def execute_query(plan: QueryPlan, corpus: Corpus, backends: BackendLatency,
                  sim: Optional[LinkSimulator] = None,
                  label: TrafficClassLabel = QUERY_LABEL,
                  start_time: float = 0.0) -> QueryResult:
    """Execute one query. Local queries are closed-form; hybrid queries need
    the link simulation they will run inside (the sim is run to idle)."""
    if plan.protocol is Protocol.LOCAL_4STEP:
        return execute_local(plan, corpus, backends)
    if sim is None:
        raise ValueError("hybrid queries need a link simulator")
    driver = HybridQueryDriver(sim, corpus, backends, [plan], label=label)
    driver.start(start_time)
    sim.run_until_idle()
    if len(driver.results) != 1:
        raise ExperimentError(
            f"query {plan.query_id} did not complete; dropped fetch bytes? "
            f"failed flows: {sim.metrics.failed_flow_ids}"
        )
    return driver.results[0]


@dataclass
class ExperimentResult:
    scenario_id: str
    rows: list  # (local QueryResult, hybrid QueryResult) per query
    summary: dict  # protocol value -> {mean, p50, p95}
    sim_metrics: object

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "author", "protocol", "latency_s", "bytes",
                        "meta_s", "transfer_s", "queue_s"])
            for local, hybrid in self.rows:
                for r in (local, hybrid):
                    w.writerow([r.query_id, r.author, r.protocol.value,
                                "%.9g" % r.latency_s, r.bytes_moved, "%.9g" % r.meta_s,
                                "%.9g" % r.transfer_s, "%.9g" % r.queue_s])


def _nearest_rank(sorted_vals, p: float) -> float:
    import math as _math

    if not sorted_vals:
        return float("nan")
    k = max(1, _math.ceil(p * len(sorted_vals)))
    return sorted_vals[k - 1]


def run_experiment(
    corpus: Corpus,
    authors,
    backends: BackendLatency,
    link: LinkSpec,
    *,
    background=(),
    scenario_id: str = "experiment",
    seed: int = 0,
    start_time: float = 0.0,
    parallel: bool = False,
    label: TrafficClassLabel = QUERY_LABEL,
) -> ExperimentResult:
    """Run every author query under both protocols and pair the results.

    The hybrid side shares one open-mode simulation with the background
    trace; fetch bytes are reconciled against the link's per-class delivered
    counters and any dropped fetch byte is an error (size the class queue
    above the largest article).
    """
    plans_local = [plan_query(corpus, i, a, Protocol.LOCAL_4STEP) for i, a in enumerate(authors)]
    plans_hybrid = [plan_query(corpus, i, a, Protocol.HYBRID_5STEP) for i, a in enumerate(authors)]
    local_results = [execute_local(p, corpus, backends) for p in plans_local]

    classes = set(classify(f) for f in background)
    classes.add(label)
    sim = LinkSimulator(link, canonical_class_order(classes), FeedbackMode.OPEN,
                        scenario_id=scenario_id, seed=seed)
    sim.add_flows(background)
    driver = HybridQueryDriver(sim, corpus, backends, plans_hybrid, label=label, parallel=parallel)
    driver.start(start_time)
    metrics = sim.run_until_idle()

    if len(driver.results) != len(plans_hybrid):
        raise ExperimentError(
            f"only {len(driver.results)}/{len(plans_hybrid)} hybrid queries completed; "
            f"failed flow ids: {metrics.failed_flow_ids}"
        )
    hybrid_results = sorted(driver.results, key=lambda r: r.query_id)

    background_bytes = sum(f.size for f in background if classify(f) == label)
    if background_bytes:
        raise ExperimentError(
            f"background traffic uses the query class {label}; reserve it for fetches"
        )
    fetch_bytes = sum(
        corpus.article(i).body_size for p in plans_hybrid for i in p.article_ids
    )
    tot = metrics.totals[label]
    if tot.dropped or tot.queued or tot.delivered != fetch_bytes:
        raise ExperimentError(
            f"fetch byte reconciliation failed for {label}: delivered {tot.delivered}, "
            f"dropped {tot.dropped}, queued {tot.queued}, expected {fetch_bytes}"
        )

    rows = []
    for local, hybrid in zip(local_results, hybrid_results):
        if local.article_ids != hybrid.article_ids:
            raise ExperimentError(
                f"query {local.query_id} resolved different article sets per protocol"
            )
        rows.append((local, hybrid))

    summary = {}
    for proto, results in ((Protocol.LOCAL_4STEP, local_results),
                           (Protocol.HYBRID_5STEP, hybrid_results)):
        vals = sorted(r.latency_s for r in results)
        summary[proto.value] = {
            "mean": sum(vals) / len(vals) if vals else float("nan"),
            "p50": _nearest_rank(vals, 0.50),
            "p95": _nearest_rank(vals, 0.95),
        }
    return ExperimentResult(scenario_id=scenario_id, rows=rows, summary=summary,
                            sim_metrics=metrics)
