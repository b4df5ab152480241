"""Orchestration: trace generation, identification warmup, paired
open/closed runs, the hybrid-DB experiment, and run-directory output."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

from .config import ScenarioConfig
from .control import (
    ExcitationController,
    MpcController,
    StateSpaceModel,
    identify_model,
    save_model_csv,
)
from .hybriddb import ExperimentResult, build_corpus, run_experiment, sample_query_authors
from .metrics import ComparisonReport, compare_modes, export_report, fmt
from .netsim import FeedbackMode, LinkSimulator, SimMetrics
from .traffic import generate_trace, write_trace_csv


@dataclass
class RunResult:
    cfg: ScenarioConfig
    open_metrics: Optional[SimMetrics] = None
    closed_metrics: Optional[SimMetrics] = None
    report: Optional[ComparisonReport] = None
    model: object = None
    identification_residual: float = math.nan
    corpus: object = None
    experiment: Optional[ExperimentResult] = None


def build_trace(cfg: ScenarioConfig):
    return generate_trace(cfg.traffic, cfg.duration_s(), cfg.seed)


def identify_from_warmup(trace, link, classes, warmup_epochs: int, excitation_seed: int,
                         control_message_bytes: int = 0, scenario_id: str = "warmup",
                         control_bounds=None):
    """Drive the link with random feasible shares and fit (A, B) to the
    observed per-epoch (state, shares) pairs."""
    k = len(classes)
    sim = LinkSimulator(
        link,
        classes,
        FeedbackMode.CLOSED,
        controller=ExcitationController(k, excitation_seed),
        scenario_id=f"{scenario_id}-warmup",
        control_message_bytes=control_message_bytes,
    )
    horizon_s = warmup_epochs * link.epoch_s
    sim.add_flows([f for f in trace if f.arrival_time < horizon_s])
    sim.run_epochs(warmup_epochs)
    return identify_model(sim.metrics.state_history, n=2 * k, m=k,
                          control_bounds=control_bounds)


def run_open(cfg: ScenarioConfig, trace, classes) -> SimMetrics:
    sim = LinkSimulator(cfg.link, classes, FeedbackMode.OPEN,
                        scenario_id=cfg.scenario_id, seed=cfg.seed)
    sim.add_flows(trace)
    return sim.run_epochs(cfg.n_epochs)


def run_closed(cfg: ScenarioConfig, trace, classes):
    cc = cfg.controller
    if cc is None:
        raise ValueError("closed run requires a controller section")
    k = len(classes)
    if cc.identify:
        model, residual = identify_from_warmup(
            trace, cfg.link, classes, cc.warmup_epochs, cc.excitation_seed,
            control_message_bytes=cc.control_message_bytes, scenario_id=cfg.scenario_id,
            control_bounds=cc.control_bounds,
        )
    else:
        model, residual = cc.model, math.nan
        if model.n != 2 * k or model.m != k:
            raise ValueError(
                f"configured model is {model.n}x{model.m} but {k} classes need "
                f"n={2 * k}, m={k}"
            )
        if cc.control_bounds is not None:
            model = StateSpaceModel(model.A, model.B, model.state_bounds, cc.control_bounds)
    controller = MpcController(model, cc.weights, cc.horizon, cc.grid)
    sim = LinkSimulator(
        cfg.link,
        classes,
        FeedbackMode.CLOSED,
        controller=controller,
        scenario_id=cfg.scenario_id,
        seed=cfg.seed,
        control_message_bytes=cc.control_message_bytes,
    )
    sim.add_flows(trace)
    metrics = sim.run_epochs(cfg.n_epochs)
    return metrics, model, residual


def run_hybrid(cfg: ScenarioConfig, trace):
    hc = cfg.hybrid_db
    corpus = build_corpus(hc.corpus_spec)
    authors = sample_query_authors(corpus, hc.n_queries, hc.query_seed)
    experiment = run_experiment(
        corpus,
        authors,
        hc.backends,
        cfg.link,
        background=trace,
        scenario_id=cfg.scenario_id,
        seed=cfg.seed,
        start_time=hc.query_start_s,
        parallel=hc.parallel_fetch,
    )
    return corpus, experiment


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    """Execute the modes a config requests; paired runs share one trace."""
    trace = build_trace(cfg)
    classes = cfg.classes()
    result = RunResult(cfg=cfg)
    if cfg.mode in ("open", "both"):
        result.open_metrics = run_open(cfg, trace, classes)
    if cfg.mode in ("closed", "both"):
        result.closed_metrics, result.model, result.identification_residual = run_closed(
            cfg, trace, classes
        )
    if result.open_metrics is not None and result.closed_metrics is not None:
        result.report = compare_modes(result.open_metrics, result.closed_metrics)
    if cfg.hybrid_db is not None:
        result.corpus, result.experiment = run_hybrid(cfg, trace)
    return result


def write_outputs(result: RunResult, out_dir) -> list[str]:
    """Write the run directory; every file is a pure function of the run."""
    paths = []
    os.makedirs(out_dir, exist_ok=True)
    cfg = result.cfg
    for name, metrics in (("open", result.open_metrics), ("closed", result.closed_metrics)):
        if metrics is None:
            continue
        sub = os.path.join(out_dir, name)
        os.makedirs(sub, exist_ok=True)
        p = os.path.join(sub, "epochs.csv")
        metrics.write_epochs_csv(p)
        paths.append(p)
    if result.model is not None:
        p = os.path.join(out_dir, "closed", "model.csv")
        save_model_csv(result.model, p)
        paths.append(p)
        p = os.path.join(out_dir, "closed", "residual.txt")
        with open(p, "w") as fh:
            fh.write(fmt(result.identification_residual) + "\n")
        paths.append(p)
    if result.report is not None:
        paths.extend(export_report(result.report, out_dir))
    if result.experiment is not None:
        p = os.path.join(out_dir, "experiment.csv")
        result.experiment.write_csv(p)
        paths.append(p)
        p = os.path.join(out_dir, "corpus.csv")
        result.corpus.write_csv(p)
        paths.append(p)
    return paths
