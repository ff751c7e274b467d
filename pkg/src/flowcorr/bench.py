"""Monte-Carlo evaluation harness: paired trials, ROC/AUC, detectability.

Each trial draws a creator flow, pushes one copy through watermark/attack/
channel to score the linked hypothesis, and scores an independent flow
that crossed the same countermeasures and channel to measure the unlinked
one. Trials are seeded independently from the master seed so they can run
in any order and reproduce bit-exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .detector import (
    DetectorConfig,
    MatchConfig,
    SyncGrid,
    _synchronize_full,
)
from .errors import DegenerateScores, FlowCorrError, UnmeasurableTarget
from .flowmodel import (
    DistSpec,
    FlowTrace,
    IpdSequence,
    equal_mass_edges,
    histogram_from_data,
    kld,
    merge_trace,
    sample,
)
from .simulator import (
    AttackSpec,
    ChannelSpec,
    FlowSource,
    WatermarkSpec,
    apply_attack_pipeline,
    apply_channel,
    embed_watermark,
    generate_flow,
)
from . import detector as _detector

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentPlan",
    "ScorePair",
    "RocCurve",
    "run_experiment",
    "roc",
    "pd_at_pf",
    "detectability",
    "auc_std_err",
]

# Stream tags for per-trial seeding: rng = default_rng([master_seed, trial, TAG]).
_TAG_H1_SOURCE = 0
_TAG_H1_CHANNEL = 1
_TAG_H0_SOURCE = 2
_TAG_H0_CHANNEL = 3
_TAG_H1_ATTACK = 4
_TAG_H0_ATTACK = 5


@dataclass(frozen=True)
class ExperimentPlan:
    """One Monte-Carlo experiment: generation, perturbation and detection.

    `sync_grid` selects the detection path: None runs the aligned
    one-to-one test on the raw IPDs; a grid runs match + synchronize with
    the loss-aware (or bounded-delay, if the detector assumes an attack)
    test.
    """

    trials: int
    flow_length: int
    source: FlowSource
    channel: ChannelSpec
    detector: DetectorConfig
    attack: AttackSpec | None = None
    match: MatchConfig = field(default_factory=MatchConfig)
    sync_grid: SyncGrid | None = None
    watermark: WatermarkSpec | None = None
    master_seed: int = 0

    def __post_init__(self):
        if self.trials < 100:
            raise ValueError("need at least 100 trials")
        if self.flow_length < 1:
            raise ValueError("flow_length must be >= 1")


@dataclass(frozen=True)
class ScorePair:
    """Scores of one trial under both hypotheses (+ shift and match size)."""

    h1_score: float
    h0_score: float
    rho_h1: float = 0.0
    rho_h0: float = 0.0
    m_h1: int = 0
    m_h0: int = 0

    def __post_init__(self):
        for v in (self.h1_score, self.h0_score):
            if math.isnan(v) or v == math.inf:
                raise ValueError("scores must be finite or -inf")


@dataclass(frozen=True)
class RocCurve:
    """Operating points (p_f, p_d) swept over all thresholds, plus the AUC."""

    points: tuple[tuple[float, float], ...]
    auc: float


def _trial_rng(master_seed: int, trial: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, trial, tag])


def _detect(
    plan: ExperimentPlan, creator: FlowTrace, observed: FlowTrace
) -> tuple[float, float, int]:
    """Score one (creator, observed) pair; returns (score, rho, matched)."""
    window = plan.source.merge_window
    observed = merge_trace(observed, window)
    if plan.sync_grid is None:
        c = IpdSequence(np.diff(creator.timestamps))
        d = IpdSequence(np.diff(observed.timestamps))
        verdict = _detector.basic_llr(c, d, plan.detector)
        return verdict.log_lambda, 0.0, len(c)
    rho, score, m_plus_1 = _synchronize_full(
        creator, observed, plan.detector, plan.sync_grid, plan.match.gamma
    )
    return score, rho, max(m_plus_1 - 1, 0)


def run_experiment(plan: ExperimentPlan) -> list[ScorePair]:
    """Run all trials of `plan`; deterministic given `plan.master_seed`.

    Per-trial failures (short survivor sets, split that empties the flow,
    mismatched lengths on the aligned path) score -inf instead of aborting
    the batch; the failure counts are logged.
    """
    out: list[ScorePair] = []
    n_packets = plan.flow_length + 1
    failures_h1 = failures_h0 = 0
    for trial in range(plan.trials):
        creator = generate_flow(
            plan.source, n_packets, _trial_rng(plan.master_seed, trial, _TAG_H1_SOURCE)
        )
        if plan.watermark is not None:
            key = int(np.random.SeedSequence([plan.watermark.seed, trial]).generate_state(1)[0])
            creator = embed_watermark(creator, WatermarkSpec(plan.watermark.w_max, key))

        h1_score, rho1, m1 = -math.inf, 0.0, 0
        try:
            sent = apply_attack_pipeline(
                creator, plan.attack, _trial_rng(plan.master_seed, trial, _TAG_H1_ATTACK)
            )
            arrived = apply_channel(
                sent, plan.channel, _trial_rng(plan.master_seed, trial, _TAG_H1_CHANNEL)
            )
            h1_score, rho1, m1 = _detect(plan, creator, arrived)
        except FlowCorrError:
            failures_h1 += 1

        # The unlinked observation is whatever actually crosses the monitored
        # link, so it suffers the same countermeasures as the linked one;
        # otherwise marginal statistics alone would separate the hypotheses.
        h0_score, rho0, m0 = -math.inf, 0.0, 0
        try:
            other = generate_flow(
                plan.source, n_packets, _trial_rng(plan.master_seed, trial, _TAG_H0_SOURCE)
            )
            sent0 = apply_attack_pipeline(
                other, plan.attack, _trial_rng(plan.master_seed, trial, _TAG_H0_ATTACK)
            )
            unlinked = apply_channel(
                sent0, plan.channel, _trial_rng(plan.master_seed, trial, _TAG_H0_CHANNEL)
            )
            h0_score, rho0, m0 = _detect(plan, creator, unlinked)
        except FlowCorrError:
            failures_h0 += 1

        out.append(ScorePair(h1_score, h0_score, rho1, rho0, m1, m0))
    if failures_h1 or failures_h0:
        log.info(
            "recorded trial failures: %d linked, %d unlinked (of %d trials)",
            failures_h1,
            failures_h0,
            plan.trials,
        )
    return out


def _score_arrays(scores: Sequence[ScorePair]) -> tuple[np.ndarray, np.ndarray, int]:
    """(h1, usable h0, excluded h0 count); -inf unlinked scores are excluded.

    A linked-trial failure is an honest miss and stays in the pool at -inf;
    an unlinked-trial failure means the detector declared nothing at all,
    so it cannot contribute a false-positive threshold.
    """
    h1 = np.array([s.h1_score for s in scores], dtype=np.float64)
    h0_all = np.array([s.h0_score for s in scores], dtype=np.float64)
    usable = np.isfinite(h0_all)
    excluded = int(np.sum(~usable))
    return h1, h0_all[usable], excluded


def roc(scores: Sequence[ScorePair]) -> RocCurve:
    """Empirical ROC over every distinct threshold, AUC by the rank statistic.

    Ties between linked and unlinked scores count half, which makes the
    rank AUC equal the trapezoid area under the returned points.
    """
    if len(scores) < 2:
        raise DegenerateScores("need at least 2 score pairs")
    h1, h0, excluded = _score_arrays(scores)
    if excluded:
        log.info("roc: excluded %d failed unlinked trials", excluded)
    if h0.size == 0:
        raise DegenerateScores("no usable unlinked scores")
    pooled = np.concatenate([h1, h0])
    if np.all(pooled == pooled[0]):
        raise DegenerateScores("all scores identical")

    thresholds = np.unique(pooled[np.isfinite(pooled)])[::-1]
    pts = [(0.0, 0.0)]
    for eta in thresholds:
        pts.append((float(np.mean(h0 > eta)), float(np.mean(h1 > eta))))
    # below every finite threshold all usable unlinked scores fire, but
    # failure-scored (-inf) linked trials still never do: vertical segment
    pts.append((1.0, float(np.mean(np.isfinite(h1)))))
    pts.append((1.0, 1.0))
    points = tuple(dict.fromkeys(pts))  # drop exact duplicates, keep order

    ranks = stats.rankdata(pooled, method="average")
    r1 = float(np.sum(ranks[: h1.size]))
    n1, n0 = h1.size, h0.size
    auc = (r1 - n1 * (n1 + 1) / 2.0) / (n1 * n0)
    return RocCurve(points=points, auc=float(auc))


def pd_at_pf(scores: Sequence[ScorePair], p_f_target: float) -> tuple[float, float]:
    """Detection rate at a fixed false-positive budget.

    The threshold is the conservative ("higher") empirical quantile of the
    unlinked scores, so the realized false-positive rate never exceeds the
    target.

    Raises:
        UnmeasurableTarget: target below 1/#unlinked-scores resolution.
    """
    h1, h0, _ = _score_arrays(scores)
    if h0.size == 0:
        raise DegenerateScores("no usable unlinked scores")
    if p_f_target < 1.0 / h0.size:
        raise UnmeasurableTarget(
            f"p_f={p_f_target:g} not measurable with {h0.size} unlinked scores"
        )
    log_eta = float(np.quantile(h0, 1.0 - p_f_target, method="higher"))
    p_d = float(np.mean(h1 > log_eta))
    return p_d, log_eta


def auc_std_err(auc: float, n1: int, n0: int) -> float:
    """Hanley-McNeil style standard error of an empirical AUC."""
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc**2 / (1.0 + auc)
    var = (
        auc * (1.0 - auc) + (n1 - 1) * (q1 - auc**2) + (n0 - 1) * (q2 - auc**2)
    ) / (n1 * n0)
    return math.sqrt(max(var, 0.0))


def detectability(jitter: DistSpec, wm: WatermarkSpec, samples: int) -> float:
    """KL divergence between clean jitter and jitter + watermark IPD noise.

    Estimated from two seeded sample sets histogrammed on shared equal-mass
    bins; this is the minimum epsilon for which the watermark would still
    be epsilon-secure against an observer comparing those distributions.
    """
    if jitter.family not in ("cauchy", "laplace"):
        raise ValueError("jitter family must be cauchy or laplace")
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples for a stable histogram")
    rng = np.random.default_rng(wm.seed)
    clean = sample(jitter, samples, rng)
    tri = rng.uniform(0.0, wm.w_max, samples) - rng.uniform(0.0, wm.w_max, samples)
    marked = sample(jitter, samples, rng) + tri
    pooled = np.concatenate([clean, marked])
    edges = equal_mass_edges(pooled, math.ceil(math.sqrt(samples)))
    p = histogram_from_data(clean, edges)
    q = histogram_from_data(marked, edges)
    return kld(p, q)
