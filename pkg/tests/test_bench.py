import math

import numpy as np
import pytest
from scipy import stats

from flowcorr import flowmodel as fm
from flowcorr.bench import (
    ExperimentPlan,
    RocCurve,
    ScorePair,
    auc_std_err,
    detectability,
    pd_at_pf,
    roc,
    run_experiment,
)
from flowcorr.detector import DetectorConfig, LossModel, MatchConfig, SyncGrid
from flowcorr.errors import DegenerateScores, UnmeasurableTarget
from flowcorr.simulator import (
    IidChannel,
    ParetoSource,
    TraceChannel,
    WatermarkSpec,
)


def pairs(h1, h0):
    return [ScorePair(a, b) for a, b in zip(h1, h0)]


def basic_plan(**overrides):
    cfg = DetectorConfig(
        jitter=fm.DistSpec.cauchy(0, 0.004),
        ipd_model=fm.DistSpec.pareto(0.86, 0.01),
        loss=LossModel(p_nl=0.005),
    )
    defaults = dict(
        trials=100,
        flow_length=5,
        source=ParetoSource(0.86, 0.01, 0.01),
        channel=TraceChannel(fm.DelayTrace([0.1, 0.1], 1000.0)),
        detector=cfg,
        match=MatchConfig(gamma=0.075),
        sync_grid=None,
        master_seed=5,
    )
    defaults.update(overrides)
    return ExperimentPlan(**defaults)


class TestPlanAndScoreTypes:
    def test_plan_needs_trials(self):
        with pytest.raises(ValueError):
            basic_plan(trials=50)

    def test_score_pair_rejects_nan(self):
        with pytest.raises(ValueError):
            ScorePair(float("nan"), 0.0)
        with pytest.raises(ValueError):
            ScorePair(0.0, math.inf)
        ScorePair(-math.inf, 0.0)  # negative infinity is a valid failure score


class TestRunExperiment:
    def test_trial_count_and_determinism(self):
        plan = basic_plan()
        a = run_experiment(plan)
        b = run_experiment(plan)
        assert len(a) == 100
        assert a == b  # bit-exact reproduction

    def test_noiseless_perfect_separation(self):
        # a detector matched to the noiseless channel (vanishing jitter
        # scale) separates linked from unlinked flows completely
        cfg = DetectorConfig(
            jitter=fm.DistSpec.cauchy(0, 1e-5),
            ipd_model=fm.DistSpec.pareto(0.86, 0.01),
            loss=LossModel(p_nl=0.005),
        )
        scores = run_experiment(basic_plan(detector=cfg))
        h1 = [s.h1_score for s in scores]
        h0 = [s.h0_score for s in scores if math.isfinite(s.h0_score)]
        assert min(h1) > max(h0)
        assert roc(scores).auc == 1.0

    def test_seed_changes_scores(self):
        a = run_experiment(basic_plan())
        b = run_experiment(basic_plan(master_seed=6))
        assert a != b

    def test_sync_path_populates_rho_and_m(self):
        plan = basic_plan(sync_grid=SyncGrid(0.0, 0.2, 0.002))
        scores = run_experiment(plan)
        assert any(s.m_h1 > 0 for s in scores)
        best = max(scores, key=lambda s: s.h1_score)
        assert abs(best.rho_h1 - 0.1) < 0.01

    def test_linked_scores_dominate_unlinked_under_sync(self):
        # searching the shift grid inflates unlinked scores a little, but the
        # linked maximum still sits clearly above on almost every seed
        cfg = DetectorConfig(
            jitter=fm.DistSpec.cauchy(0, 0.004),
            ipd_model=fm.DistSpec.pareto(0.86, 0.01),
            loss=LossModel(p_nl=0.005, p_m=1e-4),
        )
        plan = basic_plan(
            trials=200,
            flow_length=10,
            detector=cfg,
            channel=IidChannel(fm.DistSpec.cauchy(0, 0.004), 0.0631),
            sync_grid=SyncGrid(0.0, 0.15, 0.002),
        )
        scores = run_experiment(plan)
        wins = sum(1 for s in scores if s.h1_score > s.h0_score)
        assert wins >= 0.9 * len(scores)

    def test_watermark_toggle_keeps_other_streams(self):
        # identical master seeds must give identical unlinked observations,
        # so the paired comparison isolates the watermark's effect
        plain = run_experiment(basic_plan(sync_grid=SyncGrid(0.0, 0.2, 0.002)))
        marked = run_experiment(
            basic_plan(sync_grid=SyncGrid(0.0, 0.2, 0.002), watermark=WatermarkSpec(0.001, 3))
        )
        assert [s.m_h0 for s in plain] == [s.m_h0 for s in marked]


class TestRoc:
    def test_perfect_separation(self):
        curve = roc(pairs([2.0, 3.0, 4.0], [0.0, 0.5, 1.0]))
        assert curve.auc == 1.0
        assert (0.0, 1.0) in curve.points

    def test_random_choice_baseline(self):
        rng = np.random.default_rng(7)
        aucs = []
        for _ in range(50):
            h1 = rng.normal(0, 1, 400)
            h0 = rng.normal(0, 1, 400)
            aucs.append(roc(pairs(h1, h0)).auc)
        se = 1.0 / math.sqrt(12 * 400)  # exact null standard error
        assert abs(float(np.mean(aucs)) - 0.5) <= 3 * se / math.sqrt(50)

    def test_hand_counted_auc(self):
        assert roc(pairs([2.0, 0.0], [1.0, -1.0])).auc == 0.75

    def test_ties_count_half(self):
        # comparisons: 1~1 (half), 1>0, 2>1, 2>0 -> 3.5 of 4
        assert roc(pairs([1.0, 2.0], [1.0, 0.0])).auc == 0.875

    def test_rank_auc_equals_trapezoid(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            n = int(rng.integers(2, 60))
            h1 = np.round(rng.normal(0.5, 1, n), 1)  # rounding forces ties
            h1[: int(rng.integers(0, 3))] = -math.inf  # failure markers
            h0 = np.round(rng.normal(0.0, 1, n), 1)
            curve = roc([ScorePair(float(a), float(b)) for a, b in zip(h1, h0)])
            xs = np.array([p[0] for p in curve.points])
            ys = np.array([p[1] for p in curve.points])
            assert curve.auc == pytest.approx(np.trapezoid(ys, xs), abs=1e-9)

    def test_failed_h0_excluded_failed_h1_kept(self):
        scores = pairs([2.0, -math.inf, 3.0], [0.0, 1.0, -math.inf])
        curve = roc(scores)
        # usable h0 = {0, 1}; wins: 2>0, 2>1, 3>0, 3>1; the -inf h1 never wins
        assert curve.auc == pytest.approx(4.0 / 6.0)

    def test_degenerate_scores(self):
        with pytest.raises(DegenerateScores):
            roc(pairs([1.0, 1.0], [1.0, 1.0]))
        with pytest.raises(DegenerateScores):
            roc(pairs([1.0], [2.0]))


class TestPdAtPf:
    def test_perfect_separation_full_detection(self):
        scores = pairs(list(np.linspace(10, 20, 100)), list(np.linspace(0, 1, 100)))
        p_d, log_eta = pd_at_pf(scores, 0.01)
        assert p_d == 1.0
        assert log_eta >= 1.0

    def test_unmeasurable_target(self):
        scores = pairs(list(np.arange(100.0)), list(np.arange(100.0)))
        with pytest.raises(UnmeasurableTarget):
            pd_at_pf(scores, 1e-6)

    def test_realized_rate_never_exceeds_target(self):
        rng = np.random.default_rng(11)
        h1 = rng.normal(1, 1, 500)
        h0 = rng.normal(0, 1, 500)
        for target in (0.5, 0.1, 0.01):
            _, log_eta = pd_at_pf(pairs(h1, h0), target)
            assert float(np.mean(h0 > log_eta)) <= target


class TestDetectability:
    def test_vanishing_watermark(self):
        value = detectability(fm.DistSpec.cauchy(0, 0.004), WatermarkSpec(1e-7, 3), 10**4)
        assert 0.0 <= value < 0.05

    def test_grows_with_watermark_strength(self):
        jitter = fm.DistSpec.cauchy(0, 0.004)
        weak = detectability(jitter, WatermarkSpec(0.004, 3), 10**5)
        strong = detectability(jitter, WatermarkSpec(0.08, 3), 10**5)
        assert strong > weak

    def test_matches_quadrature_at_detectable_scale(self):
        # at watermark >> jitter scale the histogram estimate approaches the
        # continuous divergence computed by numerical convolution
        from scipy.integrate import quad

        sigma, w_max = 0.0002, 0.002
        jitter = fm.DistSpec.cauchy(0, sigma)

        def marked_density(x):
            val, _ = quad(
                lambda w: fm.pdf(jitter, x - w) * max(0.0, (w_max - abs(w)) / w_max**2),
                -w_max,
                w_max,
                limit=200,
            )
            return val

        def integrand(x):
            fj = fm.pdf(jitter, x)
            fw = marked_density(x)
            return fj * math.log(fj / fw) if fj > 0 and fw > 0 else 0.0

        expected = (
            quad(integrand, -60 * sigma, 0, limit=400)[0]
            + quad(integrand, 0, 60 * sigma, limit=400)[0]
        )
        got = detectability(jitter, WatermarkSpec(w_max, 12345), 10**6)
        assert got == pytest.approx(expected, rel=0.15)

    def test_sample_floor(self):
        with pytest.raises(ValueError):
            detectability(fm.DistSpec.cauchy(0, 0.004), WatermarkSpec(0.002, 3), 100)


class TestAucStdErr:
    def test_reasonable_magnitude(self):
        se = auc_std_err(0.95, 1000, 1000)
        assert 0.0 < se < 0.02

    def test_shrinks_with_samples(self):
        assert auc_std_err(0.9, 10000, 10000) < auc_std_err(0.9, 100, 100)
