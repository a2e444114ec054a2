import math

import numpy as np
import pytest

from artgauss.core import Prismatic, Revolute
from artgauss.evaluation import articulation_metrics
from artgauss.mobility import MobilityField, binarize
from artgauss.pipeline import PipelineConfig, _best, run, stage2a, stage3a, stage3c
from artgauss.synth import ArchetypeSpec, generate
from conftest import scene


def truth_fields(sc):
    return (MobilityField.from_mobility(sc.truth.labels0.astype(float)),
            MobilityField.from_mobility(sc.truth.labels1.astype(float)))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(kind="screw")
        with pytest.raises(ValueError):
            PipelineConfig(lambda_geom=0)
        with pytest.raises(ValueError):
            PipelineConfig(k_mobile=0)
        with pytest.raises(ValueError):
            PipelineConfig(skip_phases=("fancy",))
        with pytest.raises(ValueError):
            PipelineConfig(skip_phases=("mobile-only", "cross-mobile"))

    def test_refine_is_tighter(self):
        cfg = PipelineConfig()
        assert cfg.refine_criterion.rel_tol < cfg.criterion.rel_tol


class TestStage2a:
    def test_no_motion_prefers_static(self):
        sc = generate(ArchetypeSpec("hinge", seed=0, magnitude=0.0))
        M0, M1, _ = stage2a(sc.set0, sc.set1, PipelineConfig().lambda_geom)
        assert np.mean(np.concatenate([M0.m, M1.m])) < 0.1

    def test_hinge_separates_parts(self):
        sc = scene("hinge", 0)
        M0, M1, rep = stage2a(sc.set0, sc.set1, PipelineConfig().lambda_geom)
        m = np.concatenate([M0.m, M1.m])
        lab = np.concatenate([sc.truth.labels0, sc.truth.labels1])
        assert m[lab == 1].mean() - m[lab == 0].mean() >= 0.2
        assert rep.final_loss <= rep.initial_loss

    def test_large_lambda_zeroes_mobility(self):
        sc = scene("hinge", 0)
        M0, M1, _ = stage2a(sc.set0, sc.set1, 1e3)
        assert np.max(np.concatenate([M0.m, M1.m])) < 1e-3

    def test_rejects_nonpositive_lambda(self):
        sc = scene("hinge", 0)
        with pytest.raises(ValueError):
            stage2a(sc.set0, sc.set1, 0.0)


class TestStage3c:
    def test_fixed_point(self):
        sc = scene("hinge", 0)
        L0, L1 = truth_fields(sc)
        M0, M1, rep = stage3c(sc.set0, sc.set1, L0, L1, sc.truth.articulation)
        assert abs(rep.final_loss - rep.initial_loss) <= PipelineConfig().rel_tol * rep.initial_loss
        assert np.max(np.abs(M0.m - L0.m)) < 0.05 and np.max(np.abs(M1.m - L1.m)) < 0.05

    def test_corrects_planted_flips(self):
        sc = scene("hinge", 0)
        rng = np.random.default_rng(0)
        labs = [sc.truth.labels0.copy(), sc.truth.labels1.copy()]
        flips = [rng.choice(len(l), len(l) // 20, replace=False) for l in labs]
        for l, f in zip(labs, flips):
            l[f] ^= 1
        M0, M1, _ = stage3c(sc.set0, sc.set1, *(MobilityField.from_mobility(l.astype(float)) for l in labs),
                            sc.truth.articulation)
        fixed = sum(int(np.sum(binarize(M)[f] == t[f]))
                    for M, f, t in zip((M0, M1), flips, (sc.truth.labels0, sc.truth.labels1)))
        assert fixed / sum(len(f) for f in flips) >= 0.8

    def test_articulation_untouched(self):
        sc = scene("drawer", 0, n_static=300, n_mobile=150)
        T = sc.truth.articulation
        before = (T.axis.tobytes(), T.distance)
        L0, L1 = truth_fields(sc)
        stage3c(sc.set0, sc.set1, L0, L1, T, PipelineConfig(max_iters=100))
        assert (T.axis.tobytes(), T.distance) == before


class TestBestTrial:
    def test_lowest_loss_lowest_index(self):
        class R:
            def __init__(self, loss):
                self.loss = loss

        assert _best([R(0.3), R(0.1), R(0.1), R(math.nan)]) == 1
        assert _best([R(math.inf), R(math.nan)]) is None


SMALL = dict(n_static=400, n_mobile=200)


@pytest.fixture(scope="module")
def small_drawer_run():
    sc = scene("drawer", 1, **SMALL)
    cfg = PipelineConfig(kind="prismatic", seed=5, k_mobile=2, k_cross=2)
    return sc, cfg, run(sc.set0, sc.set1, cfg)


class TestStage3a:
    def test_phase_ordering(self, small_drawer_run):
        _, cfg, res = small_drawer_run
        phases = [t.phase for t in res.report("3a").trials]
        assert phases == ["mobile-only"] * cfg.k_mobile + ["cross-mobile"] * (cfg.k_cross + 1) + ["joint"]
        seeded = res.report("3a").trials[cfg.k_mobile + cfg.k_cross]
        assert seeded.seed is None

    def test_selected_trials_attain_phase_minimum(self, small_drawer_run):
        _, cfg, res = small_drawer_run
        trials = res.report("3a").trials
        mob = [t for t in trials if t.phase == "mobile-only"]
        best = min(range(len(mob)), key=lambda i: (mob[i].final_loss, i))
        # the T^m-seeded cross-mobile trial starts from the best mobile-only result
        np.testing.assert_array_equal(trials[cfg.k_mobile + cfg.k_cross].init, mob[best].final)
        cross = [t for t in trials if t.phase == "cross-mobile"]
        cbest = min(range(len(cross)), key=lambda i: (cross[i].final_loss, i))
        joint = trials[-1]
        np.testing.assert_array_equal(joint.init[:len(cross[cbest].final)], cross[cbest].final)

    def test_joint_not_worse_than_its_start(self, small_drawer_run):
        _, _, res = small_drawer_run
        joint = res.report("3a").trials[-1]
        assert joint.final_loss <= res.report("3a").initial_loss

    def test_drawer_recovery_small_scene(self, small_drawer_run):
        sc, _, res = small_drawer_run
        assert isinstance(res.articulation, Prismatic)
        m = articulation_metrics(res.articulation, sc.truth.articulation)
        assert m.err_a < 5 and m.err_t < 0.05

    @pytest.mark.slow
    @pytest.mark.xfail(reason="independent resampling puts the loss minimum itself 0.02-0.8 deg from truth",
                       strict=False)
    def test_drawer_recovery_tight(self):
        sc = scene("drawer", 0)
        res = run(sc.set0, sc.set1, PipelineConfig(kind="prismatic"))
        m = articulation_metrics(res.articulation, sc.truth.articulation)
        assert m.err_a < 0.1 and m.err_t < 1e-3

    def test_skip_cross_mobile_returns_mobile_only_best(self):
        sc = scene("drawer", 1, **SMALL)
        M0, M1 = truth_fields(sc)
        cfg = PipelineConfig(kind="prismatic", k_mobile=2, skip_phases=("cross-mobile",), max_iters=200)
        T, *_ , rep, T_m, T_cm = stage3a(sc.set0, sc.set1, M0, M1, "prismatic", 2, 1, 0, cfg)
        assert [t.phase for t in rep.trials] == ["mobile-only"] * 2
        assert T_cm is None and T.distance == T_m.distance

    def test_skip_mobile_only_has_no_seeded_trial(self):
        sc = scene("drawer", 1, **SMALL)
        M0, M1 = truth_fields(sc)
        cfg = PipelineConfig(kind="prismatic", skip_phases=("mobile-only",), max_iters=200)
        *_, rep, T_m, _ = stage3a(sc.set0, sc.set1, M0, M1, "prismatic", 1, 2, 0, cfg)
        assert [t.phase for t in rep.trials] == ["cross-mobile"] * 2 + ["joint"]
        assert T_m is None


class TestRun:
    def test_deterministic(self, small_drawer_run):
        sc, cfg, res = small_drawer_run
        again = run(sc.set0, sc.set1, cfg)
        assert again.articulation.axis.tobytes() == res.articulation.axis.tobytes()
        assert again.articulation.distance == res.articulation.distance
        assert again.M0.logits.tobytes() == res.M0.logits.tobytes()
        assert [t.final_loss for t in again.report("3a").trials] == [t.final_loss for t in res.report("3a").trials]

    def test_result_cardinalities(self, small_drawer_run):
        sc, _, res = small_drawer_run
        assert len(res.M0) == len(sc.set0) and len(res.M1) == len(sc.set1)
        assert not res.failed and [r.stage for r in res.reports] == ["2a", "3a", "3c"]

    @pytest.mark.parametrize("kind", ["hinge", "flat-slider"])
    def test_no_motion_reports_zero_motion(self, kind):
        sc = generate(ArchetypeSpec(kind, seed=2, magnitude=0.0))
        art_kind = "revolute" if kind == "hinge" else "prismatic"
        res = run(sc.set0, sc.set1, PipelineConfig(kind=art_kind))
        T = res.articulation
        assert not res.failed
        assert abs(T.angle if isinstance(T, Revolute) else T.distance) < 0.01

    def test_empty_rejected(self):
        sc = scene("hinge", 0)
        with pytest.raises(ValueError):
            run(sc.set0.subset(np.array([], dtype=int)), sc.set1)
