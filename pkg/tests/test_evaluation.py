import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artgauss.core import Prismatic, Revolute
from artgauss.evaluation import (TABLE_COLUMNS, ArticulationMetrics, SweepReport, SweepTrial, _ranks,
                                 articulation_metrics, axis_error, format_table, image_metrics, iou,
                                 is_success, part_chamfer, pivot_error, psnr, rotation_error,
                                 translation_error, trial_sweep)
from artgauss.mobility import MobilityField
from artgauss.render import RenderOutput
from conftest import scene

X, Y, Z = np.eye(3)

unit3 = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1).map(
    lambda v: np.array(v) / np.linalg.norm(v))


class TestAxis:
    def test_cases(self):
        assert axis_error(Z, Z) == 0
        assert axis_error(-Z, Z) == 0
        assert axis_error(X, Z) == pytest.approx(90)

    @given(unit3, unit3)
    def test_symmetric(self, a, b):
        assert axis_error(a, b) == pytest.approx(axis_error(b, a), abs=1e-9)
        assert 0 <= axis_error(a, b) <= 90 + 1e-9

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            axis_error([0, 0, 2], Z)


class TestPivot:
    def test_slide_along_axis(self):
        assert pivot_error((Z, [0, 0, 0]), (Z, [0, 0, 5])) == pytest.approx(0)

    def test_parallel_offset(self):
        assert pivot_error((Z, [0, 0, 0]), (Z, [0.2, 0, 3])) == pytest.approx(0.2)

    def test_skew_lines(self):
        assert pivot_error((X, [0, 0, 0]), (Y, [0, 0, 1])) == pytest.approx(1.0)

    @given(unit3, unit3, st.floats(-3, 3), st.floats(-3, 3))
    def test_invariant_to_sliding(self, a, b, s, t):
        p, q = np.array([0.1, -0.2, 0.3]), np.array([-0.4, 0.5, 0.0])
        base = pivot_error((a, p), (b, q))
        assert pivot_error((a, p + s * a), (b, q + t * b)) == pytest.approx(base, abs=1e-9)
        assert pivot_error((b, q), (a, p)) == pytest.approx(base, abs=1e-9)


class TestRotation:
    def test_cases(self):
        assert rotation_error((Z, 0.4), (Z, 0.4)) == 0
        assert rotation_error((-Z, -0.4), (Z, 0.4)) == 0
        assert rotation_error((Z, math.radians(30)), (Z, math.radians(40))) == pytest.approx(10)

    @given(unit3, st.floats(-3, 3))
    def test_flip_exact(self, a, t):
        assert rotation_error((-a, -t), (a, t)) == pytest.approx(0, abs=1e-5)

    @given(unit3, unit3, st.floats(-3, 3), st.floats(-3, 3))
    def test_symmetric(self, a, b, s, t):
        assert rotation_error((a, s), (b, t)) == pytest.approx(rotation_error((b, t), (a, s)), abs=1e-9)


class TestTranslation:
    def test_cases(self):
        assert translation_error((Z, 1.0), (Z, 1.0)) == 0
        assert translation_error((Z, 1.0), (Z, 1.1)) == pytest.approx(0.1)
        assert translation_error((X, 1.0), (Y, 1.0)) == pytest.approx(math.sqrt(2))

    def test_sign_symmetry(self):
        assert translation_error((-Z, -0.3), (Z, 0.3)) == 0


class TestSuccess:
    def test_boundaries(self):
        assert is_success(ArticulationMetrics("revolute", 4.9, err_p=0.049, err_r=9.9))
        assert not is_success(ArticulationMetrics("revolute", 5.0, err_p=0.0, err_r=0.0))
        assert not is_success(ArticulationMetrics("prismatic", 1.0, err_t=0.06))
        assert not is_success(ArticulationMetrics("prismatic", 1.0, err_t=0.05))

    def test_relaxed(self):
        assert is_success(ArticulationMetrics("prismatic", 9.0, err_t=0.09), factor=2)

    @given(st.floats(0, 12), st.floats(0, 0.1), st.floats(0, 20), st.floats(0, 1))
    def test_monotone(self, a, p, r, shrink):
        m = ArticulationMetrics("revolute", a, err_p=p, err_r=r)
        smaller = ArticulationMetrics("revolute", a * shrink, err_p=p * shrink, err_r=r * shrink)
        assert not (is_success(m) and not is_success(smaller))

    def test_metric_validation(self):
        with pytest.raises(ValueError):
            ArticulationMetrics("revolute", 1.0, err_t=0.1)
        with pytest.raises(ValueError):
            ArticulationMetrics("prismatic", math.nan, err_t=0.1)

    def test_articulation_metrics(self):
        m = articulation_metrics(Revolute(Z, [1, 0, 3], 0.5), Revolute(-Z, [1, 0, 0], -0.5))
        assert m.err_a == 0 and m.err_p == pytest.approx(0) and m.err_r == pytest.approx(0, abs=1e-6)
        with pytest.raises(ValueError):
            articulation_metrics(Prismatic(Z, 1), Revolute(Z, [0, 0, 0], 1))


class TestPartChamfer:
    def test_truth_is_small(self):
        sc = scene("drawer", 0)
        lab = sc.truth.labels0
        pc = part_chamfer(sc.set0, lab, lab, n=10000, seed=1)
        bound = 3 * float(np.mean(sc.set0.scales)) ** 2
        assert pc.cd_s < bound and pc.cd_m < bound and pc.cd_w < bound

    def test_flipped_labels(self):
        sc = scene("drawer", 0)
        lab = sc.truth.labels0
        good = part_chamfer(sc.set0, lab, lab, n=4000)
        bad = part_chamfer(sc.set0, 1 - lab, lab, n=4000)
        assert bad.cd_s > 10 * good.cd_s and bad.cd_m > 10 * good.cd_m
        assert bad.cd_w == good.cd_w

    def test_empty_category_absent(self):
        sc = scene("drawer", 0)
        pc = part_chamfer(sc.set0, np.zeros(len(sc.set0)), sc.truth.labels0, n=500)
        assert pc.cd_m is None and pc.cd_s is not None


def _img(color, seg, depth=None):
    h, w = seg.shape
    return RenderOutput(color, np.ones((h, w)) if depth is None else depth, seg, np.ones((h, w)))


class TestImages:
    def test_identical(self, rng):
        c = rng.random((8, 8, 3))
        seg = rng.integers(0, 3, (8, 8)).astype(np.uint8)
        m = image_metrics(_img(c, seg), _img(c, seg))
        assert m.psnr == math.inf and m.depth_mae == 0 and m.miou == 1

    def test_channel_offset_psnr(self, rng):
        c = rng.random((6, 5, 3)) * 0.8
        d = c.copy()
        d[..., 1] += 0.1
        expected = 20 * math.log10(1 / 0.1) - 10 * math.log10(1 / 3)
        assert psnr(d, c) == pytest.approx(expected, rel=1e-9)

    def test_disjoint_segmentations(self):
        a = np.zeros((4, 4), np.uint8)
        a[:2] = 1
        b = np.zeros((4, 4), np.uint8)
        b[2:] = 2
        m = image_metrics(_img(np.zeros((4, 4, 3)), a), _img(np.zeros((4, 4, 3)), b))
        assert m.iou_s == 0 and m.iou_m == 0

    def test_depth_mae_finite_only(self):
        d1 = np.array([[1.0, np.inf], [2.0, 3.0]])
        d2 = np.array([[1.5, 1.0], [np.inf, 3.0]])
        seg = np.zeros((2, 2), np.uint8)
        m = image_metrics(_img(np.zeros((2, 2, 3)), seg, d1), _img(np.zeros((2, 2, 3)), seg, d2))
        assert m.depth_mae == pytest.approx(0.25)

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError):
            image_metrics(_img(np.zeros((2, 2, 3)), np.zeros((2, 2), np.uint8)),
                          _img(np.zeros((3, 2, 3)), np.zeros((3, 2), np.uint8)))

    def test_iou_empty_union(self):
        assert iou(np.zeros(4, bool), np.zeros(4, bool)) == 1.0


class TestSweep:
    def test_ranks_stable(self):
        assert _ranks([0.3, 0.1, 0.3, math.inf]) == [2, 1, 3, 4]

    def test_mean_ranks(self):
        ts = [SweepTrial("f", i, i, l, r, s) for i, (l, r, s) in enumerate([(0.1, 1, True), (0.5, 3, False),
                                                                           (0.2, 2, True)])]
        rep = SweepReport(ts)
        assert rep.mean_ranks("f") == (1.5, 3.0)
        assert rep.success_rate("f") == pytest.approx(2 / 3)

    def test_single_trial_and_determinism(self):
        sc = scene("drawer", 0, n_static=400, n_mobile=200)
        M0 = MobilityField.from_mobility(sc.truth.labels0.astype(float))
        M1 = MobilityField.from_mobility(sc.truth.labels1.astype(float))
        from artgauss.optim import ConvergenceCriterion

        crit = ConvergenceCriterion(20, 1e-3, 200)
        a = trial_sweep(sc.set0, sc.set1, M0, M1, sc.truth.articulation, 1, seed=3, criterion=crit)
        b = trial_sweep(sc.set0, sc.set1, M0, M1, sc.truth.articulation, 1, seed=3, criterion=crit)
        assert len(a.trials) == 2 and all(t.rank == 1 for t in a.trials)
        assert [t.final_loss for t in a.trials] == [t.final_loss for t in b.trials]


class TestTable:
    def test_units(self):
        text = format_table([("run", {"err_a": 0.0344, "err_p": 0.002, "err_r": 0.5, "success": True})])
        header = text.splitlines()[0]
        assert "err_a(1e-2 DEG)" in header and "err_p(1e-3)" in header and "CD_s(1e-3)" in header
        row = text.splitlines()[1].split()
        assert row[1] == "3.44" and row[2] == "2.00" and row[3] == "50.00" and row[-1] == "yes"

    def test_column_scales(self):
        scales = {k: s for k, _, s in TABLE_COLUMNS}
        assert scales["err_a"] == 1e2 and scales["err_r"] == 1e2
        assert scales["err_p"] == 1e3 and scales["err_t"] == 1e3 and scales["cd_w"] == 1e3
