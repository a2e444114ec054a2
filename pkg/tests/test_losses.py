"""Cached objectives against direct assembly + weighted Chamfer, and their gradients."""
import numpy as np
import pytest

from artgauss.chamfer import WeightedPointSet, weighted_chamfer
from artgauss.core import Prismatic, Revolute
from artgauss.losses import CrossMobileObjective, CrossStaticObjective, MobileOnlyObjective
from artgauss.mobility import (MobilityField, cross_mobile_target, cross_static_target, mobile_only_pair,
                               mobility_mean, reference_set)
from artgauss.optim import ParamVector, articulation_params, decode_articulation
from conftest import random_set
from oracles import central_diff, rel_err


def wps(c):
    return WeightedPointSet(c.points, c.weights)


def random_art(rng, kind):
    a = rng.standard_normal(3)
    a /= np.linalg.norm(a)
    if kind == "revolute":
        return Revolute(a, rng.uniform(-0.5, 0.5, 3), float(rng.uniform(-1.5, 1.5)))
    return Prismatic(a, float(rng.uniform(-0.5, 0.5)))


def raw_params(rng, kind):
    p = articulation_params(random_art(rng, kind))
    p.values[:3] *= rng.uniform(0.5, 2.0)  # non-unit raw axis
    return p


def stable_fd(f, x, h=1e-5):
    """Central differences, or None when halving h changes the estimate (an NN switch)."""
    a, b = central_diff(f, x, h), central_diff(f, x, h / 2)
    if rel_err(a, b) > 1e-7:
        return None
    return a


@pytest.fixture
def sets(rng):
    return random_set(rng, 45), random_set(rng, 55)


class TestCrossStatic:
    def test_matches_assembly(self, rng, sets):
        s0, s1 = sets
        for _ in range(5):
            l0, l1 = rng.standard_normal(45) * 2, rng.standard_normal(55) * 2
            lam = float(rng.uniform(0, 0.5))
            v, _, _ = CrossStaticObjective(s0, s1, lam)(l0, l1)
            M0, M1 = MobilityField(l0), MobilityField(l1)
            ref = sum(weighted_chamfer(wps(cross_static_target(l, s0, M0, s1, M1)), wps(reference_set(s)))
                      for l, s in ((0, s0), (1, s1)))
            assert abs(v - (ref + lam * mobility_mean(M0, M1))) < 1e-12

    def test_logit_gradients(self, rng, sets):
        s0, s1 = sets
        obj = CrossStaticObjective(s0, s1, 0.1)
        for _ in range(10):
            l0, l1 = rng.standard_normal(45), rng.standard_normal(55)
            _, g0, g1 = obj(l0, l1)
            assert rel_err(g0, central_diff(lambda v: obj(v, l1)[0], l0)) < 1e-5
            assert rel_err(g1, central_diff(lambda v: obj(l0, v)[0], l1)) < 1e-5


class TestCrossMobile:
    @pytest.mark.parametrize("kind", ["revolute", "prismatic"])
    def test_matches_assembly(self, rng, sets, kind):
        s0, s1 = sets
        obj = CrossMobileObjective(s0, s1)
        for _ in range(5):
            p = raw_params(rng, kind)
            l0, l1 = rng.standard_normal(45) * 2, rng.standard_normal(55) * 2
            v, _, _, _ = obj(p, l0, l1)
            T = decode_articulation(p)
            M0, M1 = MobilityField(l0), MobilityField(l1)
            ref = sum(weighted_chamfer(wps(cross_mobile_target(l, s0, M0, s1, M1, T)), wps(reference_set(s)))
                      for l, s in ((0, s0), (1, s1)))
            assert abs(v - ref) < 1e-12

    @pytest.mark.parametrize("kind", ["revolute", "prismatic"])
    def test_gradients(self, rng, sets, kind):
        s0, s1 = sets
        obj = CrossMobileObjective(s0, s1)
        checked = 0
        for _ in range(40):
            p = raw_params(rng, kind)
            l0, l1 = rng.standard_normal(45), rng.standard_normal(55)
            _, ga, g0, g1 = obj(p, l0, l1)
            fa = stable_fd(lambda v: obj(p.with_values(v), l0, l1)[0], p.values)
            if fa is None:
                continue
            assert rel_err(ga, fa) < 1e-5
            assert rel_err(g0, central_diff(lambda v: obj(p, v, l1)[0], l0)) < 1e-5
            assert rel_err(g1, central_diff(lambda v: obj(p, l0, v)[0], l1)) < 1e-5
            checked += 1
            if checked == 8:
                break
        assert checked >= 5

    def test_prune_bounds(self, rng, sets):
        s0, s1 = sets
        obj = CrossMobileObjective(s0, s1)
        p = raw_params(rng, "revolute")
        l0, l1 = rng.standard_normal(45) * 4, rng.standard_normal(55) * 4
        exact = obj(p, l0, l1)[0]
        pruned, _, g0, _ = obj(p, l0, l1, prune=0.05)
        # dropped Gaussians keep their weight on the static side only
        assert pruned != exact
        assert np.all(g0[1 / (1 + np.exp(-l0)) < 0.05] == 0)

    def test_cache_does_not_leak(self, rng, sets):
        s0, s1 = sets
        obj = CrossMobileObjective(s0, s1)
        l0, l1 = rng.standard_normal(45), rng.standard_normal(55)
        p, q = raw_params(rng, "revolute"), raw_params(rng, "revolute")
        a = obj(p, l0, l1)[0]
        obj(q, l0, l1)
        assert obj(p, l0, l1)[0] == a
        assert CrossMobileObjective(s0, s1)(q, l0, l1)[0] == obj(q, l0, l1)[0]


class TestMobileOnly:
    @pytest.mark.parametrize("kind", ["revolute", "prismatic"])
    def test_matches_gated_assembly(self, rng, sets, kind):
        s0, s1 = sets
        l0, l1 = rng.standard_normal(45) * 2, rng.standard_normal(55) * 2
        obj = MobileOnlyObjective(s0, s1, l0, l1)
        M0, M1 = MobilityField(l0), MobilityField(l1)
        for _ in range(5):
            p = raw_params(rng, kind)
            X, Y = mobile_only_pair(1, s0, M0, s1, M1, decode_articulation(p))
            ref = weighted_chamfer(wps(X), wps(Y), x_candidates=M1.m > 0.5, y_candidates=M0.m > 0.5)
            assert abs(obj(p)[0] - ref) < 1e-12

    def test_fallback_to_all_candidates(self, rng, sets):
        s0, s1 = sets
        l0, l1 = np.full(45, -3.0), rng.standard_normal(55)
        obj = MobileOnlyObjective(s0, s1, l0, l1, min_candidates=10)
        M0, M1 = MobilityField(l0), MobilityField(l1)
        p = raw_params(rng, "prismatic")
        X, Y = mobile_only_pair(1, s0, M0, s1, M1, decode_articulation(p))
        ref = weighted_chamfer(wps(X), wps(Y), x_candidates=M1.m > 0.5)
        assert abs(obj(p)[0] - ref) < 1e-12

    @pytest.mark.parametrize("kind", ["revolute", "prismatic"])
    def test_gradient(self, rng, sets, kind):
        s0, s1 = sets
        checked = 0
        for _ in range(40):
            l0, l1 = rng.standard_normal(45), rng.standard_normal(55)
            obj = MobileOnlyObjective(s0, s1, l0, l1)
            p = raw_params(rng, kind)
            fd = stable_fd(lambda v: obj(p.with_values(v))[0], p.values)
            if fd is None:
                continue
            assert rel_err(obj(p)[1], fd) < 1e-5
            checked += 1
            if checked == 8:
                break
        assert checked >= 5

    def test_truth_is_near_zero_on_identical_part(self, rng):
        s0 = random_set(rng, 80)
        T = Revolute([0, 0, 1], [0.1, 0, 0], 0.6)
        s1 = s0.transformed(T)
        ones = np.full(80, 5.0)
        v, g = MobileOnlyObjective(s0, s1, ones, ones)(articulation_params(T))
        assert v < 1e-20 and np.max(np.abs(g)) < 1e-9


def test_param_vector_with_values_is_copy():
    p = ParamVector(np.zeros(4), {"x": slice(0, 4)})
    q = p.with_values(np.ones(4))
    q.values[0] = 5
    assert p.values[0] == 0
