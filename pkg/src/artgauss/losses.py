"""Geometric-consistency objectives with analytic gradients.

The objectives evaluate the same quantities as assembling the component sets
from :mod:`artgauss.mobility` and calling
:func:`artgauss.chamfer.weighted_chamfer`, but they cache every nearest-neighbor
query whose operands do not move, so an optimizer step only re-queries the
transported block.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .chamfer import NNIndex
from .core import GaussianSet, rodrigues, skew
from .optim import ParamVector, decode_axis

_E = [skew(e) for e in np.eye(3)]


class Motion:
    """Articulation decoded from raw parameters, with reverse-mode gradients.

    ``sign=-1`` gives the inverse motion (negated angle or distance).
    """

    def __init__(self, params: ParamVector, sign: int = 1):
        self.kind = params.kind
        self.sign = sign
        self.axis, self._jac = decode_axis(params["axis"])
        if self.kind == "revolute":
            self.pivot = params["pivot"].copy()
            self.theta = sign * float(params["angle"][0])
            self.R = rodrigues(self.axis, self.theta)
        else:
            self.dist = sign * float(params["distance"][0])

    def apply(self, Y: np.ndarray) -> np.ndarray:
        if self.kind == "revolute":
            return (Y - self.pivot) @ self.R.T + self.pivot
        return Y + self.dist * self.axis

    def backprop(self, Y: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the articulation slices given ``dL/dY'`` = ``G``."""
        gsum = G.sum(axis=0)
        if self.kind == "prismatic":
            d_axis = self.dist * gsum
            d_dist = self.sign * float(self.axis @ gsum)
            return np.concatenate([self._jac @ d_axis, [d_dist]])
        dR = G.T @ (Y - self.pivot)  # dL/dR
        k = skew(self.axis)
        s, c = math.sin(self.theta), math.cos(self.theta)
        d_theta = float(np.sum(dR * (c * k + s * (k @ k))))
        d_axis = np.array([np.sum(dR * (s * e + (1 - c) * (e @ k + k @ e))) for e in _E])
        d_pivot = gsum - self.R.T @ gsum
        return np.concatenate([self._jac @ d_axis, d_pivot, [self.sign * d_theta]])


class _StatePair:
    def __init__(self, set0: GaussianSet, set1: GaussianSet):
        if len(set0) == 0 or len(set1) == 0:
            raise ValueError("both state sets must be nonempty")
        self.pos = (set0.means, set1.means)
        self.sig = (set0.opacities, set1.opacities)
        self.n = (len(set0), len(set1))
        self.ref_index = (NNIndex(set0.means), NNIndex(set1.means))
        # dself[l]: state-l means against their own reference (zero for
        # duplicates); dcross[l]: state 1-l means against reference l.
        self.dself = tuple(self.ref_index[l].query(self.pos[l])[1] for l in (0, 1))
        self.dcross = tuple(self.ref_index[l].query(self.pos[1 - l])[1] for l in (0, 1))
        # ref -> fixed part of target (the state-l duplicate and state 1-l
        # static block); the duplicate makes this zero, but it is computed.
        self.rfixed = tuple(
            np.minimum(self.dself[l], NNIndex(self.pos[1 - l]).query(self.pos[l])[1]) for l in (0, 1)
        )


class CrossStaticObjective:
    """Sum over states of Chamfer(cross-static target, reference), plus
    ``lam`` times the mean mobility."""

    def __init__(self, set0: GaussianSet, set1: GaussianSet, lam: float):
        self.pair = _StatePair(set0, set1)
        self.lam = float(lam)

    def __call__(self, logits0: np.ndarray, logits1: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        P = self.pair
        m = (expit(logits0), expit(logits1))
        grads = [np.zeros(P.n[0]), np.zeros(P.n[1])]
        total = 0.0
        for l in (0, 1):
            o = 1 - l
            sl, so = P.sig[l], P.sig[o]
            w_static_o = so * (1 - m[o])
            wx = sl.sum() + w_static_o.sum()
            tx = (sl @ P.dself[l] + w_static_o @ P.dcross[l]) / wx
            ty = sl @ P.rfixed[l] / sl.sum()
            total += tx + ty
            grads[o] += -so * m[o] * (1 - m[o]) * (P.dcross[l] - tx) / wx
        N = P.n[0] + P.n[1]
        total += self.lam * (m[0].sum() + m[1].sum()) / N
        for l in (0, 1):
            grads[l] += self.lam * m[l] * (1 - m[l]) / N
        return total, grads[0], grads[1]


class CrossMobileObjective:
    """Sum over states of Chamfer(cross-mobile target, reference).

    ``prune`` drops transported Gaussians whose mobility is below ``prune``;
    their contribution is bounded by that mobility and their logits receive
    no gradient. The default of zero keeps the loss exact.
    """

    def __init__(self, set0: GaussianSet, set1: GaussianSet):
        self.pair = _StatePair(set0, set1)
        self._cache: dict = {}

    def _moved(self, l: int, motion: Motion, art: ParamVector, keep: np.ndarray, prune: float):
        """Transported positions, their reference neighbors and distances.

        The full-set result for the last articulation is cached, which makes
        evaluations with a frozen articulation cheap.
        """
        Y = self.pair.pos[1 - l][keep]
        key = (l, art.values.tobytes())
        if prune > 0:
            Yt = motion.apply(Y)
            nn, d = self.pair.ref_index[l].query(Yt, exact_ties=False)
            return Y, Yt, nn, d
        hit = self._cache.get(l)
        if hit is None or hit[0] != key:
            Yt = motion.apply(Y)
            nn, d = self.pair.ref_index[l].query(Yt, exact_ties=False)
            hit = (key, Yt, nn, d)
            self._cache[l] = hit
        return Y, hit[1], hit[2], hit[3]

    def __call__(self, art: ParamVector, logits0, logits1, prune: float = 0.0, want_T: bool = True):
        P = self.pair
        m = (expit(logits0), expit(logits1))
        g_logits = [np.zeros(P.n[0]), np.zeros(P.n[1])]
        g_art = np.zeros(len(art.values)) if art.kind is not None else None
        total = 0.0
        for l in (0, 1):
            o = 1 - l
            sl, so = P.sig[l], P.sig[o]
            motion = Motion(art, sign=1 if l == 1 else -1)
            keep = np.flatnonzero(m[o] >= prune) if prune > 0 else np.arange(P.n[o])
            Y, Yt, nn, dmoved = self._moved(l, motion, art, keep, prune)
            w_moved = so[keep] * m[o][keep]
            wx = sl.sum() + so.sum()
            num = sl @ P.dself[l] + (so * (1 - m[o])) @ P.dcross[l] + w_moved @ dmoved
            tx = num / wx
            # reference -> target: only fall back to the moved block where the
            # fixed part does not already contain the reference point.
            wy = sl.sum()
            rmin = P.rfixed[l].copy()
            G = 2.0 * (w_moved / wx)[:, None] * (Yt - P.pos[l][nn])
            need = np.flatnonzero(rmin > 0)
            if len(need) and len(Yt):
                mi, md = NNIndex(Yt).query(P.pos[l][need])
                closer = md < rmin[need]
                rows = need[closer]
                rmin[rows] = md[closer]
                contrib = 2.0 * (sl[rows] / wy)[:, None] * (Yt[mi[closer]] - P.pos[l][rows])
                np.add.at(G, mi[closer], contrib)
            total += tx + sl @ rmin / wy
            dm = np.zeros(P.n[o])
            dm[keep] = dmoved
            # weights of the transported block do not affect wx (cross-mobile
            # total target weight is constant), so no quotient term.
            mo = m[o]
            grad_m = so * (dm - P.dcross[l]) / wx
            if prune > 0:
                # pruned logits are held fixed
                grad_m = np.where(mo >= prune, grad_m, 0.0)
            g_logits[o] += grad_m * mo * (1 - mo)
            if want_T and g_art is not None:
                g_art += motion.backprop(Y, G)
        return total, g_art, g_logits[0], g_logits[1]


class MobileOnlyObjective:
    """Chamfer between the state-1 mobile component and the transported
    state-0 mobile component.

    Nearest-neighbor candidates on each side are restricted to Gaussians
    labelled mobile (``m > threshold``); when a state has fewer than
    ``min_candidates`` such Gaussians every Gaussian of that state is used.
    Both KD-trees are built once: queries from state 1 are mapped back by
    the inverse motion, which preserves distances.
    """

    def __init__(self, set0: GaussianSet, set1: GaussianSet, logits0, logits1,
                 threshold: float = 0.5, min_candidates: int = 10, prune: float = 0.0):
        m0, m1 = expit(np.asarray(logits0)), expit(np.asarray(logits1))
        keep0 = np.flatnonzero(m0 >= prune) if prune > 0 else np.arange(len(set0))
        keep1 = np.flatnonzero(m1 >= prune) if prune > 0 else np.arange(len(set1))
        if len(keep0) == 0 or len(keep1) == 0:
            raise ValueError("pruning removed every Gaussian of a state")
        self.X = set1.means[keep1]
        self.wx = set1.opacities[keep1] * m1[keep1]
        self.Y = set0.means[keep0]
        self.wy = set0.opacities[keep0] * m0[keep0]
        if not self.wx.sum() > 0 or not self.wy.sum() > 0:
            raise ValueError("weighted Chamfer needs positive total weight on both sides")

        def cand(m):
            idx = np.flatnonzero(m > threshold)
            return idx if len(idx) >= min_candidates else np.arange(len(m))

        self.cx = cand(m1[keep1])
        self.cy = cand(m0[keep0])
        self.x_index = NNIndex(self.X[self.cx])
        self.y_index = NNIndex(self.Y[self.cy])

    def __call__(self, art: ParamVector) -> tuple[float, np.ndarray]:
        fwd, back = Motion(art, sign=1), Motion(art, sign=-1)
        Yt = fwd.apply(self.Y)
        # state-0 (moved) -> state-1 candidates
        j, _ = self.x_index.query(Yt, exact_ties=False)
        nx = self.cx[j]
        # state-1 -> moved state-0 candidates, via the inverse motion
        i, _ = self.y_index.query(back.apply(self.X), exact_ties=False)
        ny = self.cy[i]
        WX, WY = self.wx.sum(), self.wy.sum()
        ry = Yt - self.X[nx]
        rx = self.X - Yt[ny]
        dy = np.einsum("ij,ij->i", ry, ry)
        dx = np.einsum("ij,ij->i", rx, rx)
        value = float(self.wx @ dx / WX + self.wy @ dy / WY)
        G = (2.0 * self.wy / WY)[:, None] * ry
        np.add.at(G, ny, -(2.0 * self.wx / WX)[:, None] * rx)
        return value, fwd.backprop(self.Y, G)
