import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from r2l.infometrics import (JointHist, channel_average, conditional_entropy, entropies, entropy_from_maps,
                             entropy_report, joint_histogram, marginal_entropy)
from r2l.net import ArchConfig, init_params

B = 10


def _random_hist(rng, bins=B):
    p = rng.random((bins, bins)) ** rng.uniform(0.5, 6)
    p[rng.random((bins, bins)) < rng.uniform(0, 0.8)] = 0.0
    if p.sum() == 0:
        p[0, 0] = 1.0
    edges = np.linspace(0, 1, bins + 1)
    return JointHist(p / p.sum(), edges, edges, 1)


def test_identities_on_random_histograms():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h = _random_hist(rng)
        hl, hr, hlr, hrl = entropies(h)
        assert abs(hlr + hr - hrl - hl) < 1e-9
        assert 0.0 <= hlr <= hl + 1e-12 <= math.log(B) + 1e-12
        assert 0.0 <= hrl <= hr + 1e-12 <= math.log(B) + 1e-12


def _brute(map_l, map_r, bins):
    """Count co-located bin pairs by hand and evaluate the entropy sums directly."""
    l, r = np.ravel(map_l), np.ravel(map_r)

    def idx(v, lo, hi):
        hi = hi if hi > lo else lo + 1e-12
        return min(int(math.floor((v - lo) / (hi - lo) * bins)), bins - 1)

    bl = [idx(v, l.min(), l.max()) for v in l]
    br = [idx(v, r.min(), r.max()) for v in r]
    n = len(l)
    joint = Counter(zip(bl, br))
    pl, pr = Counter(bl), Counter(br)
    H_l = -sum(c / n * math.log(c / n) for c in pl.values())
    H_r = -sum(c / n * math.log(c / n) for c in pr.values())
    H_lr = -sum(c / n * math.log((c / n) / (pr[b] / n)) for (_, b), c in joint.items())
    H_rl = -sum(c / n * math.log((c / n) / (pl[a] / n)) for (a, _), c in joint.items())
    return H_l, H_r, H_lr, H_rl


@given(st.integers(1, 16), st.integers(0, 2**31), st.integers(2, 10))
@settings(max_examples=200, deadline=None)
def test_matches_brute_force(n, seed, bins):
    rng = np.random.default_rng(seed)
    l = np.round(rng.normal(size=n), 1)
    r = np.round(rng.normal(size=n), 1)
    got = entropies(joint_histogram(l, r, bins))
    want = _brute(l, r, bins)
    for g, w in zip(got, want):
        assert abs(g - max(w, 0.0)) < 1e-12


def test_two_by_two_analytic_cases():
    a = np.array([0.0, 0.0, 1.0, 1.0])
    b = np.array([0.0, 1.0, 0.0, 1.0])
    h = joint_histogram(a, b, bins=2)
    assert abs(conditional_entropy(h, "L_given_R") - math.log(2)) < 1e-12
    assert abs(conditional_entropy(h, "R_given_L") - math.log(2)) < 1e-12
    same = joint_histogram(a, a, bins=2)
    assert conditional_entropy(same, "L_given_R") == 0.0
    assert abs(marginal_entropy(same, "L") - math.log(2)) < 1e-12


def test_histogram_contract():
    rng = np.random.default_rng(1)
    h = joint_histogram(rng.normal(size=(13, 57)), rng.normal(size=(13, 57)))
    assert h.p.shape == (10, 10) and (h.p >= 0).all()
    assert abs(h.p.sum() - 1.0) < 1e-12
    assert len(h.edges_l) == len(h.edges_r) == 11 and h.n == 13 * 57
    with pytest.raises(ValueError):
        joint_histogram(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        joint_histogram(np.array([np.nan, 1.0]), np.zeros(2))
    with pytest.raises(ValueError):
        conditional_entropy(h, "sideways")


def test_constant_map_has_zero_entropy():
    h = joint_histogram(np.full(20, 3.0), np.arange(20.0))
    assert marginal_entropy(h, "L") == 0.0
    assert conditional_entropy(h, "L_given_R") == 0.0


def test_channel_average_and_stacks():
    fm = np.random.default_rng(2).normal(size=(3, 4, 5, 6))
    assert np.allclose(channel_average(fm), fm.mean(-1))
    per_pair = entropy_from_maps(fm[..., 0], fm[..., 1])
    assert per_pair.shape == (3, 4)


def test_report_on_identical_branches():
    arch = ArchConfig()
    b = init_params(0, arch)
    cells = np.random.default_rng(3).poisson(0.5, size=(4, 50, 225)).astype(np.float32)
    rep = entropy_report(b, b, cells, cells, phase="init")
    assert rep.H_L_given_R == 0.0 and rep.H_R_given_L == 0.0
    assert rep.H_L == pytest.approx(rep.H_R, abs=1e-12)
    assert rep.phase == "init" and rep.bins == 10


def test_report_order_insensitive():
    r, l = init_params(0, tag="radar"), init_params(1, tag="lidar")
    rng = np.random.default_rng(4)
    rc = rng.poisson(0.2, size=(6, 50, 225)).astype(np.float32)
    lc = rng.poisson(1.0, size=(6, 50, 225)).astype(np.float32)
    a = entropy_report(r, l, rc, lc)
    perm = rng.permutation(6)
    b = entropy_report(r, l, rc[perm], lc[perm])
    for k in ("H_L", "H_R", "H_L_given_R", "H_R_given_L"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), abs=1e-12)
    assert abs(a.H_L_given_R + a.H_R - a.H_R_given_L - a.H_L) < 1e-9
