import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gibbsflow import entropy as ent
from gibbsflow.core import Box, Configuration, FiniteMeasure, decode, marginal, sub_index
from gibbsflow.dynamics import RateFamily
from gibbsflow.exact import build_generator, evolve
from gibbsflow.gibbs import Specification, gibbs_measure, ising1d


def test_relative_entropy_examples():
    box = Box.segment(3)
    u = FiniteMeasure.uniform(box, 2)
    assert ent.relative_entropy(u, u) == 0.0
    d = FiniteMeasure.point(Configuration.constant(box, 2))
    assert ent.relative_entropy(d, u) == pytest.approx(math.log(8))
    assert ent.relative_entropy(u, d) == ent.INF
    with pytest.raises(ValueError):
        ent.relative_entropy(u, FiniteMeasure.uniform(Box.segment(2), 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_relative_entropy_jointly_convex(seed):
    r = np.random.default_rng(seed)
    box = Box.segment(2)
    n1, n2, m1, m2 = (FiniteMeasure.from_unnormalized(box, 2, r.random(4) + 1e-3) for _ in range(4))
    mid_n = FiniteMeasure.from_unnormalized(box, 2, 0.5 * n1.weights + 0.5 * n2.weights)
    mid_m = FiniteMeasure.from_unnormalized(box, 2, 0.5 * m1.weights + 0.5 * m2.weights)
    lhs = ent.relative_entropy(mid_n, mid_m)
    rhs = 0.5 * ent.relative_entropy(n1, m1) + 0.5 * ent.relative_entropy(n2, m2)
    assert lhs <= rhs + 1e-12


def test_entropy_loss_two_state():
    rf = RateFamily.independent([[0, 1], [1, 0]])
    box = Box.segment(1)
    nu = FiniteMeasure(box, 2, np.array([0.75, 0.25]))
    mu = FiniteMeasure.uniform(box, 2)
    g = ent.entropy_loss_direct(rf, nu, mu)
    assert g == pytest.approx(-0.5 * math.log(3))
    # finite-difference oracle on the closed form p(t) = 1/2 + (p0 - 1/2) e^{-2t}
    def h(t):
        p = 0.5 + 0.25 * math.exp(-2 * t)
        return p * math.log(2 * p) + (1 - p) * math.log(2 * (1 - p))
    dt = 1e-5
    assert g == pytest.approx((h(dt) - h(-dt)) / (2 * dt), rel=1e-8)
    assert ent.entropy_loss_gamma(rf, nu, mu).g == pytest.approx(g)


def test_entropy_loss_zero_at_equilibrium(ising_ring):
    spec, box, rf = ising_ring
    mu = gibbs_measure(spec, box)
    assert abs(ent.entropy_loss_direct(rf, mu, mu)) < 1e-10
    gl = ent.entropy_loss_gamma(rf, mu, mu)
    assert abs(gl.S1) < 1e-15 and abs(gl.S2) < 1e-12


def test_entropy_loss_requires_positive_nu(ising_ring):
    spec, box, rf = ising_ring
    d = FiniteMeasure.point(Configuration.constant(box, 2))
    with pytest.raises(ValueError):
        ent.entropy_loss_direct(rf, d, gibbs_measure(spec, box))


def test_representations_agree(rng):
    for n in (3, 4):
        box = Box.ring(n)
        for beta in (0.3, 1.0):
            spec = Specification(ising1d(0.8, 0.1), beta)
            for rf in (RateFamily.heat_bath(spec), RateFamily.metropolis(spec)):
                mu = gibbs_measure(spec, box)
                nu = FiniteMeasure.from_unnormalized(box, 2, rng.random(2**n) + 1e-2)
                for sub in box.nested():
                    gd = ent.entropy_loss_direct(rf, nu, mu, sub)
                    gg = ent.entropy_loss_gamma(rf, nu, mu, sub)
                    assert abs(gd - gg.g) < 1e-9
                    assert gg.S1 >= 0


def test_gamma_integral(ising_ring, rng):
    spec, box, rf = ising_ring
    nu = FiniteMeasure.from_unnormalized(box, 2, rng.random(16))
    const = RateFamily.independent([[0, 0.7], [0.7, 0]])
    eta = Configuration(box, (1, 2, 2, 1), 2)
    sub = box.sub([(1,), (2,)])
    # constant rate: Gamma = c * nu(eta_Lambda)
    mass = marginal(nu, sub).weights[1 + 2 * 1]
    assert ent.gamma_integral(const, nu, (1,), 1, eta, sub) == pytest.approx(0.7 * mass)
    # full box: single term
    full = box.sub(box.sites)
    assert ent.gamma_integral(rf, nu, (1,), 1, eta, full) == pytest.approx(
        rf.rate(eta, (1,), 1) * nu.prob(eta))
    # additivity over nested volumes
    small, big = box.nested((1,))[:2]
    Ts, Tb = ent.gamma_table(rf, nu, small), ent.gamma_table(rf, nu, big)
    for k in range(16):
        cfg = decode(k, box, 2)
        for j in (1, 2):
            direct = sum(nu.weights[m] * rf.rate(decode(m, box, 2), (1,), j)
                         for m in range(16) if decode(m, box, 2)[(1,)] == cfg[(1,)])
            assert ent.gamma_integral(rf, nu, (1,), j, cfg, small) == pytest.approx(direct)
    pos = big.sites.index((1,))
    for c in range(2):
        summed = sum(Tb[pos, :, cb] for cb in range(2 ** len(big))
                     if (cb // 2**big.sites.index((1,))) % 2 == c)
        np.testing.assert_allclose(Ts[0, :, c], summed, atol=1e-15)


def test_phi():
    assert ent.phi(1, 1) == 0
    assert ent.phi(2, 1) == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        ent.phi(0, 1)


@settings(max_examples=300, deadline=None)
@given(*[st.floats(1e-6, 1e6) for _ in range(4)], st.floats(1e-3, 1e3))
def test_phi_properties(u1, u2, v1, v2, lam):
    assert ent.phi(u1, v1) >= 0
    assert ent.phi(u1, v1) == pytest.approx(ent.phi(v1, u1))
    assert ent.phi(lam * u1, lam * v1) == pytest.approx(lam * ent.phi(u1, v1), rel=1e-9, abs=1e-12)
    lhs = ent.phi(u1 + u2, v1 + v2)
    rhs = ent.phi(u1, v1) + ent.phi(u2, v2)
    assert lhs <= rhs * (1 + 1e-12) + 1e-12


def test_phi_subadditivity_bulk():
    r = np.random.default_rng(0)
    u = r.uniform(1e-3, 10, size=(10000, 4))
    lhs = ent.phi(u[:, 0] + u[:, 1], u[:, 2] + u[:, 3])
    rhs = ent.phi(u[:, 0], u[:, 2]) + ent.phi(u[:, 1], u[:, 3])
    assert np.all(lhs <= rhs + 1e-12)


def mid_trajectory(spec, box, rf, t=0.5):
    g = build_generator(rf, box)
    return evolve(g, FiniteMeasure.point(Configuration.constant(box, 2, 1)), t)


def test_alpha_beta_rho(ising_ring):
    spec, box, rf = ising_ring
    mu = gibbs_measure(spec, box)
    tab = ent.alpha_beta_rho(rf, spec, mu, box.nested()[1])
    np.testing.assert_allclose(tab.alpha, 0, atol=1e-15)
    nu = mid_trajectory(spec, box, rf)
    nested = box.nested()
    als = [ent.alpha_beta(rf, nu, s) for s in nested]
    for (a0, _), (a1, _), s0, s1 in zip(als, als[1:], nested, nested[1:]):
        for p, x in enumerate(s0.sites):
            assert 0 <= a0[p] <= a1[s1.sites.index(x)] + 1e-12
    for a, b in als:
        assert np.all(ent.beta_bound_holds(a, b, 2, rf.c_bar))
    full = ent.alpha_beta_rho(rf, spec, nu, nested[-1])
    np.testing.assert_array_equal(full.rho, 0.0)


def test_quantitative_differentiation(ising_ring, rng):
    spec, box, rf = ising_ring
    nu = mid_trajectory(spec, box, rf)
    sub = box.sub([(0,), (1,)])
    f_local = rng.normal(size=4)[sub_index(box, sub, 2)]
    chk = ent.quantitative_differentiation_check(nu, f_local, sub)
    assert chk.lhs < 1e-14
    ind = np.array([float(decode(k, box, 2)[(3,)] == 2) for k in range(16)])
    chk = ent.quantitative_differentiation_check(nu, ind, sub)
    assert chk.rhs == 1.0 and chk.lhs <= 1.0
    for _ in range(20):
        chk = ent.quantitative_differentiation_check(nu, rng.normal(size=16), sub)
        assert chk.holds


def test_conditional_ratio():
    spec = Specification(ising1d(), 0.5)
    box = Box.segment(7)
    mu = gibbs_measure(spec, box)
    exact = ent.conditional_ratio_check(spec, mu, (3,), 2, [(2,), (3,), (4,)])
    assert exact.lhs < 1e-12
    chk = ent.conditional_ratio_check(spec, mu, (3,), 2, [(3,)])
    assert chk.holds and chk.lhs > 0
    s0 = Specification(ising1d(), 0.0)
    z = ent.conditional_ratio_check(s0, gibbs_measure(s0, box), (3,), 1, [(3,)])
    assert z.lhs < 1e-15 and z.rhs == 0.0
    with pytest.raises(ValueError):
        ent.conditional_ratio_check(spec, mu, (0,), 2, [(0,)])


def test_h_bound(ising_ring, rng):
    spec, box, rf = ising_ring
    mu = gibbs_measure(spec, box)
    for _ in range(20):
        nu = FiniteMeasure.from_unnormalized(box, 2, rng.random(16) ** 4)
        for sub in box.nested():
            h = ent.relative_entropy(nu, mu, sub)
            assert 0 <= h <= ent.h_bound(nu, spec, sub)


def test_ledger_and_export(tmp_path, ising_ring):
    spec, box, rf = ising_ring
    nu = mid_trajectory(spec, box, rf)
    mu = gibbs_measure(spec, box)
    L = ent.entropy_ledger(rf, spec, nu, mu)
    assert all(abs(v.g_direct - v.g_gamma) < 1e-9 for v in L.volumes)
    assert L.volumes[-1].g_direct <= 0
    assert L.C1 > 0 and L.C2 > 0
    L.to_csv(tmp_path / "s.csv", tmp_path / "v.csv")
    L.to_json(tmp_path / "l.json")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert set(rows[0]) == {"n", "x", "alpha", "beta", "rho"}
    assert json.loads((tmp_path / "l.json").read_text())["C1"] == pytest.approx(L.C1)
