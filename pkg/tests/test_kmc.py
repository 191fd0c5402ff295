import math

import numpy as np
import pytest

from gibbsflow import kmc
from gibbsflow.core import Box, Configuration, FiniteMeasure
from gibbsflow.dynamics import RateFamily
from gibbsflow.exact import build_generator, evolve
from gibbsflow.gibbs import Specification, ising1d


def test_all_zero_rates_empty_path():
    rf = RateFamily.independent([[0, 0], [0, 0]])
    p = kmc.sample_path(rf, Configuration.constant(Box.segment(2), 2), 5.0, seed=1)
    assert p.events == ()


def test_path_invariants_and_determinism(ising_ring):
    spec, box, rf = ising_ring
    w = Configuration.constant(box, 2)
    a = kmc.sample_path(rf, w, 4.0, seed=9, index=3)
    b = kmc.sample_path(rf, w, 4.0, seed=9, index=3)
    assert a == b
    state = dict(zip(box.sites, w.states))
    prev = 0.0
    for s, x, i in a.events:
        assert prev < s <= 4.0
        assert state[x] != i
        state[x] = i
        prev = s
    assert a.state_at(4.0).states == tuple(state[x] for x in box.sites)
    with pytest.raises(ValueError):
        kmc.JumpPath(w, ((1.0, (0,), 2), (0.5, (1,), 2)), 4.0)


def test_two_state_jump_count_poisson():
    rf = RateFamily.independent([[0, 1], [1, 0]])
    box = Box.segment(1)
    eng = kmc._engine(rf, box)
    init = np.zeros((100000, 1), dtype=np.int64)
    _, counts, _, _ = kmc._simulate(eng, init, 1.0, kmc.batch_rng(4, 0))
    mean = counts.mean()
    assert abs(mean - 1.0) < 3 / math.sqrt(100000)


def test_marginals_match_exact(ring3):
    spec = Specification(ising1d(), 0.5)
    rf = RateFamily.heat_bath(spec)
    w = Configuration(ring3, (1, 2, 1), 2)
    em = kmc.estimate_marginal(rf, w, 1.0, ring3.sites, 100000, seed=2)
    ex = evolve(build_generator(rf, ring3), FiniteMeasure.point(w), 1.0)
    assert 0.5 * np.abs(em.freq - ex.weights).sum() < 0.01
    assert np.all((ex.weights >= em.lo - 1e-3) & (ex.weights <= em.hi + 1e-3))


def test_estimate_marginal_trivial_cases(ring3):
    rf = RateFamily.heat_bath(Specification(ising1d(), 0.0))
    w = Configuration(ring3, (1, 2, 1), 2)
    em0 = kmc.estimate_marginal(rf, w, 0.0, ring3.sites, 1000, seed=0)
    assert em0.freq.sum() == 1 and np.all(em0.lo == em0.hi)
    emu = kmc.estimate_marginal(rf, w, 20.0, ring3.sites, 100000, seed=0)
    se = math.sqrt(1 / 8 * 7 / 8 / emu.n_paths)
    assert np.all(np.abs(emu.freq - 1 / 8) <= 3 * se)
    with pytest.raises(ValueError):
        kmc.estimate_marginal(rf, w, 1.0, ring3.sites, 10, seed=0)


def test_jobs_do_not_change_estimates(ring3):
    rf = RateFamily.heat_bath(Specification(ising1d(), 0.5))
    w = Configuration.constant(ring3, 2)
    a = kmc.estimate_marginal(rf, w, 1.0, ring3.sites, 40000, seed=5, jobs=1)
    b = kmc.estimate_marginal(rf, w, 1.0, ring3.sites, 40000, seed=5, jobs=3)
    np.testing.assert_array_equal(a.freq, b.freq)


def test_girsanov_identity_cases(ising_torus):
    spec, box, rf = ising_torus
    w = Configuration.constant(box, 2)
    empty = kmc.PerturbedFamily(rf, [])
    p = kmc.sample_path(rf, w, 1.0, seed=3)
    assert kmc.girsanov_weight(rf, empty, p, 1.0) == 1.0
    # base already equals its own minimal-rate perturbation
    const = RateFamily.independent([[0, 0.3], [0.3, 0]])
    pert = kmc.PerturbedFamily(const, [box.sites[0]])
    for s in range(5):
        path = kmc.sample_path(pert, w, 2.0, seed=s)
        assert kmc.girsanov_weight(const, pert, path, 2.0) == pytest.approx(1.0)


def test_girsanov_pathwise_matches_batch(ising_torus):
    spec, box, rf = ising_torus
    pert = kmc.PerturbedFamily(rf, [box.sites[0], box.sites[1]])
    w = Configuration(box, (1, 2, 2, 1), 2)
    eng = kmc._engine(pert, box)
    gir = kmc._Girsanov(kmc._engine(rf, box), np.array([0, 1]))
    for s in range(5):
        path = kmc.sample_path(pert, w, 1.0, seed=s)
        _, _, lw, _ = kmc._simulate(eng, w.as_array()[None, :], 1.0, kmc.path_rng(s, 0), gir)
        assert kmc.girsanov_weight(rf, pert, path, 1.0) == pytest.approx(math.exp(lw[0]))


def test_girsanov_normalisation(ising_torus):
    spec, box, rf = ising_torus
    pert = kmc.PerturbedFamily(rf, [box.sites[0]])
    ge = kmc.girsanov_estimate(rf, pert, Configuration.constant(box, 2), 1.0, box.sites,
                               100000, seed=11)
    assert abs(ge.mean_weight - 1) <= 3 * ge.se_weight


def test_mass_bound_two_state():
    rf = RateFamily.independent([[0, 1], [1, 0]])
    mb = kmc.mass_bound(rf, 1.0, [0])
    assert mb.rho == pytest.approx((1 - math.exp(-2)) / 2)
    assert mb.C > 0
    assert mb.tail < mb.rho / 2
    empty = kmc.mass_bound(rf, 1.0, [])
    assert empty.C == pytest.approx(1.0) and empty.kappa == 1.0


def test_mass_bound_errors():
    with pytest.raises(ValueError):
        kmc.mass_bound(RateFamily.independent([[0, 1], [0, 0]]), 1.0, [0])
    with pytest.raises(ValueError):
        kmc.mass_bound(RateFamily.independent([[0, 1], [1, 0]]), 0.0, [0])


def test_mass_bound_below_empirical(ising_torus):
    spec, box, rf = ising_torus
    mb = kmc.mass_bound(rf, 0.5, [box.sites[0]])
    em = kmc.estimate_marginal(rf, Configuration.constant(box, 2), 0.5, [box.sites[0]],
                               100000, seed=1)
    assert mb.C > 0 and em.freq.min() >= mb.C


def test_jsonl_and_csv_round_trip(tmp_path, ising_ring):
    spec, box, rf = ising_ring
    w = Configuration.constant(box, 2)
    p = kmc.sample_path(rf, w, 3.0, seed=2)
    p.to_jsonl(tmp_path / "p.jsonl")
    q = kmc.JumpPath.from_jsonl(tmp_path / "p.jsonl", w, 3.0)
    assert q == p
    em = kmc.estimate_marginal(rf, w, 1.0, [box.sites[0]], 1000, seed=1)
    em.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "cylinder,freq,ci_lo,ci_hi" and len(lines) == 3
