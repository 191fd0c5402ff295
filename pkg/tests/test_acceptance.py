"""Acceptance criteria 1-10; each test records one PASS/FAIL line in the terminal summary."""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE
from gibbsflow import entropy as ent
from gibbsflow import kmc
from gibbsflow.cli import lemma_suite
from gibbsflow.core import Box, Configuration, FiniteMeasure, marginal, total_variation
from gibbsflow.dynamics import RateFamily, detailed_balance_residual
from gibbsflow.exact import build_generator, evolve, spectrum_reality, stationary, trajectory
from gibbsflow.gibbs import (Specification, gibbs_measure, ising1d, ising2d, load_potential,
                             potts2d)


def record(n: int, ok: bool, detail: str, seconds: float, limit: float) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s / {limit:g}s]"
    ACCEPTANCE.append(line)
    print(line)


def potts1d(q=3, J=1.0):
    table = {f"{a},{b}": (-J if a == b else 0.0) for a in range(1, q + 1) for b in range(1, q + 1)}
    return load_potential({"q": q, "dim": 1, "terms": [{"sites": [[0], [1]], "table": table}]})


# 1 -----------------------------------------------------------------------------


def db_instances():
    out = []
    for n in range(2, 13):
        for beta in (0.3, 1.2):
            spec = Specification(ising1d(1.0, 0.25), beta)
            out.append((spec, Box.ring(n)))
            out.append((spec, Box.segment(n, "free")))
            out.append((spec, Box.segment(n, "fixed", exterior_default=2)))
    for lx, ly in [(2, 2), (2, 3), (3, 3), (2, 4), (2, 5), (3, 4), (2, 6)]:
        for beta in (0.2, 0.6):
            out.append((Specification(ising2d(1.0, 0.1), beta), Box.torus(lx, ly)))
    for n in range(2, 8):
        out.append((Specification(potts1d(3), 0.7), Box.ring(n)))
    for lx, ly in [(2, 2), (2, 3)]:
        out.append((Specification(potts2d(3), 0.5), Box.torus(lx, ly)))
    return [(s, b) for s, b in out if s.q ** len(b) <= 2**12]


def test_criterion_1_detailed_balance():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for spec, box in db_instances():
        mu = gibbs_measure(spec, box)
        for rf in (RateFamily.heat_bath(spec), RateFamily.metropolis(spec)):
            worst = max(worst, detailed_balance_residual(rf, mu))
            count += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-12 and dt < 10
    record(1, ok, f"max residual {worst:.2e} < 1e-12 over {count} (family, box) pairs", dt, 10)
    assert ok


# 2 -----------------------------------------------------------------------------


def test_criterion_2_spectrum():
    t0 = time.perf_counter()
    worst_asym = worst_imag = 0.0
    for spec, box in [(Specification(ising1d(), 0.5), Box.ring(4)),
                      (Specification(ising1d(1.0, 0.3), 1.0), Box.segment(5, "fixed", exterior_default=1)),
                      (Specification(ising2d(), 0.6), Box.torus(2, 3)),
                      (Specification(potts2d(3), 0.5), Box.torus(2, 2))]:
        mu = gibbs_measure(spec, box)
        for rf in (RateFamily.heat_bath(spec), RateFamily.metropolis(spec)):
            rep = spectrum_reality(build_generator(rf, box), mu)
            worst_asym = max(worst_asym, rep.asymmetry)
            worst_imag = max(worst_imag, rep.max_imag)
    g = build_generator(RateFamily.cyclic(3), Box.segment(1))
    cyc = spectrum_reality(g, stationary(g)).max_imag
    dt = time.perf_counter() - t0
    ok = worst_asym < 1e-10 and worst_imag < 1e-8 and cyc > 0.1 and dt < 30
    record(2, ok, f"reversible asym {worst_asym:.1e}, max|Im| {worst_imag:.1e}; "
                  f"cyclic max|Im| {cyc:.3f} > 0.1", dt, 30)
    assert ok


# 3 -----------------------------------------------------------------------------


def test_criterion_3_representation_agreement():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2026)
    worst, count = 0.0, 0
    for k in range(60):
        n = 3 + k % 2
        box = Box.ring(n)
        if k % 3 == 2:
            spec = Specification(potts1d(3, rng.uniform(0.2, 1.5)), rng.uniform(0.1, 1.5))
        else:
            spec = Specification(ising1d(rng.uniform(-1, 1.5), rng.uniform(-0.5, 0.5)),
                                 rng.uniform(0.1, 1.5))
        family = k % 4
        if family == 0:
            rf = RateFamily.heat_bath(spec)
        elif family == 1:
            rf = RateFamily.metropolis(spec)
        elif family == 2 and spec.q == 3:
            rf = RateFamily.cyclic(3)
        else:
            m = rng.uniform(0.1, 2.0, size=(spec.q, spec.q))
            rf = RateFamily.independent(m)
        mu = gibbs_measure(spec, box)
        nu = FiniteMeasure.from_unnormalized(box, spec.q, rng.random(spec.q**n) + 1e-3)
        for sub in box.nested():
            gd = ent.entropy_loss_direct(rf, nu, mu, sub)
            gg = ent.entropy_loss_gamma(rf, nu, mu, sub).g
            worst = max(worst, abs(gd - gg))
        count += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and count >= 50 and dt < 60
    record(3, ok, f"max |g_direct - g_gamma| {worst:.1e} < 1e-9 over {count} instances", dt, 60)
    assert ok


# 4 -----------------------------------------------------------------------------


def fd_error(rf, gen, nu0, mu, t, h):
    left = evolve(gen, nu0, t - h)
    mid = evolve(gen, left, h)
    right = evolve(gen, mid, h)
    fd = (ent.relative_entropy(right, mu) - ent.relative_entropy(left, mu)) / (2 * h)
    return abs(fd - ent.entropy_loss_direct(rf, mid, mu))


def test_criterion_4_derivative_consistency():
    t0 = time.perf_counter()
    ratios = []
    cases = [(Specification(ising1d(), 0.5), Box.ring(4), 1.0),
             (Specification(ising2d(), 0.6), Box.torus(2, 2), 0.5),
             (Specification(potts1d(3), 0.8), Box.ring(3), 0.3)]
    for spec, box, t in cases:
        rf = RateFamily.heat_bath(spec)
        gen = build_generator(rf, box)
        mu = gibbs_measure(spec, box)
        nu0 = FiniteMeasure.point(Configuration.constant(box, spec.q, 1))
        e1 = fd_error(rf, gen, nu0, mu, t, 1e-3)
        e2 = fd_error(rf, gen, nu0, mu, t, 5e-4)
        ratios.append(e1 / e2)
    dt = time.perf_counter() - t0
    ok = all(3.5 <= r <= 4.5 for r in ratios) and dt < 60
    record(4, ok, "error ratios " + ", ".join(f"{r:.3f}" for r in ratios) + " in [3.5, 4.5]",
           dt, 60)
    assert ok


# 5 and 6 -------------------------------------------------------------------------

LYAPUNOV_CASES = ([(Box.ring(n), ising1d(), b) for n in (2, 3, 4) for b in (0.2, 0.5, 1.0)]
                  + [(Box.torus(2, L), ising2d(), b) for L in (2, 3) for b in (0.2, 0.6)])
_END_STATES: dict = {}


def _initials(box, q):
    n = len(box)
    alt = Configuration(box, tuple(1 + (k % 2) for k in range(n)), q)
    rng = np.random.default_rng(n)
    return [FiniteMeasure.point(Configuration.constant(box, q, 1)), FiniteMeasure.point(alt),
            FiniteMeasure.from_unnormalized(box, q, rng.random(q**n) ** 3)]


def test_criterion_5_lyapunov_decay():
    t0 = time.perf_counter()
    times = np.concatenate([[0.0, 0.01], 0.05 * np.arange(1, 1001)])
    worst_rise, worst_g, n_traj = -np.inf, -np.inf, 0
    for box, pot, beta in LYAPUNOV_CASES:
        spec = Specification(pot, beta)
        rf = RateFamily.heat_bath(spec)
        gen = build_generator(rf, box)
        mu = gibbs_measure(spec, box)
        ends = []
        for nu0 in _initials(box, spec.q):
            tr = trajectory(gen, nu0, times)
            hs = [ent.relative_entropy(m, mu) for m in tr.measures]
            gs = [ent.entropy_loss_direct(rf, m, mu) for t, m in zip(times, tr.measures) if t >= 0.01]
            worst_rise = max(worst_rise, float(np.max(np.diff(hs))))
            worst_g = max(worst_g, max(gs))
            ends.append(tr.measures[-1])
            n_traj += 1
        _END_STATES[(box.shape, beta)] = (spec, box, rf, mu, ends)
    dt = time.perf_counter() - t0
    ok = worst_rise <= 1e-12 and worst_g <= 1e-12 and dt < 300
    record(5, ok, f"max h increase {worst_rise:.1e}, max g {worst_g:.1e} (both <= 1e-12) "
                  f"over {n_traj} trajectories", dt, 300)
    assert ok


def test_criterion_6_zero_loss_gibbs():
    if not _END_STATES:
        test_criterion_5_lyapunov_decay()
    t0 = time.perf_counter()
    failures, worst_tv, worst_res = [], 0.0, 0.0
    for (shape, beta), (spec, box, rf, mu, ends) in _END_STATES.items():
        subs = [box.sub(c) for r in range(1, len(box) + 1)
                for c in itertools.combinations(box.sites, r)]
        tv = max(total_variation(marginal(e, s), marginal(mu, s)) for e in ends for s in subs)
        res = max(ent.gamma_pair_residual(rf, e) for e in ends)
        worst_tv, worst_res = max(worst_tv, tv), max(worst_res, res)
        if not (tv < 1e-6 and res < 1e-6):
            gap = spectrum_reality(build_generator(rf, box), mu).gap
            failures.append(f"{shape} beta={beta}: TV {tv:.1e}, res {res:.1e}, gap {gap:.4f}")
    dt = time.perf_counter() - t0
    ok = not failures
    detail = f"max TV {worst_tv:.1e}, max Gamma residual {worst_res:.1e} (< 1e-6 at t=50)"
    if failures:
        detail += "; slow relaxation: " + "; ".join(failures)
    record(6, ok, detail, dt, 300)
    assert ok, detail


# 7 -----------------------------------------------------------------------------


def test_criterion_7_lemma_suite():
    t0 = time.perf_counter()
    totals: dict = {}
    for spec, box in [(Specification(ising1d(), 0.5), Box.ring(4)),
                      (Specification(ising1d(1.0, 0.3), 1.0), Box.segment(5)),
                      (Specification(ising2d(), 0.6), Box.torus(2, 3)),
                      (Specification(potts1d(3), 0.8), Box.ring(4))]:
        for rf in (RateFamily.heat_bath(spec), RateFamily.metropolis(spec)):
            gen = build_generator(rf, box)
            for t_mid in (0.1, 0.5, 2.0):
                nu = evolve(gen, FiniteMeasure.point(Configuration.constant(box, spec.q, 1)), t_mid)
                res = lemma_suite(spec, box, rf, nu, seed=7, n_phi=10000)
                for k, v in res.items():
                    if isinstance(v, int):
                        totals[k] = totals.get(k, 0) + v
    dt = time.perf_counter() - t0
    viol = {k: v for k, v in totals.items() if k.endswith("violations") or k == "negative_alpha"}
    ok = all(v == 0 for v in viol.values()) and totals["conditional_ratio_cases"] > 0 and dt < 120
    record(7, ok, ", ".join(f"{k}={v}" for k, v in sorted(viol.items())), dt, 120)
    assert ok


# 8 -----------------------------------------------------------------------------


def test_criterion_8_girsanov():
    t0 = time.perf_counter()
    spec = Specification(ising2d(), 0.2)
    box = Box.torus(2, 2)
    rf = RateFamily.heat_bath(spec)
    omega = Configuration.constant(box, 2, 2)
    pert = kmc.PerturbedFamily(rf, [box.sites[0]])
    n = 100000
    ge = kmc.girsanov_estimate(rf, pert, omega, 1.0, box.sites, n, seed=0)
    direct = kmc.estimate_marginal(rf, omega, 1.0, box.sites, n, seed=10)
    z_mean = abs(ge.mean_weight - 1) / ge.se_weight
    zj = stats.norm.isf(0.025 / len(ge.probs))
    zmax = float(np.max(np.abs(ge.probs - direct.freq) / np.sqrt(ge.se**2 + direct.se**2)))
    dt = time.perf_counter() - t0
    ok = z_mean <= 3 and zmax <= zj and dt < 120
    record(8, ok, f"E[w]={ge.mean_weight:.4f} ({z_mean:.2f} se); max cylinder z {zmax:.2f} "
                  f"<= joint 95% z {zj:.2f}", dt, 120)
    assert ok


# 9 -----------------------------------------------------------------------------


def test_criterion_9_positive_mass():
    t0 = time.perf_counter()
    box = Box.torus(2, 2)
    n = 100000
    worst, bounds = np.inf, []
    for beta in (0.2, 0.6):
        rf = RateFamily.heat_bath(Specification(ising2d(), beta))
        for vol in ([box.sites[0]], [box.sites[0], box.sites[1]]):
            mb = kmc.mass_bound(rf, 0.5, vol)
            bounds.append(mb.C)
            for init in (Configuration.constant(box, 2, 2), Configuration(box, (1, 2, 2, 1), 2)):
                for k, t in enumerate((0.5, 1.0, 5.0)):
                    em = kmc.estimate_marginal(rf, init, t, vol, n, seed=100 + k)
                    sigma = np.sqrt(np.maximum(em.freq * (1 - em.freq), 1 / n) / n)
                    worst = min(worst, float(np.min(em.freq + 3 * sigma - mb.C)))
    dt = time.perf_counter() - t0
    ok = min(bounds) > 0 and worst >= 0 and dt < 180
    record(9, ok, f"C in [{min(bounds):.2e}, {max(bounds):.2e}] > 0; "
                  f"min(freq + 3 sigma - C) = {worst:.3e} >= 0", dt, 180)
    assert ok


# 10 ----------------------------------------------------------------------------


def test_criterion_10_kmc_vs_exact():
    t0 = time.perf_counter()
    box = Box.ring(3)
    spec = Specification(ising1d(1.0, 0.2), 0.7)
    zmax = 0.0
    for rf in (RateFamily.heat_bath(spec), RateFamily.metropolis(spec)):
        omega = Configuration(box, (1, 2, 1), 2)
        em = kmc.estimate_marginal(rf, omega, 1.0, box.sites, 100000, seed=3)
        ex = evolve(build_generator(rf, box), FiniteMeasure.point(omega), 1.0).weights
        se = np.sqrt(ex * (1 - ex) / em.n_paths)
        zmax = max(zmax, float(np.max(np.abs(em.freq - ex) / se)))
    dt = time.perf_counter() - t0
    ok = zmax <= 3 and dt < 60
    record(10, ok, f"max |freq - exact| / se = {zmax:.2f} <= 3", dt, 60)
    assert ok
