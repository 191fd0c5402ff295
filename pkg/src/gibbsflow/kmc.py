"""Kinetic Monte Carlo by thinning, Girsanov reweighting and the positive-mass bound.

Paths are simulated in batches: every live path draws its next candidate
event in lock-step, so one numpy operation advances the whole batch. Each
batch has its own Philox stream keyed by (seed, batch index), which makes
estimates independent of how batches are spread over worker threads.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import linalg, stats

from .core import Box, Configuration, FiniteMeasure, all_states, as_site, encode_states
from .dynamics import BoxRates, RateFamily, single_site_irreducible

BATCH = 16384
Z95 = 1.959963984540054


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for path ``index`` of run ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0, index])))


def batch_rng(seed: int, batch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1, batch])))


@dataclass(frozen=True)
class JumpPath:
    """A cadlag path: initial configuration plus (time, site, new state) events."""

    initial: Configuration
    events: tuple[tuple[float, tuple[int, ...], int], ...]
    tau: float

    def __post_init__(self):
        prev = 0.0
        for s, _, _ in self.events:
            if not prev < s <= self.tau:
                raise ValueError("event times must increase strictly inside (0, tau]")
            prev = s

    def jump_count(self, sites=None) -> int:
        if sites is None:
            return len(self.events)
        sites = {as_site(x) for x in sites}
        return sum(1 for _, x, _ in self.events if x in sites)

    def state_at(self, t: float) -> Configuration:
        cfg = dict(zip(self.initial.box.sites, self.initial.states))
        for s, x, i in self.events:
            if s > t:
                break
            cfg[x] = i
        return Configuration(self.initial.box, tuple(cfg[x] for x in self.initial.box.sites),
                             self.initial.q)

    def to_jsonl(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for s, x, i in self.events:
                fh.write(json.dumps({"s": s, "x": list(x), "i": i}) + "\n")

    @classmethod
    def from_jsonl(cls, path, initial: Configuration, tau: float) -> "JumpPath":
        events = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                e = json.loads(line)
                events.append((float(e["s"]), as_site(e["x"]), int(e["i"])))
        return cls(initial, tuple(events), tau)


class PerturbedFamily:
    """Base rates outside Lambda; inside, independent flips at rate c_hat * d(a, b)."""

    def __init__(self, base: RateFamily, sites):
        self.base = base
        self.q = base.q
        self.sites = tuple(sorted(as_site(s) for s in sites))
        self.c_hat = base.c_hat
        self.reach = base.reachability()
        self._cache = {}

    @property
    def inside_matrix(self) -> np.ndarray:
        return self.c_hat * self.reach.astype(float)

    def on_box(self, box: Box) -> BoxRates:
        if box in self._cache:
            return self._cache[box]
        br = self.base.on_box(box)
        inside = {box.index(s) for s in self.sites}
        M = self.inside_matrix

        def fn(states, k):
            if k in inside:
                return M[states[..., k]]
            return br._fn(states, k)

        neigh = [[] if k in inside else br.neighbours[k] for k in range(len(box))]
        out = BoxRates(box, self.q, fn, neigh)
        self._cache[box] = out
        return out


class _Engine:
    """Padded per-site lookup tables of one rate family on one box."""

    def __init__(self, br: BoxRates):
        self.n, self.q = br.n, br.q
        luts = [br.lookup(k) for k in range(self.n)]
        K = max(len(s) for s, _ in luts)
        self.nbr = np.full((self.n, K), self.n, dtype=np.int64)  # column n is a zero dummy
        self.lut = np.zeros((self.n, self.q**K, self.q))
        for k, (sites, lut) in enumerate(luts):
            self.nbr[k, : len(sites)] = sites
            self.lut[k, : len(lut)] = lut
        self.powers = self.q ** np.arange(K, dtype=np.int64)
        self.cbar = self.lut.sum(axis=2).max(axis=1)

    def rates(self, S: np.ndarray, x: np.ndarray) -> np.ndarray:
        codes = (S[np.arange(len(x))[:, None], self.nbr[x]] * self.powers).sum(axis=1)
        return self.lut[x, codes]

    def site_rates(self, S: np.ndarray, k: int) -> np.ndarray:
        codes = S[:, self.nbr[k]] @ self.powers
        return self.lut[k, codes]


@dataclass
class _Girsanov:
    base: _Engine
    inside: np.ndarray  # box indices of Lambda


def _simulate(eng: _Engine, init: np.ndarray, tau: float, rng: np.random.Generator,
              gir: _Girsanov | None = None, record: bool = False):
    """Advance a batch of paths to time tau.

    Returns final states (P, n), per-site jump counts (P, n), log Girsanov
    weights (P,) and, if ``record``, per-path event lists.
    """
    P, n = init.shape
    S = np.zeros((P, n + 1), dtype=np.int64)
    S[:, :n] = init
    t = np.zeros(P)
    counts = np.zeros((P, n), dtype=np.int64)
    logw = np.zeros(P)
    events = [[] for _ in range(P)] if record else None
    total = float(eng.cbar.sum())
    if total == 0.0:
        return S[:, :n], counts, logw, events
    cum = np.cumsum(eng.cbar) / total
    alive = np.arange(P)
    while alive.size:
        tn = t[alive] + rng.exponential(1.0 / total, alive.size)
        if gir is not None:
            lam = np.zeros(alive.size)
            Sa = S[alive]
            for k in gir.inside:
                lam += gir.base.site_rates(Sa, k).sum(axis=1) - eng.site_rates(Sa, k).sum(axis=1)
            logw[alive] -= lam * (np.minimum(tn, tau) - t[alive])
        keep = tn <= tau
        alive, tn = alive[keep], tn[keep]
        t[alive] = tn
        if not alive.size:
            break
        x = np.minimum(np.searchsorted(cum, rng.random(alive.size), side="right"), n - 1)
        Sa = S[alive]
        r = eng.rates(Sa, x)
        u = rng.random(alive.size) * eng.cbar[x]
        cr = np.cumsum(r, axis=1)
        acc = u < cr[:, -1]
        new = np.argmax(cr > u[:, None], axis=1)
        a, xa, na = alive[acc], x[acc], new[acc]
        if gir is not None and a.size:
            hit = np.isin(xa, gir.inside)
            if hit.any():
                Sh = S[a[hit]]
                c_base = gir.base.rates(Sh, xa[hit])[np.arange(hit.sum()), na[hit]]
                c_pert = r[acc][hit][np.arange(hit.sum()), na[hit]]
                if np.any(c_base <= 0):
                    raise ValueError("observed jump has zero base rate (R3 violated)")
                logw[a[hit]] += np.log(c_base / c_pert)
        S[a, xa] = na
        counts[a, xa] += 1
        if record:
            for p, xx, ii, s in zip(a, xa, na, t[a]):
                events[p].append((float(s), int(xx), int(ii)))
    return S[:, :n], counts, logw, events


def _engine(rf, box: Box) -> _Engine:
    cache = getattr(rf, "_cache")
    key = ("engine", box)
    if key not in cache:
        cache[key] = _Engine(rf.on_box(box))
    return cache[key]


def sample_path(rf, omega0: Configuration, tau: float, seed: int, index: int = 0) -> JumpPath:
    """Exact-in-law sample of the jump process started at ``omega0`` up to ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    eng = _engine(rf, omega0.box)
    _, _, _, ev = _simulate(eng, omega0.as_array()[None, :], tau, path_rng(seed, index),
                            record=True)
    sites = omega0.box.sites
    return JumpPath(omega0, tuple((s, sites[x], i + 1) for s, x, i in ev[0]), tau)


def girsanov_weight(base: RateFamily, pert: PerturbedFamily, path: JumpPath, tau: float) -> float:
    """dQ/dQhat along ``path``, evaluated event by event.

    exp(-int_0^tau lambda(sigma(s)) ds + sum over jumps in Lambda of
    log(c_i / chat_i)), lambda = sum_{i in Lambda} (c_i - chat_i) of total rates.
    """
    box = path.initial.box
    bb, pb = base.on_box(box), pert.on_box(box)
    inside = [box.index(s) for s in pert.sites]
    state = path.initial.as_array().copy()

    def lam(st):
        return sum(bb.site_rates(st, k).sum() - pb.site_rates(st, k).sum() for k in inside)

    logw, prev = 0.0, 0.0
    for s, x, i in path.events:
        if s > tau:
            break
        logw -= lam(state) * (s - prev)
        k = box.index(x)
        if k in inside:
            cb = bb.site_rates(state, k)[i - 1]
            cp = pb.site_rates(state, k)[i - 1]
            if cb <= 0:
                raise ValueError("observed jump has zero base rate (R3 violated)")
            logw += math.log(cb / cp)
        state[k] = i - 1
        prev = s
    logw -= lam(state) * (tau - prev)
    return math.exp(logw)


# --- estimators -----------------------------------------------------------


def _initial_sampler(nu0, box_hint: Box | None = None):
    """Normalise an initial law to (box, q, draw(rng, m) -> states, deterministic)."""
    if isinstance(nu0, Configuration):
        arr = nu0.as_array()
        return nu0.box, nu0.q, (lambda rng, m: np.tile(arr, (m, 1))), True
    if isinstance(nu0, FiniteMeasure):
        states = all_states(len(nu0.box), nu0.q)
        w = np.asarray(nu0.weights)
        return nu0.box, nu0.q, (lambda rng, m: states[rng.choice(len(w), size=m, p=w)]), False
    box, q, fn = nu0
    return box, q, fn, False


@dataclass
class EmpiricalMarginal:
    sub: Box
    q: int
    freq: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    se: np.ndarray
    n_paths: int
    seed: int
    meta: dict = field(default_factory=dict)

    def cylinders(self) -> list[str]:
        return ["-".join(map(str, r + 1)) for r in all_states(len(self.sub), self.q)]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cylinder", "freq", "ci_lo", "ci_hi"])
            for c, f, a, b in zip(self.cylinders(), self.freq, self.lo, self.hi):
                w.writerow([c, repr(float(f)), repr(float(a)), repr(float(b))])


def wilson(k: np.ndarray, n: int, z: float = Z95) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = [], []
    for kk in np.asarray(k, dtype=int):
        ci = stats.binomtest(int(kk), n).proportion_ci(confidence_level=2 * stats.norm.cdf(z) - 1,
                                                       method="wilson")
        lo.append(ci.low)
        hi.append(ci.high)
    return np.array(lo), np.array(hi)


def _batches(n_paths: int) -> list[tuple[int, int]]:
    return [(b, min(BATCH, n_paths - b * BATCH)) for b in range((n_paths + BATCH - 1) // BATCH)]


def _map_batches(fn: Callable, n_paths: int, jobs: int):
    parts = _batches(n_paths)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(lambda p: fn(*p), parts))
    return [fn(*p) for p in parts]


def simulate_final_states(rf, nu0, t: float, n_paths: int, seed: int, jobs: int = 1):
    """(box, q, final states array) for ``n_paths`` paths run to time t."""
    box, q, draw, _ = _initial_sampler(nu0)
    eng = _engine(rf, box)

    def run(b, m):
        rng = batch_rng(seed, b)
        init = draw(rng, m)
        if t == 0:
            return init
        return _simulate(eng, init, t, rng)[0]

    return box, q, np.concatenate(_map_batches(run, n_paths, jobs))


def estimate_marginal(rf, nu0, t: float, sub, n_paths: int, seed: int,
                      jobs: int = 1) -> EmpiricalMarginal:
    """Empirical law of sigma_Lambda(t) with Wilson 95% intervals per cylinder.

    With a deterministic initial configuration at t = 0 there is no sampling
    error, and the point mass is returned with zero-width intervals.
    """
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    box, q, draw, deterministic = _initial_sampler(nu0)
    sub = sub if isinstance(sub, Box) else box.sub(sub)
    cols = [box.index(s) for s in sub.sites]
    if t == 0 and deterministic:
        codes = encode_states(draw(None, 1)[:, cols], q)
        freq = np.bincount(codes, minlength=q ** len(sub)).astype(float)
        return EmpiricalMarginal(sub, q, freq, freq.copy(), freq.copy(), np.zeros_like(freq),
                                 n_paths, seed, {"t": t, "exact": True})
    _, _, S = simulate_final_states(rf, nu0, t, n_paths, seed, jobs)
    codes = encode_states(S[:, cols], q)
    k = np.bincount(codes, minlength=q ** len(sub))
    freq = k / n_paths
    lo, hi = wilson(k, n_paths)
    se = np.sqrt(freq * (1 - freq) / n_paths)
    return EmpiricalMarginal(sub, q, freq, lo, hi, se, n_paths, seed, {"t": t})


@dataclass
class GirsanovEstimate:
    mean_weight: float
    se_weight: float
    probs: np.ndarray  # reweighted Q(sigma_Lambda(tau) = eta_Lambda)
    se: np.ndarray
    n_paths: int
    sub: Box
    q: int


def girsanov_estimate(base: RateFamily, pert: PerturbedFamily, omega0: Configuration,
                      tau: float, sub, n_paths: int, seed: int, jobs: int = 1) -> GirsanovEstimate:
    """Simulate under the perturbed dynamics and reweight by dQ/dQhat."""
    box, q = omega0.box, omega0.q
    sub = sub if isinstance(sub, Box) else box.sub(sub)
    eng = _engine(pert, box)
    gir = _Girsanov(_engine(base, box), np.array([box.index(s) for s in pert.sites]))
    cols = [box.index(s) for s in sub.sites]
    arr = omega0.as_array()

    def run(b, m):
        S, _, logw, _ = _simulate(eng, np.tile(arr, (m, 1)), tau, batch_rng(seed, b), gir)
        return encode_states(S[:, cols], q), np.exp(logw)

    parts = _map_batches(run, n_paths, jobs)
    codes = np.concatenate([p[0] for p in parts])
    w = np.concatenate([p[1] for p in parts])
    ncyl = q ** len(sub)
    X = np.zeros((n_paths, ncyl))
    X[np.arange(n_paths), codes] = w
    probs = X.mean(axis=0)
    se = X.std(axis=0, ddof=1) / math.sqrt(n_paths)
    return GirsanovEstimate(float(w.mean()), float(w.std(ddof=1) / math.sqrt(n_paths)),
                            probs, se, n_paths, sub, q)


# --- positive-mass bound ----------------------------------------------------


@dataclass(frozen=True)
class MassBound:
    tau: float
    sites: tuple
    c_bar: float
    c_hat: float
    kappa: float
    R: float
    rho: float
    m: int
    tail: float
    C_hat_rate: float  # bound with Poisson rate c_hat (q-1) tau
    m_bar: int
    C_bar_rate: float  # bound with the dominating rate c_bar tau
    C: float  # the more conservative of the two

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["sites"] = [list(s) for s in self.sites]
        return d


def _factor(rho: float, R: float, mean: float) -> tuple[int, float, float]:
    """Least m with PoissonTail(m; mean) < rho/2, the tail, and e^{-Rm}(rho - tail)."""
    m = 0
    while stats.poisson.sf(m, mean) >= rho / 2:
        m += 1
    tail = float(stats.poisson.sf(m, mean))
    return m, tail, math.exp(-R * m) * (rho - tail)


def mass_bound(rf: RateFamily, tau: float, sites) -> MassBound:
    """C(tau, Lambda) = kappa(tau) * prod_{i in Lambda} e^{-Rm} (rho(tau) - PoissonTail(m)).

    rho(tau) is the smallest time-tau transition probability of the single-site
    chain with rates c_hat * d(a, b), from its q x q matrix exponential.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    sites = tuple(sorted(as_site(s) for s in sites))
    if rf.reachability_violations():
        raise ValueError("reachability depends on the boundary (R1' violated)")
    d = rf.reachability()
    if not single_site_irreducible(d):
        raise ValueError("single-site chain is reducible (R2' violated)")
    c_hat, c_bar, q = rf.c_hat, rf.c_bar, rf.q
    if c_hat <= 0:
        raise ValueError("minimal positive rate is zero (R3' violated)")
    G = c_hat * d.astype(float)
    G -= np.diag(G.sum(axis=1))
    rho = float(linalg.expm(tau * G).min())
    R = math.log(max(rf.c_max, c_hat) / c_hat)
    kappa = math.exp(-tau * c_bar * len(sites))
    m, tail, f = _factor(rho, R, c_hat * (q - 1) * tau)
    m_bar, _, f_bar = _factor(rho, R, c_bar * tau)
    C_hat = kappa * f ** len(sites)
    C_bar = kappa * f_bar ** len(sites)
    return MassBound(tau, sites, c_bar, c_hat, kappa, R, rho, m, tail, C_hat, m_bar, C_bar,
                     min(C_hat, C_bar))
