"""Relative entropy, entropy loss and the Gamma / alpha / beta / rho machinery.

Everything here works on a finite box: ``nu`` and ``mu`` are FiniteMeasures on
the same box and sub-volumes are boxes returned by ``Box.sub``/``Box.nested``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Box, FiniteMeasure, as_site, marginal, sub_index
from .dynamics import RateFamily
from .gibbs import Specification, conditional_table, flip_indices, non_nullness, oscillation_of

INF = float("inf")  # h = +inf when nu charges a cylinder that mu does not
SLACK = 1e-12


def _same_box(a: FiniteMeasure, b: FiniteMeasure) -> None:
    if a.box.sites != b.box.sites or a.q != b.q:
        raise ValueError("measures live on different boxes")


def _sub(m: FiniteMeasure, sub) -> Box:
    if sub is None:
        return m.box.sub(m.box.sites)
    return sub if isinstance(sub, Box) else m.box.sub(sub)


def relative_entropy(nu: FiniteMeasure, mu: FiniteMeasure, sub=None) -> float:
    """h_Lambda(nu | mu) = sum nu(eta_Lambda) log(nu(eta_Lambda) / mu(eta_Lambda)), 0 log 0 = 0."""
    _same_box(nu, mu)
    sub = _sub(nu, sub)
    a = marginal(nu, sub).weights
    b = marginal(mu, sub).weights
    pos = a > 0
    if np.any(b[pos] == 0):
        return INF
    return float(np.sum(a[pos] * np.log(a[pos] / b[pos])))


def _log_ratio(nu: FiniteMeasure, mu: FiniteMeasure, sub: Box) -> tuple[np.ndarray, np.ndarray]:
    """(f, codes): f[c] = log(nu_Lambda(c) / mu_Lambda(c)) and the cylinder code of each state."""
    a = marginal(nu, sub).weights
    b = marginal(mu, sub).weights
    if np.any(a <= 0):
        raise ValueError("nu has a zero-mass cylinder in Lambda (positivity of nu fails)")
    if np.any(b <= 0):
        raise ValueError("mu has a zero-mass cylinder in Lambda")
    return np.log(a) - np.log(b), sub_index(nu.box, sub, nu.q)


def entropy_loss_direct(rf: RateFamily, nu: FiniteMeasure, mu: FiniteMeasure, sub=None) -> float:
    """g_Lambda(nu | mu) = nu(L f) with f = log(nu_Lambda / mu_Lambda) read off the cylinder.

    Only flips inside Lambda change the cylinder, so the sum over x runs over
    Lambda exactly as in the defining triple sum.
    """
    _same_box(nu, mu)
    sub = _sub(nu, sub)
    f, codes = _log_ratio(nu, mu, sub)
    box, q = nu.box, nu.q
    R = rf.on_box(box).table()
    w = np.asarray(nu.weights)
    F_full = f[codes]
    g = 0.0
    for x in sub.sites:
        k = box.index(x)
        F = flip_indices(len(w), q, k)
        g += float(np.sum(w[:, None] * R[:, k, :] * (F_full[F] - F_full[:, None])))
    return g


def gamma_table(rf: RateFamily, nu: FiniteMeasure, sub) -> np.ndarray:
    """T[p, j, c] = Gamma(x_p, j+1, eta) for the p-th site of Lambda and cylinder code c."""
    sub = _sub(nu, sub)
    box, q = nu.box, nu.q
    R = rf.on_box(box).table()
    codes = sub_index(box, sub, q)
    w = np.asarray(nu.weights)
    ncyl = q ** len(sub)
    T = np.zeros((len(sub), q, ncyl))
    for p, x in enumerate(sub.sites):
        k = box.index(x)
        for j in range(q):
            T[p, j] = np.bincount(codes, weights=w * R[:, k, j], minlength=ncyl)
    return T


def gamma_integral(rf: RateFamily, nu: FiniteMeasure, x, j: int, eta, sub) -> float:
    """Gamma_n(x, j, eta) = sum over omega in [eta_Lambda] of c_x(omega, j) nu(omega).

    ``eta`` is a Configuration on the box or a mapping site -> state covering Lambda.
    """
    sub = _sub(nu, sub)
    if x not in sub:
        raise ValueError("x must lie in Lambda")
    T = gamma_table(rf, nu, sub)
    states = [eta[s] - 1 for s in sub.sites]
    code = int(np.dot(states, nu.q ** np.arange(len(sub))))
    return float(T[sub.index(x), j - 1, code])


def _pairs(T: np.ndarray, q: int):
    """Yield (p, mask, Gamma(x,i,eta), Gamma(x,eta_x,eta^{x,i}), code, flipped code) per site."""
    ncyl = T.shape[2]
    codes = np.arange(ncyl)
    for p in range(T.shape[0]):
        cur = (codes // q**p) % q
        F = flip_indices(ncyl, q, p)  # F[c, i] = code of eta^{x_p, i+1}
        G = T[p].T  # G[c, j]
        fwd = G  # Gamma(x, i, eta)
        back = G[F, cur[:, None]]  # Gamma(x, eta_x, eta^{x,i})
        mask = np.ones((ncyl, q), dtype=bool)
        mask[codes, cur] = False
        yield p, mask, fwd, back, F


def gamma_pair_residual(rf: RateFamily, nu: FiniteMeasure, sub=None) -> float:
    """max |Gamma(x,i,eta) - Gamma(x,eta_x,eta^{x,i})| over x in Lambda, eta, i != eta_x."""
    sub = _sub(nu, sub)
    T = gamma_table(rf, nu, sub)
    worst = 0.0
    for _, mask, fwd, back, _ in _pairs(T, nu.q):
        worst = max(worst, float(np.max(np.abs(fwd - back)[mask], initial=0.0)))
    return worst


@dataclass(frozen=True)
class GammaLoss:
    g: float
    S1: float  # sum of Phi terms, >= 0
    S2: float  # boundary-type sum; 2g = -S1 + S2


def entropy_loss_gamma(rf: RateFamily, nu: FiniteMeasure, mu: FiniteMeasure, sub=None) -> GammaLoss:
    """g through cylinder-averaged rates.

    With D = Gamma(x,eta_x,eta^{x,i}) - Gamma(x,i,eta):
    S1 = sum D log(Gamma(x,eta_x,eta^{x,i}) / Gamma(x,i,eta)) and
    S2 = sum D {log(nu(eta)/Gamma(x,i,eta)) - log(nu(eta^{x,i})/Gamma(x,eta_x,eta^{x,i}))
                - log(mu(eta)/mu(eta^{x,i}))}.
    Pairs where both Gammas vanish (a forbidden transition) contribute nothing.
    """
    _same_box(nu, mu)
    sub = _sub(nu, sub)
    a = marginal(nu, sub).weights
    b = marginal(mu, sub).weights
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("zero-mass cylinder in Lambda")
    T = gamma_table(rf, nu, sub)
    S1 = S2 = 0.0
    for _, mask, fwd, back, F in _pairs(T, nu.q):
        both = (fwd == 0) & (back == 0)
        m = mask & ~both
        if np.any((fwd[m] == 0) | (back[m] == 0)):
            raise ValueError("zero Gamma on one side of a transition pair")
        u, v = back[m], fwd[m]
        D = u - v
        codes = np.broadcast_to(np.arange(len(a))[:, None], F.shape)[m]
        flipped = F[m]
        S1 += float(np.sum(D * np.log(u / v)))
        S2 += float(np.sum(D * (np.log(a[codes] / v) - np.log(a[flipped] / u)
                                - np.log(b[codes] / b[flipped]))))
    return GammaLoss(0.5 * (-S1 + S2), S1, S2)


def _phi(u, v):
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    return (u - v) * np.log(u / v)


def phi(u, v):
    """Phi(u, v) = (u - v) log(u / v) for u, v > 0."""
    if np.any(np.asarray(u) <= 0) or np.any(np.asarray(v) <= 0):
        raise ValueError("Phi needs positive arguments")
    out = _phi(u, v)
    return float(out) if np.ndim(out) == 0 else out


# --- oscillations and rho ----------------------------------------------------


class BoxOscillations:
    """delta_y gamma_x and delta_y c_x on one box, computed from its exact tables.

    delta_y c_x(.) is the sup over targets j of the oscillation of c_x(., j),
    the analogue of the sup over omega_x inside delta_y gamma_x(.).
    """

    def __init__(self, rf: RateFamily, spec: Specification, box: Box):
        self.box, self.q = box, rf.q
        self.G = conditional_table(spec, box)
        self.R = rf.on_box(box).table()
        self.delta = float(self.G.min())
        self._memo: dict = {}

    def gamma(self, kx: int, ky: int) -> float:
        key = ("g", kx, ky)
        if key not in self._memo:
            N = self.G.shape[0]
            cur = (np.arange(N) // self.q**kx) % self.q
            self._memo[key] = oscillation_of(self.G[np.arange(N), kx, cur], self.q, ky)
        return self._memo[key]

    def rate(self, kx: int, ky: int) -> float:
        key = ("c", kx, ky)
        if key not in self._memo:
            self._memo[key] = max(oscillation_of(self.R[:, kx, j], self.q, ky)
                                  for j in range(self.q))
        return self._memo[key]

    def rho(self, x, sub: Box) -> float:
        kx = self.box.index(x)
        return sum(self.gamma(kx, self.box.index(y)) + self.rate(kx, self.box.index(y))
                   for y in self.box.sites if y not in sub)


@dataclass
class SiteTable:
    alpha: np.ndarray
    beta: np.ndarray
    rho: np.ndarray
    sites: tuple


def alpha_beta(rf: RateFamily, nu: FiniteMeasure, sub) -> tuple[np.ndarray, np.ndarray]:
    """alpha_n(x) = sum Phi(Gamma(x,i,eta), Gamma(x,eta_x,eta^{x,i})), beta_n(x) = sum |difference|."""
    sub = _sub(nu, sub)
    T = gamma_table(rf, nu, sub)
    al, be = np.zeros(len(sub)), np.zeros(len(sub))
    for p, mask, fwd, back, _ in _pairs(T, nu.q):
        m = mask & ~((fwd == 0) & (back == 0))
        if np.any((fwd[m] == 0) | (back[m] == 0)):
            raise ValueError("zero Gamma on one side of a transition pair")
        al[p] = float(np.sum(_phi(fwd[m], back[m])))
        be[p] = float(np.sum(np.abs(fwd[m] - back[m])))
    return al, be


def alpha_beta_rho(rf: RateFamily, spec: Specification, nu: FiniteMeasure, sub,
                   osc: BoxOscillations | None = None) -> SiteTable:
    sub = _sub(nu, sub)
    osc = osc or BoxOscillations(rf, spec, nu.box)
    al, be = alpha_beta(rf, nu, sub)
    rho = np.array([osc.rho(x, sub) for x in sub.sites])
    return SiteTable(al, be, rho, sub.sites)


# --- lemma-level checks --------------------------------------------------------


@dataclass(frozen=True)
class InequalityCheck:
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + SLACK


def quantitative_differentiation_check(nu: FiniteMeasure, f, sub) -> InequalityCheck:
    """sup_eta |nu(f | eta_Lambda) - f(eta)| against sum_{x not in Lambda} delta_x f."""
    sub = _sub(nu, sub)
    box, q = nu.box, nu.q
    f = np.asarray(f, dtype=float)
    if f.shape != (q ** len(box),):
        raise ValueError("f must be a value per box configuration")
    codes = sub_index(box, sub, q)
    w = np.asarray(nu.weights)
    mass = np.bincount(codes, weights=w, minlength=q ** len(sub))
    if np.any(mass <= 0):
        raise ValueError("nu has a zero-mass cylinder in Lambda")
    cond = np.bincount(codes, weights=w * f, minlength=len(mass)) / mass
    lhs = float(np.max(np.abs(cond[codes] - f)))
    rhs = sum(oscillation_of(f, q, box.index(x)) for x in box.sites if x not in sub)
    return InequalityCheck(lhs, rhs)


def conditional_ratio_check(spec: Specification, mu: FiniteMeasure, x, i: int,
                            sub) -> InequalityCheck:
    """sup_eta |mu(eta_Lambda)/mu(eta_Lambda^{x,i}) - gamma_x(eta_x|.)/gamma_x(i|.)|
    against (2/delta^2) sum_{y not in Lambda} delta_y gamma_x(.).

    ``mu`` must be the Gibbs measure of ``spec`` on its box; for fixed or free
    boxes Lambda must stay at least the potential range away from the boundary.
    """
    sub = _sub(mu, sub)
    box, q = mu.box, mu.q
    if x not in sub:
        raise ValueError("x must lie in Lambda")
    if box.boundary != "periodic":
        r = spec.range
        for s in sub.sites:
            for d in range(box.dim):
                for step in (-r, r):
                    y = list(s)
                    y[d] += step
                    if tuple(y) not in box:
                        raise ValueError("Lambda is within the interaction range of the boundary")
    G = conditional_table(spec, box)
    delta = min(float(G.min()), non_nullness(spec))
    kx, p = box.index(x), sub.sites.index(as_site(x))
    N = len(mu.weights)
    cur = (np.arange(N) // q**kx) % q
    gam = G[np.arange(N), kx, cur] / G[:, kx, i - 1]
    a = marginal(mu, sub).weights
    codes = sub_index(box, sub, q)
    flipped = flip_indices(len(a), q, p)[:, i - 1]
    ratio = a[codes] / a[flipped[codes]]
    lhs = float(np.max(np.abs(ratio - gam)))
    osc = 0.0
    for y in box.sites:
        if y in sub:
            continue
        ky = box.index(y)
        osc += oscillation_of(G[np.arange(N), kx, cur], q, ky)
    return InequalityCheck(lhs, 2.0 / delta**2 * osc)


# --- ledger --------------------------------------------------------------------


@dataclass
class VolumeRow:
    n: int
    size: int
    h: float
    g_direct: float
    g_gamma: float
    S1: float
    S2: float
    residual: float
    h_bound: float


@dataclass
class EntropyLedger:
    """Entropy quantities of nu relative to mu on the nested volumes of one box."""

    volumes: list[VolumeRow]
    sites: dict  # n -> SiteTable
    C1: float
    C2: float
    dim: int
    delta: float
    trunc: str = "box (exact for finite range)"
    meta: dict = field(default_factory=dict)

    def alpha(self, n: int, x) -> float:
        t = self.sites[n]
        return float(t.alpha[t.sites.index(x)])

    def to_csv(self, site_path, volume_path) -> None:
        with Path(site_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "x", "alpha", "beta", "rho"])
            for n, t in sorted(self.sites.items()):
                for x, a, b, r in zip(t.sites, t.alpha, t.beta, t.rho):
                    w.writerow([n, " ".join(map(str, x)), repr(float(a)), repr(float(b)),
                                repr(float(r))])
        with Path(volume_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "h", "g_direct", "g_gamma", "residual"])
            for v in self.volumes:
                w.writerow([v.n, repr(v.h), repr(v.g_direct), repr(v.g_gamma), repr(v.residual)])

    def summary(self) -> dict:
        return {"C1": self.C1, "C2": self.C2, "dim": self.dim, "delta": self.delta,
                "truncation": self.trunc,
                "max_representation_gap": max(abs(v.g_direct - v.g_gamma) for v in self.volumes),
                **self.meta}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True),
                              encoding="utf-8")


def entropy_ledger(rf: RateFamily, spec: Specification, nu: FiniteMeasure,
                   mu: FiniteMeasure, center=None) -> EntropyLedger:
    """Fill the ledger over Lambda_0 = {center} subset ... subset box.

    C1 = sup_x sum_{n >= 1} rho_n(x) and C2 = sup_{n >= 1} n^{-(d-1)} sum_x rho_n(x),
    both over the volumes available inside the box.
    """
    _same_box(nu, mu)
    box = nu.box
    osc = BoxOscillations(rf, spec, box)
    M = math.log(nu.q) + math.log(1.0 / osc.delta)
    vols, tables = [], {}
    for n, sub in enumerate(box.nested(center)):
        h = relative_entropy(nu, mu, sub)
        gd = entropy_loss_direct(rf, nu, mu, sub)
        gg = entropy_loss_gamma(rf, nu, mu, sub)
        res = gamma_pair_residual(rf, nu, sub)
        vols.append(VolumeRow(n, len(sub), h, gd, gg.g, gg.S1, gg.S2, res, M * len(sub)))
        tables[n] = alpha_beta_rho(rf, spec, nu, sub, osc)
    d = box.dim
    per_site: dict = {}
    C2 = 0.0
    for n, t in tables.items():
        if n < 1:
            continue
        for x, r in zip(t.sites, t.rho):
            per_site[x] = per_site.get(x, 0.0) + float(r)
        C2 = max(C2, float(t.rho.sum()) / n ** (d - 1))
    C1 = max(per_site.values(), default=0.0)
    return EntropyLedger(vols, tables, C1, C2, d, osc.delta)


def h_bound(nu: FiniteMeasure, spec: Specification, sub=None) -> float:
    """|Lambda| (log q + log(1/delta)) with delta the box non-nullness constant."""
    sub = _sub(nu, sub)
    delta = float(conditional_table(spec, nu.box).min())
    return len(sub) * (math.log(nu.q) + math.log(1.0 / delta))


def beta_bound_holds(al: np.ndarray, be: np.ndarray, q: int, c_bar: float,
                     slack: float = SLACK) -> np.ndarray:
    """beta^2 <= q * c_bar * alpha, elementwise, with relative slack."""
    rhs = q * c_bar * al
    return be**2 <= rhs + slack * np.maximum(1.0, rhs)


__all__ = [
    "INF", "relative_entropy", "entropy_loss_direct", "gamma_table", "gamma_integral",
    "gamma_pair_residual", "GammaLoss", "entropy_loss_gamma", "phi", "BoxOscillations",
    "alpha_beta", "alpha_beta_rho", "SiteTable", "quantitative_differentiation_check",
    "conditional_ratio_check", "EntropyLedger", "entropy_ledger", "h_bound",
    "beta_bound_holds",
]
