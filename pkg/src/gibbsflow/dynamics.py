"""Single-site rate families, the generator, condition diagnostics and detailed balance."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.sparse.csgraph import connected_components

from .core import (
    Box,
    Configuration,
    Site,
    all_states,
    as_site,
    check_size,
    encode,
    encode_states,
    flip,
)
from .gibbs import Specification, _softmax_neg, flip_indices, gibbs_measure, oscillation_of

CYCLIC_EPS = 0.05
KINDS = ("heat-bath", "metropolis", "table", "cyclic")


class BoxRates:
    """Rates of a family evaluated on one box.

    ``site_rates(states, k)`` maps rows of 0-based states (..., n) to the
    vector (..., q) of c_{x_k}(eta, i); the entry at the current state is 0.
    """

    def __init__(self, box: Box, q: int, fn: Callable, neighbours: list[list[int]]):
        self.box, self.q, self.n = box, q, len(box)
        self._fn = fn
        self.neighbours = neighbours

    def site_rates(self, states: np.ndarray, k: int) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        r = np.array(self._fn(states, k), dtype=float)
        cur = states[..., k]
        np.put_along_axis(r, cur[..., None], 0.0, axis=-1)
        return r

    def table(self) -> np.ndarray:
        """R[eta, k, i] = c_{x_k}(eta, i) over all configurations."""
        check_size(self.q, self.n)
        states = all_states(self.n, self.q)
        return np.stack([self.site_rates(states, k) for k in range(self.n)], axis=1)

    def lookup(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(sites, LUT) with LUT[code] = rates of site k, code = base-q of states at sites."""
        sites = [k] + self.neighbours[k]
        check_size(self.q, len(sites), limit=2**22)
        pats = all_states(len(sites), self.q)
        states = np.zeros((len(pats), self.n), dtype=np.int64)
        states[:, sites] = pats
        return np.asarray(sites), self.site_rates(states, k)


@dataclass(frozen=True, eq=False)
class RateFamily:
    """Single-site rates c_x(eta, xi_x).

    heat-bath: gamma_x(i | eta_{x^c}); metropolis: min(1, exp(-beta dH));
    table: c depends on (site, from, to, neighbourhood pattern) through an
    explicit table (missing entries are 0); cyclic: i -> i+1 mod q at rate 1,
    every other move at rate eps, no interaction.
    """

    kind: str
    q: int
    spec: Specification | None = None
    offsets: tuple[Site, ...] = ()
    entries: tuple = ()  # ((site or None, from, to, pattern), rate), states 1-based
    eps: float = CYCLIC_EPS
    matrix: np.ndarray | None = None  # site-independent q x q rates (table without neighbours)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rate family {self.kind!r}")
        if self.kind in ("heat-bath", "metropolis") and self.spec is None:
            raise ValueError(f"{self.kind} needs a specification")

    # constructors -------------------------------------------------------

    @classmethod
    def heat_bath(cls, spec: Specification) -> "RateFamily":
        return cls("heat-bath", spec.q, spec)

    @classmethod
    def metropolis(cls, spec: Specification) -> "RateFamily":
        return cls("metropolis", spec.q, spec)

    @classmethod
    def cyclic(cls, q: int = 3, eps: float = CYCLIC_EPS) -> "RateFamily":
        return cls("cyclic", q, eps=eps)

    @classmethod
    def independent(cls, matrix) -> "RateFamily":
        """Every site flips i -> j at rate matrix[i-1, j-1], regardless of neighbours."""
        m = np.array(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or np.any(m < 0):
            raise ValueError("need a square nonnegative rate matrix")
        np.fill_diagonal(m, 0.0)
        m.setflags(write=False)
        return cls("table", m.shape[0], matrix=m)

    @classmethod
    def from_table(cls, q: int, offsets, entries) -> "RateFamily":
        """Custom rates; rejects tables whose reachability depends on the neighbourhood."""
        offsets = tuple(as_site(o) for o in offsets)
        norm = []
        for e in entries:
            x = None if e.get("x") in (None, "*") else as_site(e["x"])
            pat = tuple(int(v) for v in e.get("neighborhood-pattern", ()))
            if len(pat) != len(offsets):
                raise ValueError("neighborhood-pattern length differs from the offsets")
            a, b, r = int(e["from"]), int(e["to"]), float(e["rate"])
            if not (1 <= a <= q and 1 <= b <= q and all(1 <= v <= q for v in pat)):
                raise ValueError("state out of range in rate table")
            if r < 0:
                raise ValueError("negative rate")
            norm.append(((x, a, b, pat), r))
        rf = cls("table", q, offsets=offsets, entries=tuple(norm))
        bad = rf.reachability_violations()
        if bad:
            raise ValueError(f"reachability depends on the boundary for transitions {bad}")
        return rf

    # lattice structure ----------------------------------------------------

    @property
    def dim(self) -> int:
        if self.spec is not None:
            return self.spec.potential.dim
        if self.offsets:
            return len(self.offsets[0])
        sites = [k[0] for k, _ in self.entries if k[0] is not None]
        return len(sites[0]) if sites else 1

    def neighbourhood(self, x) -> set[Site]:
        """Lattice sites other than x on which c_x depends."""
        x = as_site(x)
        if self.spec is not None:
            return self.spec.potential.neighbourhood(x)
        return {tuple(a + b for a, b in zip(x, o)) for o in self.offsets} - {x}

    @property
    def range(self) -> int:
        if self.spec is not None:
            return self.spec.range
        return max((max(abs(c) for c in o) for o in self.offsets), default=0)

    def candidate_sites(self) -> list[Site]:
        if self.spec is not None:
            return self.spec.potential.candidate_sites()
        sites = {(0,) * self.dim}
        sites.update(k[0] for k, _ in self.entries if k[0] is not None)
        return sorted(sites)

    # evaluation -----------------------------------------------------------

    def on_box(self, box: Box) -> BoxRates:
        key = ("box", box)
        if key in self._cache:
            return self._cache[key]
        q = self.q
        if self.kind in ("heat-bath", "metropolis"):
            model = self.spec.model(box)
            beta = self.spec.beta
            neigh = [model.neighbours(k) for k in range(len(box))]
            if self.kind == "heat-bath":
                def fn(states, k):
                    return _softmax_neg(model.local_energies(states, k), beta)
            else:
                def fn(states, k):
                    E = model.local_energies(states, k)
                    cur = np.take_along_axis(E, states[..., k][..., None], axis=-1)
                    return np.minimum(1.0, np.exp(-beta * (E - cur)))
        elif self.kind == "cyclic":
            M = np.full((q, q), self.eps)
            for i in range(q):
                M[i, (i + 1) % q] = 1.0
            neigh = [[] for _ in box.sites]

            def fn(states, k):
                return M[states[..., k]]
        elif self.matrix is not None:
            M = self.matrix
            neigh = [[] for _ in box.sites]

            def fn(states, k):
                return M[states[..., k]]
        else:
            fn, neigh = self._table_fn(box)
        out = BoxRates(box, q, fn, neigh)
        self._cache[key] = out
        return out

    def _table_fn(self, box: Box):
        q, K = self.q, len(self.offsets)
        # per site: neighbour box index or a fixed exterior state (free exterior reads state 1)
        sources = []
        for x in box.sites:
            src = []
            for o in self.offsets:
                y = tuple(a + b for a, b in zip(x, o))
                k = box.resolve(y)
                if k is not None:
                    src.append(("box", k))
                else:
                    v = box.exterior_state(y) if box.boundary == "fixed" else None
                    src.append(("ext", (v or 1) - 1))
            sources.append(src)
        luts = []
        for x in box.sites:
            lut = np.zeros((q**K, q, q))
            for (site, a, b, pat), r in self.entries:
                if site is not None and box.wrap(site) != x:
                    continue
                code = sum((v - 1) * q**j for j, v in enumerate(pat))
                lut[code, a - 1, b - 1] = r
            # site-specific entries override the wildcard ones
            for (site, a, b, pat), r in self.entries:
                if site is not None and box.wrap(site) == x:
                    code = sum((v - 1) * q**j for j, v in enumerate(pat))
                    lut[code, a - 1, b - 1] = r
            luts.append(lut)
        neigh = [sorted({v for kind, v in src if kind == "box"} - {k})
                 for k, src in enumerate(sources)]

        def fn(states, k):
            code = np.zeros(states.shape[:-1], dtype=np.int64)
            for j, (kind, v) in enumerate(sources[k]):
                val = states[..., v] if kind == "box" else v
                code = code + val * q**j
            return luts[k][code, states[..., k]]

        return fn, neigh

    def rate(self, cfg: Configuration, x, i: int) -> float:
        """c_x(eta, i); self-transitions are 0."""
        k = cfg.box.index(x)
        if not 1 <= i <= self.q:
            raise ValueError(f"state {i} outside 1..{self.q}")
        return float(self.on_box(cfg.box).site_rates(cfg.as_array(), k)[i - 1])

    def total_rate(self, cfg: Configuration, x) -> float:
        k = cfg.box.index(x)
        return float(self.on_box(cfg.box).site_rates(cfg.as_array(), k).sum())

    # local (infinite-lattice) tables ---------------------------------------

    def local_table(self, x, extra=()) -> tuple[Box, np.ndarray]:
        """Exact rates of site x over every pattern of a free patch around x.

        The patch holds x, its neighbourhood and ``extra``; returns the patch
        and an array (q**|patch|, q).
        """
        x = as_site(x)
        patch = Box(tuple({x} | self.neighbourhood(x) | {as_site(e) for e in extra}), "free")
        br = self.on_box(patch)
        states = all_states(len(patch), self.q)
        return patch, br.site_rates(states, patch.index(x))

    def reachability(self, x=None) -> np.ndarray:
        """d[a, b] = 1 if some pattern allows a -> b at x (a != b)."""
        x = self.candidate_sites()[0] if x is None else as_site(x)
        patch, R = self.local_table(x)
        q, kx = self.q, patch.index(x)
        cur = (np.arange(len(R)) // q**kx) % q
        d = np.zeros((q, q), dtype=bool)
        for a in range(q):
            d[a] = (R[cur == a] > 0).any(axis=0)
        np.fill_diagonal(d, False)
        return d

    def reachability_violations(self) -> list[tuple]:
        bad = []
        for x in self.candidate_sites():
            patch, R = self.local_table(x)
            q, kx = self.q, patch.index(x)
            cur = (np.arange(len(R)) // q**kx) % q
            for a in range(q):
                pos = R[cur == a] > 0
                for b in range(q):
                    if b != a and pos[:, b].any() and not pos[:, b].all():
                        bad.append((x, a + 1, b + 1))
        return bad

    @property
    def c_hat(self) -> float:
        """Minimal positive rate over all sites, patterns and transitions."""
        vals = []
        for x in self.candidate_sites():
            _, R = self.local_table(x)
            pos = R[R > 0]
            if pos.size:
                vals.append(pos.min())
        return float(min(vals)) if vals else 0.0

    @property
    def c_bar(self) -> float:
        """Maximal total flip rate at a site."""
        return float(max(self.local_table(x)[1].sum(axis=1).max() for x in self.candidate_sites()))

    @property
    def c_max(self) -> float:
        """Maximal single transition rate."""
        return float(max(self.local_table(x)[1].max() for x in self.candidate_sites()))

    def rate_oscillation(self, x, y, total: bool = True) -> float:
        """delta_y c_x(.) for the total rate (``total``) or summed over targets."""
        x, y = as_site(x), as_site(y)
        if x == y:
            raise ValueError("oscillation needs x != y")
        if y not in self.neighbourhood(x):
            return 0.0
        patch, R = self.local_table(x, extra=(y,))
        ky = patch.index(y)
        if total:
            return oscillation_of(R.sum(axis=1), self.q, ky)
        return sum(oscillation_of(R[:, i], self.q, ky) for i in range(self.q))


def rates_from_json(path_or_obj, q: int | None = None) -> RateFamily:
    """Rate-table file: ``{"q":..,"neighborhood":[[-1],[1]],"entries":[{"x","from","to",
    "neighborhood-pattern","rate"}, ...]}`` or a bare list of entries."""
    if isinstance(path_or_obj, (str, Path)):
        obj = json.loads(Path(path_or_obj).read_text(encoding="utf-8"))
    else:
        obj = path_or_obj
    if isinstance(obj, list):
        obj = {"entries": obj}
    q = int(obj.get("q", q or 0))
    if q < 2:
        raise ValueError("rate table needs q")
    return RateFamily.from_table(q, obj.get("neighborhood", []), obj["entries"])


# --- generator ------------------------------------------------------------


def apply_generator(rf: RateFamily, f, cfg: Configuration) -> float:
    """(L f)(eta) = sum_x sum_{i != eta_x} c_x(eta, i) [f(eta^{x,i}) - f(eta)].

    ``f`` is a callable on configurations or a vector over Omega_box.
    """
    if not callable(f):
        vec = np.asarray(f, dtype=float)
        f = lambda c: float(vec[encode(c)])  # noqa: E731
    f0 = f(cfg)
    br = rf.on_box(cfg.box)
    total = 0.0
    arr = cfg.as_array()
    for k, x in enumerate(cfg.box.sites):
        r = br.site_rates(arr, k)
        for i in range(1, rf.q + 1):
            if i != cfg.states[k] and r[i - 1] != 0.0:
                total += r[i - 1] * (f(flip(cfg, x, i)) - f0)
    return total


def check_detailed_balance(rf: RateFamily, spec: Specification, box: Box) -> float:
    """max |mu(eta_x|eta_{x^c}) c_x(eta,i) - mu(i|eta_{x^c}) c_x(eta^{x,i}, eta_x)|.

    mu is the Gibbs measure of ``spec`` on ``box``; its conditionals are read
    off mu itself, not off the specification.
    """
    mu = gibbs_measure(spec, box)
    return detailed_balance_residual(rf, mu)


def detailed_balance_residual(rf: RateFamily, mu) -> float:
    box, q = mu.box, mu.q
    R = rf.on_box(box).table()
    w = mu.weights
    N = len(w)
    rows = np.arange(N)
    worst = 0.0
    for k in range(len(box)):
        F = flip_indices(N, q, k)
        cond = w[F] / w[F].sum(axis=1, keepdims=True)  # cond[eta, j] = mu(j | eta_{x^c})
        cur = (rows // q**k) % q
        back = R[F, k, cur[:, None]]  # c_x(eta^{x,i}, eta_x)
        lhs = cond[rows, cur][:, None] * R[:, k, :]
        rhs = cond * back
        diff = np.abs(lhs - rhs)
        diff[rows, cur] = 0.0
        worst = max(worst, float(diff.max()))
    return worst


@dataclass(frozen=True)
class GeneratorReport:
    L1_sum: float
    L2_sum: float
    R4_sum: float
    R3_min: float
    positivity: bool
    c_hat: float
    c_bar: float
    trunc: int
    S3_sum: float | None = None
    delta: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def condition_report(rf: RateFamily, spec: Specification | None = None,
                     trunc: int | None = None) -> GeneratorReport:
    """Exact finite sums behind (L1)-(L2) and (R1)-(R4) for a finite-range family."""
    from .gibbs import non_nullness, s3_sum

    r = rf.range
    trunc = r if trunc is None else trunc
    d = rf.dim
    xs = rf.candidate_sites()
    L1 = 0.0
    R3 = np.inf
    for x in xs:
        patch, R = rf.local_table(x)
        L1 = max(L1, float(R.max(axis=0).sum()))
        kx = patch.index(x)
        cur = (np.arange(len(R)) // rf.q**kx) % rf.q
        off = R.copy()
        off[np.arange(len(R)), cur] = np.inf
        R3 = min(R3, float(off.min()))
    offsets = [y for y in itertools.product(range(-trunc, trunc + 1), repeat=d) if any(y)]
    L2 = max(sum(rf.rate_oscillation(x, tuple(a + b for a, b in zip(x, y)), total=False)
                 for y in offsets) for x in xs)
    R4 = 0.0
    for y in offsets:
        sup = max(rf.rate_oscillation(x, tuple(a + b for a, b in zip(x, y))) for x in xs)
        R4 += max(abs(c) for c in y) * sup
    s3 = dlt = None
    if spec is not None:
        s3 = s3_sum(spec, max(trunc, spec.range))[0]
        dlt = non_nullness(spec)
    return GeneratorReport(L1, L2, R4, R3, R3 > 0, rf.c_hat, rf.c_bar, trunc, s3, dlt)


def single_site_irreducible(d: np.ndarray) -> bool:
    n, _ = connected_components(d.astype(float), directed=True, connection="strong")
    return n == 1
