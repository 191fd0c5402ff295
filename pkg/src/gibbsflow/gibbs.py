"""Finite-range potentials, specification kernels and exact finite-volume Gibbs measures."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    Box,
    Configuration,
    FiniteMeasure,
    Site,
    marginal,
    all_states,
    as_site,
    check_size,
    encode_states,
    linf,
)


@dataclass(frozen=True)
class Interaction:
    """One interaction term Phi_B.

    ``sites`` are offsets that get translated over the lattice when
    ``translate`` is true, and absolute lattice sites otherwise. ``table`` has
    one axis of length q per site and is indexed by 0-based states.
    """

    sites: tuple[Site, ...]
    table: np.ndarray
    translate: bool = True

    def __post_init__(self):
        sites = tuple(as_site(s) for s in self.sites)
        if not sites:
            raise ValueError("interaction needs at least one site")
        if len(set(sites)) != len(sites):
            raise ValueError("interaction sites must be distinct")
        table = np.asarray(self.table, dtype=float)
        if table.ndim != len(sites) or len(set(table.shape)) > 1:
            raise ValueError("table must have one axis of length q per site")
        if not np.all(np.isfinite(table)):
            raise ValueError("interaction table must be finite")
        table.setflags(write=False)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "table", table)

    @property
    def diameter(self) -> int:
        return max(linf(a, b) for a in self.sites for b in self.sites)


@dataclass(frozen=True)
class Potential:
    q: int
    dim: int
    terms: tuple[Interaction, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if t.table.shape[0] != self.q:
                raise ValueError("table axis length differs from q")
            if any(len(s) != self.dim for s in t.sites):
                raise ValueError("interaction site of wrong dimension")

    @property
    def range(self) -> int:
        return max((t.diameter for t in self.terms), default=0)

    @property
    def translation_invariant(self) -> bool:
        return all(t.translate for t in self.terms)

    def placed_terms(self, box: Box) -> list[tuple[tuple[Site, ...], np.ndarray]]:
        """Concrete lattice terms relevant to ``box``.

        periodic: every translate anchored at a box site, wrapped onto the torus;
        fixed: every term meeting the box; free: every term inside the box.
        """
        out = []
        seen = set()
        for t in self.terms:
            if box.boundary == "periodic":
                anchors = box.sites if t.translate else [(0,) * self.dim]
                for a in anchors:
                    shift = a if t.translate else (0,) * self.dim
                    sites = tuple(box.wrap(tuple(u + v for u, v in zip(s, shift)))
                                  for s in t.sites)
                    if len(set(sites)) != len(sites):
                        raise ValueError("periodic box too small: a term wraps onto itself")
                    out.append((sites, t.table))
                continue
            if t.translate:
                anchors = {tuple(x - b for x, b in zip(site, off))
                           for site in box.sites for off in t.sites}
            else:
                anchors = {(0,) * self.dim}
            for a in sorted(anchors):
                sites = tuple(tuple(u + v for u, v in zip(s, a)) for s in t.sites)
                inside = [s in box for s in sites]
                if box.boundary == "free" and not all(inside):
                    continue
                if not any(inside):
                    continue
                key = (id(t), sites)
                if key in seen:
                    continue
                seen.add(key)
                out.append((sites, t.table))
        return out

    def neighbourhood(self, x) -> set[Site]:
        """Lattice sites sharing a term with x (x excluded)."""
        x = as_site(x)
        out = set()
        for t in self.terms:
            if t.translate:
                for b in t.sites:
                    a = tuple(u - v for u, v in zip(x, b))
                    out.update(tuple(u + v for u, v in zip(s, a)) for s in t.sites)
            elif x in t.sites:
                out.update(t.sites)
        out.discard(x)
        return out

    def candidate_sites(self) -> list[Site]:
        """Sites over which site-suprema are taken (origin suffices when invariant)."""
        sites = {(0,) * self.dim}
        for t in self.terms:
            if not t.translate:
                sites.update(t.sites)
        return sorted(sites)


# --- presets --------------------------------------------------------------

_SPIN = np.array([-1.0, 1.0])  # Ising preset: state 1 -> -1, state 2 -> +1


def ising1d(J: float = 1.0, h: float = 0.0) -> Potential:
    terms = [Interaction(((0,), (1,)), -J * np.outer(_SPIN, _SPIN))]
    if h:
        terms.append(Interaction(((0,),), -h * _SPIN))
    return Potential(2, 1, tuple(terms), "ising1d")


def ising2d(J: float = 1.0, h: float = 0.0) -> Potential:
    bond = -J * np.outer(_SPIN, _SPIN)
    terms = [Interaction(((0, 0), (1, 0)), bond), Interaction(((0, 0), (0, 1)), bond)]
    if h:
        terms.append(Interaction(((0, 0),), -h * _SPIN))
    return Potential(2, 2, tuple(terms), "ising2d")


def potts2d(q: int = 3, J: float = 1.0) -> Potential:
    bond = -J * np.eye(q)
    terms = [Interaction(((0, 0), (1, 0)), bond), Interaction(((0, 0), (0, 1)), bond)]
    return Potential(q, 2, tuple(terms), f"potts2d({q})")


def free_potential(q: int, dim: int = 1) -> Potential:
    """No interaction at all; every kernel is uniform."""
    return Potential(q, dim, (), "free")


PRESETS = {"ising1d": ising1d, "ising2d": ising2d, "potts2d": potts2d}


def load_potential(path_or_obj) -> Potential:
    """Read a potential from JSON.

    Either ``{"preset": "potts2d", "q": 3, ...}`` or
    ``{"q": 2, "dim": 1, "terms": [{"sites": [[0],[1]], "table": {"1,1": -1, ...},
    "translate": true}, ...]}``. Table keys are comma-separated 1-based states;
    missing entries are 0.
    """
    if isinstance(path_or_obj, (str, Path)):
        obj = json.loads(Path(path_or_obj).read_text(encoding="utf-8"))
    else:
        obj = path_or_obj
    if "preset" in obj:
        name = obj["preset"]
        kw = {k: v for k, v in obj.items() if k in ("J", "h", "q")}
        if name not in PRESETS:
            raise ValueError(f"unknown potential preset {name!r}")
        if name != "potts2d":
            kw.pop("q", None)
        return PRESETS[name](**kw)
    q, dim = int(obj["q"]), int(obj.get("dim", 1))
    terms = []
    for entry in obj["terms"]:
        sites = tuple(as_site(s) for s in entry["sites"])
        table = np.zeros((q,) * len(sites))
        raw = entry["table"]
        items = raw.items() if isinstance(raw, dict) else ((",".join(map(str, e[0])), e[1]) for e in raw)
        for key, val in items:
            states = tuple(int(v) - 1 for v in str(key).replace(" ", "").strip("()[]").split(","))
            if len(states) != len(sites) or not all(0 <= s < q for s in states):
                raise ValueError(f"bad table key {key!r}")
            table[states] = float(val)
        terms.append(Interaction(sites, table, bool(entry.get("translate", True))))
    return Potential(q, dim, tuple(terms), obj.get("name", "custom"))


# --- compiled box model ---------------------------------------------------


class BoxModel:
    """A potential placed on a box, with exterior states folded into the tables.

    ``terms`` holds ``(box_indices, table)`` pairs; ``site_terms[k]`` lists the
    terms containing box site k.
    """

    def __init__(self, potential: Potential, box: Box):
        self.potential, self.box, self.q = potential, box, potential.q
        if box.dim != potential.dim:
            raise ValueError("box and potential dimensions differ")
        self.terms: list[tuple[tuple[int, ...], np.ndarray]] = []
        for sites, table in potential.placed_terms(box):
            idx, index_expr = [], []
            for s in sites:
                k = box.resolve(s)
                if k is None:
                    v = box.exterior_state(s)
                    if v is None:
                        raise ValueError(f"missing boundary state for exterior site {s}")
                    index_expr.append(v - 1)
                else:
                    idx.append(k)
                    index_expr.append(slice(None))
            reduced = table[tuple(index_expr)]
            if len(set(idx)) != len(idx):
                raise ValueError("term visits a box site twice")
            self.terms.append((tuple(idx), np.asarray(reduced)))
        self.site_terms = [[t for t in self.terms if k in t[0]] for k in range(len(box))]

    def energy(self, states: np.ndarray) -> np.ndarray:
        """H for rows of 0-based states, shape (..., n)."""
        states = np.asarray(states)
        out = np.zeros(states.shape[:-1])
        for idx, table in self.terms:
            out = out + table[tuple(states[..., k] for k in idx)]
        return out

    def local_energies(self, states: np.ndarray, k: int) -> np.ndarray:
        """Energy of the terms containing site k with site k set to each state: (..., q)."""
        states = np.asarray(states)
        out = np.zeros(states.shape[:-1] + (self.q,))
        for i in range(self.q):
            for idx, table in self.site_terms[k]:
                args = tuple(np.full(states.shape[:-1], i) if j == k else states[..., j]
                             for j in idx)
                out[..., i] += table[args]
        return out

    def neighbours(self, k: int) -> list[int]:
        return sorted({j for idx, _ in self.site_terms[k] for j in idx} - {k})


@dataclass(frozen=True)
class Specification:
    potential: Potential
    beta: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @property
    def q(self) -> int:
        return self.potential.q

    @property
    def range(self) -> int:
        return self.potential.range

    def model(self, box: Box) -> BoxModel:
        return BoxModel(self.potential, box)


def _softmax_neg(energies: np.ndarray, beta: float) -> np.ndarray:
    logw = -beta * energies
    logw = logw - logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=-1, keepdims=True)


def boltzmann(spec: Specification, box: Box) -> FiniteMeasure:
    """Normalized exp(-beta H) on Omega_box (log-weights max-shifted)."""
    check_size(spec.q, len(box))
    model = spec.model(box)
    logw = -spec.beta * model.energy(all_states(len(box), spec.q))
    if not np.all(np.isfinite(logw)):
        raise OverflowError("non-finite Boltzmann exponent; shift Phi by a constant")
    w = np.exp(logw - logw.max())
    return FiniteMeasure.from_unnormalized(box, spec.q, w)


def kernel(spec: Specification, sites, boundary: dict | Configuration | None = None,
           default: int | None = None) -> FiniteMeasure:
    """gamma_Lambda(. | boundary) as a probability vector over Omega_Lambda.

    ``boundary`` maps exterior lattice sites to states (1..q); every exterior
    site touched by a term meeting Lambda must be supplied unless ``default``
    is given.
    """
    if isinstance(boundary, Configuration):
        boundary = dict(zip(boundary.box.sites, boundary.states))
    lam = Box(tuple(as_site(s) for s in sites), "fixed",
              exterior=tuple((boundary or {}).items()), exterior_default=default)
    return boltzmann(spec, lam)


def gibbs_measure(spec: Specification, box: Box) -> FiniteMeasure:
    """Finite-volume Gibbs measure on the box with its own exterior convention."""
    return boltzmann(spec, box)


def conditional_table(spec: Specification, box: Box) -> np.ndarray:
    """G[eta, k, i] = gamma_{x_k}(i | eta_{x_k^c}) for every configuration of the box."""
    check_size(spec.q, len(box))
    model = spec.model(box)
    states = all_states(len(box), spec.q)
    G = np.empty((len(states), len(box), spec.q))
    for k in range(len(box)):
        G[:, k, :] = _softmax_neg(model.local_energies(states, k), spec.beta)
    return G


def dlr_residual(mu: FiniteMeasure, spec: Specification, sub: Box) -> float:
    """max_{eta_Lambda} |mu(gamma_Lambda(eta_Lambda | .)) - mu(eta_Lambda)| inside mu's box.

    gamma_Lambda is built from the box energy with the complement held fixed;
    terms not meeting Lambda cancel in the normalisation.
    """
    box, q = mu.box, mu.q
    inner = [box.index(s) for s in sub.sites]
    outer = [k for k in range(len(box)) if k not in inner]
    states = all_states(len(box), q)
    a = encode_states(states[:, inner], q)
    b = encode_states(states[:, outer], q) if outer else np.zeros(len(states), dtype=np.int64)
    logw = -spec.beta * spec.model(box).energy(states)
    L = np.full((q ** len(inner), q ** len(outer)), -np.inf)
    L[a, b] = logw
    L -= L.max(axis=0, keepdims=True)
    gam = np.exp(L)
    gam /= gam.sum(axis=0, keepdims=True)
    mu_outer = np.bincount(b, weights=mu.weights, minlength=L.shape[1])
    mu_inner = np.bincount(a, weights=mu.weights, minlength=L.shape[0])
    return float(np.max(np.abs(gam @ mu_outer - mu_inner)))


def kernel_consistency_residual(spec: Specification, lam, delta, boundary: dict) -> float:
    """max_{eta_Delta} |gamma_Lambda(gamma_Delta(eta_Delta|.) | b) - gamma_Lambda(eta_Delta | b)|.

    gamma_Delta is recomputed from scratch for every configuration of
    Lambda \\ Delta, by summation.
    """
    lam = [as_site(s) for s in lam]
    delta = [as_site(s) for s in delta]
    outer = Box(tuple(lam), "free")
    big = kernel(spec, lam, boundary)
    q = spec.q
    dsub = outer.sub(delta)
    rest = [s for s in outer.sites if s not in delta]
    states = all_states(len(outer), q)
    lhs = np.zeros(q ** len(delta))
    for row, w in zip(states, big.weights):
        bnd = dict(boundary)
        bnd.update({s: int(row[outer.index(s)]) + 1 for s in rest})
        lhs += w * kernel(spec, dsub.sites, bnd).weights
    rhs = marginal(big, dsub).weights
    return float(np.max(np.abs(lhs - rhs)))


# --- local (infinite-lattice) diagnostics --------------------------------


def _patch_conditionals(spec: Specification, x: Site, extra=()) -> tuple[Box, np.ndarray]:
    """Exact gamma_x on a free patch holding x, its neighbourhood and ``extra`` sites."""
    x = as_site(x)
    patch = Box(tuple({x} | spec.potential.neighbourhood(x) | {as_site(e) for e in extra}),
                "free")
    model = spec.model(patch)
    states = all_states(len(patch), spec.q)
    G = _softmax_neg(model.local_energies(states, patch.index(x)), spec.beta)
    return patch, G


def non_nullness(spec: Specification) -> float:
    """delta = inf over sites, boundary patterns and states of gamma_x(eta_x | eta_{x^c})."""
    return min(float(_patch_conditionals(spec, x)[1].min())
               for x in spec.potential.candidate_sites())


def flip_indices(n_states: int, q: int, k: int) -> np.ndarray:
    """F[eta, i] = index of eta^{x_k, i+1}."""
    idx = np.arange(n_states, dtype=np.int64)
    cur = (idx // q**k) % q
    return idx[:, None] + (np.arange(q)[None, :] - cur[:, None]) * q**k


def oscillation_of(values: np.ndarray, q: int, k: int) -> float:
    """delta_{x_k} f = max_{eta, i} |f(eta^{x_k,i}) - f(eta)| for f on a full box."""
    F = flip_indices(len(values), q, k)
    return float(np.max(np.abs(values[F] - values[:, None])))


def gamma_oscillation_on_box(G: np.ndarray, q: int, kx: int, ky: int) -> float:
    """delta_y gamma_x(.) using a box conditional table G (see ``conditional_table``)."""
    n_states = G.shape[0]
    cur = (np.arange(n_states) // q**kx) % q
    g = G[np.arange(n_states), kx, cur]
    return oscillation_of(g, q, ky)


def oscillation_gamma(spec: Specification, x, y) -> float:
    """delta_y gamma_x(.) on the infinite lattice (exact for finite range)."""
    x, y = as_site(x), as_site(y)
    if x == y:
        raise ValueError("oscillation needs x != y")
    if y not in spec.potential.neighbourhood(x):
        return 0.0
    patch, G = _patch_conditionals(spec, x, extra=(y,))
    q = spec.q
    kx, ky = patch.index(x), patch.index(y)
    n_states = G.shape[0]
    cur = (np.arange(n_states) // q**kx) % q
    return oscillation_of(G[np.arange(n_states), cur], q, ky)


def s3_sum(spec: Specification, trunc: int | None = None) -> tuple[float, int]:
    """sum_y |y| sup_x delta_{x+y} gamma_x over |y| <= trunc; returns (sum, trunc)."""
    r = spec.range
    trunc = r if trunc is None else trunc
    if trunc < r:
        raise ValueError("truncation radius below the potential range")
    d = spec.potential.dim
    total = 0.0
    for y in itertools.product(range(-trunc, trunc + 1), repeat=d):
        if not any(y):
            continue
        sup = max(oscillation_gamma(spec, x, tuple(a + b for a, b in zip(x, y)))
                  for x in spec.potential.candidate_sites())
        total += max(abs(c) for c in y) * sup
    return total, trunc
