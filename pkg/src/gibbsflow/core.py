"""Configuration space on finite boxes: sites, flips, base-q indexing, dense measures.

States are 1..q at the public surface and 0..q-1 inside arrays. A configuration
on a box with sites s_0 < s_1 < ... (lexicographic) is encoded little-endian:
``index = sum_k (state(s_k) - 1) * q**k``.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

Site = tuple[int, ...]

BOUNDARIES = ("periodic", "fixed", "free")
DEFAULT_MAX_STATES = 2**16


class SizeLimitError(RuntimeError):
    """Raised when a dense object would exceed the configured state-count cap."""


def max_states() -> int:
    """Dense-engine cap on q**|box|; ``GIBBSFLOW_MAX_STATES`` overrides the default."""
    raw = os.environ.get("GIBBSFLOW_MAX_STATES")
    if raw is None:
        return DEFAULT_MAX_STATES
    return int(raw)


def check_size(q: int, n_sites: int, limit: int | None = None) -> int:
    limit = max_states() if limit is None else limit
    n_states = q**n_sites
    if n_states > limit:
        raise SizeLimitError(
            f"q^|box| = {q}^{n_sites} = {n_states} exceeds the dense limit {limit}"
        )
    return n_states


def as_site(x: int | Sequence[int]) -> Site:
    if isinstance(x, (int, np.integer)):
        return (int(x),)
    return tuple(int(c) for c in x)


def linf(a: Site, b: Site) -> int:
    return max((abs(u - v) for u, v in zip(a, b)), default=0)


@dataclass(frozen=True)
class LocalStateSpace:
    q: int

    def __post_init__(self):
        if self.q < 2:
            raise ValueError(f"need q >= 2, got {self.q}")

    @property
    def states(self) -> range:
        return range(1, self.q + 1)


@dataclass(frozen=True)
class Box:
    """A finite set of lattice sites together with an exterior convention.

    ``periodic`` boxes wrap coordinates modulo ``shape`` (relative to ``origin``);
    ``fixed`` boxes read exterior sites from ``exterior`` (falling back to
    ``exterior_default`` when given); ``free`` boxes drop everything outside.
    """

    sites: tuple[Site, ...]
    boundary: str = "free"
    shape: tuple[int, ...] | None = None
    origin: tuple[int, ...] | None = None
    exterior: tuple[tuple[Site, int], ...] = ()
    exterior_default: int | None = None
    _pos: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        sites = tuple(sorted(as_site(s) for s in self.sites))
        if not sites:
            raise ValueError("box must contain at least one site")
        if len(set(sites)) != len(sites):
            raise ValueError("duplicate sites in box")
        dims = {len(s) for s in sites}
        if len(dims) != 1:
            raise ValueError("sites of mixed dimension")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}")
        object.__setattr__(self, "sites", sites)
        if self.boundary == "periodic":
            if self.shape is None:
                raise ValueError("periodic box needs a shape")
            origin = self.origin or tuple(min(s[k] for s in sites) for k in range(self.dim))
            object.__setattr__(self, "origin", tuple(origin))
            expected = int(np.prod(self.shape))
            if expected != len(sites):
                raise ValueError("periodic box must fill its shape")
        ext = tuple(sorted((as_site(s), int(v)) for s, v in dict(self.exterior).items()))
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(self, "_pos", {s: k for k, s in enumerate(sites)})

    # constructors -------------------------------------------------------

    @classmethod
    def cube(cls, n: int, dim: int = 1, boundary: str = "free",
             exterior: Mapping | None = None, exterior_default: int | None = None) -> "Box":
        """The cube [-n, n]^dim."""
        if dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        sites = list(itertools.product(range(-n, n + 1), repeat=dim))
        shape = (2 * n + 1,) * dim if boundary == "periodic" else None
        return cls(tuple(sites), boundary, shape, (-n,) * dim if shape else None,
                   tuple((exterior or {}).items()), exterior_default)

    @classmethod
    def ring(cls, length: int) -> "Box":
        return cls(tuple((k,) for k in range(length)), "periodic", (length,), (0,))

    @classmethod
    def torus(cls, lx: int, ly: int) -> "Box":
        sites = tuple(itertools.product(range(lx), range(ly)))
        return cls(sites, "periodic", (lx, ly), (0, 0))

    @classmethod
    def segment(cls, length: int, boundary: str = "free", **kw) -> "Box":
        return cls(tuple((k,) for k in range(length)), boundary, **kw)

    # geometry -----------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.sites[0])

    def __len__(self) -> int:
        return len(self.sites)

    def __iter__(self):
        return iter(self.sites)

    def __contains__(self, x) -> bool:
        return as_site(x) in self._pos

    def index(self, x) -> int:
        s = as_site(x)
        try:
            return self._pos[s]
        except KeyError:
            raise ValueError(f"site {s} is not in the box") from None

    def wrap(self, x) -> Site:
        """Canonical representative of a lattice site (identity unless periodic)."""
        s = as_site(x)
        if self.boundary != "periodic":
            return s
        return tuple(o + (c - o) % L for c, o, L in zip(s, self.origin, self.shape))

    def resolve(self, x) -> int | None:
        """Box index of lattice site ``x`` after wrapping, or None if exterior."""
        return self._pos.get(self.wrap(x))

    def exterior_state(self, x) -> int | None:
        s = as_site(x)
        for site, v in self.exterior:
            if site == s:
                return v
        return self.exterior_default

    def distance(self, a, b) -> int:
        """l-infinity distance, minimal-image for periodic boxes."""
        a, b = as_site(a), as_site(b)
        if self.boundary != "periodic":
            return linf(a, b)
        return max(min(abs(u - v) % L, L - abs(u - v) % L)
                   for u, v, L in zip(a, b, self.shape))

    def issubset(self, other: "Box") -> bool:
        return all(s in other for s in self.sites)

    def sub(self, sites: Iterable) -> "Box":
        """A sub-volume of this box (free boundary; used for marginals)."""
        sites = tuple(as_site(s) for s in sites)
        for s in sites:
            if s not in self:
                raise ValueError(f"site {s} is not in the box")
        return Box(sites, "free")

    def nested(self, center=None) -> list["Box"]:
        """Nested volumes Lambda_0 = {center} subset Lambda_1 subset ... = box.

        Lambda_n collects the sites within (minimal-image) l-infinity distance n
        of ``center``; the last entry is the whole box.
        """
        c = self.sites[len(self.sites) // 2] if center is None else as_site(center)
        c = self.wrap(c)
        out, n = [], 0
        while True:
            shell = [s for s in self.sites if self.distance(s, c) <= n]
            out.append(self.sub(shell))
            if len(shell) == len(self.sites):
                return out
            n += 1

    def describe(self) -> dict:
        d = {"sites": [list(s) for s in self.sites], "boundary": self.boundary}
        if self.shape:
            d["shape"] = list(self.shape)
        if self.exterior:
            d["exterior"] = [[list(s), v] for s, v in self.exterior]
        if self.exterior_default is not None:
            d["exterior_default"] = self.exterior_default
        return d


@dataclass(frozen=True)
class Configuration:
    box: Box
    states: tuple[int, ...]
    q: int

    def __post_init__(self):
        if self.q < 2:
            raise ValueError("q must be >= 2")
        states = tuple(int(v) for v in self.states)
        if len(states) != len(self.box):
            raise ValueError("one state per site required")
        if any(v < 1 or v > self.q for v in states):
            raise ValueError(f"states must lie in 1..{self.q}")
        object.__setattr__(self, "states", states)

    @classmethod
    def constant(cls, box: Box, q: int, state: int = 1) -> "Configuration":
        return cls(box, (state,) * len(box), q)

    def __getitem__(self, x) -> int:
        return self.states[self.box.index(x)]

    def restrict(self, sub: Box) -> tuple[int, ...]:
        return tuple(self[s] for s in sub.sites)

    def as_array(self) -> np.ndarray:
        """0-based state vector."""
        return np.asarray(self.states, dtype=np.int64) - 1


def flip(cfg: Configuration, x, i: int) -> Configuration:
    """Return eta^{x,i}: cfg with the state at site x replaced by i."""
    k = cfg.box.index(x)
    if not 1 <= i <= cfg.q:
        raise ValueError(f"state {i} outside 1..{cfg.q}")
    states = list(cfg.states)
    states[k] = i
    return Configuration(cfg.box, tuple(states), cfg.q)


def encode(cfg: Configuration) -> int:
    idx = 0
    for k, v in enumerate(cfg.states):
        idx += (v - 1) * cfg.q**k
    return idx


def decode(index: int, box: Box, q: int) -> Configuration:
    n = len(box)
    if not 0 <= index < q**n:
        raise ValueError(f"index {index} out of range for {q}^{n} states")
    states = []
    for _ in range(n):
        index, d = divmod(index, q)
        states.append(d + 1)
    return Configuration(box, tuple(states), q)


def all_states(n_sites: int, q: int) -> np.ndarray:
    """(q**n, n) array of 0-based states; row k is the configuration with index k."""
    idx = np.arange(q**n_sites, dtype=np.int64)
    powers = q ** np.arange(n_sites, dtype=np.int64)
    return (idx[:, None] // powers[None, :]) % q


def encode_states(states: np.ndarray, q: int) -> np.ndarray:
    """Vectorised encode of 0-based state rows."""
    states = np.asarray(states, dtype=np.int64)
    powers = q ** np.arange(states.shape[-1], dtype=np.int64)
    return states @ powers


def sub_index(box: Box, sub: Box, q: int) -> np.ndarray:
    """For every configuration index of ``box``, the index of its restriction to ``sub``."""
    cols = [box.index(s) for s in sub.sites]
    states = all_states(len(box), q)
    return encode_states(states[:, cols], q)


@dataclass(frozen=True)
class FiniteMeasure:
    box: Box
    q: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.q ** len(self.box),):
            raise ValueError(f"expected {self.q ** len(self.box)} weights, got {w.shape}")
        if np.any(w < 0):
            raise ValueError("negative weights")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_unnormalized(cls, box: Box, q: int, w) -> "FiniteMeasure":
        w = np.asarray(w, dtype=float)
        return cls(box, q, w / w.sum())

    @classmethod
    def uniform(cls, box: Box, q: int) -> "FiniteMeasure":
        n = check_size(q, len(box))
        return cls(box, q, np.full(n, 1.0 / n))

    @classmethod
    def point(cls, cfg: Configuration) -> "FiniteMeasure":
        n = check_size(cfg.q, len(cfg.box))
        w = np.zeros(n)
        w[encode(cfg)] = 1.0
        return cls(cfg.box, cfg.q, w)

    @classmethod
    def product(cls, box: Box, q: int, factors: Sequence[Sequence[float]]) -> "FiniteMeasure":
        """Product measure with one single-site law per site (in site order)."""
        if len(factors) != len(box):
            raise ValueError("one factor per site required")
        states = all_states(len(box), q)
        w = np.ones(len(states))
        for k, f in enumerate(factors):
            w *= np.asarray(f, dtype=float)[states[:, k]]
        return cls.from_unnormalized(box, q, w)

    def prob(self, cfg: Configuration) -> float:
        return float(self.weights[encode(cfg)])

    def cylinder(self, states: Mapping) -> float:
        """nu(eta_Lambda) for a partial assignment {site: state}."""
        assignment = {as_site(k): v for k, v in states.items()}
        sub = self.box.sub(assignment)
        vals = tuple(assignment[s] for s in sub.sites)
        return marginal(self, sub).prob(Configuration(sub, vals, self.q))


def marginal(m: FiniteMeasure, sub: Box) -> FiniteMeasure:
    """Law of the restriction to ``sub`` (sums over the complementary coordinates)."""
    if not sub.issubset(m.box):
        raise ValueError("sub-volume not contained in the measure's box")
    n = len(m.box)
    tensor = m.weights.reshape((m.q,) * n, order="F")
    keep = [m.box.index(s) for s in sub.sites]
    drop = tuple(k for k in range(n) if k not in keep)
    reduced = tensor.sum(axis=drop) if drop else tensor
    # remaining axes are in increasing box order; sub.sites is sorted the same way
    kept_sorted = sorted(keep)
    perm = [kept_sorted.index(k) for k in keep]
    w = np.transpose(reduced, perm).reshape(-1, order="F")
    return FiniteMeasure(sub, m.q, w / w.sum())


def total_variation(m1: FiniteMeasure, m2: FiniteMeasure) -> float:
    if m1.box.sites != m2.box.sites or m1.q != m2.q:
        raise ValueError("measures live on different boxes")
    return 0.5 * float(np.abs(m1.weights - m2.weights).sum())
