"""Exact continuous-time evolution on a finite box via uniformization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.sparse.csgraph import connected_components

from .core import Box, FiniteMeasure, all_states, check_size, marginal, total_variation
from .dynamics import RateFamily
from .gibbs import flip_indices

POISSON_TAIL = 1e-15
MAX_STEP_MEAN = 25.0  # lambda*dt per uniformization step
CONVERGED_TV = 1e-8
AMPLITUDE_RATIO = 10.0


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Q[eta, eta'] = rate of eta -> eta'; stored sparse, rows sum to 0."""

    box: Box
    q: int
    Q: sp.csr_matrix

    @property
    def n_states(self) -> int:
        return self.Q.shape[0]

    def dense(self) -> np.ndarray:
        return self.Q.toarray()

    @property
    def uniformization_rate(self) -> float:
        return float(np.max(-self.Q.diagonal())) if self.n_states else 0.0


def build_generator(rf: RateFamily, box: Box) -> GeneratorMatrix:
    """Q[eta, eta^{x,i}] = c_x(eta, i); diagonal = -row sum."""
    q = rf.q
    N = check_size(q, len(box))
    R = rf.on_box(box).table()
    rows, cols, vals = [], [], []
    base = np.arange(N)
    for k in range(len(box)):
        F = flip_indices(N, q, k)
        r = R[:, k, :]
        mask = r > 0
        rows.append(np.broadcast_to(base[:, None], F.shape)[mask])
        cols.append(F[mask])
        vals.append(r[mask])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    Q = (off + sp.diags(diag)).tocsr()
    Q.sort_indices()
    return GeneratorMatrix(box, q, Q)


def _poisson_cutoff(mean: float, tail: float) -> int:
    k = int(stats.poisson.isf(tail, mean)) + 1 if mean > 0 else 0
    while mean > 0 and stats.poisson.sf(k, mean) > tail:
        k += 1
    return k


def evolve(gen: GeneratorMatrix, nu0: FiniteMeasure, t: float,
           tail: float = POISSON_TAIL) -> FiniteMeasure:
    """nu_t = nu_0 exp(tQ) by uniformization.

    exp(tQ) = sum_k Pois(k; lam t) P^k with P = I + Q/lam; the series is cut
    once the Poisson tail drops below ``tail``. Long horizons are split into
    steps with lam*dt <= MAX_STEP_MEAN so the Poisson weights stay representable.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if nu0.box.sites != gen.box.sites:
        raise ValueError("measure and generator live on different boxes")
    v = np.array(nu0.weights, dtype=float)
    lam = gen.uniformization_rate
    if t == 0 or lam == 0:
        return FiniteMeasure(gen.box, gen.q, v / v.sum())
    PT = (sp.identity(gen.n_states, format="csr") + gen.Q / lam).T.tocsr()
    n_steps = max(1, int(np.ceil(lam * t / MAX_STEP_MEAN)))
    dt = t / n_steps
    mean = lam * dt
    K = _poisson_cutoff(mean, tail)
    weights = stats.poisson.pmf(np.arange(K + 1), mean)
    for _ in range(n_steps):
        term = v
        acc = weights[0] * term
        for k in range(1, K + 1):
            term = PT @ term
            acc = acc + weights[k] * term
        v = np.clip(acc, 0.0, None)
        v = v / v.sum()
    return FiniteMeasure(gen.box, gen.q, v)


def stationary(gen: GeneratorMatrix) -> FiniteMeasure:
    """The unique nu with nu Q = 0; raises for reducible generators."""
    n_comp, _ = connected_components(gen.Q, directed=True, connection="strong")
    if n_comp != 1:
        raise ValueError(f"generator is reducible ({n_comp} communicating classes)")
    N = gen.n_states
    if N == 1:
        return FiniteMeasure(gen.box, gen.q, np.ones(1))
    A = gen.Q.T.tolil()
    A[N - 1, :] = np.ones(N)
    b = np.zeros(N)
    b[N - 1] = 1.0
    if N <= 4096:
        v = np.linalg.solve(A.toarray(), b)
    else:
        from scipy.sparse.linalg import spsolve

        v = spsolve(A.tocsc(), b)
    v = np.clip(v, 0.0, None)
    return FiniteMeasure(gen.box, gen.q, v / v.sum())


def stationary_residual(gen: GeneratorMatrix, nu: FiniteMeasure) -> float:
    return float(np.max(np.abs(gen.Q.T @ nu.weights)))


@dataclass(frozen=True)
class SpectrumReport:
    max_imag: float
    asymmetry: float
    eigenvalues: np.ndarray
    gap: float | None  # -second eigenvalue of the symmetrised generator, if reversible

    def as_dict(self) -> dict:
        return {"max_imag": self.max_imag, "asymmetry": self.asymmetry, "gap": self.gap}


def spectrum_reality(gen: GeneratorMatrix, mu: FiniteMeasure,
                     reversible_tol: float = 1e-10) -> SpectrumReport:
    """max |Im lambda| over eigenvalues of Q and max |S - S^T| for S = D^1/2 Q D^-1/2."""
    w = np.asarray(mu.weights)
    if np.any(w <= 0):
        raise ValueError("mu must be strictly positive")
    Q = gen.dense()
    s = np.sqrt(w)
    S = s[:, None] * Q / s[None, :]
    asym = float(np.max(np.abs(S - S.T)))
    ev = np.linalg.eigvals(Q)
    gap = None
    if asym < reversible_tol:
        sym = np.linalg.eigvalsh(0.5 * (S + S.T))
        gap = float(-np.sort(sym)[-2]) if len(sym) > 1 else None
    return SpectrumReport(float(np.max(np.abs(ev.imag))), asym, ev, gap)


@dataclass
class Trajectory:
    times: np.ndarray
    measures: list[FiniteMeasure]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.measures):
            raise ValueError("one measure per time")
        if len(self.times) and (self.times[0] != 0 or np.any(np.diff(self.times) <= 0)):
            raise ValueError("times must start at 0 and increase strictly")

    def marginals(self, sub: Box) -> list[FiniteMeasure]:
        return [marginal(m, sub) for m in self.measures]

    def to_csv(self, path, sub: Box | None = None) -> None:
        """Columns (t, cylinder, probability); a JSON sidecar carries the metadata."""
        path = Path(path)
        meas = self.measures if sub is None else self.marginals(sub)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "cylinder", "probability"])
            for t, m in zip(self.times, meas):
                states = all_states(len(m.box), m.q) + 1
                for row, p in zip(states, m.weights):
                    w.writerow([repr(float(t)), "-".join(map(str, row)), repr(float(p))])
        meta = dict(self.metadata)
        meta["finite_volume_surrogate"] = True
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True),
                                             encoding="utf-8")


def trajectory(gen: GeneratorMatrix, nu0: FiniteMeasure, times, metadata=None) -> Trajectory:
    """Exact evolution sampled at ``times`` (must start at 0), stepping between checkpoints."""
    times = np.asarray(times, dtype=float)
    out = [nu0]
    cur = nu0
    for a, b in zip(times[:-1], times[1:]):
        cur = evolve(gen, cur, b - a)
        out.append(cur)
    return Trajectory(times, out, dict(metadata or {}))


@dataclass(frozen=True)
class PeriodVerdict:
    status: str  # converged | oscillating | undecided
    period: float | None = None
    final_tv: float = 0.0
    peak_ratio: float = 0.0


def detect_period(traj: Trajectory, sub: Box, converged_tv: float = CONVERGED_TV,
                  amplitude_ratio: float = AMPLITUDE_RATIO) -> PeriodVerdict:
    """Classify the tail behaviour of the sub-volume marginals.

    converged: TV to the last marginal stays below ``converged_tv`` over the
    final third. oscillating: the amplitude spectrum of the detrended cylinder
    probabilities (summed over cylinders) has a peak, at least two full cycles
    in the window, exceeding ``amplitude_ratio`` times its median.
    """
    if len(traj.times) < 20:
        raise ValueError("need at least 20 samples")
    dt = np.diff(traj.times)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-12):
        raise ValueError("detector needs a uniform time grid")
    margs = traj.marginals(sub)
    last = margs[-1]
    d = np.array([total_variation(m, last) for m in margs])
    tail = d[len(d) - len(d) // 3:]
    if np.max(tail) < converged_tv:
        return PeriodVerdict("converged", None, float(np.max(tail)))
    P = np.array([m.weights for m in margs])
    t = traj.times
    resid = P - np.array([np.polyval(np.polyfit(t, col, 1), t) for col in P.T]).T
    amp = np.abs(np.fft.rfft(resid, axis=0)).sum(axis=1)[1:]
    if len(amp) < 3:
        return PeriodVerdict("undecided", None, float(np.max(tail)))
    k = int(np.argmax(amp))
    floor = float(np.median(amp)) or np.finfo(float).tiny
    ratio = float(amp[k] / floor)
    freq = (k + 1) / (len(d) * dt[0])
    if k >= 1 and ratio > amplitude_ratio:
        return PeriodVerdict("oscillating", 1.0 / freq, float(np.max(tail)), ratio)
    return PeriodVerdict("undecided", None, float(np.max(tail)), ratio)
