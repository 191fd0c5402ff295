"""Command-line experiment runner: ``gibbsflow run|plot|presets``."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from . import entropy as ent
from . import exact, kmc
from .core import (Box, Configuration, FiniteMeasure, SizeLimitError, decode, marginal,
                   total_variation)
from .dynamics import RateFamily, rates_from_json
from .gibbs import PRESETS as POTENTIALS
from .gibbs import Specification, free_potential, gibbs_measure, load_potential

STUDIES = ("entropy-decay", "attractor-vs-gibbs", "spectrum-reality", "girsanov-check",
           "positive-mass", "lemma-suite")
TAU0 = 0.01  # first checkpoint with a strictly positive nu


class ConfigError(ValueError):
    pass


# --- presets -------------------------------------------------------------------

_RING4 = {"potential": "ising1d", "beta": 0.5, "q": 2, "box": {"kind": "ring", "length": 4}}
_TORUS = {"potential": "ising2d", "beta": 0.2, "q": 2, "box": {"kind": "torus", "shape": [2, 2]}}

PRESETS: dict[str, dict] = {
    "entropy-decay": {
        "study": "entropy-decay", "model": _RING4, "dynamics": {"rates": "heat-bath"},
        "schedule": {"dt": 0.05, "t_max": 10.0, "initial": [1, 1, 1, 1]},
    },
    "attractor-vs-gibbs": {
        "study": "attractor-vs-gibbs",
        "model": {**_RING4, "beta": 0.2},
        "dynamics": {"rates": "heat-bath"},
        "schedule": {"t_max": 50.0, "n_initials": 5, "seed": 1, "dt": 0.5},
    },
    "spectrum-reality": {
        "study": "spectrum-reality",
        "model": {"potential": "free", "beta": 0.0, "q": 3, "box": {"kind": "segment", "length": 1}},
        "dynamics": {"rates": "cyclic"},
        "schedule": {"expect": "complex"},
    },
    "girsanov-check": {
        "study": "girsanov-check", "model": _TORUS, "dynamics": {"rates": "heat-bath"},
        "schedule": {"tau": 1.0, "n_paths": 100000, "seed": 0, "perturbed": [[0, 0]],
                     "initial": [2, 2, 2, 2]},
    },
    "positive-mass": {
        "study": "positive-mass", "model": _TORUS, "dynamics": {"rates": "heat-bath"},
        "schedule": {"tau": 0.5, "times": [0.5, 1.0, 5.0], "n_paths": 100000, "seed": 0,
                     "volumes": [[[0, 0]], [[0, 0], [1, 0]]], "initial": [2, 2, 2, 2]},
    },
    "lemma-suite": {
        "study": "lemma-suite", "model": _RING4, "dynamics": {"rates": "heat-bath"},
        "schedule": {"t_mid": 0.5, "initial": [1, 1, 1, 1], "seed": 0, "n_phi": 10000},
    },
}


# --- config ----------------------------------------------------------------------


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"missing '{key}' in {where}")
    return d[key]


def build_box(spec: dict) -> Box:
    kind = _need(spec, "kind", "model.box")
    if kind == "ring":
        return Box.ring(int(_need(spec, "length", "model.box")))
    if kind == "torus":
        lx, ly = _need(spec, "shape", "model.box")
        return Box.torus(int(lx), int(ly))
    if kind == "segment":
        return Box.segment(int(_need(spec, "length", "model.box")),
                           spec.get("boundary", "free"),
                           exterior_default=spec.get("exterior_default"))
    if kind == "cube":
        return Box.cube(int(_need(spec, "n", "model.box")), int(spec.get("dim", 1)),
                        spec.get("boundary", "free"),
                        exterior_default=spec.get("exterior_default"))
    raise ConfigError(f"unknown box kind {kind!r}")


def build_model(cfg: dict, base_dir: Path) -> tuple[Specification, Box, RateFamily]:
    model = _need(cfg, "model", "config")
    box = build_box(_need(model, "box", "model"))
    q = int(model.get("q", 2))
    pot = _need(model, "potential", "model")
    params = model.get("params", {})
    if pot == "free":
        potential = free_potential(q, box.dim)
    elif isinstance(pot, str) and pot in POTENTIALS:
        potential = POTENTIALS[pot](**params)
    elif isinstance(pot, str):
        potential = load_potential(base_dir / pot)
    else:
        potential = load_potential(pot)
    if potential.q != q:
        raise ConfigError(f"potential has q={potential.q} but model.q={q}")
    if potential.dim != box.dim:
        raise ConfigError("potential and box dimensions differ")
    spec = Specification(potential, float(model.get("beta", 1.0)))
    dyn = _need(cfg, "dynamics", "config")
    rates = _need(dyn, "rates", "dynamics")
    if rates == "heat-bath":
        rf = RateFamily.heat_bath(spec)
    elif rates == "metropolis":
        rf = RateFamily.metropolis(spec)
    elif rates == "cyclic":
        rf = RateFamily.cyclic(q, float(dyn.get("eps", 0.05)))
    elif isinstance(rates, str):
        rf = rates_from_json(base_dir / rates, q)
    else:
        rf = rates_from_json(rates, q)
    if rf.dim != box.dim:
        raise ConfigError("rate family and box dimensions differ")
    return spec, box, rf


def _initial(sched: dict, box: Box, q: int) -> Configuration:
    init = sched.get("initial", [1] * len(box))
    if len(init) != len(box):
        raise ConfigError("schedule.initial needs one state per site")
    return Configuration(box, tuple(init), q)


def _grid(dt: float, t_max: float) -> np.ndarray:
    if dt <= 0 or t_max <= 0:
        raise ConfigError("dt and t_max must be positive")
    k = int(round(t_max / dt))
    if not math.isclose(k * dt, t_max, rel_tol=1e-9):
        raise ConfigError("t_max must be a multiple of dt")
    return np.concatenate([[0.0, TAU0], dt * np.arange(1, k + 1)]) if dt > TAU0 else \
        dt * np.arange(0, k + 1)


# --- report ----------------------------------------------------------------------


@dataclass
class Assertion:
    name: str
    value: float
    tolerance: float
    relation: str  # "<", "<=", ">", ">="
    passed: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StudyReport:
    study: str
    config: dict
    metrics: dict = field(default_factory=dict)
    assertions: list[Assertion] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)

    def check(self, name: str, value: float, relation: str, tolerance: float) -> bool:
        ops = {"<": value < tolerance, "<=": value <= tolerance,
               ">": value > tolerance, ">=": value >= tolerance}
        ok = bool(ops[relation])
        self.assertions.append(Assertion(name, float(value), float(tolerance), relation, ok))
        return ok

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def as_dict(self) -> dict:
        return {
            "study": self.study,
            "passed": self.passed,
            "assertions": [a.as_dict() for a in self.assertions],
            "metrics": self.metrics,
            "artifacts": self.artifacts,
            "provenance": {"config_hash": config_hash(self.config),
                           "seed": self.config.get("schedule", {}).get("seed"),
                           "version": f"gibbsflow {__version__}"},
            "config": self.config,
        }

    def write(self, out: Path) -> Path:
        p = out / "report.json"
        p.write_text(json.dumps(_jsonable(self.as_dict()), indent=2, sort_keys=True) + "\n",
                     encoding="utf-8")
        return p


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# --- studies ---------------------------------------------------------------------


def study_entropy_decay(cfg, spec, box, rf, out: Path, jobs: int) -> StudyReport:
    rep = StudyReport("entropy-decay", cfg)
    sched = cfg.get("schedule", {})
    times = _grid(float(sched.get("dt", 0.05)), float(sched.get("t_max", 10.0)))
    gen = exact.build_generator(rf, box)
    mu = gibbs_measure(spec, box)
    nu0 = FiniteMeasure.point(_initial(sched, box, spec.q))
    traj = exact.trajectory(gen, nu0, times, {"study": "entropy-decay"})
    rows, hs, gs = [], [], []
    for t, nu in zip(traj.times, traj.measures):
        h = ent.relative_entropy(nu, mu)
        g = ent.entropy_loss_direct(rf, nu, mu) if t >= TAU0 else float("nan")
        rows.append((float(t), h, g))
        hs.append(h)
        if t >= TAU0:
            gs.append(g)
    _write_csv(out / "entropy.csv", ["t", "h", "g"], rows)
    rep.artifacts.append("entropy.csv")
    rep.metrics.update(h0=hs[0], h_end=hs[-1], boundary=box.boundary)
    rep.check("max increase of h between checkpoints", float(np.max(np.diff(hs))), "<=", 1e-12)
    rep.check("max g over checkpoints t >= 0.01", float(np.max(gs)), "<=", 1e-12)
    return rep


def _distinct_initials(box: Box, q: int, k: int, seed: int) -> list[Configuration]:
    n = q ** len(box)
    k = min(k, n)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2])))
    picks = [0, n - 1] + [int(v) for v in rng.permutation(n)]
    seen, out = set(), []
    for p in picks:
        if p not in seen:
            seen.add(p)
            out.append(decode(p, box, q))
        if len(out) == k:
            break
    return out


def _all_subvolumes(box: Box):
    for r in range(1, len(box) + 1):
        for combo in itertools.combinations(box.sites, r):
            yield box.sub(combo)


def study_attractor(cfg, spec, box, rf, out: Path, jobs: int) -> StudyReport:
    rep = StudyReport("attractor-vs-gibbs", cfg)
    sched = cfg.get("schedule", {})
    t_max = float(sched.get("t_max", 50.0))
    dt = float(sched.get("dt", 0.5))
    tol = float(sched.get("tv_tol", 1e-6))
    inits = _distinct_initials(box, spec.q, int(sched.get("n_initials", 5)),
                               int(sched.get("seed", 0)))
    gen = exact.build_generator(rf, box)
    mu = gibbs_measure(spec, box)
    times = dt * np.arange(int(round(t_max / dt)) + 1)

    def run(cfg0):
        return exact.trajectory(gen, FiniteMeasure.point(cfg0), times)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            trajs = list(ex.map(run, inits))
    else:
        trajs = [run(c) for c in inits]
    subs = list(_all_subvolumes(box)) if len(box) <= 10 else box.nested()
    rows, worst, worst_res, verdicts = [], 0.0, 0.0, []
    for c, tr in zip(inits, trajs):
        end = tr.measures[-1]
        tv = max(total_variation(marginal(end, s), marginal(mu, s)) for s in subs)
        res = ent.gamma_pair_residual(rf, end)
        v = exact.detect_period(tr, box.sub(box.sites)) if len(times) >= 20 else None
        label = "-".join(map(str, c.states))
        rows.append((label, tv, res, v.status if v else "n/a"))
        verdicts.append(v.status if v else "n/a")
        worst, worst_res = max(worst, tv), max(worst_res, res)
    _write_csv(out / "attractor.csv", ["initial", "max_tv", "gamma_residual", "tail"], rows)
    rep.artifacts.append("attractor.csv")
    rep.metrics.update(finite_volume_surrogate=True, t_end=t_max, n_subvolumes=len(subs),
                       tail_verdicts=verdicts, boundary=box.boundary)
    rep.check("max TV to Gibbs over initials and sub-volumes at t_end", worst, "<", tol)
    rep.check("max Gamma-pair residual at t_end", worst_res, "<", tol)
    return rep


def study_spectrum(cfg, spec, box, rf, out: Path, jobs: int) -> StudyReport:
    rep = StudyReport("spectrum-reality", cfg)
    sched = cfg.get("schedule", {})
    gen = exact.build_generator(rf, box)
    mu = exact.stationary(gen)
    sr = exact.spectrum_reality(gen, mu)
    ev = sr.eigenvalues
    _write_csv(out / "spectrum.csv", ["re", "im"], [(float(z.real), float(z.imag)) for z in ev])
    rep.artifacts.append("spectrum.csv")
    complex_flag = sr.max_imag > 0.1
    rep.metrics.update(sr.as_dict(), complex_spectrum=complex_flag,
                       reversible=sr.asymmetry < 1e-10)
    expect = sched.get("expect")
    if expect == "real":
        rep.check("asymmetry of symmetrised generator", sr.asymmetry, "<", 1e-10)
        rep.check("max |Im lambda|", sr.max_imag, "<", 1e-8)
    elif expect == "complex":
        rep.check("max |Im lambda|", sr.max_imag, ">", 0.1)
    elif sr.asymmetry < 1e-10:
        rep.check("reversible => max |Im lambda|", sr.max_imag, "<", 1e-8)
    return rep


def study_girsanov(cfg, spec, box, rf, out: Path, jobs: int) -> StudyReport:
    rep = StudyReport("girsanov-check", cfg)
    sched = cfg.get("schedule", {})
    tau = float(sched.get("tau", 1.0))
    n = int(sched.get("n_paths", 100000))
    seed = int(_need(sched, "seed", "schedule"))
    lam = [tuple(s) for s in sched.get("perturbed", [box.sites[0]])]
    omega = _initial(sched, box, spec.q)
    pert = kmc.PerturbedFamily(rf, lam)
    ge = kmc.girsanov_estimate(rf, pert, omega, tau, box.sites, n, seed, jobs)
    direct = kmc.estimate_marginal(rf, omega, tau, box.sites, n, seed + 1, jobs)
    ncyl = len(ge.probs)
    z = float(stats.norm.isf(0.025 / ncyl))
    se = np.sqrt(ge.se**2 + direct.se**2)
    gap = np.abs(ge.probs - direct.freq)
    rows = [(c, ge.probs[k], ge.se[k], direct.freq[k], direct.se[k])
            for k, c in enumerate(direct.cylinders())]
    _write_csv(out / "girsanov.csv", ["cylinder", "reweighted", "se_reweighted", "direct",
                                      "se_direct"], rows)
    rep.artifacts.append("girsanov.csv")
    rep.metrics.update(mean_weight=ge.mean_weight, se_weight=ge.se_weight, joint_z=z,
                       rng="Philox", seed=seed)
    rep.check("|E[weight] - 1| / se", abs(ge.mean_weight - 1) / ge.se_weight, "<=", 3.0)
    rep.check("max |reweighted - direct| / joint 95% half-width",
              float(np.max(gap / (z * np.where(se > 0, se, np.inf)))), "<=", 1.0)
    return rep


def study_positive_mass(cfg, spec, box, rf, out: Path, jobs: int) -> StudyReport:
    rep = StudyReport("positive-mass", cfg)
    sched = cfg.get("schedule", {})
    tau = float(sched.get("tau", 0.5))
    n = int(sched.get("n_paths", 100000))
    seed = int(_need(sched, "seed", "schedule"))
    times = [float(t) for t in sched.get("times", [tau])]
    if any(t < tau for t in times):
        raise ConfigError("positive-mass times must be >= tau")
    omega = _initial(sched, box, spec.q)
    rows, bounds = [], {}
    worst = math.inf
    for vi, vol in enumerate(sched.get("volumes", [[box.sites[0]]])):
        sites = [tuple(s) for s in vol]
        mb = kmc.mass_bound(rf, tau, sites)
        bounds[str(vi)] = mb.as_dict()
        rep.check(f"C(tau, volume {vi}) > 0", mb.C, ">", 0.0)
        for ti, t in enumerate(times):
            em = kmc.estimate_marginal(rf, omega, t, sites, n, seed + 1000 * vi + ti, jobs)
            sigma = np.sqrt(np.maximum(em.freq * (1 - em.freq), 1.0 / n) / n)
            slack = em.freq + 3 * sigma - mb.C
            worst = min(worst, float(slack.min()))
            for c, f, s in zip(em.cylinders(), em.freq, sigma):
                rows.append((vi, t, c, f, s, mb.C))
    _write_csv(out / "positive_mass.csv", ["volume", "t", "cylinder", "freq", "sigma", "C"], rows)
    rep.artifacts.append("positive_mass.csv")
    rep.metrics.update(bounds=bounds)
    rep.check("min over cylinders of freq + 3 sigma - C", worst, ">=", 0.0)
    return rep


def lemma_suite(spec, box, rf, nu, seed: int, n_phi: int) -> dict:
    """Run the lemma-level inequalities; returns counts and worst margins."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 3])))
    u = rng.uniform(1e-3, 10.0, size=(n_phi, 4))
    lhs = ent.phi(u[:, 0] + u[:, 1], u[:, 2] + u[:, 3])
    rhs = ent.phi(u[:, 0], u[:, 2]) + ent.phi(u[:, 1], u[:, 3])
    phi_viol = int(np.sum(lhs > rhs + 1e-12 * np.maximum(1, np.abs(rhs))))

    mu = gibbs_measure(spec, box)
    nested = box.nested()
    tabs = [ent.alpha_beta(rf, nu, s) for s in nested]
    mono_viol, beta_viol = 0, 0
    for (a0, _), (a1, _), s0, s1 in zip(tabs[:-1], tabs[1:], nested[:-1], nested[1:]):
        for p, x in enumerate(s0.sites):
            if a0[p] > a1[s1.sites.index(x)] + 1e-12:
                mono_viol += 1
    c_bar = rf.c_bar
    for a, b in tabs:
        beta_viol += int(np.sum(~ent.beta_bound_holds(a, b, spec.q, c_bar)))
    neg_alpha = sum(int(np.sum(a < -1e-15)) for a, _ in tabs)

    qd_viol, qd_count = 0, 0
    frng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 4])))
    for s in nested[:-1]:
        for _ in range(5):
            f = frng.normal(size=len(nu.weights))
            chk = ent.quantitative_differentiation_check(nu, f, s)
            qd_count += 1
            qd_viol += int(not chk.holds)

    cr_viol, cr_count = 0, 0
    outer = Box.segment(7) if box.dim == 1 else None
    if outer is not None and spec.range <= 1:
        mu_o = gibbs_measure(spec, outer)
        x = outer.sites[3]
        for sub in ([x], [outer.sites[2], x], [outer.sites[2], x, outer.sites[4]]):
            for i in range(1, spec.q + 1):
                chk = ent.conditional_ratio_check(spec, mu_o, x, i, sub)
                cr_count += 1
                cr_viol += int(not chk.holds)
    return {"phi_violations": phi_viol, "alpha_monotonicity_violations": mono_viol,
            "negative_alpha": neg_alpha, "beta_bound_violations": beta_viol,
            "quantitative_differentiation_violations": qd_viol,
            "quantitative_differentiation_cases": qd_count,
            "conditional_ratio_violations": cr_viol, "conditional_ratio_cases": cr_count,
            "alpha": [list(map(float, a)) for a, _ in tabs], "mu_box_sites": len(mu.box)}


def study_lemma(cfg, spec, box, rf, out: Path, jobs: int) -> StudyReport:
    rep = StudyReport("lemma-suite", cfg)
    sched = cfg.get("schedule", {})
    gen = exact.build_generator(rf, box)
    t_mid = float(sched.get("t_mid", 0.5))
    if t_mid < TAU0:
        raise ConfigError("t_mid must be >= 0.01")
    nu = exact.evolve(gen, FiniteMeasure.point(_initial(sched, box, spec.q)), t_mid)
    res = lemma_suite(spec, box, rf, nu, int(sched.get("seed", 0)), int(sched.get("n_phi", 10000)))
    mu = gibbs_measure(spec, box)
    ledger = ent.entropy_ledger(rf, spec, nu, mu)
    ledger.to_csv(out / "ledger_sites.csv", out / "ledger_volumes.csv")
    ledger.to_json(out / "ledger.json")
    rep.artifacts += ["ledger_sites.csv", "ledger_volumes.csv", "ledger.json"]
    rep.metrics.update({k: v for k, v in res.items() if k != "alpha"}, C1=ledger.C1, C2=ledger.C2)
    for key in ("phi_violations", "alpha_monotonicity_violations", "negative_alpha",
                "beta_bound_violations", "quantitative_differentiation_violations",
                "conditional_ratio_violations"):
        rep.check(key, res[key], "<=", 0)
    gap = max(abs(v.g_direct - v.g_gamma) for v in ledger.volumes)
    rep.check("max |g_direct - g_gamma| over volumes", gap, "<", 1e-9)
    return rep


RUNNERS = {
    "entropy-decay": study_entropy_decay,
    "attractor-vs-gibbs": study_attractor,
    "spectrum-reality": study_spectrum,
    "girsanov-check": study_girsanov,
    "positive-mass": study_positive_mass,
    "lemma-suite": study_lemma,
}


def run_config(cfg: dict, out: Path, jobs: int = 1, base_dir: Path = Path(".")) -> StudyReport:
    study = _need(cfg, "study", "config")
    if study not in RUNNERS:
        raise ConfigError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    try:
        spec, box, rf = build_model(cfg, base_dir)
    except (KeyError, TypeError) as e:
        raise ConfigError(str(e)) from e
    out.mkdir(parents=True, exist_ok=True)
    rep = RUNNERS[study](cfg, spec, box, rf, out, jobs)
    rep.metrics.setdefault("box", box.describe())
    rep.write(out)
    return rep


# --- SVG plotting ------------------------------------------------------------------

UNITS = {"t": "t (time units)", "h": "h (nats)", "g": "g (nats per time unit)",
         "n": "n (lattice spacings)", "alpha": "alpha_n(x) (rate units)",
         "beta": "beta_n(x) (rate units)", "rho": "rho_n(x) (dimensionless)",
         "probability": "probability", "freq": "frequency", "re": "Re lambda (1/time)",
         "im": "Im lambda (1/time)"}


def _label(col: str) -> str:
    return UNITS.get(col, f"{col} (a.u.)")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_svg(series: dict[str, list[tuple[float, float]]], kind: str, xlab: str, ylab: str,
               title: str, width: int = 640, height: int = 420) -> str:
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("empty series")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = 80, 20, 40, 60
    W, H = width - ml - mr, height - mt - mb

    def X(v):
        return ml + (v - x0) / (x1 - x0) * W

    def Y(v):
        return mt + H - (v - y0) / (y1 - y0) * H

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f"<title>{_esc(title)}</title>",
             f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">'
             f"{_esc(title)}</text>",
             f'<g class="axes" stroke="black"><line x1="{ml}" y1="{mt + H}" x2="{ml + W}" '
             f'y2="{mt + H}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + H}"/></g>']
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        fy = y0 + (y1 - y0) * k / 4
        parts.append(f'<text x="{X(fx):.1f}" y="{mt + H + 16}" text-anchor="middle" '
                     f'font-size="10">{fx:.3g}</text>')
        parts.append(f'<text x="{ml - 6}" y="{Y(fy) + 3:.1f}" text-anchor="end" '
                     f'font-size="10">{fy:.3g}</text>')
    parts.append(f'<text class="xlabel" x="{ml + W / 2:.1f}" y="{height - 15}" '
                 f'text-anchor="middle" font-size="12">{_esc(xlab)}</text>')
    parts.append(f'<text class="ylabel" x="18" y="{mt + H / 2:.1f}" text-anchor="middle" '
                 f'font-size="12" transform="rotate(-90 18 {mt + H / 2:.1f})">{_esc(ylab)}</text>')
    for ci, (name, pts) in enumerate(sorted(series.items())):
        col = colors[ci % len(colors)]
        pts = sorted(pts)
        if kind == "scatter":
            for x, y in pts:
                parts.append(f'<circle cx="{X(x):.2f}" cy="{Y(y):.2f}" r="2.5" fill="{col}"/>')
        else:
            coords = []
            for j, (x, y) in enumerate(pts):
                if kind == "step" and j:
                    coords.append(f"{X(x):.2f},{Y(pts[j - 1][1]):.2f}")
                coords.append(f"{X(x):.2f},{Y(y):.2f}")
            parts.append(f'<polyline class="{kind}" fill="none" stroke="{col}" '
                         f'points="{" ".join(coords)}"/>')
        if name:
            parts.append(f'<text x="{ml + W - 4}" y="{mt + 14 + 14 * ci}" text-anchor="end" '
                         f'font-size="10" fill="{col}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_csv(path: Path, kind: str, x: str | None = None, y: str | None = None,
             group: str | None = None, out: Path | None = None) -> Path:
    if kind not in ("line", "step", "scatter"):
        raise ValueError(f"unknown plot kind {kind!r}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
        header = list(rows[0].keys()) if rows else None
    if not header:
        raise ValueError("empty series")
    x = x or header[0]
    y = y or header[1]
    for c in (x, y) + ((group,) if group else ()):
        if c not in header:
            raise ValueError(f"column {c!r} not in CSV")
    series: dict[str, list] = {}
    for r in rows:
        try:
            xv, yv = float(r[x]), float(r[y])
        except (TypeError, ValueError) as e:
            raise ValueError(f"malformed CSV row {r}") from e
        if math.isfinite(xv) and math.isfinite(yv):
            series.setdefault(r[group] if group else "", []).append((xv, yv))
    chash = "unknown"
    report = path.parent / "report.json"
    if report.exists():
        chash = json.loads(report.read_text(encoding="utf-8"))["provenance"]["config_hash"]
    svg = render_svg(series, kind, _label(x), _label(y), f"{y} vs {x} [config {chash}]")
    out = out or path.with_suffix(".svg")
    out.write_text(svg, encoding="utf-8")
    return out


# --- entry point --------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gibbsflow", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a study from a JSON config or a preset")
    r.add_argument("config", nargs="?", help="config JSON file")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--out", default="gibbsflow-out")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--seed", type=int, help="override schedule.seed")
    pl = sub.add_parser("plot", help="render a CSV produced by run as SVG")
    pl.add_argument("csv")
    pl.add_argument("--kind", choices=["line", "step", "scatter"], default="line")
    pl.add_argument("--x")
    pl.add_argument("--y")
    pl.add_argument("--group")
    pl.add_argument("--out")
    sub.add_parser("presets", help="list study presets and potentials")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.cmd == "presets":
        for name in sorted(PRESETS):
            print(f"study  {name}")
        for name in sorted(POTENTIALS):
            print(f"model  {name}")
        for name in ("heat-bath", "metropolis", "cyclic"):
            print(f"rates  {name}")
        return 0
    if args.cmd == "plot":
        try:
            out = plot_csv(Path(args.csv), args.kind, args.x, args.y, args.group,
                           Path(args.out) if args.out else None)
        except (OSError, ValueError, KeyError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(out)
        return 0
    try:
        if args.preset:
            cfg = copy.deepcopy(PRESETS[args.preset])
            base = Path(".")
        elif args.config:
            path = Path(args.config)
            cfg = json.loads(path.read_text(encoding="utf-8"))
            base = path.parent
        else:
            raise ConfigError("give a config file or --preset")
        if args.seed is not None:
            cfg.setdefault("schedule", {})["seed"] = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        rep = run_config(cfg, Path(args.out), args.jobs, base)
    except SizeLimitError as e:
        print(f"size limit: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    for a in rep.assertions:
        print(f"{'PASS' if a.passed else 'FAIL'}  {a.name}: {a.value:.6g} {a.relation} {a.tolerance:g}")
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
