"""Experiment registry.

Each experiment takes a validated ``RunConfig`` and a ``Report`` that it
fills as it goes, so a numeric failure part way still leaves the finished
rows and checks to be flushed.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .. import brownian as bm
from ..envelope import PowerEnvelope, SqrtLogEnvelope, dvoretzky_erdos_test, envelope_from_spec, shifted_gap
from ..errors import ConfigError
from ..field import ScaleGrid, empirical_covariance, simulate_ensemble
from ..gmc import (
    STATISTICS,
    TruncationParams,
    cantor_scale_times,
    convergence_diagnostic,
    degeneracy_diagnostic,
    mollified_statistics,
    run_ensemble,
)
from ..kernel import Mollifier, eval_kbar, kernel_from_spec
from ..measures import cantor_capacity_bounds, capacity_integral, measure_from_spec
from .config import EXPERIMENTS, RunConfig
from .emit import Report

__all__ = ["REGISTRY", "get_experiment", "PROBE_OFFSETS", "FAR_SITES"]

PROBE_OFFSETS = (0.0, 0.1, 0.5, 1.2)
# independent sites (spacing beyond the kernel support) pooled for the variance check
FAR_SITES = 60
VAR_RTOL = 0.01


def _kernel(cfg):
    return kernel_from_spec(cfg.kernel.model_dump())


def _measure(spec):
    return measure_from_spec(spec.model_dump())


def _params(cfg):
    return TruncationParams(cfg.truncation.q, cfg.truncation.r, cfg.rho)


def _within(est, target, se, k=3.0):
    return abs(est - target) <= k * se


def _record_snapshots(report, snaps, statistics=STATISTICS):
    for snap in snaps:
        for name in statistics:
            report.add_values(snap.t, name, snap.values[name])


def _sites_1d_or_2d(xs, d):
    xs = np.asarray(xs, dtype=float)
    return xs[:, None] if d == 1 else np.column_stack([xs, np.zeros_like(xs)])


# ---------------------------------------------------------------------------


def covariance_validation(cfg: RunConfig, report: Report):
    """Empirical ``Cov(Xbar_s(x), Xbar_t(y))`` against quadrature ``Kbar_{s^t}``."""
    k = _kernel(cfg)
    far = 3.0 + 2.0 * np.arange(FAR_SITES)
    xs = np.concatenate([PROBE_OFFSETS, far])
    sites = _sites_1d_or_2d(xs, k.d)
    cps = list(cfg.grid.checkpoints)
    rec = simulate_ensemble(k, ScaleGrid(cps, cfg.grid.dt), sites, cfg.replicas, cfg.seed)
    n_probe = len(PROBE_OFFSETS)
    for t in cps:
        vals = rec.at(t)
        for j, x in enumerate(PROBE_OFFSETS):
            report.add_values(t, f"X(x={x:g})", vals[:, j])
    pairs = [(0, j) for j in range(n_probe)]
    rows = []
    for a, s in enumerate(cps):
        for t in cps[a:]:
            est = empirical_covariance(rec.at(s), rec.at(t), pairs)
            for (i, j), (c, se) in zip(pairs, est):
                target = float(np.asarray(eval_kbar(k, min(s, t), sites[i], sites[j], method="quad")).reshape(-1)[0])
                dist = PROBE_OFFSETS[j]
                report.check(f"cov s={s:g} t={t:g} |x-y|={dist:g}", _within(c, target, se), c, target, se)
                rows.append({"s": s, "t": t, "distance": dist, "estimate": c, "se": se, "quadrature": target})
    report.summary["covariance"] = rows
    pooled = [0] + list(range(n_probe, sites.shape[0]))
    for t in cps:
        v = rec.at(t)[:, pooled]
        var = v.var(axis=0, ddof=1)
        rel = float(var.mean() / t - 1.0)
        se = float(var.std(ddof=1) / math.sqrt(var.size) / t)
        report.check(
            f"var t={t:g} within {VAR_RTOL:.0%}", abs(rel) <= VAR_RTOL, var.mean(), t, se * t,
            f"pooled over {var.size} independent sites; relative error {rel:+.4f}",
        )


def brownian_closed_forms(cfg: RunConfig, report: Report):
    """Path Monte Carlo against the three closed forms and the Doob-McKean identity."""
    pc = bm.PathConfig(dt=1e-3, n=cfg.replicas, seed=cfg.seed)
    cases = [
        ("stay positive a=1 t=1", bm.mc_stay_positive(1.0, 1.0, pc), bm.stay_positive_prob(1.0, 1.0)),
        ("bridge positive a=1 b=1 t=2", bm.mc_bridge_positive(1.0, 1.0, 2.0, pc), bm.bridge_positive_prob(1.0, 1.0, 2.0)),
        ("below line a=1 b=1", bm.mc_below_line(1.0, 1.0, pc), bm.below_line_prob(1.0, 1.0)),
    ]
    for name, est, exact in cases:
        report.add_aggregate(0.0, name + " estimate", est.value)
        report.check(name, est.agrees(exact), est.value, exact, est.se, est.note)
    w, d = bm.mc_doob_mckean(1.0, 1.0, 2.0, pc)
    report.add_aggregate(1.0, "doob-mckean weighted", w.value)
    report.add_aggregate(1.0, "doob-mckean bessel", d.value)
    report.check("doob-mckean a=1 t=1 level=2", w.agrees(d), w.value, d.value, math.hypot(w.se, d.se))


def martingale_identities(cfg: RunConfig, report: Report):
    """``E M_t = mu(E)``, ``E Dq_t = q mu(E)``, ``Dqr`` non-increasing, null sets exact."""
    k, mu, p = _kernel(cfg), _measure(cfg.measure), _params(cfg)
    ens = run_ensemble(
        k, mu, p, cfg.grid.checkpoints, cfg.replicas, cfg.seed, dt=cfg.grid.dt,
        subsets={"all": None, "null": np.zeros(mu.n_atoms, dtype=bool)},
    )
    snaps = ens["all"][1:]
    _record_snapshots(report, snaps)
    mass = mu.total_mass
    prev = None
    for snap in snaps:
        m, m_se = report.moments(snap.t, "M", snap.values["M"])
        dq, dq_se = report.moments(snap.t, "Dq", snap.values["Dq"])
        dqr, dqr_se = report.moments(snap.t, "Dqr", snap.values["Dqr"])
        report.check(f"E M t={snap.t:g}", _within(m, mass, m_se), m, mass, m_se)
        report.check(f"E Dq t={snap.t:g}", _within(dq, p.q * mass, dq_se), dq, p.q * mass, dq_se)
        if prev is not None:
            ok = dqr <= prev[0] + 3 * math.hypot(dqr_se, prev[1])
            report.check(f"Dqr non-increasing t={snap.t:g}", ok, dqr, prev[0], math.hypot(dqr_se, prev[1]))
        prev = (dqr, dqr_se)
    null_ok = all(np.all(s.values[n] == 0.0) for s in ens["null"] for n in STATISTICS)
    report.check("null set statistics vanish", null_ok)
    return ens


def convergence(cfg: RunConfig, report: Report):
    """Traces of ``Dqr`` and ``sqrt(pi t/2) Mqr``; second moments; plateau."""
    k, mu, p = _kernel(cfg), _measure(cfg.measure), _params(cfg)
    ens = run_ensemble(k, mu, p, cfg.grid.checkpoints, cfg.replicas, cfg.seed, dt=cfg.grid.dt)
    snaps = ens["all"][1:]
    _record_snapshots(report, snaps, ("Mqr", "Dqr"))
    diag = convergence_diagnostic(snaps, cfg.grid.checkpoints)
    report.summary["convergence"] = diag
    corr = [r["correlation"] for r in diag]
    report.check("correlation increasing", all(b > a for a, b in zip(corr, corr[1:])), corr[-1], detail=str(corr))
    report.check(f"correlation > 0.9 at t={diag[-1]['t']:g}", corr[-1] > 0.9, corr[-1], 0.9)
    m2 = [r["t_second_moment"] for r in diag]
    report.check("t E[Mqr^2] <= 3x first checkpoint", max(m2) <= 3 * m2[0], max(m2), 3 * m2[0], detail=str(m2))
    last = snaps[-1]
    dqr, dqr_se = report.moments(last.t, "Dqr", last.values["Dqr"])
    eta = bm.eta_constant(p.q, p.envelope, p.r, bm.PathConfig(T=1e4, dt=0.01, n=20_000, seed=cfg.seed, growth=0.01))
    target = eta.value * mu.total_mass
    se = math.hypot(dqr_se, eta.se * mu.total_mass)
    report.check(f"E Dqr t={last.t:g} matches eta(q,r) mu(E)", _within(dqr, target, se), dqr, target, se, eta.note)
    # exact finite-t value of the same mean, reported for comparison
    fin = bm.envelope_functional(p.q, p.envelope, p.r, last.t, bm.PathConfig(dt=cfg.grid.dt, n=20_000, seed=cfg.seed))
    report.summary["finite_t_functional"] = {"t": last.t, "value": fin.value * mu.total_mass, "se": fin.se * mu.total_mass}
    report.summary["eta"] = {"value": eta.value, "se": eta.se}
    return ens


def mollified_convergence(cfg: RunConfig, report: Report):
    """``E M_eps = mu(E)`` per profile and profile invariance of the scaled means."""
    k, mu = _kernel(cfg), _measure(cfg.measure)
    mass = mu.total_mass
    profiles = (cfg.mollifier.profile, cfg.mollifier.contrast_profile)
    for eps in cfg.eps:
        res = {}
        for prof in profiles:
            snap = mollified_statistics(k, Mollifier(eps, prof), mu, cfg.replicas, cfg.seed, label=f"mollified-{prof}")
            sm = snap.scaled("M")
            report.add_values(snap.t, f"scaled M_eps[{prof}]", sm)
            m, m_se = report.moments(snap.t, f"M_eps[{prof}]", snap.values["M"])
            report.check(f"E M_eps[{prof}] eps={eps:.4g}", _within(m, mass, m_se), m, mass, m_se)
            res[prof] = report.moments(snap.t, f"scaled M_eps[{prof}]", sm)
        (a, sa), (b, sb) = res[profiles[0]], res[profiles[1]]
        se = math.hypot(sa, sb)
        report.check(f"profile invariance eps={eps:.4g}", _within(a, b, se), a, b, se)


def degeneracy(cfg: RunConfig, report: Report):
    """Median decay on the Cantor measure against a Lebesgue contrast."""
    k, p = _kernel(cfg), _params(cfg)
    cantor, contrast = _measure(cfg.measure), _measure(cfg.contrast_measure)
    sched = envelope_from_spec(cantor.meta["schedule"])
    cps = list(cfg.grid.checkpoints)
    tn = cantor_scale_times(sched, 64)
    extra = [float(t) for t in tn[1:] if t < cps[-1] and all(abs(t - c) > 1e-9 for c in cps)]
    c_snaps = run_ensemble(k, cantor, p, sorted(cps + extra), cfg.replicas, cfg.seed, dt=cfg.grid.dt, label="cantor")["all"]
    l_snaps = run_ensemble(k, contrast, p, cps, cfg.replicas, cfg.seed, dt=cfg.grid.dt, label="contrast")["all"]
    for snap in c_snaps[1:]:
        report.add_values(snap.t, "cantor scaled M", snap.scaled("M"))
    for snap in l_snaps[1:]:
        report.add_values(snap.t, "contrast scaled M", snap.scaled("M"))
    diag = degeneracy_diagnostic(c_snaps, l_snaps, sched, p.envelope, times=(cps[0], cps[-1]))
    report.summary["degeneracy"] = diag
    c0, c1 = diag["cantor"][0]["median_scaled_M"], diag["cantor"][-1]["median_scaled_M"]
    l0, l1 = diag["contrast"][0]["median_scaled_M"], diag["contrast"][-1]["median_scaled_M"]
    report.check(f"Cantor median t={cps[-1]:g} <= 0.5x t={cps[0]:g}", c1 <= 0.5 * c0, c1, 0.5 * c0)
    report.check(f"contrast median t={cps[-1]:g} within [0.5, 2]x t={cps[0]:g}", 0.5 * l0 <= l1 <= 2 * l0, l1, l0)
    # expectation-level bound q Q_{q,t}[B_s >= theta(s)/2 for s <= t]
    half = dataclasses.replace(sched, scale=0.5 * sched.scale)
    bound = bm.conditioned_envelope_survival(
        p.q, half, 0.0, cps, bm.PathConfig(dt=0.01, n=20_000, seed=cfg.seed)
    )
    report.summary["expectation_bound"] = [{"t": t, "value": p.q * e.value, "se": p.q * e.se} for t, e in bound.items()]
    return c_snaps, l_snaps


def capacity(cfg: RunConfig, report: Report):
    """Atomized Cantor capacity inside the level bracket; convergence; DE classes."""
    mu = _measure(cfg.measure)
    if mu.scheme != "cantor":
        raise ConfigError([("measure.scheme", "the capacity experiment needs a Cantor measure")])
    sched, level = envelope_from_spec(mu.meta["schedule"]), mu.meta["level"]
    alpha = cfg.alpha
    rho = dataclasses.replace(sched, scale=alpha * sched.scale)
    cap = capacity_integral(mu, rho)
    br = cantor_capacity_bounds(sched, alpha)
    lo, hi = br.partial(level)
    for name, v in (("capacity", cap), ("bracket lower", lo), ("bracket upper", hi)):
        report.add_aggregate(level, name, v)
    report.check(f"atomized capacity inside bracket (level {level})", lo <= cap <= hi, cap, detail=f"[{lo:.6g}, {hi:.6g}]")
    report.check(f"bracket converges at alpha={alpha:g}", br.converged, br.upper)
    report.summary["bracket"] = {"lower": br.lower, "upper": br.upper, "in_family": br.in_family}
    _de_examples(report)


def _de_examples(report):
    cases = [
        ("u^0.1", PowerEnvelope(0.1), True),
        ("u^0.3", PowerEnvelope(0.3), True),
        ("u^0.45", PowerEnvelope(0.45), True),
        ("u^0.5", PowerEnvelope(0.5), False),
        ("sqrt-log zeta=1.5", SqrtLogEnvelope(1.5), True),
        ("sqrt-log zeta=2", SqrtLogEnvelope(2.0), True),
        ("sqrt-log zeta=0.5", SqrtLogEnvelope(0.5), False),
    ]
    for name, env, expect in cases:
        res = dvoretzky_erdos_test(env)
        report.check(f"DE {name} {'converges' if expect else 'diverges'}", res.converges == expect, res.integral)


def envelope_tests(cfg: RunConfig, report: Report):
    """Classification examples, the configured envelope and the shifted-gap limit."""
    _de_examples(report)
    res = dvoretzky_erdos_test(cfg.rho)
    report.summary["configured_envelope"] = {"spec": cfg.envelope, "converges": res.converges, "integral": res.integral, "method": res.method}
    for r in (0.0, 10.0, 1e3, 1e6):
        report.add_aggregate(r, "shifted gap at u=1", float(shifted_gap(cfg.rho, r, 1.0)))
    gaps = [float(shifted_gap(PowerEnvelope(0.3), r, 1.0)) for r in (1.0, 1e3, 1e6, 1e9)]
    report.check("shifted gap decreases to 0 (u^0.3)", all(b < a for a, b in zip(gaps, gaps[1:])) and gaps[-1] < 1e-6, gaps[-1])


REGISTRY = {
    "covariance-validation": covariance_validation,
    "brownian-closed-forms": brownian_closed_forms,
    "martingale-identities": martingale_identities,
    "convergence": convergence,
    "mollified-convergence": mollified_convergence,
    "degeneracy": degeneracy,
    "capacity": capacity,
    "envelope-tests": envelope_tests,
}
assert tuple(REGISTRY) == EXPERIMENTS


def get_experiment(name):
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigError([("experiment", f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENTS)}")]) from None
