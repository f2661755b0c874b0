"""Critical chaos statistics along sampled fields.

With a zero base covariance ``K_t(x) = t`` and ``X_t = Xbar_t``.  Writing
``c = sqrt(2d)`` and ``W_t(x) = exp(c Xbar_t(x) - d t)``, the statistics of a
set ``E`` at scale ``t`` are

=========  ==========================================================
``M``      ``sum_E w W``
``D``      ``sum_E w (c t - Xbar) W``
``Mq``     ``sum_E w W 1{A^(q)}``
``Mqr``    ``sum_E w W 1{A^(q,r)}``
``Dq``     ``sum_E w (c t + q - Xbar) W 1{A^(q)}``
``Dqr``    ``sum_E w (c t + q - rho_r(t) - Xbar) W 1{A^(q,r)}``
=========  ==========================================================

where ``A^(q)`` is the event ``Xbar_s < c s + q`` for every sub-step
``s <= t`` and ``A^(q,r)`` additionally subtracts ``rho_r(s)`` from the
barrier.  Both are read off the running maxima kept by the field sampler.
``S`` is the sup-field statistic ``max_E (Xbar_t - c t)``.

M-type statistics are reported unscaled; ``GmcSnapshot.scaled`` multiplies
them by ``sqrt(pi t / 2)`` (``sqrt(pi log(1/eps) / 2)`` for mollified ones).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .envelope import EnvelopeFn, PowerEnvelope, dvoretzky_erdos_test, shifted_gap
from .errors import UsageError, ValidationError
from .field import (
    Barrier,
    FieldPath,
    IncrementFactorizer,
    ScaleGrid,
    sample_joint_mollified,
    sample_mollified_field,
    simulate_ensemble,
)
from .kernel import Mollifier, StarScaleKernel, eval_mollified_cov
from .measures import ReferenceMeasure

__all__ = [
    "STATISTICS",
    "TruncationParams",
    "GmcSnapshot",
    "statistics_from_state",
    "snapshot_statistics",
    "run_ensemble",
    "mollified_statistics",
    "MomentRow",
    "ensemble_moments",
    "convergence_diagnostic",
    "degeneracy_diagnostic",
    "cantor_scale_times",
]

STATISTICS = ("M", "D", "Mq", "Mqr", "Dq", "Dqr")
M_TYPE = ("M", "Mq", "Mqr")


@dataclass(frozen=True)
class TruncationParams:
    """Barrier height ``q``, envelope shift ``r`` and envelope ``rho``."""

    q: float = 3.0
    r: float = 3.0
    envelope: EnvelopeFn = field(default_factory=lambda: PowerEnvelope(0.3))

    def __post_init__(self):
        if not (self.q >= 0 and self.r >= 0):
            raise ValidationError("truncation needs q >= 0 and r >= 0")

    @property
    def barrier(self) -> Barrier:
        return Barrier(self.envelope, self.r, label="qr")

    def rho_r(self, t):
        return float(shifted_gap(self.envelope, self.r, t))


@dataclass
class GmcSnapshot:
    """Statistics at one checkpoint; ``values[name]`` has one entry per replica."""

    t: float
    values: dict
    scale: float
    mollified: bool = False
    per_atom: Optional[dict] = None

    def scaled(self, name):
        v = self.values[name]
        return v * self.scale if name in M_TYPE else v

    @property
    def n_replicas(self):
        return next(iter(self.values.values())).shape[0]


def _mask(mu_weights, E):
    w = np.asarray(mu_weights, dtype=float)
    if E is None:
        return w
    E = np.asarray(E)
    if E.dtype == bool:
        if E.shape != w.shape:
            raise ValidationError("atom mask must match the number of atoms")
        return np.where(E, w, 0.0)
    out = np.zeros_like(w)
    out[E] = w[E]
    return out


def statistics_from_state(x, max_plain, max_qr, weights, t, d, p: TruncationParams, keep_atoms=False):
    """Six statistics and ``S`` from field values and running maxima.

    ``x``, ``max_plain`` and ``max_qr`` are ``(replicas, atoms)`` arrays;
    ``weights`` already encodes the set ``E`` (zero outside it).
    """
    c = math.sqrt(2 * d)
    w = np.asarray(weights, dtype=float)
    live = w > 0
    x = np.asarray(x)[:, live]
    w = w[live]
    n = x.shape[0]
    if w.size == 0:
        zero = np.zeros(n)
        vals = {name: zero.copy() for name in STATISTICS}
        vals["S"] = np.full(n, -np.inf)
        return vals, None
    W = np.exp(c * x - d * t)
    gap = c * t - x
    a_q = (np.asarray(max_plain)[:, live] < p.q).astype(float)
    a_qr = (np.asarray(max_qr)[:, live] < p.q).astype(float)
    ww = W * w
    vals = {
        "M": ww.sum(axis=1),
        "D": (gap * ww).sum(axis=1),
        "Mq": (ww * a_q).sum(axis=1),
        "Mqr": (ww * a_qr).sum(axis=1),
    }
    # written as D on the event plus q M so that, with no triggered atom, the
    # sum reproduces D + q M term by term
    vals["Dq"] = (gap * ww * a_q).sum(axis=1) + p.q * vals["Mq"]
    vals["Dqr"] = (gap * ww * a_qr).sum(axis=1) + (p.q - p.rho_r(t)) * vals["Mqr"]
    vals["S"] = (x - c * t).max(axis=1)
    atoms = None
    if keep_atoms:
        atoms = {"W": W, "A_q": a_q.astype(bool), "A_qr": a_qr.astype(bool)}
    return vals, atoms


def snapshot_statistics(path: FieldPath, mu: ReferenceMeasure, p: TruncationParams, t, E=None, keep_atoms=False):
    """Statistics of one stored path at checkpoint ``t``.

    ``path`` must carry the barrier ``p.barrier`` (same envelope and ``r``).
    """
    if path.values.shape[1] != mu.n_atoms:
        raise ValidationError("path sites do not match the measure atoms")
    x = path.at(t)[None, :]
    plain = path.maxima_at(t)[None, :]
    key = p.barrier.key
    if key not in {b.key for b in path.barriers}:
        raise UsageError("path was sampled without the (q, r) barrier")
    bqr = {b.key: b for b in path.barriers}[key]
    if bqr.envelope != p.envelope or bqr.r != p.r:
        raise UsageError("path barrier does not match the truncation parameters")
    mqr = path.maxima_at(t, key)[None, :]
    vals, atoms = statistics_from_state(x, plain, mqr, _mask(mu.weights, E), t, path.d, p, keep_atoms)
    return GmcSnapshot(float(t), vals, math.sqrt(math.pi * t / 2.0), per_atom=atoms)


def run_ensemble(
    k: StarScaleKernel,
    mu: ReferenceMeasure,
    p: TruncationParams,
    checkpoints,
    n_replicas,
    seed,
    dt=0.05,
    subsets=None,
    batch=None,
    label="field",
    progress=None,
):
    """Sample the field on the atoms of ``mu`` and return snapshots per checkpoint.

    ``subsets`` maps names to atom masks (default ``{"all": None}``); the
    result is ``{name: [GmcSnapshot, ...]}`` in checkpoint order, ``t = 0``
    included.  Replicas are processed in batches of ``batch`` (default all)
    with unchanged streams, so the result does not depend on the batch size.
    """
    if mu.d != k.d:
        raise ValidationError("measure and kernel dimensions differ")
    subsets = subsets or {"all": None}
    grid = ScaleGrid(checkpoints, dt)
    masks = {name: _mask(mu.weights, E) for name, E in subsets.items()}
    fac = IncrementFactorizer(k, mu.points)
    batch = batch or n_replicas
    chunks = {name: {float(t): [] for t in grid.checkpoints} for name in masks}
    for lo in range(0, n_replicas, batch):
        size = min(batch, n_replicas - lo)

        def on_checkpoint(t, x, runmax):
            for name, w in masks.items():
                vals, _ = statistics_from_state(x, runmax["plain"], runmax["qr"], w, t, k.d, p)
                chunks[name][float(t)].append(vals)

        simulate_ensemble(
            k, grid, mu.points, size, seed, barriers=[p.barrier], on_checkpoint=on_checkpoint,
            store=False, replica_offset=lo, label=label, factorizer=fac,
        )
        if progress is not None:
            progress(lo + size, n_replicas)
    out = {}
    for name in masks:
        snaps = []
        for t, parts in chunks[name].items():
            vals = {s: np.concatenate([v[s] for v in parts]) for s in parts[0]}
            snaps.append(GmcSnapshot(t, vals, math.sqrt(math.pi * t / 2.0)))
        out[name] = snaps
    return out


def mollified_statistics(
    k: StarScaleKernel,
    m: Mollifier,
    mu: ReferenceMeasure,
    n_replicas,
    seed,
    p: Optional[TruncationParams] = None,
    E=None,
    joint=False,
    dt=0.05,
    label=None,
):
    """``M_eps`` (and, with ``joint=True``, the truncated companions).

    The untruncated ``M_eps = sum_E w exp(sqrt(2d) X_eps - d K_eps(x, x))``
    only needs the marginal law of ``X_eps``.  With ``joint=True`` the field is
    drawn together with the scale path up to ``t_eps = log(1/eps)`` and
    ``Mq``/``Mqr`` gate ``exp(sqrt(2d) X_eps - d K_eps)`` on that path's
    events, while ``D``, ``Dq`` and ``Dqr`` are the scale-path statistics at
    ``t_eps``.  ``label`` names the random stream (defaults to the sampler's).
    """
    if mu.d != 1 or k.d != 1:
        raise ValidationError("mollified statistics are available for d = 1")
    w = _mask(mu.weights, E)
    scale = math.sqrt(math.pi * m.t_eps / 2.0)
    kdiag = float(eval_mollified_cov(k, m, 0.0, kind="full"))
    if not joint:
        x = sample_mollified_field(k, m, mu.points, n_replicas, seed, label=label or "mollified")
        wx = np.exp(math.sqrt(2.0) * x - kdiag) * w
        return GmcSnapshot(m.t_eps, {"M": wx.sum(axis=1)}, scale, mollified=True)
    p = p or TruncationParams()
    rec = sample_joint_mollified(k, m, mu.points, n_replicas, seed, barriers=[p.barrier], dt=dt, label=label or "joint")
    if rec.t_eps < m.t_eps - 1e-12:
        raise UsageError("joint path stops before t_eps")
    vals, _ = statistics_from_state(rec.kbar_values, rec.maxima["plain"], rec.maxima["qr"], w, rec.t_eps, 1, p)
    we = np.exp(math.sqrt(2.0) * rec.mollified - kdiag) * w
    a_q = rec.maxima["plain"] < p.q
    a_qr = rec.maxima["qr"] < p.q
    out = {
        "M": we.sum(axis=1),
        "Mq": (we * a_q).sum(axis=1),
        "Mqr": (we * a_qr).sum(axis=1),
        "D": vals["D"],
        "Dq": vals["Dq"],
        "Dqr": vals["Dqr"],
    }
    return GmcSnapshot(rec.t_eps, out, scale, mollified=True)


# ---------------------------------------------------------------------------
# ensemble summaries


@dataclass
class MomentRow:
    statistic: str
    t: float
    n: int
    mean: float
    mean_se: float
    var: float
    var_se: float

    def ci(self, k=3.0):
        return self.mean - k * self.mean_se, self.mean + k * self.mean_se


def _jackknife_var(v):
    n = v.size
    s1, s2 = v.sum(), (v * v).sum()
    full = (s2 - s1 * s1 / n) / (n - 1)
    s1_i, s2_i = s1 - v, s2 - v * v
    loo = (s2_i - s1_i * s1_i / (n - 1)) / (n - 2)
    se = math.sqrt((n - 1) / n * float(np.sum((loo - loo.mean()) ** 2)))
    return float(full), se


def ensemble_moments(snapshots, statistics=STATISTICS, scaled=False, min_replicas=100):
    """Mean and variance of each statistic per checkpoint with jackknife errors.

    The delete-one jackknife SE of a mean is the sample SD over ``sqrt(N)``.
    """
    rows = []
    for snap in snapshots:
        if snap.n_replicas < min_replicas:
            raise ValidationError(f"need at least {min_replicas} replicas, got {snap.n_replicas}")
        for name in statistics:
            v = snap.scaled(name) if scaled else snap.values[name]
            v = np.asarray(v, dtype=float)
            n = v.size
            var, var_se = _jackknife_var(v)
            rows.append(MomentRow(name, snap.t, n, float(v.mean()), math.sqrt(max(var, 0.0) / n), var, var_se))
    return rows


def _pick(snapshots, times):
    by_t = {round(s.t, 9): s for s in snapshots}
    out = []
    for t in times:
        if round(float(t), 9) not in by_t:
            raise UsageError(f"t={t} is not a checkpoint of the ensemble")
        out.append(by_t[round(float(t), 9)])
    return out


def convergence_diagnostic(snapshots, times=(2.0, 4.0, 8.0, 16.0)):
    """Traces of ``Dqr`` and ``sqrt(pi t/2) Mqr`` and the second-moment shape.

    Per checkpoint: mean absolute difference of the two traces, their
    correlation across replicas, and ``t E[Mqr^2]`` with its SE.
    """
    report = []
    for snap in _pick(snapshots, times):
        d = snap.values["Dqr"]
        sm = snap.scaled("Mqr")
        t = snap.t
        m2 = t * snap.values["Mqr"] ** 2
        if np.std(d) > 0 and np.std(sm) > 0:
            corr = float(np.corrcoef(d, sm)[0, 1])
        else:
            corr = float("nan")
        report.append(
            {
                "t": t,
                "mean_abs_diff": float(np.mean(np.abs(d - sm))),
                "correlation": corr,
                "t_second_moment": float(m2.mean()),
                "t_second_moment_se": float(m2.std(ddof=1) / math.sqrt(m2.size)),
                "median_scaled_M": float(np.median(snap.scaled("M"))),
            }
        )
    return report


def cantor_scale_times(schedule: EnvelopeFn, n_max):
    """Scales ``t_n = n log 2 + theta(n)`` at which the level-``n`` pieces decouple."""
    n = np.arange(n_max + 1, dtype=float)
    return n * math.log(2.0) + np.asarray(schedule(n), dtype=float)


def degeneracy_diagnostic(cantor_snaps, contrast_snaps, schedule: EnvelopeFn, contrast_rho: EnvelopeFn, times=(4.0, 8.0, 16.0), alpha=0.9):
    """Medians and upper quartiles of ``sqrt(pi t/2) M_t`` and ``D_t`` for both measures.

    The Cantor schedule must induce a divergent envelope ``theta / 2`` and the
    contrast envelope must be convergent.  The sup-field statistic
    ``max (Xbar_t - sqrt(2) t) + alpha theta(n) / sqrt(2 log 2)`` is reported at
    every checkpoint equal to a Cantor scale ``t_n``.
    """
    half = _half(schedule)
    if dvoretzky_erdos_test(half).converges:
        raise ValidationError("the Cantor schedule's envelope theta/2 is convergent; no degeneracy expected")
    if not dvoretzky_erdos_test(contrast_rho).converges:
        raise ValidationError("the contrast envelope is divergent")
    out = {}
    for name, snaps in (("cantor", cantor_snaps), ("contrast", contrast_snaps)):
        rows = []
        for snap in _pick(snaps, times):
            sm, dd = snap.scaled("M"), snap.values["D"]
            rows.append(
                {
                    "t": snap.t,
                    "median_scaled_M": float(np.median(sm)),
                    "q75_scaled_M": float(np.quantile(sm, 0.75)),
                    "median_D": float(np.median(dd)),
                    "q75_D": float(np.quantile(dd, 0.75)),
                }
            )
        out[name] = rows
    tn = cantor_scale_times(schedule, 64)
    sup_rows = []
    for snap in cantor_snaps:
        hit = np.nonzero(np.abs(tn - snap.t) < 1e-9)[0]
        if hit.size and "S" in snap.values:
            n = int(hit[0])
            shift = alpha * float(schedule(float(n))) / math.sqrt(2 * math.log(2.0))
            s = snap.values["S"] + shift
            sup_rows.append({"n": n, "t": snap.t, "median": float(np.median(s)), "q90": float(np.quantile(s, 0.9))})
    out["sup_field"] = sup_rows
    return out


def _half(schedule: EnvelopeFn) -> EnvelopeFn:
    if not hasattr(schedule, "scale"):
        raise ValidationError("degeneracy diagnostics need a power or sqrt-log Cantor schedule")
    return dataclasses.replace(schedule, scale=0.5 * schedule.scale)
