"""Brownian and 3-Bessel functionals: closed forms and Monte Carlo estimators.

Closed forms
------------
``stay_positive_prob(a, t)``
    ``P_a[B_s >= 0 for s <= t] = sqrt(2/(pi t)) int_0^a exp(-z^2/(2t)) dz``.
``bridge_positive_prob(a, b, t)``
    Probability that a Brownian bridge from ``a`` to ``b`` over ``[0, t]``
    stays positive, ``1 - exp(-2ab/t)``.
``below_line_prob(a, b)``
    ``P_0[B_s < a s + b for all s >= 0] = 1 - exp(-2ab)``.

Monte Carlo
-----------
Brownian estimators decide positivity between grid points exactly, using the
bridge crossing probability ``exp(-2xy/dt)`` for consecutive values ``x, y``;
their only bias is the finite horizon of ``below_line``.  The 3-Bessel
process is sampled as the norm of a three-dimensional Brownian motion, and
envelope barriers are checked at grid times only.

Replicas are generated in fixed blocks; block ``j`` draws from the stream
``(seed, j, label)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from . import _rng
from .envelope import EnvelopeFn, dvoretzky_erdos_test, shifted_gap
from .errors import DomainError, ResourceError, ValidationError

__all__ = [
    "PathConfig",
    "Estimate",
    "stay_positive_prob",
    "bridge_positive_prob",
    "below_line_prob",
    "time_grid",
    "mc_stay_positive",
    "mc_bridge_positive",
    "mc_below_line",
    "mc_doob_mckean",
    "sample_bessel3",
    "sample_conditioned_positive",
    "envelope_survival_prob",
    "envelope_functional",
    "conditioned_envelope_survival",
    "eta_constant",
]

BLOCK = 10_000
PATH_CAP = 20_000_000


@dataclass(frozen=True)
class PathConfig:
    """Monte Carlo settings.

    ``T`` horizon, ``dt`` base step, ``n`` replicas, ``seed`` master seed.
    ``growth`` makes steps ``max(dt, growth * s)`` so long horizons stay
    affordable; ``growth = 0`` gives a uniform grid.
    """

    T: float = 1e4
    dt: float = 1e-3
    n: int = 100_000
    seed: int = 0
    growth: float = 0.0

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0 and self.n >= 1 and self.growth >= 0):
            raise ValidationError("PathConfig needs T > 0, dt > 0, n >= 1, growth >= 0")


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with its standard error."""

    value: float
    se: float
    n: int
    note: str = ""

    def agrees(self, other, k=3.0):
        """``|self - other| <= k`` combined standard errors (``other`` may be a float)."""
        if isinstance(other, Estimate):
            return abs(self.value - other.value) <= k * math.hypot(self.se, other.se)
        return abs(self.value - other) <= k * self.se

    def z(self, other):
        if isinstance(other, Estimate):
            s = math.hypot(self.se, other.se)
            return (self.value - other.value) / s if s > 0 else 0.0
        return (self.value - other) / self.se if self.se > 0 else 0.0


def _mean_estimate(samples, note=""):
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return Estimate(float(samples.mean()), se, n, note)


# ---------------------------------------------------------------------------
# closed forms


def stay_positive_prob(a, t):
    """``P_a[B_s >= 0, s <= t]``; equals ``erf(a / sqrt(2t))``."""
    a = np.asarray(a, dtype=float)
    if np.any(np.asarray(t) <= 0):
        raise DomainError("t must be positive")
    if np.any(a < 0):
        raise DomainError("a must be nonnegative")
    out = special.erf(a / np.sqrt(2.0 * np.asarray(t, dtype=float)))
    return float(out) if np.ndim(out) == 0 else out


def bridge_positive_prob(a, b, t):
    """``1 - exp(-2ab/t)`` for a bridge from ``a`` to ``b`` over ``[0, t]``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.any(np.asarray(t) <= 0):
        raise DomainError("t must be positive")
    if np.any(a * b < 0):
        raise DomainError("need ab >= 0")
    out = -np.expm1(-2.0 * a * b / np.asarray(t, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def below_line_prob(a, b):
    """``P_0[B_s < a s + b for all s >= 0] = 1 - exp(-2ab)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("need a > 0 and b > 0")
    out = -np.expm1(-2.0 * a * b)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# grids and blocks


def time_grid(T, dt, growth=0.0, include=()) -> np.ndarray:
    """Times ``0 = s_0 < ... = T`` with steps ``max(dt, growth * s)``.

    Extra times in ``include`` are merged in.
    """
    if growth <= 0:
        n = int(math.ceil(T / dt - 1e-9))
        grid = np.linspace(0.0, n * dt, n + 1)
        grid[-1] = T
        grid = grid[grid <= T]
    else:
        pts = [0.0]
        s = 0.0
        while s < T:
            s = min(T, s + max(dt, growth * s))
            pts.append(s)
        grid = np.asarray(pts)
    if include:
        grid = np.union1d(grid, [x for x in include if 0 <= x <= T])
    return grid


def _blocks(n):
    for j, lo in enumerate(range(0, n, BLOCK)):
        yield j, min(BLOCK, n - lo)


def _bridge_survives(x, y, dt, u):
    # exact continuous-monitoring check for a Brownian segment between x and y
    with np.errstate(over="ignore"):
        cross = np.exp(-2.0 * np.maximum(x, 0.0) * np.maximum(y, 0.0) / dt)
    return (x > 0) & (y > 0) & (u >= cross)


# ---------------------------------------------------------------------------
# Brownian estimators


def _killed_bm(a, times, gen, size):
    """Simulate ``size`` BMs from ``a``; return final values and survival flags."""
    x = np.full(size, float(a))
    alive = np.full(size, a > 0)
    for s0, s1 in zip(times[:-1], times[1:]):
        dt = s1 - s0
        y = x + math.sqrt(dt) * gen.standard_normal(size)
        alive &= _bridge_survives(x, y, dt, gen.random(size))
        x = y
    return x, alive


def mc_stay_positive(a, t, cfg: PathConfig) -> Estimate:
    """Path estimate of ``P_a[B_s >= 0, s <= t]``."""
    times = time_grid(t, cfg.dt)
    hits = []
    for j, size in _blocks(cfg.n):
        gen = _rng.stream(cfg.seed, j, "bm-positive")
        _, alive = _killed_bm(a, times, gen, size)
        hits.append(alive)
    return _mean_estimate(np.concatenate(hits))


def mc_bridge_positive(a, b, t, cfg: PathConfig) -> Estimate:
    """Path estimate of the bridge positivity probability."""
    times = time_grid(t, cfg.dt)
    hits = []
    for j, size in _blocks(cfg.n):
        gen = _rng.stream(cfg.seed, j, "bridge-positive")
        x = np.full(size, float(a))
        alive = np.full(size, a > 0)
        for s0, s1 in zip(times[:-1], times[1:]):
            rem = t - s0
            dt = s1 - s0
            if s1 >= t:
                y = np.full(size, float(b))
            else:
                mean = x + dt / rem * (b - x)
                y = mean + math.sqrt(dt * (rem - dt) / rem) * gen.standard_normal(size)
            alive &= _bridge_survives(x, y, dt, gen.random(size))
            x = y
        hits.append(alive)
    return _mean_estimate(np.concatenate(hits))


def mc_below_line(a, b, cfg: PathConfig, horizon=30.0) -> Estimate:
    """Path estimate of ``P_0[B_s < a s + b for all s]`` truncated at ``horizon``.

    The gap ``Y = a s + b - B`` is a drifted Brownian motion from ``b``; the
    omitted probability of a later crossing is ``E[exp(-2a Y_T); survival]``,
    reported in ``note``.
    """
    times = time_grid(horizon, cfg.dt, growth=max(cfg.growth, 0.01))
    hits, tail = [], []
    for j, size in _blocks(cfg.n):
        gen = _rng.stream(cfg.seed, j, "below-line")
        y = np.full(size, float(b))
        alive = np.full(size, True)
        for s0, s1 in zip(times[:-1], times[1:]):
            dt = s1 - s0
            y1 = y + a * dt + math.sqrt(dt) * gen.standard_normal(size)
            alive &= _bridge_survives(y, y1, dt, gen.random(size))
            y = y1
        hits.append(alive)
        tail.append(np.where(alive, np.exp(-2.0 * a * np.maximum(y, 0.0)), 0.0))
    est = _mean_estimate(np.concatenate(hits))
    omitted = float(np.concatenate(tail).mean())
    return Estimate(est.value, est.se, est.n, f"horizon {horizon}; omitted crossing probability ~ {omitted:.2e}")


def _bessel_steps(a, times, gen, size):
    """Yield ``(time, beta)`` along ``times`` for ``size`` 3-Bessel paths from ``a``."""
    pos = np.zeros((size, 3))
    pos[:, 0] = a
    yield times[0], np.full(size, float(a))
    for s0, s1 in zip(times[:-1], times[1:]):
        pos += math.sqrt(s1 - s0) * gen.standard_normal((size, 3))
        yield s1, np.sqrt(np.einsum("ij,ij->i", pos, pos))


def mc_doob_mckean(a, t, level, cfg: PathConfig):
    """Two estimators of ``Q_a[beta_t <= level]``.

    Returns ``(weighted, direct)``: the weighted Brownian estimator
    ``E_a[(B_t / a) 1{B_t <= level} 1{B >= 0 on [0, t]}]`` and the direct
    3-Bessel frequency.  They agree by the Doob-McKean identity.
    """
    if a <= 0 or t <= 0:
        raise DomainError("need a > 0 and t > 0")
    times = time_grid(t, cfg.dt)
    w_samples, d_samples = [], []
    for j, size in _blocks(cfg.n):
        gen = _rng.stream(cfg.seed, j, "doob-mckean-bm")
        x, alive = _killed_bm(a, times, gen, size)
        w_samples.append(np.where(alive & (x <= level), x / a, 0.0))
        gen = _rng.stream(cfg.seed, j, "doob-mckean-bessel")
        beta = None
        for _, beta in _bessel_steps(a, times, gen, size):
            pass
        d_samples.append((beta <= level).astype(float))
    return _mean_estimate(np.concatenate(w_samples)), _mean_estimate(np.concatenate(d_samples))


# ---------------------------------------------------------------------------
# Bessel ensembles


@dataclass
class PathEnsemble:
    times: np.ndarray
    paths: np.ndarray
    weights: np.ndarray
    mode: str


def _check_cap(n, steps):
    if n * (steps + 1) > PATH_CAP:
        raise ResourceError(f"{n} paths x {steps + 1} times exceeds the stored-path cap {PATH_CAP}")


def sample_bessel3(a, cfg: PathConfig) -> PathEnsemble:
    """Stored 3-Bessel paths from ``a`` on the grid of ``cfg``."""
    if a < 0:
        raise DomainError("a must be nonnegative")
    times = time_grid(cfg.T, cfg.dt, cfg.growth)
    _check_cap(cfg.n, times.size - 1)
    out = np.empty((cfg.n, times.size))
    row = 0
    for j, size in _blocks(cfg.n):
        gen = _rng.stream(cfg.seed, j, "bessel3")
        for col, (_, beta) in enumerate(_bessel_steps(a, times, gen, size)):
            out[row:row + size, col] = beta
        row += size
    return PathEnsemble(times, out, np.ones(cfg.n), "bessel")


def sample_conditioned_positive(a, t, cfg: PathConfig, mode="auto", max_tries=50) -> PathEnsemble:
    """Brownian paths from ``a`` conditioned to stay positive on ``[0, t]``.

    ``mode="rejection"`` keeps positive Brownian paths (checked exactly between
    grid points) and is the default when the acceptance probability is at
    least 1e-3; ``mode="weighted"`` returns 3-Bessel paths with weights
    ``a / (beta_t P_a[positive])`` whose mean is one.
    """
    if a <= 0 or t <= 0:
        raise DomainError("need a > 0 and t > 0")
    p = stay_positive_prob(a, t)
    if mode == "auto":
        mode = "rejection" if p >= 1e-3 else "weighted"
    times = time_grid(t, cfg.dt)
    _check_cap(cfg.n, times.size - 1)
    if mode == "weighted":
        ens = sample_bessel3(a, PathConfig(t, cfg.dt, cfg.n, cfg.seed))
        ens.weights = a / (ens.paths[:, -1] * p)
        ens.mode = "weighted"
        return ens
    if mode != "rejection":
        raise ValidationError(f"unknown mode {mode!r}")
    kept = []
    n_kept = 0
    budget = int(max_tries * cfg.n / max(p, 1e-12)) + BLOCK
    tried = 0
    j = 0
    while n_kept < cfg.n:
        if tried >= budget:
            raise ResourceError(f"rejection sampling starved ({n_kept} of {cfg.n} accepted); use mode='weighted'")
        gen = _rng.stream(cfg.seed, j, "conditioned-positive")
        size = BLOCK
        paths = np.empty((size, times.size))
        x = np.full(size, float(a))
        paths[:, 0] = x
        alive = np.ones(size, dtype=bool)
        for col, (s0, s1) in enumerate(zip(times[:-1], times[1:]), start=1):
            dt = s1 - s0
            y = x + math.sqrt(dt) * gen.standard_normal(size)
            alive &= _bridge_survives(x, y, dt, gen.random(size))
            paths[:, col] = y
            x = y
        kept.append(paths[alive])
        n_kept += int(alive.sum())
        tried += size
        j += 1
    out = np.concatenate(kept)[: cfg.n]
    return PathEnsemble(times, out, np.ones(cfg.n), "rejection")


def _barrier_fn(envelope: Optional[EnvelopeFn], r):
    if envelope is None:
        return lambda s: np.zeros_like(np.asarray(s, dtype=float))
    return lambda s: shifted_gap(envelope, r, s)


def _bessel_barrier_run(a, envelope, r, cfg: PathConfig, horizons, label, record_final=()):
    """Kill 3-Bessel paths from ``a`` at the first grid time with ``beta < rho_r``.

    Returns per-horizon survival indicators and, for each time in
    ``record_final``, the value ``beta`` at that time (``nan`` once killed).
    """
    times = time_grid(cfg.T, cfg.dt, cfg.growth, include=tuple(horizons) + tuple(record_final))
    rho = _barrier_fn(envelope, r)(times)
    h_idx = {h: int(np.searchsorted(times, h)) for h in horizons}
    f_idx = {h: int(np.searchsorted(times, h)) for h in record_final}
    surv = {h: [] for h in horizons}
    finals = {h: [] for h in record_final}
    for j, size in _blocks(cfg.n):
        gen = _rng.stream(cfg.seed, j, label)
        pos = np.zeros((size, 3))
        pos[:, 0] = a
        alive_idx = np.arange(size)
        alive_flag = np.ones(size, dtype=bool) if a >= rho[0] else np.zeros(size, dtype=bool)
        flags = {h: np.zeros(size, dtype=bool) for h in horizons}
        vals = {h: np.full(size, np.nan) for h in record_final}
        if not alive_flag.all():
            alive_idx = alive_idx[:0]
            pos = pos[:0]
        for col in range(1, times.size):
            if alive_idx.size:
                pos += math.sqrt(times[col] - times[col - 1]) * gen.standard_normal((alive_idx.size, 3))
                beta = np.sqrt(np.einsum("ij,ij->i", pos, pos))
                ok = beta >= rho[col]
                if not ok.all():
                    pos, alive_idx, beta = pos[ok], alive_idx[ok], beta[ok]
                for h, i in f_idx.items():
                    if i == col:
                        vals[h][alive_idx] = beta
            for h, i in h_idx.items():
                if i == col:
                    flags[h][alive_idx] = True
        for h in horizons:
            if h_idx[h] == 0:
                flags[h][:] = a >= rho[0]
            surv[h].append(flags[h])
        for h in record_final:
            finals[h].append(vals[h])
    return (
        {h: np.concatenate(v) for h, v in surv.items()},
        {h: np.concatenate(v) for h, v in finals.items()},
    )


def envelope_survival_prob(a, envelope: Optional[EnvelopeFn], r, cfg: PathConfig) -> Estimate:
    """``Q_a[beta_s >= rho_r(s) for grid times s <= T]`` for a 3-Bessel process.

    The horizon caveat reports ``int_T^inf rho(u) u^{-3/2} du``.
    """
    if a <= 0:
        raise DomainError("start must be positive")
    if envelope is None or getattr(envelope, "scale", 1.0) == 0.0:
        return Estimate(1.0, 0.0, cfg.n, "zero envelope: survival is certain")
    surv, _ = _bessel_barrier_run(a, envelope, r, cfg, (cfg.T,), "bessel-envelope")
    est = _mean_estimate(surv[cfg.T].astype(float))
    tail = _de_tail(envelope, r, cfg.T)
    return Estimate(est.value, est.se, est.n, f"horizon T={cfg.T:g}; envelope tail integral beyond T ~ {tail:.3g}")


def _de_tail(envelope, r, T):
    from scipy import integrate

    f = lambda v: float(shifted_gap(envelope, r, math.exp(v))) * math.exp(-0.5 * v)  # noqa: E731
    try:
        val, _ = integrate.quad(f, math.log(T), math.log(T) + 60.0, limit=200)
    except OverflowError:
        val = math.inf
    return val


def envelope_functional(q, envelope: Optional[EnvelopeFn], r, t, cfg: PathConfig) -> Estimate:
    """``q Q_q[(1 - rho_r(t)/beta_t) 1{beta_s >= rho_r(s), s <= t}]``.

    By the Doob-McKean identity this equals
    ``E_q[(B_t - rho_r(t)) 1{B_s >= rho_r(s), s <= t}]``, the mean of the
    ``(q, r)``-truncated derivative martingale per unit mass at scale ``t``.
    Barriers are checked on the grid ``time_grid(t, cfg.dt)``.
    """
    if q <= 0 or t <= 0:
        raise DomainError("need q > 0 and t > 0")
    sub = PathConfig(t, cfg.dt, cfg.n, cfg.seed, 0.0)
    _, finals = _bessel_barrier_run(q, envelope, r, sub, (), "bessel-functional", record_final=(t,))
    beta = finals[t]
    rho_t = float(_barrier_fn(envelope, r)(np.asarray(t)))
    vals = np.where(np.isnan(beta), 0.0, q * (1.0 - rho_t / np.where(np.isnan(beta), 1.0, beta)))
    return _mean_estimate(vals, f"grid step {cfg.dt:g}")


def conditioned_envelope_survival(a, envelope, r, horizons, cfg: PathConfig) -> dict:
    """``Q_{a,t}[B_s >= rho_r(s), s <= t]`` for each horizon ``t``.

    Uses 3-Bessel paths reweighted by ``a / (beta_t P_a[positive on [0, t]])``.
    """
    horizons = tuple(sorted(horizons))
    cfg_run = PathConfig(max(horizons), cfg.dt, cfg.n, cfg.seed, cfg.growth)
    surv, finals = _bessel_barrier_run(a, envelope, r, cfg_run, horizons, "conditioned-envelope", record_final=horizons)
    out = {}
    for h in horizons:
        beta = finals[h]
        p = stay_positive_prob(a, h)
        w = np.where(surv[h], a / (np.where(np.isnan(beta), 1.0, beta) * p), 0.0)
        out[h] = _mean_estimate(w)
    return out


def eta_constant(q, envelope: Optional[EnvelopeFn], r, cfg: PathConfig) -> Estimate:
    """``eta(q, r) = q Q_q[beta_t >= rho_r(t) for all t]`` (horizon ``cfg.T``)."""
    if q <= 0:
        raise DomainError("q must be positive")
    if envelope is None or getattr(envelope, "scale", 1.0) == 0.0:
        return Estimate(float(q), 0.0, cfg.n, "zero envelope")
    if not dvoretzky_erdos_test(envelope).converges:
        raise ValidationError("envelope fails the Dvoretzky-Erdos test: eta(q, r) vanishes")
    est = envelope_survival_prob(q, envelope, r, cfg)
    return Estimate(q * est.value, q * est.se, est.n, est.note)
