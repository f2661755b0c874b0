"""Sampling the scale-martingale field on a finite set of sites.

``Xbar_t(x)`` is a Gaussian process in ``(t, x)`` with covariance
``Kbar_{s ^ t}(x, y)``: each site follows a standard Brownian motion in
``t`` and increments over disjoint scale intervals are independent.  Paths
are therefore built step by step from independent Gaussian increments whose
covariance is ``Kbar_{tb} - Kbar_{ta}``.

The increment covariance vanishes beyond distance ``exp(-ta')``, so each step
splits into connected components.  Every component is factorised with the
cheapest exact-enough method available: a square root for single sites,
pivoted Cholesky when the covariance is numerically low rank, banded
Cholesky for sorted one-dimensional sites, and dense Cholesky otherwise.

Running maxima of ``Xbar_s - sqrt(2d) s`` (plain barrier) and of
``Xbar_s - sqrt(2d) s + rho_r(s)`` (envelope barriers) are updated at every
sub-step, so the events ``A^(q)`` and ``A^(q,r)`` can be decided afterwards
for any ``q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from . import _rng
from .envelope import EnvelopeFn, shifted_gap
from .errors import NumericError, ResourceError, UsageError, ValidationError
from .kernel import Mollifier, StarScaleKernel, eval_mollified_cov

__all__ = [
    "ScaleGrid",
    "Barrier",
    "FieldPath",
    "EnsembleRecord",
    "increment_covariance",
    "IncrementFactorizer",
    "simulate_ensemble",
    "sample_scale_path",
    "sample_mollified_field",
    "sample_joint_mollified",
    "empirical_covariance",
    "as_sites",
]

JITTER_MAX = 1e-8
LOWRANK_TOL = 1e-11
# absolute floor for pivots: tabulated covariances carry ~1e-11 noise, and
# dividing that noise by a smaller pivot would amplify it
PIVOT_FLOOR = 2e-9
MAX_DENSE = 4096
# absolute accuracy of tabulated mollified covariances
MOLLIFIED_ENTRY_ERROR = 1e-8


def as_sites(sites) -> np.ndarray:
    """Return sites as an ``(n, d)`` float array with ``d`` in {1, 2}."""
    arr = np.asarray(sites, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] not in (1, 2) or arr.shape[0] == 0:
        raise ValidationError("sites must be a non-empty (n,) or (n, d) array with d in {1, 2}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("sites must be finite")
    return arr


def _pairwise(a, b):
    if a.shape[1] == 1:
        return np.abs(a[:, 0][:, None] - b[:, 0][None, :])
    return np.hypot(a[:, 0][:, None] - b[:, 0][None, :], a[:, 1][:, None] - b[:, 1][None, :])


class ScaleGrid:
    """Checkpoints ``0 = t_0 < ... < t_m`` refined by sub-steps of size ``dt``.

    The sub-step times are ``{k dt} U {checkpoints}``; checkpoints that are not
    multiples of ``dt`` are inserted rather than rejected.
    """

    def __init__(self, checkpoints, dt=0.05):
        cps = np.asarray(checkpoints, dtype=float).ravel()
        if cps.size == 0 or np.any(cps < 0) or not np.all(np.isfinite(cps)):
            raise ValidationError("checkpoints must be finite nonnegative reals")
        if np.any(np.diff(cps) <= 0):
            raise ValidationError("checkpoints must be strictly increasing")
        if not dt > 0:
            raise ValidationError("dt must be positive")
        if cps[0] != 0.0:
            cps = np.concatenate([[0.0], cps])
        self.dt = float(dt)
        t_max = cps[-1]
        n_sub = int(math.floor(t_max / dt + 1e-9))
        base = np.arange(n_sub + 1) * dt
        times = np.union1d(np.round(base, 12), cps)
        # drop sub-steps that crowd a checkpoint within rounding
        keep = np.ones(times.size, dtype=bool)
        for c in cps:
            close = np.abs(times - c) < 1e-9 * max(1.0, c)
            close[np.searchsorted(times, c)] = False
            keep &= ~close
        self.times = times[keep]
        self.checkpoints = cps
        self.checkpoint_steps = np.searchsorted(self.times, cps)

    @property
    def n_steps(self):
        return self.times.size - 1

    def __repr__(self):
        return f"ScaleGrid(checkpoints={self.checkpoints.tolist()}, dt={self.dt})"


@dataclass(frozen=True)
class Barrier:
    """Envelope barrier ``rho_r`` used by the ``(q, r)`` truncation."""

    envelope: EnvelopeFn
    r: float
    label: str = ""

    def shift(self, t):
        return shifted_gap(self.envelope, self.r, t)

    @property
    def key(self):
        return self.label or f"{self.envelope.kind}:r={self.r:g}"


def increment_covariance(k: StarScaleKernel, t_a, t_b, sites) -> np.ndarray:
    """Dense covariance of ``Xbar_{tb} - Xbar_{ta}`` on ``sites``."""
    if not (0 <= t_a < t_b):
        raise ValidationError("need 0 <= t_a < t_b")
    x = as_sites(sites)
    d = _pairwise(x, x)
    if np.any((d == 0) & ~np.eye(len(x), dtype=bool)):
        raise ValidationError("sites must be pairwise distinct")
    c = k.kbar(t_b, d) - k.kbar(t_a, d)
    np.fill_diagonal(c, t_b - t_a)
    return c


# ---------------------------------------------------------------------------
# factorisation of one increment


@dataclass
class StepFactor:
    """Increment map ``z -> X`` with ``z`` standard normal of length ``rank``.

    ``X = z @ S`` for the sparse part plus, for every dense block
    ``(idx, cols, G)``, ``X[:, idx] += z[:, cols] @ G``.
    """

    n_sites: int
    rank: int
    sparse_part: Optional[sparse.csr_matrix]
    blocks: list = field(default_factory=list)
    methods: dict = field(default_factory=dict)

    def apply(self, z: np.ndarray) -> np.ndarray:
        out = np.zeros((z.shape[0], self.n_sites))
        if self.sparse_part is not None:
            out += np.asarray((self.sparse_part.T @ z.T).T)
        for idx, cols, g in self.blocks:
            out[:, idx] += z[:, cols] @ g
        return out


def _pivoted_cholesky(diag0, column, cap, tol):
    """Low-rank ``F`` with ``F F^T ~ C`` from a column oracle; None if the cap is hit."""
    m = diag0.size
    diag = diag0.copy()
    f = np.empty((m, cap))
    for j in range(cap):
        p = int(np.argmax(diag))
        piv = diag[p]
        if piv <= tol:
            return f[:, :j]
        col = column(p) - f[:, :j] @ f[p, :j]
        f[:, j] = col / math.sqrt(piv)
        diag -= f[:, j] ** 2
    if np.max(diag) <= tol:
        return f
    return None


def _dense_factor(c, context="", neg_tol=JITTER_MAX):
    """Cholesky with a diagonal jitter of at most ``JITTER_MAX``.

    Increment covariances are often numerically rank deficient, so a failed
    factorisation is retried with growing jitter before any eigen check.
    Eigenvalues down to ``-neg_tol`` are then clipped to zero.
    """
    scale = max(1e-300, float(np.max(np.diag(c))))
    jitter = 0.0
    while True:
        try:
            if jitter == 0.0:
                return np.linalg.cholesky(c)
            return np.linalg.cholesky(c + jitter * np.eye(len(c)))
        except np.linalg.LinAlgError:
            if jitter >= JITTER_MAX:
                break
            jitter = min(1e-10 * scale if jitter == 0.0 else jitter * 10.0, JITTER_MAX)
    w, v = np.linalg.eigh(c)
    if w[0] < -neg_tol:
        raise NumericError(f"covariance not PSD{context}: minimum eigenvalue {w[0]:.3e}")
    return v * np.sqrt(np.clip(w, 0.0, None))


def psd_factor(c, context="", tol=LOWRANK_TOL, entry_error=0.0):
    """Factor of a PSD matrix that tolerates exact rank deficiency.

    ``entry_error`` is the absolute accuracy of the entries; eigenvalues down
    to ``-n * entry_error`` (the most that such errors can produce) are
    treated as zero.
    """
    c = np.asarray(c, dtype=float)
    scale = max(1e-300, float(np.max(np.diag(c))))
    neg_tol = max(JITTER_MAX, c.shape[0] * entry_error)
    floor = max(tol * scale, math.sqrt(entry_error) * 1e-4 if entry_error else 0.0)
    f = _pivoted_cholesky(np.diag(c).copy(), lambda p: c[:, p], c.shape[0], floor)
    if f is not None and np.max(np.abs(f @ f.T - c)) <= max(1e-9 * scale, 10 * entry_error):
        return f
    return _dense_factor(c, context, neg_tol)


class IncrementFactorizer:
    """Factorises scale increments on a fixed site set, caching the geometry."""

    def __init__(self, k: StarScaleKernel, sites, lowrank_cap=768, band_direct=48):
        self.k = k
        self.x = as_sites(sites)
        self.n, self.d = self.x.shape
        if self.d != k.d:
            raise ValidationError(f"sites are {self.d}-dimensional but the kernel is {k.d}-dimensional")
        self.lowrank_cap = lowrank_cap
        self.band_direct = band_direct
        if self.d == 1:
            self.order = np.argsort(self.x[:, 0], kind="stable")
            self.sorted_x = self.x[self.order, 0]
            if self.n > 1 and np.any(np.diff(self.sorted_x) == 0):
                raise ValidationError("sites must be pairwise distinct")
        else:
            self.tree = cKDTree(self.x)
            if self.n > 1 and self.tree.query_pairs(0.0, output_type="ndarray").size:
                raise ValidationError("sites must be pairwise distinct")

    def _components(self, support):
        if self.d == 1:
            gaps = np.diff(self.sorted_x) >= support
            starts = np.concatenate([[0], np.nonzero(gaps)[0] + 1, [self.n]])
            return [self.order[a:b] for a, b in zip(starts[:-1], starts[1:])]
        pairs = self.tree.query_pairs(support * (1 - 1e-12), output_type="ndarray")
        if pairs.size == 0:
            return [np.array([i]) for i in range(self.n)]
        g = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(self.n, self.n))
        nc, labels = csgraph.connected_components(g, directed=False)
        order = np.argsort(labels, kind="stable")
        bounds = np.searchsorted(labels[order], np.arange(nc + 1))
        return [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def _cov(self, dist, t_a, t_b):
        c = self.k.kbar(t_b, dist) - self.k.kbar(t_a, dist)
        c[dist == 0] = t_b - t_a
        return c

    def factor(self, t_a, t_b) -> StepFactor:
        delta = t_b - t_a
        support = math.exp(-self.k.tprime(t_a))
        rows, cols, vals = [], [], []
        blocks = []
        methods = {"sqrt": 0, "lowrank": 0, "banded": 0, "dense": 0}
        rank = 0
        comps = self._components(support)
        singles = np.array([c[0] for c in comps if c.size == 1], dtype=np.int64)
        if singles.size:
            rows.append(np.arange(singles.size))
            cols.append(singles)
            vals.append(np.full(singles.size, math.sqrt(delta)))
            rank += singles.size
            methods["sqrt"] = int(singles.size)
        for comp in comps:
            m = comp.size
            if m == 1:
                continue
            xc = self.x[comp]
            ctx = f" (step [{t_a:g}, {t_b:g}], component of {m} sites)"
            g = None
            if self.d == 1:
                comp = comp[np.argsort(xc[:, 0], kind="stable")]
                xc = self.x[comp]
                band = self._bandwidth(xc[:, 0], support)
                # the numerical rank grows like extent / support; pivot only when
                # that estimate beats the band
                predicted = 150.0 * float(np.ptp(xc[:, 0])) / support + 50.0
                if m > 64 and band > self.band_direct and predicted <= min(band, self.lowrank_cap):
                    g = self._lowrank(xc, delta, t_a, t_b, min(m, self.lowrank_cap))
                    if g is not None:
                        methods["lowrank"] += 1
                if g is None:
                    u = self._upper_factor(xc[:, 0], band, t_a, t_b, ctx)
                    methods["banded" if u.shape[0] < m else "dense"] += 1
                    for idx, sl, blk in self._band_blocks(u, m):
                        blocks.append((comp[idx], slice(rank + sl.start, rank + sl.stop), blk))
                    rank += m
                    continue
            else:
                if m > 64:
                    g = self._lowrank(xc, delta, t_a, t_b, min(m, max(self.lowrank_cap, m)))
                    if g is not None:
                        methods["lowrank"] += 1
                if g is None:
                    if m > MAX_DENSE:
                        raise ResourceError(f"component of {m} sites exceeds the dense cap {MAX_DENSE}{ctx}")
                    g = _dense_factor(self._cov(_pairwise(xc, xc), t_a, t_b), ctx).T
                    methods["dense"] += 1
            r = g.shape[0]
            if m * r >= 4096:
                blocks.append((comp, slice(rank, rank + r), np.ascontiguousarray(g)))
            else:
                rr, cc = np.nonzero(g)
                rows.append(rr + rank)
                cols.append(comp[cc])
                vals.append(g[rr, cc])
            rank += r
        s = None
        if rows:
            s = sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(rank, self.n)
            )
        return StepFactor(self.n, rank, s, blocks, methods)

    def _lowrank(self, xc, delta, t_a, t_b, cap):
        def column(p):
            return self._cov(_pairwise(xc, xc[p:p + 1])[:, 0], t_a, t_b)

        f = _pivoted_cholesky(np.full(xc.shape[0], delta), column, cap, max(LOWRANK_TOL * delta, PIVOT_FLOOR))
        return None if f is None else f.T

    @staticmethod
    def _bandwidth(xs, support):
        ahead = np.searchsorted(xs, xs + support * (1 - 1e-12), side="left") - np.arange(xs.size) - 1
        return int(max(ahead.max(), 1))

    def _upper_factor(self, xs, band, t_a, t_b, ctx):
        """Upper factor ``U`` (``C = U^T U``) in LAPACK band storage, or dense when the band is wide."""
        m = xs.size
        band = min(band, m - 1)
        offs = np.arange(band, 0, -1)[:, None]
        cols = np.arange(m)[None, :]
        dist = xs[cols] - xs[np.maximum(cols - offs, 0)]
        ab = np.zeros((band + 1, m))
        ab[:band] = np.where(cols >= offs, self._cov(dist, t_a, t_b), 0.0)
        ab[band] = t_b - t_a
        if band > m // 8:
            full = np.zeros((m, m))
            for k in range(band + 1):
                i = np.arange(m - k)
                full[i, i + k] = ab[band - k, k:]
                full[i + k, i] = ab[band - k, k:]
            return _dense_factor(full, ctx).T
        jitter = 0.0
        while True:
            try:
                ab_j = ab.copy()
                ab_j[band] += jitter
                return linalg.cholesky_banded(ab_j, lower=False)
            except linalg.LinAlgError:
                if jitter >= JITTER_MAX:
                    full = np.zeros((m, m))
                    for k in range(band + 1):
                        i = np.arange(m - k)
                        full[i, i + k] = ab[band - k, k:]
                        full[i + k, i] = ab[band - k, k:]
                    lam = np.linalg.eigvalsh(full)[0]
                    raise NumericError(f"covariance not PSD{ctx}: minimum eigenvalue {lam:.3e}")
                jitter = min(max(jitter * 10.0, 1e-10 * (t_b - t_a)), JITTER_MAX)

    @staticmethod
    def _band_blocks(u, m):
        """Split ``X = z @ U`` into dense column blocks (``u`` banded or square)."""
        if u.shape == (m, m):
            band = m - 1
            get = lambda r0, c0, c1: u[r0:c1, c0:c1]  # noqa: E731
        else:
            band = u.shape[0] - 1

            def get(r0, c0, c1):
                blk = np.zeros((c1 - r0, c1 - c0))
                for k in range(band + 1):
                    # entries U[i, i + k] for columns c0..c1
                    j = np.arange(max(c0, k), c1)
                    i = j - k
                    ok = i >= r0
                    blk[i[ok] - r0, j[ok] - c0] = u[band - k, j[ok]]
                return blk

        width = max(128, band)
        out = []
        for c0 in range(0, m, width):
            c1 = min(m, c0 + width)
            r0 = max(0, c0 - band)
            out.append((np.arange(c0, c1), slice(r0, c1), get(r0, c0, c1)))
        return out


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleRecord:
    """Values and running maxima kept at checkpoints.

    ``values[j]`` has shape ``(replicas, sites)`` and holds ``Xbar`` at
    ``checkpoints[j]``; ``maxima[key][j]`` the matching running maxima, with
    key ``"plain"`` for ``Xbar_s - sqrt(2d) s``.
    """

    checkpoints: np.ndarray
    values: np.ndarray
    maxima: dict
    seed: int
    replicas: np.ndarray

    def at(self, t):
        j = _checkpoint_index(self.checkpoints, t)
        return self.values[j]


def _checkpoint_index(cps, t):
    j = np.nonzero(np.abs(np.asarray(cps) - t) <= 1e-9 * max(1.0, abs(t)))[0]
    if j.size == 0:
        raise UsageError(f"t={t} is not a checkpoint")
    return int(j[0])


def simulate_ensemble(
    k: StarScaleKernel,
    grid: ScaleGrid,
    sites,
    n_replicas: int,
    seed: int,
    barriers=(),
    on_checkpoint: Optional[Callable] = None,
    store: bool = True,
    replica_offset: int = 0,
    label: str = "field",
    factorizer: Optional[IncrementFactorizer] = None,
) -> Optional[EnsembleRecord]:
    """Sample ``n_replicas`` independent paths on ``sites`` along ``grid``.

    Replica ``i`` draws from its own stream ``(seed, replica_offset + i, label)``
    so the output is independent of batching.  ``on_checkpoint(t, values,
    maxima)`` is called at each checkpoint (including ``t = 0``).
    """
    if n_replicas < 1:
        raise ValidationError("need at least one replica")
    fac = factorizer or IncrementFactorizer(k, sites)
    n, d = fac.n, fac.d
    c = math.sqrt(2 * d)
    gens = _rng.streams(seed, range(replica_offset, replica_offset + n_replicas), label)
    x = np.zeros((n_replicas, n))
    keys = ["plain"] + [b.key for b in barriers]
    if len(set(keys)) != len(keys):
        raise ValidationError("barrier keys must be distinct")
    runmax = {key: np.zeros((n_replicas, n)) for key in keys}
    cps = grid.checkpoints
    stored_v, stored_m = [], {key: [] for key in keys}

    def checkpoint(t):
        if on_checkpoint is not None:
            on_checkpoint(t, x, runmax)
        if store:
            stored_v.append(x.copy())
            for key in keys:
                stored_m[key].append(runmax[key].copy())

    checkpoint(0.0)
    cp_steps = set(grid.checkpoint_steps[1:].tolist())
    times = grid.times
    for j in range(grid.n_steps):
        ta, tb = times[j], times[j + 1]
        step = fac.factor(ta, tb)
        z = _rng.normals(gens, step.rank)
        x += step.apply(z)
        drift = x - c * tb
        np.maximum(runmax["plain"], drift, out=runmax["plain"])
        for b in barriers:
            np.maximum(runmax[b.key], drift + b.shift(tb), out=runmax[b.key])
        if j + 1 in cp_steps:
            checkpoint(tb)
    if not store:
        return None
    return EnsembleRecord(
        checkpoints=cps.copy(),
        values=np.stack(stored_v),
        maxima={key: np.stack(v) for key, v in stored_m.items()},
        seed=int(seed),
        replicas=np.arange(replica_offset, replica_offset + n_replicas),
    )


@dataclass
class FieldPath:
    """One sampled path: ``values[j, i] = Xbar_{times[j]}(sites[i])``."""

    sites: np.ndarray
    times: np.ndarray
    checkpoints: np.ndarray
    values: np.ndarray
    barriers: tuple
    d: int
    stream: tuple

    def running_max(self, key="plain"):
        """Running maxima over sub-steps, recomputed from the stored values."""
        drift = self.values - math.sqrt(2 * self.d) * self.times[:, None]
        if key != "plain":
            b = {b.key: b for b in self.barriers}[key]
            drift = drift + b.shift(self.times)[:, None]
        return np.maximum.accumulate(drift, axis=0)

    def at(self, t):
        j = np.nonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, t))[0]
        if j.size == 0 or not np.any(np.abs(self.checkpoints - t) <= 1e-9 * max(1.0, t)):
            raise UsageError(f"t={t} is not a checkpoint")
        return self.values[j[0]]

    def maxima_at(self, t, key="plain"):
        j = np.nonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, t))[0]
        if j.size == 0:
            raise UsageError(f"t={t} is not a checkpoint")
        return self.running_max(key)[j[0]]


def sample_scale_path(k, grid: ScaleGrid, sites, barriers=(), seed=0, replica=0, label="field") -> FieldPath:
    """Sample one replica and keep its values at every sub-step."""
    fac = IncrementFactorizer(k, sites)
    gen = _rng.stream(seed, replica, label)
    vals = np.zeros((grid.times.size, fac.n))
    x = np.zeros((1, fac.n))
    for j in range(grid.n_steps):
        step = fac.factor(grid.times[j], grid.times[j + 1])
        z = gen.standard_normal(step.rank)[None, :]
        x = x + step.apply(z)
        vals[j + 1] = x[0]
    return FieldPath(fac.x, grid.times.copy(), grid.checkpoints.copy(), vals, tuple(barriers), fac.d, (seed, replica, label))


# ---------------------------------------------------------------------------
# mollified field


def _distance_table(x):
    d = _pairwise(x, x)
    uniq, inv = np.unique(d, return_inverse=True)
    return uniq, inv.reshape(d.shape)


def mollified_covariance_matrix(k: StarScaleKernel, m: Mollifier, sites) -> np.ndarray:
    x = as_sites(sites)
    uniq, inv = _distance_table(x)
    return eval_mollified_cov(k, m, uniq, kind="full")[inv]


def sample_mollified_field(k, m: Mollifier, sites, n_replicas=1, seed=0, label="mollified") -> np.ndarray:
    """Replicas of ``X_eps`` on ``sites`` (dense factorisation of ``K_eps``)."""
    x = as_sites(sites)
    if x.shape[0] > MAX_DENSE:
        raise ResourceError(f"{x.shape[0]} sites exceed the dense cap {MAX_DENSE}")
    c = mollified_covariance_matrix(k, m, x)
    f = psd_factor(c, " (mollified covariance)", entry_error=MOLLIFIED_ENTRY_ERROR)
    gens = _rng.streams(seed, range(n_replicas), label + f":{m.profile}:{m.eps:.17g}")
    z = _rng.normals(gens, f.shape[1])
    return z @ f.T


@dataclass
class JointMollifiedRecord:
    """Companion scale path up to ``t_eps`` and the mollified field ``X_eps``."""

    t_eps: float
    kbar_values: np.ndarray  # (replicas, sites) Xbar_{t_eps}
    maxima: dict
    mollified: np.ndarray  # (replicas, sites) X_eps
    k_eps_diag: float


def sample_joint_mollified(
    k: StarScaleKernel,
    m: Mollifier,
    sites,
    n_replicas: int,
    seed: int,
    barriers=(),
    dt=0.05,
    label="joint",
) -> JointMollifiedRecord:
    """Sample ``(Xbar_s)_{s <= t_eps}`` jointly with ``X_eps`` (d = 1).

    Each scale step draws ``(dXbar(x_i), theta_eps * dXbar(x_i))`` together,
    whose cross-covariance is the increment of ``Kbar_{t,eps,0}``; the part of
    ``X_eps`` coming from scales beyond ``t_eps`` is added at the end with
    covariance ``K_eps - K_{t_eps,eps}``.
    """
    x = as_sites(sites)
    if k.d != 1:
        raise ValidationError("joint mollified sampling is implemented for d = 1 only")
    n = x.shape[0]
    if 2 * n > MAX_DENSE:
        raise ResourceError(f"{n} sites exceed the joint dense cap {MAX_DENSE // 2}")
    t_eps = m.t_eps
    grid = ScaleGrid([t_eps], dt)
    uniq, inv = _distance_table(x)
    c = math.sqrt(2.0)
    gens = _rng.streams(seed, range(n_replicas), label + f":{m.profile}:{m.eps:.17g}")
    xb = np.zeros((n_replicas, n))
    xm = np.zeros((n_replicas, n))
    keys = ["plain"] + [b.key for b in barriers]
    runmax = {key: np.zeros((n_replicas, n)) for key in keys}

    def blocks(t):
        if t == 0.0:
            z = np.zeros(uniq.size)
            return z, z, z
        kb = k.kbar(t, uniq)
        cross = eval_mollified_cov(k, m, uniq, t=t, kind="cross")
        mm = eval_mollified_cov(k, m, uniq, t=t, kind="scale")
        return kb, cross, mm

    prev = blocks(0.0)
    for j in range(grid.n_steps):
        ta, tb = grid.times[j], grid.times[j + 1]
        cur = blocks(tb)
        dkb, dcr, dmm = (cur[i] - prev[i] for i in range(3))
        prev = cur
        cov = np.empty((2 * n, 2 * n))
        cov[:n, :n] = dkb[inv]
        np.fill_diagonal(cov[:n, :n], tb - ta)
        cov[:n, n:] = dcr[inv]
        cov[n:, :n] = dcr[inv].T
        cov[n:, n:] = dmm[inv]
        f = psd_factor(cov, f" (joint step [{ta:g}, {tb:g}])", entry_error=MOLLIFIED_ENTRY_ERROR)
        inc = _rng.normals(gens, f.shape[1]) @ f.T
        xb += inc[:, :n]
        xm += inc[:, n:]
        drift = xb - c * tb
        np.maximum(runmax["plain"], drift, out=runmax["plain"])
        for b in barriers:
            np.maximum(runmax[b.key], drift + b.shift(tb), out=runmax[b.key])
    full = eval_mollified_cov(k, m, uniq, kind="full")
    resid = full[inv] - prev[2][inv]
    f = psd_factor(resid, " (mollified residual)", entry_error=MOLLIFIED_ENTRY_ERROR)
    xm += _rng.normals(gens, f.shape[1]) @ f.T
    return JointMollifiedRecord(t_eps, xb, runmax, xm, float(full[0]))


# ---------------------------------------------------------------------------
# diagnostics


def _jackknife_cov(a, b):
    """Unbiased covariance of paired samples and its delete-one jackknife SE."""
    n = a.size
    sa, sb, sab = a.sum(), b.sum(), (a * b).sum()
    full = (sab - sa * sb / n) / (n - 1)
    # leave-one-out versions in closed form
    sa_i, sb_i, sab_i = sa - a, sb - b, sab - a * b
    loo = (sab_i - sa_i * sb_i / (n - 1)) / (n - 2)
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(full), se


def empirical_covariance(values_s, values_t=None, pairs=((0, 0),), min_replicas=100):
    """Covariances ``Cov(X_s(x_i), X_t(x_j))`` across replicas with jackknife SEs.

    ``values_s`` and ``values_t`` are ``(replicas, sites)`` arrays taken at
    times ``s`` and ``t`` (same array when ``t`` is omitted).  Returns an
    array of shape ``(len(pairs), 2)`` holding estimate and standard error.
    """
    vs = np.asarray(values_s, dtype=float)
    vt = vs if values_t is None else np.asarray(values_t, dtype=float)
    if vs.ndim != 2 or vs.shape != vt.shape:
        raise ValidationError("values must be matching (replicas, sites) arrays")
    if vs.shape[0] < min_replicas:
        raise ValidationError(f"need at least {min_replicas} replicas, got {vs.shape[0]}")
    return np.array([_jackknife_cov(vs[:, i], vt[:, j]) for i, j in pairs])
