"""Atomised reference measures and the capacity criterion.

A reference measure is a finite list of weighted atoms in ``R^d``.  Three
builders are provided: Lebesgue measure on a box (cell centres), the
generalised Cantor measure driven by a gap schedule ``theta``, and the
occupation measure of a planar Brownian path.

The capacity functional

    sum_{i != j} w_i w_j 1{|x_i - x_j| <= 1} / (|x_i - x_j|^d exp(rho(log 1/|x_i - x_j|)))

is the atom-pair discretisation of the double integral that decides whether
the critical chaos of the measure is non-degenerate.  The diagonal is left
out: a point mass interacting with itself has no continuum counterpart, and
stability under refinement is what tells whether the sum is trustworthy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .envelope import EnvelopeFn, PowerEnvelope, envelope_from_spec
from .errors import ResourceError, ValidationError

__all__ = [
    "ReferenceMeasure",
    "CantorSpec",
    "CapacityBracket",
    "build_lebesgue",
    "build_cantor",
    "build_occupation",
    "cantor_diameters",
    "cantor_gap_fractions",
    "capacity_integral",
    "local_potential",
    "cantor_capacity_bounds",
    "restrict_to_regular_part",
    "measure_from_spec",
    "sqrt_schedule",
]

MAX_ATOMS = 4096
MAX_CANTOR_LEVEL = 14
_PAIR_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class ReferenceMeasure:
    """Weighted atoms ``(points[i], weights[i])``.

    ``box`` is a ``(d, 2)`` array of lower and upper bounds containing every
    atom; ``meta`` records how the measure was built.
    """

    points: np.ndarray
    weights: np.ndarray
    box: np.ndarray
    scheme: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        box = np.asarray(self.box, dtype=float).reshape(pts.shape[1], 2)
        if pts.shape[0] != w.size or pts.shape[0] == 0:
            raise ValidationError("need one positive weight per atom and at least one atom")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValidationError("atom weights must be positive and finite")
        if np.any(pts < box[:, 0] - 1e-12) or np.any(pts > box[:, 1] + 1e-12):
            raise ValidationError("atoms must lie in the declared box")
        for a in (pts, w, box):
            a.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "box", box)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def total_mass(self) -> float:
        return math.fsum(self.weights.tolist())

    def subset(self, mask, **meta) -> "ReferenceMeasure":
        mask = np.asarray(mask, dtype=bool)
        return ReferenceMeasure(
            self.points[mask], self.weights[mask], self.box, self.scheme, {**self.meta, **meta}
        )

    def to_csv(self, path):
        """Write one row per atom: coordinates then weight."""
        header = [f"x{i}" for i in range(self.d)] + ["weight"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for p, wt in zip(self.points, self.weights):
                w.writerow([repr(float(v)) for v in p] + [repr(float(wt))])

    def __repr__(self):
        return f"ReferenceMeasure({self.scheme}, n_atoms={self.n_atoms}, d={self.d}, mass={self.total_mass:g})"


# ---------------------------------------------------------------------------
# builders


def build_lebesgue(box=((0.0, 1.0),), h=1.0 / 64) -> ReferenceMeasure:
    """Lebesgue measure on ``box`` as atoms of weight ``h^d`` at cell centres."""
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = box[None, :]
    if box.shape[1] != 2 or box.shape[0] not in (1, 2) or np.any(box[:, 1] <= box[:, 0]):
        raise ValidationError("box must be a list of (lo, hi) pairs with lo < hi in dimension 1 or 2")
    if not h > 0:
        raise ValidationError("resolution h must be positive")
    counts = (box[:, 1] - box[:, 0]) / h
    n_side = np.rint(counts).astype(int)
    if np.any(np.abs(counts - n_side) > 1e-9 * np.maximum(counts, 1.0)) or np.any(n_side < 1):
        raise ValidationError("h must divide every side of the box")
    total = int(np.prod(n_side))
    if total > MAX_ATOMS:
        raise ResourceError(f"{total} atoms exceed the cap {MAX_ATOMS}; use a coarser resolution")
    axes = [lo + h * (np.arange(k) + 0.5) for (lo, _), k in zip(box, n_side)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    # volume / count rather than h^d keeps the total mass exact in floating point
    w = np.full(total, float(np.prod(box[:, 1] - box[:, 0])) / total)
    return ReferenceMeasure(pts, w, box, "lebesgue", {"h": float(h)})


@dataclass(frozen=True)
class CantorSpec:
    """Gap schedule ``theta`` and construction depth ``level``."""

    schedule: EnvelopeFn
    level: int

    def __post_init__(self):
        if int(self.level) != self.level or self.level < 0:
            raise ValidationError("Cantor level must be a nonnegative integer")


def cantor_gap_fractions(schedule: EnvelopeFn, level: int) -> np.ndarray:
    """``a_k = 1 - exp(-(theta(k) - theta(k-1)))`` for ``k = 1..level``."""
    th = np.asarray(schedule(np.arange(level + 1, dtype=float)), dtype=float)
    a = -np.expm1(-np.diff(th))
    for k, ak in enumerate(a, start=1):
        if not (0.0 <= ak < 0.5):
            raise ValidationError(f"gap fraction a_{k} = {ak:.6g} is outside [0, 1/2)")
    return a


def cantor_diameters(schedule: EnvelopeFn, level: int) -> np.ndarray:
    """``d_k = 2^-k exp(-(theta(k) - theta(0)))`` for ``k = 0..level``."""
    k = np.arange(level + 1, dtype=float)
    th = np.asarray(schedule(k), dtype=float)
    return np.exp(-k * math.log(2.0) - (th - th[0]))


def build_cantor(spec: CantorSpec) -> ReferenceMeasure:
    """Cantor measure: each interval keeps its two outer pieces of relative size ``(1 - a_k) / 2``.

    Atoms of weight ``2^-n`` sit at the midpoints of the level-``n`` intervals.
    """
    n = int(spec.level)
    if n > MAX_CANTOR_LEVEL:
        raise ResourceError(f"level {n} exceeds the cap {MAX_CANTOR_LEVEL} (2^{MAX_CANTOR_LEVEL} atoms)")
    a = cantor_gap_fractions(spec.schedule, n)
    closed = cantor_diameters(spec.schedule, n)
    left = np.zeros(1)
    length = 1.0
    for k in range(1, n + 1):
        child = length * (1.0 - a[k - 1]) / 2.0
        if abs(child - closed[k]) > 1e-12 * closed[k]:
            raise ValidationError(f"level-{k} diameter {child!r} departs from the closed form {closed[k]!r}")
        left = np.concatenate([left, left + length - child])
        left.sort()
        length = child
    mids = left + 0.5 * length
    w = np.full(mids.size, 0.5**n)
    return ReferenceMeasure(
        mids[:, None], w, [[0.0, 1.0]], "cantor", {"level": n, "schedule": spec.schedule.to_dict()}
    )


def build_occupation(T, dt, seed=0, d=2) -> ReferenceMeasure:
    """Occupation measure of a Brownian path on ``[0, T]`` sampled every ``dt``.

    Atoms sit at ``B_{k dt}`` for ``k = 0..K-1`` with weight ``dt`` and a last
    atom carries the remaining partial step, so the total mass is ``T``.
    """
    if not (T > 0 and dt > 0):
        raise ValidationError("need T > 0 and dt > 0")
    if d not in (1, 2):
        raise ValidationError("occupation measures are built in dimension 1 or 2")
    k_full = int(math.floor(T / dt + 1e-9))
    rest = T - k_full * dt
    n = k_full + (1 if rest > 1e-12 * T else 0)
    if n > MAX_ATOMS:
        raise ResourceError(f"{n} atoms exceed the cap {MAX_ATOMS}; use a larger dt")
    gen = _rng.stream(seed, 0, "occupation")
    steps = math.sqrt(dt) * gen.standard_normal((max(n - 1, 0), d))
    pts = np.vstack([np.zeros((1, d)), np.cumsum(steps, axis=0)])
    w = np.full(n, float(dt))
    if n > k_full:
        w[-1] = rest
    box = np.stack([pts.min(axis=0), pts.max(axis=0)], axis=1)
    box[:, 1] = np.maximum(box[:, 1], box[:, 0] + 1e-300)
    return ReferenceMeasure(pts, w, box, "occupation", {"T": float(T), "dt": float(dt), "seed": int(seed)})


def measure_from_spec(spec: dict) -> ReferenceMeasure:
    """Build a measure from ``{"scheme": ..., params}``."""
    spec = dict(spec)
    scheme = spec.pop("scheme", None)
    if scheme == "lebesgue":
        return build_lebesgue(spec.get("box", [[0.0, 1.0]]), spec.get("h", 1.0 / 64))
    if scheme == "cantor":
        sched = spec.get("schedule", {"kind": "power", "gamma": 0.5, "scale": 0.5})
        return build_cantor(CantorSpec(envelope_from_spec(sched), int(spec.get("level", 10))))
    if scheme == "occupation":
        return build_occupation(spec.get("T", 1.0), spec.get("dt", 1e-3), spec.get("seed", 0), spec.get("d", 2))
    raise ValidationError(f"unknown measure scheme {scheme!r}")


# ---------------------------------------------------------------------------
# capacity


def _pair_kernel(r, rho: EnvelopeFn, d):
    """``1{0 < r <= 1} / (r^d exp(rho(log 1/r)))`` evaluated in logs."""
    out = np.zeros_like(r)
    ok = (r > 0) & (r <= 1.0)
    u = -np.log(r[ok])
    out[ok] = np.exp(d * u - np.asarray(rho(u), dtype=float))
    return out


def _pair_rows(mu: ReferenceMeasure):
    pts = mu.points
    for lo in range(0, mu.n_atoms, _PAIR_BLOCK):
        hi = min(mu.n_atoms, lo + _PAIR_BLOCK)
        diff = pts[lo:hi, None, :] - pts[None, :, :]
        r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        own = np.arange(lo, hi)
        r[own - lo, own] = np.inf
        if np.any(r == 0):
            i, j = np.argwhere(r == 0)[0]
            raise ValidationError(f"atoms {lo + i} and {j} coincide")
        yield lo, hi, r


def local_potential(mu: ReferenceMeasure, rho: EnvelopeFn, d=None) -> np.ndarray:
    """``sum_{y != x, |x - y| <= 1} w_y / (|x - y|^d exp(rho(log 1/|x - y|)))`` per atom."""
    d = mu.d if d is None else d
    out = np.empty(mu.n_atoms)
    for lo, hi, r in _pair_rows(mu):
        out[lo:hi] = _pair_kernel(r, rho, d) @ mu.weights
    return out


def capacity_integral(mu: ReferenceMeasure, rho: EnvelopeFn, d=None) -> float:
    """Atom-pair capacity sum, diagonal excluded (see the module docstring)."""
    return math.fsum((mu.weights * local_potential(mu, rho, d)).tolist())


def restrict_to_regular_part(mu: ReferenceMeasure, rho: EnvelopeFn, threshold, d=None) -> ReferenceMeasure:
    """Keep the atoms whose local potential is at most ``threshold``.

    With ``threshold = inf`` the measure is returned unchanged.  If no atom
    survives, a ``ValidationError`` is raised since a measure needs atoms.
    """
    if threshold == math.inf:
        return mu
    keep = local_potential(mu, rho, d) <= threshold
    if not keep.any():
        raise ValidationError(f"no atom has local potential <= {threshold}")
    return mu.subset(keep, threshold=float(threshold))


@dataclass
class CapacityBracket:
    """Level-by-level bounds on the Cantor capacity double integral.

    ``lower_terms[n - 1]`` and ``upper_terms[n - 1]`` bound the contribution of
    pairs that first separate at level ``n``.  ``lower`` and ``upper`` are the
    totals up to ``n_max``; ``converged`` reports whether the upper partial
    sums have settled (the second half of the levels adds less than ``tol``
    relative).  ``in_family`` tells whether ``theta(u) / sqrt(u)`` looks slowly
    varying, the regime where the bracket is known to be sharp in ``alpha``.
    """

    lower: float
    upper: float
    converged: bool
    in_family: bool
    lower_terms: np.ndarray
    upper_terms: np.ndarray

    def partial(self, level):
        """Lower bound from levels ``<= level`` and the full upper bound."""
        return float(np.sum(self.lower_terms[:level])), self.upper


def _slowly_varying_sqrt(schedule: EnvelopeFn) -> bool:
    u = np.array([1e6, 1e8, 1e10])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.asarray(schedule(2 * u)) / np.asarray(schedule(u)) / math.sqrt(2.0)
    return bool(np.all(np.isfinite(ratio)) and np.all(np.abs(ratio - 1.0) < 0.05))


def cantor_capacity_bounds(schedule: EnvelopeFn, alpha, n_max=200_000, tol=1e-6, d=1) -> CapacityBracket:
    """Bracket ``sum_{i != j}`` of ``1 / (|x - y| exp(alpha theta(log 1/|x - y|)))`` under the Cantor measure.

    Ordered pairs splitting at level ``n`` carry mass ``2^-n`` and lie at
    distance between the gap ``a_n d_{n-1}`` and the parent diameter
    ``d_{n-1}``.  Because ``theta`` is non-decreasing the integrand at
    ``u = log 1/r`` lies between ``exp(A - alpha theta(B))`` and
    ``exp(B - alpha theta(A))`` on ``u in [A, B]``.  Everything is evaluated in
    logs so ``n_max`` can be large.
    """
    if not alpha >= 0:
        raise ValidationError("alpha must be nonnegative")
    n = np.arange(1, n_max + 1, dtype=float)
    th = np.asarray(schedule(np.concatenate([[0.0], n])), dtype=float)
    dth = np.diff(th)
    if np.any(dth < 0) or np.any(dth >= math.log(2.0)):
        bad = int(np.argmax((dth < 0) | (dth >= math.log(2.0)))) + 1
        raise ValidationError(f"gap fraction a_{bad} is outside [0, 1/2)")
    log_d_parent = -(n - 1) * math.log(2.0) - (th[:-1] - th[0])
    with np.errstate(divide="ignore"):
        log_a = np.log(-np.expm1(-dth))
    A = -log_d_parent
    B = A - log_a
    log_mass = -n * math.log(2.0)
    th_A = np.asarray(schedule(A), dtype=float)
    with np.errstate(invalid="ignore"):
        th_B = np.where(np.isfinite(B), np.asarray(schedule(np.where(np.isfinite(B), B, 0.0)), dtype=float), np.inf)
    with np.errstate(over="ignore", invalid="ignore"):
        lower_terms = np.exp(log_mass + d * A - alpha * th_B)
        upper_terms = np.exp(log_mass + d * B - alpha * th_A)
    lower_terms = np.nan_to_num(lower_terms, nan=0.0)
    upper_terms = np.where(np.isfinite(B), upper_terms, np.inf)
    lower = float(np.sum(lower_terms))
    upper = float(np.sum(upper_terms))
    half = n_max // 2
    if math.isfinite(upper) and upper > 0:
        late = float(np.sum(upper_terms[half:]))
        converged = late <= tol * upper and upper_terms[-1] <= upper_terms[half]
    else:
        converged = False
    return CapacityBracket(lower, upper, bool(converged), _slowly_varying_sqrt(schedule), lower_terms, upper_terms)


def sqrt_schedule(scale=0.5) -> EnvelopeFn:
    """``theta(u) = scale sqrt(u)``, the divergent-capacity reference schedule."""
    return PowerEnvelope(0.5, scale=scale)
