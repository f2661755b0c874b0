"""Lower-envelope functions for the 3-Bessel process.

An envelope is a non-decreasing map ``rho: [0, inf) -> [0, inf)`` with
``rho(0) = 0``.  It is a lower envelope of the 3-Bessel process exactly when
the Dvoretzky-Erdos integral ``int_1^inf rho(u) u^{-3/2} du`` is finite.

Three kinds are provided:

``PowerEnvelope``
    ``scale * ((u + offset)**gamma - offset**gamma)``.  The offset keeps the
    shape ``u**gamma`` at infinity while flattening the slope near zero, which
    is how Cantor gap schedules are kept admissible.
``SqrtLogEnvelope``
    ``scale * sqrt(u) * log(u + 2)**(sign * zeta)``.
``TableEnvelope``
    Monotone piecewise-linear interpolation of sample points, with an
    optional declared power tail used only by the integral test.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .errors import DomainError, InconclusiveError, RangeError, ValidationError

__all__ = [
    "EnvelopeFn",
    "PowerEnvelope",
    "SqrtLogEnvelope",
    "TableEnvelope",
    "DEResult",
    "eval_rho",
    "shifted_gap",
    "dvoretzky_erdos_test",
    "concave_majorant",
    "envelope_from_spec",
    "is_midpoint_concave",
]

# probe grid for the concavity / growth metadata of analytic kinds
_PROBE = np.unique(np.concatenate([np.linspace(0.0, 10.0, 201), np.geomspace(1e-3, 1e8, 400)]))


def _as_nonneg(u):
    arr = np.asarray(u, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise DomainError("envelope argument must be a nonnegative real")
    return arr


def is_midpoint_concave(fn, points, rtol=1e-9) -> bool:
    """Check ``fn((u+v)/2) >= (fn(u)+fn(v))/2`` for consecutive probe pairs.

    Pairs are taken between points one and two apart in ``points`` so that the
    test covers every local scale of the grid.
    """
    pts = np.asarray(points, dtype=float)
    vals = fn(pts)
    for step in (1, 2):
        u, v = pts[:-step], pts[step:]
        mid = fn(0.5 * (u + v))
        chord = 0.5 * (vals[:-step] + vals[step:])
        tol = rtol * np.maximum(1.0, np.abs(chord))
        if np.any(mid < chord - tol):
            return False
    return True


class EnvelopeFn:
    """Common interface of envelope kinds.

    Subclasses implement ``_eval`` on validated nonnegative arrays.
    """

    kind: str = "abstract"

    def __call__(self, u):
        arr = _as_nonneg(u)
        out = self._eval(arr)
        return float(out) if np.ndim(out) == 0 else out

    def _eval(self, u: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def concave(self) -> bool:
        return bool(self._concave)

    @property
    def monotone(self) -> bool:
        """Whether ``rho`` is non-decreasing on the probe grid."""
        return bool(self._monotone)

    @property
    def vanishes_at_zero(self) -> bool:
        return abs(float(self._eval(np.asarray(0.0)))) == 0.0

    def shifted(self, r, u):
        """Shifted gap ``rho(u + r) - rho(r)``; see :func:`shifted_gap`."""
        return shifted_gap(self, r, u)

    def to_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError

    def check_growth(self) -> bool:
        """Warn (and return False) if ``rho(u) < u**0.25`` somewhere on ``[1e4, 1e8]``."""
        big = np.geomspace(1e4, 1e8, 5)
        vals = self._eval(big)
        if np.any(vals < big ** 0.25):
            warnings.warn(
                f"{self!r} grows slower than u**0.25 at large u",
                RuntimeWarning,
                stacklevel=2,
            )
            return False
        return True


@dataclass(frozen=True)
class PowerEnvelope(EnvelopeFn):
    gamma: float
    scale: float = 1.0
    offset: float = 0.0
    kind: str = field(default="power", init=False)

    def __post_init__(self):
        if not (self.gamma > 0) or self.scale < 0 or self.offset < 0:
            raise ValidationError("power envelope needs gamma > 0, scale >= 0, offset >= 0")
        object.__setattr__(self, "_concave", self.gamma <= 1.0)
        object.__setattr__(self, "_monotone", True)

    def _eval(self, u):
        c = self.offset
        return self.scale * ((u + c) ** self.gamma - c ** self.gamma)

    def to_dict(self):
        return {"kind": "power", "gamma": self.gamma, "scale": self.scale, "offset": self.offset}


@dataclass(frozen=True)
class SqrtLogEnvelope(EnvelopeFn):
    zeta: float
    sign: int = -1
    scale: float = 1.0
    kind: str = field(default="sqrtlog", init=False)

    def __post_init__(self):
        if self.sign not in (-1, 1) or self.zeta < 0 or self.scale < 0:
            raise ValidationError("sqrtlog envelope needs zeta >= 0, sign in {-1, +1}, scale >= 0")
        # the formula is not monotone on a bounded initial range when sign < 0
        object.__setattr__(self, "_concave", is_midpoint_concave(self._eval, _PROBE))
        object.__setattr__(self, "_monotone", bool(np.all(np.diff(self._eval(_PROBE)) >= 0)))

    def _eval(self, u):
        return self.scale * np.sqrt(u) * np.log(u + 2.0) ** (self.sign * self.zeta)

    def to_dict(self):
        return {"kind": "sqrtlog", "zeta": self.zeta, "sign": self.sign, "scale": self.scale}


@dataclass(frozen=True, eq=False)
class TableEnvelope(EnvelopeFn):
    """Tabulated envelope, monotone piecewise-linear between samples.

    ``tail_gamma`` declares ``rho(u) ~ C u**tail_gamma`` beyond the last sample;
    it is consulted only by :func:`dvoretzky_erdos_test`.
    """

    u: np.ndarray
    values: np.ndarray
    tail_gamma: Optional[float] = None
    kind: str = field(default="table", init=False)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if u.ndim != 1 or u.shape != v.shape or u.size < 2:
            raise ValidationError("table envelope needs two matching 1-d arrays with >= 2 samples")
        if u[0] != 0.0 or v[0] != 0.0:
            raise ValidationError("table envelope must start at (0, 0)")
        if np.any(np.diff(u) <= 0):
            raise ValidationError("table abscissae must be strictly increasing")
        if np.any(np.diff(v) < 0) or np.any(v < 0):
            raise ValidationError("table values must be nonnegative and non-decreasing")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_concave", is_midpoint_concave(self._interp, u))
        object.__setattr__(self, "_monotone", True)

    def _interp(self, x):
        return np.interp(x, self.u, self.values)

    def _eval(self, x):
        if np.any(x > self.u[-1] * (1 + 1e-12)):
            raise RangeError(f"table envelope evaluated beyond its range [0, {self.u[-1]}]")
        return self._interp(x)

    def to_dict(self):
        out = {"kind": "table", "u": self.u.tolist(), "values": self.values.tolist()}
        if self.tail_gamma is not None:
            out["tail_gamma"] = self.tail_gamma
        return out

    def __eq__(self, other):
        return (
            isinstance(other, TableEnvelope)
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.values, other.values)
            and self.tail_gamma == other.tail_gamma
        )

    def __hash__(self):
        return hash((self.u.tobytes(), self.values.tobytes(), self.tail_gamma))


def eval_rho(f: EnvelopeFn, u):
    """Evaluate ``rho(u)``; raises on negative ``u`` or table extrapolation."""
    return f(u)


def shifted_gap(f: EnvelopeFn, r, u):
    """Return ``rho(u + r) - rho(r)``.

    This is the gap used by the ``(q, r)`` truncation: it vanishes at ``u = 0``
    and, for concave ``rho`` passing the integral test, tends to zero as
    ``r`` grows for every fixed ``u``.
    """
    r_arr = _as_nonneg(r)
    u_arr = _as_nonneg(u)
    out = f._eval(u_arr + r_arr) - f._eval(r_arr)
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class DEResult:
    """Outcome of the Dvoretzky-Erdos integral test.

    ``integral`` is the value of ``int_1^inf rho(u) u^{-3/2} du`` when it
    converges (``inf`` otherwise); ``method`` records how it was decided.
    """

    converges: bool
    integral: float
    method: str

    def __bool__(self):
        return self.converges


def _de_quad(integrand):
    # integrand is rho(e^v) e^{-v/2}, the test integral after u = e^v
    val, _ = integrate.quad(integrand, 0.0, math.inf, limit=500, epsabs=1e-10, epsrel=1e-10)
    return val


def dvoretzky_erdos_test(f: EnvelopeFn, tolerance: float = 1e-8) -> DEResult:
    """Classify ``int_1^inf rho(u) u^{-3/2} du`` as finite or infinite.

    Analytic kinds are classified by their tail exponent; the value of a
    convergent integral is then computed by quadrature to ``tolerance``.
    Tables need a declared ``tail_gamma`` or :class:`InconclusiveError` is
    raised.
    """
    if isinstance(f, PowerEnvelope):
        if f.scale == 0.0:
            return DEResult(True, 0.0, "exact")
        if f.gamma >= 0.5:
            return DEResult(False, math.inf, "tail-exponent")
        if f.offset == 0.0:
            return DEResult(True, f.scale / (0.5 - f.gamma), "exact")
        g, c, a = f.gamma, f.offset, f.scale

        def integrand(v):
            return a * (math.exp((g - 0.5) * v) * (1 + c * math.exp(-v)) ** g - c ** g * math.exp(-0.5 * v))

        return DEResult(True, _de_quad(integrand), "tail-exponent+quad")
    if isinstance(f, SqrtLogEnvelope):
        if f.scale == 0.0:
            return DEResult(True, 0.0, "exact")
        # integrand ~ log(u)^{sign*zeta} / u
        if f.sign < 0 and f.zeta > 1.0:
            def integrand(v):
                return f.scale * (v + math.log1p(2 * math.exp(-v))) ** (-f.zeta)

            return DEResult(True, _de_quad(integrand), "tail-exponent+quad")
        return DEResult(False, math.inf, "tail-exponent")
    if isinstance(f, TableEnvelope):
        if f.tail_gamma is None:
            raise InconclusiveError("table envelope has no declared tail model")
        if f.tail_gamma >= 0.5:
            return DEResult(False, math.inf, "table+tail")
        u_end, v_end = float(f.u[-1]), float(f.values[-1])
        body = 0.0
        if u_end > 1.0:
            grid = np.concatenate([[1.0], f.u[f.u > 1.0]])
            vals = f._interp(grid)
            # exact integral of a linear piece times u^{-3/2}
            for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
                slope = (fb - fa) / (b - a)
                c0 = fa - slope * a
                body += c0 * 2 * (a ** -0.5 - b ** -0.5) + slope * 2 * (b ** 0.5 - a ** 0.5)
        start = max(u_end, 1.0)
        coef = v_end / u_end ** f.tail_gamma
        tail = coef * start ** (f.tail_gamma - 0.5) / (0.5 - f.tail_gamma)
        return DEResult(True, body + tail, "table+tail")
    raise ValidationError(f"unsupported envelope {f!r}")


def concave_majorant(samples: TableEnvelope) -> TableEnvelope:
    """Least concave majorant of a tabulated envelope.

    The upper hull of the graph points is evaluated back on the original
    abscissae, so an already concave table is returned unchanged.
    """
    if not isinstance(samples, TableEnvelope):
        raise ValidationError("concave_majorant expects a TableEnvelope")
    u, v = samples.u, samples.values
    hull: list[int] = []
    for i in range(u.size):
        while len(hull) >= 2:
            i0, i1 = hull[-2], hull[-1]
            # drop i1 if it lies on or below the chord i0 -> i
            cross = (u[i1] - u[i0]) * (v[i] - v[i0]) - (v[i1] - v[i0]) * (u[i] - u[i0])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    idx = np.asarray(hull)
    new_vals = np.interp(u, u[idx], v[idx])
    new_vals = np.maximum(new_vals, v)
    return TableEnvelope(u.copy(), new_vals, samples.tail_gamma)


def envelope_from_spec(spec) -> EnvelopeFn:
    """Build an envelope from its run-config mapping (or pass one through)."""
    if isinstance(spec, EnvelopeFn):
        return spec
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "power":
        env = PowerEnvelope(**spec)
    elif kind == "sqrtlog":
        env = SqrtLogEnvelope(**spec)
    elif kind == "table":
        env = TableEnvelope(np.asarray(spec.pop("u")), np.asarray(spec.pop("values")), **spec)
    elif kind == "zero":
        env = PowerEnvelope(0.5, scale=0.0)
    else:
        raise ValidationError(f"unknown envelope kind {kind!r}")
    return env
