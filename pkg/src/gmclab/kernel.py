"""Star-scale covariance kernels and their mollified versions.

A :class:`StarScaleKernel` describes the covariance

    K(x, y) = int_0^inf (1 - eta1 exp(-eta2 s)) kappa(e^s (x - y)) ds

through its scale truncations ``Kbar_t`` (integral up to ``t'``), where the
reparametrised time ``t'`` solves ``t' - (eta1/eta2)(1 - exp(-eta2 t')) = t``
so that ``Kbar_t(x, x) = t``.  The base covariance is identically zero.

``kappa`` is the normalised self-convolution of a smooth bump of radius 1/2,
which makes it radial, nonnegative, supported in the unit ball and positive
definite by construction.

Everything depends on ``|x - y|`` only, so every evaluator takes distances.
Fast evaluation uses cumulative tables in the log-distance variable
``w = log|x - y|``::

    P(w) = int_w^0 kappa(e^v) dv
    G(w) = e^{eta2 w} int_w^0 kappa(e^v) e^{-eta2 v} dv

so that, with ``l = log u`` and ``b = min(0, l + t')``::

    Kbar_t(u) = P(l) - P(b) - eta1 (G(l) - e^{eta2 (l - b)} G(b))

Both tables are interpolated by cubic Hermite polynomials using their known
derivatives.  Direct adaptive quadrature is kept as ``method="quad"``.
"""

from __future__ import annotations

import math
from functools import cached_property, lru_cache

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator

from .errors import DomainError, NumericError, ValidationError

__all__ = [
    "SmoothingKernel",
    "StarScaleKernel",
    "Mollifier",
    "build_smoothing_kernel",
    "solve_tprime",
    "eval_scale_density",
    "eval_kbar",
    "eval_k_infinity",
    "eval_mollified_cov",
    "check_log_bound",
    "kernel_from_spec",
    "mollifier_from_spec",
]

TABLE_SIZE = 4096
_W_MIN = -40.0
_W_STEP = 1e-3


def _bump(x, power=2):
    """``exp(-1 / (1 - |x|**power))`` on ``|x| < 1``, zero outside."""
    x = np.abs(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    inside = x < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** power))
    return out


@lru_cache(maxsize=None)
def _gauss(n):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return nodes, weights


def _self_convolution_1d(profile, r, n_nodes=400):
    # (f*f)(r) for f supported in [-1/2, 1/2]: overlap is [r - 1/2, 1/2]
    r = np.asarray(r, dtype=float)
    nodes, weights = _gauss(n_nodes)
    lo, hi = r - 0.5, np.full_like(r, 0.5)
    half = 0.5 * (hi - lo)
    x = 0.5 * (hi + lo)[:, None] + half[:, None] * nodes[None, :]
    vals = profile(x) * profile(r[:, None] - x)
    return half * (vals @ weights)


def _self_convolution_2d(profile, r, n_rad=160, n_ang=160):
    # polar coordinates around the origin; the shifted factor is evaluated at |z - r e1|
    r = np.asarray(r, dtype=float)
    rn, rw = _gauss(n_rad)
    an, aw = _gauss(n_ang)
    rho = 0.25 * (rn + 1.0)
    rho_w = 0.25 * rw
    theta = 0.5 * math.pi * (an + 1.0)
    theta_w = 0.5 * math.pi * aw
    base = profile(rho) * rho * rho_w
    out = np.empty_like(r)
    cos_t = np.cos(theta)
    for i, ri in enumerate(r):
        dist = np.sqrt(np.maximum(rho[:, None] ** 2 + ri * ri - 2 * ri * rho[:, None] * cos_t[None, :], 0.0))
        out[i] = 2.0 * base @ (profile(dist) @ theta_w)
    return out


class SmoothingKernel:
    """Radial profile ``kappa`` tabulated on ``[0, 1]``.

    Parameters
    ----------
    d : int
        Dimension, 1 or 2.
    bump : str
        Only ``"selfconv-bump"`` is available.
    n_table : int
        Number of radial samples.
    """

    def __init__(self, d=1, bump="selfconv-bump", n_table=TABLE_SIZE):
        if d not in (1, 2):
            raise DomainError(f"dimension must be 1 or 2, got {d}")
        if bump != "selfconv-bump":
            raise ValidationError(f"unknown smoothing kernel {bump!r}")
        self.d = int(d)
        self.bump = bump
        self.radii = np.linspace(0.0, 1.0, n_table)
        profile = lambda x: _bump(2.0 * np.asarray(x))  # noqa: E731 - radius 1/2 bump
        if d == 1:
            raw = _self_convolution_1d(profile, self.radii)
        else:
            raw = _self_convolution_2d(profile, self.radii)
        if not (raw[0] > 0 and np.isfinite(raw).all()):
            raise NumericError("self-convolution normalisation failed")
        self.norm = float(raw[0])
        table = np.clip(raw / raw[0], 0.0, 1.0)
        table[0], table[-1] = 1.0, 0.0
        self.values = table
        self._interp = PchipInterpolator(self.radii, table, extrapolate=False)

    def __call__(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        out = np.zeros_like(r)
        inside = r < 1.0
        out[inside] = self._interp(r[inside])
        return float(out) if out.ndim == 0 else out

    def fourier(self, omega, n_nodes=1500):
        """Fourier transform of ``x -> kappa(|x|)`` at the given frequencies."""
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        nodes, weights = _gauss(n_nodes)
        r = 0.5 * (nodes + 1.0)
        w = 0.5 * weights * self(r)
        if self.d == 1:
            return 2.0 * np.cos(np.outer(omega, r)) @ w
        from scipy.special import j0

        return 2.0 * math.pi * j0(np.outer(omega, r)) @ (w * r)

    def __repr__(self):
        return f"SmoothingKernel(d={self.d}, bump={self.bump!r})"


_KAPPA_CACHE: dict = {}


def build_smoothing_kernel(bump="selfconv-bump", d=1) -> SmoothingKernel:
    """Return the (cached) tabulated kernel for ``bump`` in dimension ``d``."""
    key = (bump, d)
    if key not in _KAPPA_CACHE:
        _KAPPA_CACHE[key] = SmoothingKernel(d=d, bump=bump)
    return _KAPPA_CACHE[key]


def solve_tprime(eta1, eta2, t):
    """Solve ``s - (eta1/eta2) (1 - exp(-eta2 s)) = t`` for ``s >= 0``.

    The left side is convex and increasing, so Newton started at the upper
    bound ``t + eta1/eta2`` decreases monotonically onto the root.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(np.isnan(t_arr)):
        raise DomainError("scale t must be nonnegative")
    if eta1 == 0.0:
        return t_arr.copy() if t_arr.ndim else float(t_arr)
    a = eta1 / eta2
    s = t_arr + a
    for _ in range(400):
        e = np.exp(-eta2 * s)
        f = s - a * (1.0 - e) - t_arr
        fp = 1.0 - eta1 * e
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(fp > 0, f / fp, 0.0)
        step = np.maximum(step, 0.0)
        s = np.maximum(s - step, t_arr)
        if np.all(step <= 1e-15 * np.maximum(s, 1e-300)):
            break
    s = np.where(t_arr == 0.0, 0.0, np.clip(s, t_arr, t_arr + a))
    return float(s) if s.ndim == 0 else s


class StarScaleKernel:
    """Almost star-scale invariant covariance with zero base covariance.

    Parameters
    ----------
    eta1 : float
        In ``[0, 1]``.
    eta2 : float
        Positive.
    d : int
        Dimension, 1 or 2.
    kappa : SmoothingKernel, optional
        Defaults to the cached self-convolution bump for ``d``.
    """

    def __init__(self, eta1=0.5, eta2=1.0, d=1, kappa=None):
        if not (0.0 <= eta1 <= 1.0) or not (eta2 > 0.0):
            raise ValidationError("need eta1 in [0, 1] and eta2 > 0")
        if d not in (1, 2):
            raise DomainError(f"dimension must be 1 or 2, got {d}")
        self.eta1 = float(eta1)
        self.eta2 = float(eta2)
        self.d = int(d)
        self.kappa = kappa if kappa is not None else build_smoothing_kernel(d=d)
        if self.kappa.d != self.d:
            raise ValidationError("kappa dimension does not match the kernel")

    def __repr__(self):
        return f"StarScaleKernel(eta1={self.eta1}, eta2={self.eta2}, d={self.d})"

    def to_dict(self):
        return {"eta1": self.eta1, "eta2": self.eta2, "d": self.d, "kappa": self.kappa.bump, "k0": "zero"}

    def tprime(self, t):
        return solve_tprime(self.eta1, self.eta2, t)

    # -- log-variable tables -------------------------------------------------

    @cached_property
    def _tables(self):
        n = int(round(-_W_MIN / _W_STEP))
        w = np.linspace(_W_MIN, 0.0, n + 1)
        nodes, weights = _gauss(6)
        h = w[1] - w[0]
        v = w[:-1, None] + 0.5 * h * (nodes[None, :] + 1.0)
        kv = self.kappa(np.exp(v))
        cell_p = 0.5 * h * (kv @ weights)
        cell_h = 0.5 * h * ((kv * np.exp(-self.eta2 * v)) @ weights)
        # integrals from w_i to 0
        p = np.concatenate([np.cumsum(cell_p[::-1])[::-1], [0.0]])
        hh = np.concatenate([np.cumsum(cell_h[::-1])[::-1], [0.0]])
        g = np.exp(self.eta2 * w) * hh
        kw = self.kappa(np.exp(w))
        return w, p, -kw, g, self.eta2 * g - kw

    def _hermite(self, x, grid, f, df):
        h = grid[1] - grid[0]
        pos = (x - grid[0]) / h
        i = np.clip(np.floor(pos).astype(np.int64), 0, grid.size - 2)
        s = pos - i
        s2, s3 = s * s, s * s * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        return h00 * f[i] + h10 * h * df[i] + h01 * f[i + 1] + h11 * h * df[i + 1]

    def _p(self, w):
        grid, p, dp, _, _ = self._tables
        w = np.asarray(w, dtype=float)
        out = self._hermite(np.maximum(w, grid[0]), grid, p, dp)
        # kappa(e^w) = 1 to double precision below the table
        return np.where(w < grid[0], p[0] + (grid[0] - w), out)

    def _g(self, w):
        grid, _, _, g, dg = self._tables
        w = np.asarray(w, dtype=float)
        out = self._hermite(np.maximum(w, grid[0]), grid, g, dg)
        below = w < grid[0]
        if np.any(below):
            e = np.exp(self.eta2 * (w - grid[0]))
            out = np.where(below, e * g[0] + (1.0 - e) / self.eta2, out)
        return out

    # -- evaluators ------------------------------------------------------------

    def kbar(self, t, r, method="table"):
        """``Kbar_t`` at distance ``r`` (broadcasts over ``t`` and ``r``)."""
        t = np.asarray(t, dtype=float)
        r = np.abs(np.asarray(r, dtype=float))
        if np.any(t < 0):
            raise DomainError("scale t must be nonnegative")
        t, r = np.broadcast_arrays(t, r)
        if method == "quad":
            out = np.vectorize(self._kbar_quad, otypes=[float])(t, r)
        elif method == "table":
            out = self._kbar_table(t, r)
        else:
            raise ValidationError(f"unknown method {method!r}")
        return float(out) if out.ndim == 0 else out

    def _kbar_table(self, t, r):
        out = np.zeros(t.shape)
        diag = r == 0.0
        out[diag] = t[diag]
        live = (r > 0.0) & (r < 1.0) & (t > 0.0)
        if np.any(live):
            tl, rl = t[live], r[live]
            lu = np.log(rl)
            tu, inv = np.unique(tl, return_inverse=True)
            b = np.minimum(0.0, lu + np.asarray(self.tprime(tu)).reshape(-1)[inv.reshape(-1)])
            val = self._p(lu) - self._p(b)
            if self.eta1 > 0:
                val -= self.eta1 * (self._g(lu) - np.exp(self.eta2 * (lu - b)) * self._g(b))
            # clamp rounding excursions past the analytic bound t ^ log(1/r)
            out[live] = np.clip(val, 0.0, np.minimum(tl, -lu))
        return out

    def _kbar_quad(self, t, r):
        if r == 0.0:
            return float(t)
        if r >= 1.0 or t == 0.0:
            return 0.0
        upper = min(self.tprime(t), -math.log(r))
        e1, e2, kap = self.eta1, self.eta2, self.kappa

        def integrand(s):
            return (1.0 - e1 * math.exp(-e2 * s)) * float(kap(math.exp(s) * r))

        val, err = integrate.quad(integrand, 0.0, upper, epsabs=1e-13, epsrel=1e-11, limit=400)
        if not np.isfinite(val) or err > 1e-7 * max(1.0, abs(val)):
            raise NumericError(f"quadrature for Kbar_t did not converge (t={t}, r={r}, err={err})")
        return val

    def k_infinity(self, r):
        """Full covariance ``K`` at distances ``r > 0`` (exact saturation of ``Kbar_t``)."""
        r = np.abs(np.asarray(r, dtype=float))
        if np.any(r == 0.0):
            raise DomainError("K(x, x) is infinite")
        out = np.zeros(r.shape)
        live = r < 1.0
        lu = np.log(r[live])
        out[live] = self._p(lu) - self.eta1 * self._g(lu)
        return float(out) if out.ndim == 0 else out

    def scale_density(self, t, r):
        """``Q_t = kappa(e^{t'} r)``."""
        return self.kappa(np.exp(self.tprime(np.asarray(t, dtype=float))) * np.abs(np.asarray(r, dtype=float)))


def eval_scale_density(k: StarScaleKernel, t, x, y):
    return k.scale_density(t, _distance(x, y))


def eval_kbar(k: StarScaleKernel, t, x, y, method="table"):
    return k.kbar(t, _distance(x, y), method=method)


def eval_k_infinity(k: StarScaleKernel, x, y, t_max=None):
    """``K(x, y)`` as the stabilised value of ``Kbar_t`` for large ``t``.

    ``Kbar_t`` is exactly constant once ``t' >= log(1/|x - y|)``; if ``t_max``
    is given and too small for that, ``Kbar_{t_max}`` is returned instead.
    """
    r = _distance(x, y)
    if np.any(np.asarray(r) == 0.0):
        raise DomainError("K(x, x) is infinite")
    if t_max is None:
        return k.k_infinity(r)
    return k.kbar(t_max, r)


def _distance(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    diff = x - y
    if diff.ndim >= 1 and diff.shape[-1] == 2:
        return np.hypot(diff[..., 0], diff[..., 1])
    return np.abs(diff)


class Mollifier:
    """Radial bump ``theta`` on the unit ball with unit mass, rescaled to ``eps``.

    ``profile="bump"`` is ``exp(-1/(1 - |x|^2))``; ``profile="flat"`` is
    ``exp(-1/(1 - |x|^4))`` (flatter top, used for invariance checks).
    Only ``d = 1`` covariances are provided.
    """

    _POWERS = {"bump": 2, "flat": 4}

    def __init__(self, eps, profile="bump", d=1):
        if not (0.0 < eps < 1.0):
            raise DomainError(f"mollifier scale must lie in (0, 1), got {eps}")
        if profile not in self._POWERS:
            raise ValidationError(f"unknown mollifier profile {profile!r}")
        if d != 1:
            raise DomainError("mollified covariances are implemented for d = 1 only")
        self.eps = float(eps)
        self.profile = profile
        self.d = d
        nodes, weights = _gauss(400)
        mass = float(_bump(nodes, self._POWERS[profile]) @ weights)
        self.mass_constant = mass

    @property
    def t_eps(self):
        return math.log(1.0 / self.eps)

    def theta(self, x):
        """Unit-scale density ``theta``."""
        return _bump(x, self._POWERS[self.profile]) / self.mass_constant

    def theta_eps(self, x):
        return self.theta(np.asarray(x) / self.eps) / self.eps

    @cached_property
    def _double(self):
        # Theta = theta * theta on [-2, 2], tabulated for interpolation
        grid = np.linspace(0.0, 2.0, 4097)
        nodes, weights = _gauss(400)
        lo = grid - 1.0
        half = 0.5 * (1.0 - lo)
        x = 0.5 * (1.0 + lo)[:, None] + half[:, None] * nodes[None, :]
        vals = half * ((self.theta(x) * self.theta(grid[:, None] - x)) @ weights)
        return PchipInterpolator(grid, vals, extrapolate=False)

    def double_theta(self, x):
        """``(theta * theta)(x)`` at unit scale."""
        x = np.abs(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        inside = x < 2.0
        out[inside] = self._double(x[inside])
        return out

    def with_eps(self, eps):
        return Mollifier(eps, self.profile, self.d)

    def to_dict(self):
        return {"profile": self.profile, "d": self.d}

    def __repr__(self):
        return f"Mollifier(eps={self.eps}, profile={self.profile!r})"


def _convolve_distance(fn, weight, support, r, n_nodes=64, chunk=512):
    """``int weight(w) fn(|r - w|) dw`` over ``|w| <= support`` for each ``r``.

    ``fn`` may be log-singular at 0 or vary on scales much finer than the
    support, so when ``r`` lies inside the support each side of ``w = r`` is
    integrated in the log variable ``|w - r| = L e^{-y}``, ``y in [0, 45]``.
    """
    r = np.abs(np.atleast_1d(np.asarray(r, dtype=float)))
    nodes, weights = _gauss(n_nodes)
    # y-nodes on [0, 6] and [6, 45]
    y = np.concatenate([3.0 * (nodes + 1.0), 6.0 + 19.5 * (nodes + 1.0)])
    wy = np.concatenate([3.0 * weights, 19.5 * weights])
    ey = np.exp(-y)
    xg = 0.5 * (nodes + 1.0)
    wg = 0.5 * weights
    out = np.zeros_like(r)
    for lo in range(0, r.size, chunk):
        rc = r[lo:lo + chunk]
        res = np.zeros_like(rc)
        inside = rc < support
        if np.any(inside):
            ri = rc[inside][:, None]
            acc = np.zeros(ri.shape[0])
            for length, sgn in ((support - ri, 1.0), (support + ri, -1.0)):
                dist = length * ey[None, :]
                w = ri + sgn * dist
                acc += ((weight(w) * fn(dist) * dist) @ wy)
            res[inside] = acc
        outside = ~inside
        if np.any(outside):
            ro = rc[outside][:, None]
            w = -support + 2.0 * support * xg[None, :]
            res[outside] = ((weight(w) * fn(np.abs(ro - w))) @ wg) * 2.0 * support
        out[lo:lo + chunk] = res
    return out


def eval_mollified_cov(k: StarScaleKernel, m: Mollifier, r, t=None, kind="full"):
    """Mollified covariances at distances ``r`` (d = 1).

    ``kind="full"``: ``K_eps`` (double mollification of ``K``);
    ``kind="scale"``: ``K_{t,eps}`` (double mollification of ``Kbar_t``);
    ``kind="cross"``: ``Kbar_{t,eps,0}`` (single mollification of ``Kbar_t``),
    the covariance between ``Xbar_t`` and ``X_eps``.
    """
    if k.d != 1:
        raise DomainError("mollified covariances are implemented for d = 1 only")
    eps = m.eps
    r_arr = np.abs(np.atleast_1d(np.asarray(r, dtype=float)))
    if kind == "full":
        weight = lambda w: m.double_theta(w / eps) / eps  # noqa: E731
        fn = lambda d: k.k_infinity(np.maximum(d, 1e-300))  # noqa: E731
        out = _convolve_distance(fn, weight, 2 * eps, r_arr)
    elif kind in ("scale", "cross"):
        if t is None:
            raise ValidationError(f"kind={kind!r} needs a scale t")
        fn = lambda d: k.kbar(t, d)  # noqa: E731
        if kind == "scale":
            weight = lambda w: m.double_theta(w / eps) / eps  # noqa: E731
            out = _convolve_distance(fn, weight, 2 * eps, r_arr)
        else:
            out = _convolve_distance(fn, m.theta_eps, eps, r_arr)
    else:
        raise ValidationError(f"unknown mollified covariance kind {kind!r}")
    if not np.all(np.isfinite(out)):
        raise NumericError("mollified covariance quadrature produced non-finite values")
    return float(out[0]) if np.ndim(r) == 0 else out


def check_log_bound(k: StarScaleKernel, m: Mollifier, distances, t):
    """Sup-deviation of the covariances from ``t ^ log+(1/(|x-y| v eps))``.

    Returns a dict keyed by ``"kbar"``, ``"k_t"``, ``"k_t_eps"`` and
    ``"kbar_t_eps_0"``.  With zero base covariance ``K_t = Kbar_t``.
    """
    r = np.abs(np.asarray(distances, dtype=float))
    with np.errstate(divide="ignore"):
        log_plus = np.maximum(np.log(1.0 / r), 0.0)
        log_eps = np.maximum(np.log(1.0 / np.maximum(r, m.eps)), 0.0)
    ref = np.minimum(t, log_plus)
    ref_eps = np.minimum(t, log_eps)
    kb = k.kbar(t, r)
    report = {
        "kbar": float(np.max(np.abs(kb - ref))),
        "k_t": float(np.max(np.abs(kb - ref))),
    }
    if m is not None and k.d == 1:
        report["k_t_eps"] = float(np.max(np.abs(eval_mollified_cov(k, m, r, t=t, kind="scale") - ref_eps)))
        report["kbar_t_eps_0"] = float(np.max(np.abs(eval_mollified_cov(k, m, r, t=t, kind="cross") - ref_eps)))
    return report


def kernel_from_spec(spec) -> StarScaleKernel:
    if isinstance(spec, StarScaleKernel):
        return spec
    spec = dict(spec)
    if spec.get("k0", "zero") != "zero":
        raise ValidationError("only the zero base covariance is supported")
    d = int(spec.get("d", 1))
    kappa = build_smoothing_kernel(spec.get("kappa", "selfconv-bump"), d)
    return StarScaleKernel(spec.get("eta1", 0.5), spec.get("eta2", 1.0), d, kappa)


def mollifier_from_spec(spec, eps=0.5) -> Mollifier:
    if isinstance(spec, Mollifier):
        return spec
    spec = dict(spec or {})
    return Mollifier(spec.get("eps", eps), spec.get("profile", "bump"), spec.get("d", 1))
