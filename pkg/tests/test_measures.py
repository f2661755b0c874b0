import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from gmclab.envelope import PowerEnvelope
from gmclab.errors import ResourceError, ValidationError
from gmclab.measures import (
    CantorSpec,
    ReferenceMeasure,
    build_cantor,
    build_lebesgue,
    build_occupation,
    cantor_capacity_bounds,
    cantor_diameters,
    cantor_gap_fractions,
    capacity_integral,
    local_potential,
    measure_from_spec,
    restrict_to_regular_part,
    sqrt_schedule,
)

ZERO = PowerEnvelope(0.5, scale=0.0)
LINEAR = PowerEnvelope(1.0, scale=0.1)


def brute_capacity(points, weights, rho, d):
    # independent double loop over ordered pairs
    total = 0.0
    for i in range(len(weights)):
        for j in range(len(weights)):
            if i == j:
                continue
            r = math.dist(points[i], points[j])
            if r <= 1.0:
                total += weights[i] * weights[j] / (r**d * math.exp(float(rho(math.log(1 / r)))))
    return total


# -- Lebesgue -----------------------------------------------------------------


def test_lebesgue_half_resolution():
    mu = build_lebesgue([[0.0, 1.0]], 0.5)
    np.testing.assert_array_equal(mu.points[:, 0], [0.25, 0.75])
    np.testing.assert_array_equal(mu.weights, [0.5, 0.5])


def test_lebesgue_square_mass_is_exact():
    mu = build_lebesgue([[0.0, 1.0], [0.0, 1.0]], 0.1)
    assert mu.n_atoms == 100
    assert mu.total_mass == 1.0


@pytest.mark.parametrize("box,h", [([[0.0, 1.0]], 1 / 64), ([[-1.0, 2.0], [0.0, 1.0]], 0.125)])
def test_lebesgue_min_distance(box, h):
    mu = build_lebesgue(box, h)
    p = mu.points
    dist = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    assert dist.min() == pytest.approx(h, rel=1e-12)
    assert mu.total_mass == pytest.approx(np.prod(np.diff(np.asarray(box), axis=1)), rel=1e-15)


def test_lebesgue_errors():
    with pytest.raises(ResourceError):
        build_lebesgue([[0.0, 1.0]], 1 / 8192)
    with pytest.raises(ValidationError):
        build_lebesgue([[0.0, 1.0]], 0.3)


# -- Cantor -------------------------------------------------------------------


def test_cantor_without_gaps_is_dyadic():
    mu = build_cantor(CantorSpec(ZERO, 4))
    np.testing.assert_allclose(mu.points[:, 0], (np.arange(16) + 0.5) / 16, atol=1e-15)
    np.testing.assert_array_equal(cantor_gap_fractions(ZERO, 4), 0.0)
    np.testing.assert_allclose(cantor_diameters(ZERO, 4), 0.5 ** np.arange(5))


def test_cantor_linear_schedule():
    a = cantor_gap_fractions(LINEAR, 5)
    np.testing.assert_allclose(a, 1 - math.exp(-0.1), rtol=1e-12)
    assert a[0] == pytest.approx(0.095163, abs=1e-6)
    # product formula oracle: d_3 = prod (1 - a_k) / 2
    assert cantor_diameters(LINEAR, 3)[3] == pytest.approx(np.prod((1 - a[:3]) / 2), rel=1e-12)
    assert cantor_diameters(LINEAR, 3)[3] == pytest.approx(2**-3 * math.exp(-0.3), rel=1e-14)
    assert cantor_diameters(LINEAR, 3)[3] == pytest.approx(0.0926035, abs=2e-6)


def test_cantor_level_one_geometry():
    mu = build_cantor(CantorSpec(LINEAR, 1))
    a1 = 1 - math.exp(-0.1)
    np.testing.assert_allclose(mu.points[:, 0], [(1 - a1) / 4, 1 - (1 - a1) / 4], rtol=1e-14)


def test_cantor_mass_and_count():
    mu = build_cantor(CantorSpec(sqrt_schedule(0.5), 10))
    assert mu.n_atoms == 1024
    assert mu.total_mass == 1.0
    assert np.all(np.diff(mu.points[:, 0]) > 0)


def test_cantor_gaps_match_diameters():
    sched = sqrt_schedule(0.5)
    n = 8
    mu = build_cantor(CantorSpec(sched, n))
    x = mu.points[:, 0]
    d = cantor_diameters(sched, n)
    a = cantor_gap_fractions(sched, n)
    # the gap between the two halves of [0, 1] is a_1 d_0, seen between the middle atoms
    mid = 2 ** (n - 1)
    assert x[mid] - x[mid - 1] == pytest.approx(a[0] * d[0] + d[n], rel=1e-12)


def test_cantor_rejects_large_gaps():
    with pytest.raises(ValidationError, match="a_1"):
        build_cantor(CantorSpec(PowerEnvelope(1.0, scale=0.8), 3))
    with pytest.raises(ResourceError):
        build_cantor(CantorSpec(ZERO, 15))


# -- occupation ---------------------------------------------------------------


def test_occupation_mass_and_seeds():
    a = build_occupation(1.0, 0.01, seed=1)
    b = build_occupation(1.0, 0.01, seed=2)
    assert a.total_mass == 1.0 and b.total_mass == 1.0
    assert not np.allclose(a.points[1:], b.points[1:])
    assert a.n_atoms == 100


def test_occupation_partial_step():
    mu = build_occupation(1.0, 0.3, seed=0)
    assert mu.n_atoms == 4
    assert mu.total_mass == pytest.approx(1.0, rel=1e-15)


def test_occupation_capacity_finite():
    mu = build_occupation(1.0, 1e-3, seed=3)
    cap = capacity_integral(mu, PowerEnvelope(1 / 3), d=2)
    assert math.isfinite(cap) and cap > 0


def test_occupation_cap():
    with pytest.raises(ResourceError):
        build_occupation(10.0, 1e-3)


# -- capacity -----------------------------------------------------------------


def test_capacity_trivial_cases():
    one = ReferenceMeasure([[0.3]], [1.0], [[0.0, 1.0]], "test")
    assert capacity_integral(one, PowerEnvelope(0.3)) == 0.0
    two = ReferenceMeasure([[0.0], [1.0]], [0.25, 0.25], [[0.0, 1.0]], "test")
    assert capacity_integral(two, PowerEnvelope(0.3)) == pytest.approx(2 * 0.25**2, rel=1e-15)


def test_capacity_rejects_coincident_atoms():
    mu = ReferenceMeasure([[0.2], [0.2]], [0.5, 0.5], [[0.0, 1.0]], "test")
    with pytest.raises(ValidationError, match="coincide"):
        capacity_integral(mu, PowerEnvelope(0.3))


def test_capacity_matches_brute_force_2d():
    mu = build_occupation(0.2, 0.005, seed=4)
    rho = PowerEnvelope(0.4)
    assert capacity_integral(mu, rho, d=2) == pytest.approx(
        brute_capacity(mu.points, mu.weights, rho, 2), rel=1e-10
    )


def _lebesgue_pair_limit(rho):
    # continuum double integral over [0, 1]^2: 2 int_0^inf (1 - e^-u) exp(-rho(u)) du
    val, _ = integrate.quad(lambda u: 2 * (1 - math.exp(-u)) * math.exp(-float(rho(u))), 0, math.inf, limit=500)
    return val


@pytest.mark.xfail(
    strict=True,
    reason="the excluded diagonal cells hold 2 int_{log 1/h}^inf exp(-u^0.3) du, so each halving of h "
    "still adds about 7% at h = 2^-10 (the sum is 3.06 against a continuum value of 17.67)",
)
def test_capacity_refinement_stable():
    rho = PowerEnvelope(0.3)
    coarse = capacity_integral(build_lebesgue([[0.0, 1.0]], 2.0**-10), rho)
    fine = capacity_integral(build_lebesgue([[0.0, 1.0]], 2.0**-11), rho)
    assert math.isfinite(coarse)
    assert abs(fine - coarse) <= 0.05 * coarse


def test_capacity_refinement_increases_toward_continuum():
    rho = PowerEnvelope(0.3)
    sums = [capacity_integral(build_lebesgue([[0.0, 1.0]], 2.0**-k), rho) for k in (8, 9, 10, 11)]
    assert np.all(np.diff(sums) > 0)
    assert sums[-1] < _lebesgue_pair_limit(rho)
    # the increment per halving matches the diagonal strip it uncovers
    u0, u1 = 10 * math.log(2), 11 * math.log(2)
    strip, _ = integrate.quad(lambda u: 2 * math.exp(-(u**0.3)), u0, u1)
    assert sums[3] - sums[2] == pytest.approx(strip, rel=0.1)


def test_capacity_refinement_stable_for_fast_envelope():
    rho = PowerEnvelope(0.7)
    coarse = capacity_integral(build_lebesgue([[0.0, 1.0]], 2.0**-10), rho)
    fine = capacity_integral(build_lebesgue([[0.0, 1.0]], 2.0**-11), rho)
    assert abs(fine - coarse) <= 0.05 * coarse
    assert fine == pytest.approx(_lebesgue_pair_limit(rho), rel=0.05)


@settings(max_examples=20, deadline=None)
@given(
    xs=st.lists(st.floats(-2, 2), min_size=2, max_size=15, unique=True),
    shift=st.floats(-5, 5),
    seed=st.integers(0, 1000),
)
def test_capacity_translation_and_relabel_invariant(xs, shift, seed):
    xs = np.asarray(xs)
    if np.min(np.diff(np.sort(xs))) < 1e-6:
        return
    w = np.linspace(0.5, 1.5, xs.size)
    rho = PowerEnvelope(0.3)
    base = ReferenceMeasure(xs, w, [[-2, 2]], "test")
    perm = np.random.default_rng(seed).permutation(xs.size)
    moved = ReferenceMeasure(xs[perm] + shift, w[perm], [[-2 + shift, 2 + shift]], "test")
    assert capacity_integral(moved, rho) == pytest.approx(capacity_integral(base, rho), rel=1e-6)


# -- Cantor bracket -----------------------------------------------------------


def test_bracket_converges_above_threshold():
    assert 1.5 > math.log(2) ** -0.5
    br = cantor_capacity_bounds(sqrt_schedule(0.5), 1.5)
    assert br.converged and br.in_family
    assert 0 < br.lower <= br.upper < math.inf


def test_bracket_diverges_without_weight():
    br = cantor_capacity_bounds(sqrt_schedule(0.5), 0.0)
    assert not br.converged


def test_bracket_flags_schedules_outside_sqrt_family():
    assert not cantor_capacity_bounds(PowerEnvelope(0.3, scale=0.5), 1.5).in_family


def test_atomised_capacity_inside_bracket():
    sched = sqrt_schedule(0.5)
    alpha = 1.5
    mu = build_cantor(CantorSpec(sched, 10))
    cap = capacity_integral(mu, PowerEnvelope(0.5, scale=alpha * 0.5))
    br = cantor_capacity_bounds(sched, alpha)
    lo, hi = br.partial(10)
    assert lo <= cap <= hi


def test_atomised_level_terms_inside_level_bracket():
    # pairs separating at each level lie between the level bounds
    sched = sqrt_schedule(0.5)
    alpha = 1.5
    rho = PowerEnvelope(0.5, scale=alpha * 0.5)
    mu = build_cantor(CantorSpec(sched, 6))
    br = cantor_capacity_bounds(sched, alpha, n_max=6)
    x = mu.points[:, 0]
    idx = np.arange(64)
    for n in range(1, 7):
        # atoms i, j first separate at level n when their indices differ first in bit 6 - n
        same_parent = (idx[:, None] >> (7 - n)) == (idx[None, :] >> (7 - n))
        differ = (idx[:, None] >> (6 - n)) != (idx[None, :] >> (6 - n))
        mask = same_parent & differ
        r = np.abs(x[:, None] - x[None, :])[mask]
        term = np.sum(np.exp(-np.log(r) - rho(-np.log(r)))) / 64**2
        assert br.lower_terms[n - 1] <= term <= br.upper_terms[n - 1]


# -- regular part -------------------------------------------------------------


def test_restrict_infinite_threshold_is_identity():
    mu = build_cantor(CantorSpec(sqrt_schedule(0.5), 6))
    assert restrict_to_regular_part(mu, PowerEnvelope(0.3), math.inf) is mu


def test_restrict_zero_threshold_keeps_isolated_atoms():
    mu = ReferenceMeasure([[0.0], [0.1], [3.0]], [1.0, 1.0, 1.0], [[0.0, 3.0]], "test")
    kept = restrict_to_regular_part(mu, PowerEnvelope(0.3), 0.0)
    np.testing.assert_array_equal(kept.points[:, 0], [3.0])


def test_restrict_mass_increases_with_threshold():
    mu = build_cantor(CantorSpec(sqrt_schedule(0.5), 10))
    rho = PowerEnvelope(0.5, scale=0.25)
    pot = local_potential(mu, rho)
    probes = np.quantile(pot, [0.1, 0.3, 0.5, 0.7, 0.9])
    masses = [restrict_to_regular_part(mu, rho, t).total_mass for t in probes]
    assert np.all(np.diff(masses) > 0)
    caps = [capacity_integral(restrict_to_regular_part(mu, rho, t), rho) for t in probes]
    assert np.all(np.asarray(caps) <= capacity_integral(mu, rho))


def test_measure_spec_and_csv(tmp_path):
    mu = measure_from_spec({"scheme": "cantor", "level": 3, "schedule": {"kind": "power", "gamma": 1.0, "scale": 0.1}})
    assert mu.n_atoms == 8
    path = tmp_path / "atoms.csv"
    mu.to_csv(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 0], mu.points[:, 0])
    np.testing.assert_array_equal(data[:, 1], mu.weights)
    with pytest.raises(ValidationError):
        measure_from_spec({"scheme": "sierpinski"})
