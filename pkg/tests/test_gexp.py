"""Tests for cylinder-functional expectations: the nested backward
recursion, conditioning, and the L^p seminorm.

The two-date cases are checked against single-solve reductions that hold
because increments are stationary and independent under the band: a payoff
of B_T - B_s alone must price identically to the same payoff of B_{T-s}.
"""

import numpy as np
import pytest

from gbrownian import (
    CapabilityError,
    CylinderFunctional,
    DomainError,
    GParams,
    SpaceGrid,
    TimeGrid,
    UsageError,
    conditional_frames,
    conditional_g_expectation,
    g_expectation,
    lp_norm,
)
from gbrownian.errors import ExtrapolationError

import oracles

BAND = GParams(1.0, 2.0)
SPACE = SpaceGrid(-12.0, 12.0, 481)
TIME = TimeGrid(1.0, 1600)

# worst observed disagreement against closed forms on this grid pair is
# ~2e-3 (one-axis) and ~5e-3 (two-axis, one diagonal stitch); tolerances
# below carry roughly 4x headroom
ONE_AXIS_TOL = 8e-3
TWO_AXIS_TOL = 2e-2


def functional_b1_squared():
    return CylinderFunctional(times=(1.0,), payoff=lambda x: x * x,
                              lipschitz_bound=10.0, value_bound=25.0)


class TestGExpectation:
    def test_upper_variance(self):
        assert g_expectation(functional_b1_squared(), BAND, TIME, SPACE) \
            == pytest.approx(4.0, abs=ONE_AXIS_TOL)

    def test_lower_variance(self):
        xi = CylinderFunctional(times=(1.0,), payoff=lambda x: -x * x,
                                lipschitz_bound=10.0, value_bound=25.0)
        assert g_expectation(xi, BAND, TIME, SPACE) \
            == pytest.approx(-1.0, abs=ONE_AXIS_TOL)

    def test_constants_pass_through(self):
        xi = CylinderFunctional(times=(1.0,), payoff=lambda x: np.full_like(x, 2.5),
                                lipschitz_bound=1.0, value_bound=3.0)
        assert g_expectation(xi, BAND, TIME, SPACE) == pytest.approx(2.5, abs=1e-12)

    @pytest.mark.parametrize("psi, lip, vb, expected", [
        (lambda y: y * y, 10.0, 25.0, 2.0),                  # var_hi * (T - s)
        (np.abs, 1.5, 10.0, 1.1283791670955126),             # E|N(0, 2)|
    ])
    def test_pure_increment_reduces_to_single_solve(self, psi, lip, vb, expected):
        # payoff of B_1 - B_{1/2} alone; the two-date recursion must land
        # on the one-date value of psi(B_{1/2})
        xi = CylinderFunctional(times=(0.5, 1.0),
                                payoff=lambda a, b: psi(b),
                                convention="increments",
                                lipschitz_bound=lip, value_bound=vb)
        assert g_expectation(xi, BAND, TIME, SPACE) \
            == pytest.approx(expected, abs=TWO_AXIS_TOL)

    def test_linear_three_date_sum_is_centred(self):
        xi = CylinderFunctional(times=(1 / 3, 2 / 3, 1.0),
                                payoff=lambda a, b, c: a + b + c,
                                lipschitz_bound=1.0, value_bound=60.0)
        sg = SpaceGrid(-7.0, 7.0, 141)
        tg = TimeGrid(1.0, 405)
        assert g_expectation(xi, BAND, tg, sg) == pytest.approx(0.0, abs=0.02)

    def test_four_dates_exceed_capability(self):
        xi = CylinderFunctional(times=(0.25, 0.5, 0.75, 1.0),
                                payoff=lambda a, b, c, d: a + b + c + d,
                                lipschitz_bound=1.0, value_bound=80.0)
        with pytest.raises(CapabilityError):
            g_expectation(xi, BAND, TIME, SPACE)

    def test_horizon_mismatch(self):
        with pytest.raises(UsageError):
            g_expectation(functional_b1_squared(), BAND, TimeGrid(2.0, 3200), SPACE)

    def test_hopeless_grid_is_refused(self):
        with pytest.raises(UsageError):
            g_expectation(functional_b1_squared(), BAND, TIME, SpaceGrid(-0.5, 0.5, 41))

    def test_constant_translation(self):
        base = g_expectation(functional_b1_squared(), BAND, TIME, SPACE)
        xi_c = CylinderFunctional(times=(1.0,), payoff=lambda x: x * x + 3.0,
                                  lipschitz_bound=10.0, value_bound=28.0)
        assert g_expectation(xi_c, BAND, TIME, SPACE) \
            == pytest.approx(base + 3.0, abs=1e-10)

    @pytest.mark.parametrize("phi, psi", [
        (lambda x: x * x, lambda x: -x * x),
        (oracles.butterfly, lambda x: x),
        (np.abs, oracles.butterfly),
    ])
    def test_sublinear_across_functionals(self, phi, psi):
        mk = lambda f: CylinderFunctional(times=(1.0,), payoff=f,
                                          lipschitz_bound=12.0, value_bound=30.0)
        both = CylinderFunctional(times=(1.0,),
                                  payoff=lambda x: phi(x) + psi(x),
                                  lipschitz_bound=24.0, value_bound=60.0)
        e_both = g_expectation(both, BAND, TIME, SPACE)
        e_phi = g_expectation(mk(phi), BAND, TIME, SPACE)
        e_psi = g_expectation(mk(psi), BAND, TIME, SPACE)
        assert e_both <= e_phi + e_psi + 1e-9

    def test_degenerate_band_matches_quadrature(self):
        flat = GParams(1.5, 1.5)
        tg = TimeGrid(1.0, 6400)
        xi = CylinderFunctional(times=(1.0,), payoff=oracles.butterfly,
                                lipschitz_bound=1.0, value_bound=1.0)
        want = oracles.heat_value(oracles.butterfly, 2.25, 1.0, 0.0,
                                  kinks=(-1.0, 0.0, 1.0))
        assert g_expectation(xi, flat, tg, SPACE) == pytest.approx(want, abs=ONE_AXIS_TOL)

    def test_tower_through_the_first_date(self):
        # photograph the two-axis frame at the interior date, stitch its
        # diagonal into a fresh one-date functional, and price that: the
        # value must reproduce the direct two-date expectation
        xi = CylinderFunctional(times=(0.5, 1.0),
                                payoff=lambda a, b: np.abs(b - a),
                                convention="levels",
                                lipschitz_bound=2.0, value_bound=20.0)
        direct = g_expectation(xi, BAND, TIME, SPACE)
        frame = conditional_frames(xi, BAND, SPACE, [0.5], TIME.dt)[0]
        diag = np.einsum("ii->i", frame).copy()
        pts = SPACE.points()
        inner = CylinderFunctional(
            times=(0.5,),
            payoff=lambda x: np.interp(x, pts, diag),
            lipschitz_bound=4.0, value_bound=float(np.max(np.abs(diag))) + 1.0)
        towered = g_expectation(inner, BAND, TimeGrid(0.5, 800), SPACE)
        assert towered == pytest.approx(direct, abs=TWO_AXIS_TOL)


class TestConditional:
    def test_at_time_zero_matches_unconditional(self):
        xi = functional_b1_squared()
        got = conditional_g_expectation(xi, 0.0, (0.0,), BAND, TIME, SPACE)
        assert got == pytest.approx(g_expectation(xi, BAND, TIME, SPACE), abs=1e-12)

    def test_at_the_horizon_evaluates_the_payoff(self):
        xi = functional_b1_squared()
        got = conditional_g_expectation(xi, 1.0, (1.7, 1.7), BAND, TIME, SPACE)
        assert got == pytest.approx(1.7**2, abs=1e-12)

    @pytest.mark.parametrize("b", [0.0, 1.3, -2.0])
    def test_midlife_value_of_the_square(self, b):
        # remaining variance is var_hi * (T - t)
        xi = functional_b1_squared()
        got = conditional_g_expectation(xi, 0.5, (b,), BAND, TIME, SPACE)
        assert got == pytest.approx(b * b + 2.0, abs=ONE_AXIS_TOL)

    @pytest.mark.parametrize("a", [-0.7, 0.0, 0.7])
    def test_observed_prefix_drops_out_of_pure_increments(self, a):
        # payoff |B_1 - B_{1/2}| conditioned at the first date: the already
        # observed value must not move the answer
        xi = CylinderFunctional(times=(0.5, 1.0),
                                payoff=lambda u, v: np.abs(v),
                                convention="increments",
                                lipschitz_bound=1.5, value_bound=10.0)
        got = conditional_g_expectation(xi, 0.5, (a, a), BAND, TIME, SPACE)
        assert got == pytest.approx(1.1283791670955126, abs=TWO_AXIS_TOL)

    def test_prefix_arity_is_checked(self):
        xi = functional_b1_squared()
        with pytest.raises(UsageError):
            conditional_g_expectation(xi, 0.5, (0.0, 0.0), BAND, TIME, SPACE)

    def test_prefix_outside_grid(self):
        xi = functional_b1_squared()
        with pytest.raises(ExtrapolationError):
            conditional_g_expectation(xi, 0.5, (20.0,), BAND, TIME, SPACE)

    def test_conditioning_time_bounds(self):
        xi = functional_b1_squared()
        with pytest.raises(UsageError):
            conditional_g_expectation(xi, 1.5, (0.0,), BAND, TIME, SPACE)


class TestLpNorm:
    def test_constant(self):
        xi = CylinderFunctional(times=(1.0,), payoff=lambda x: np.full_like(x, -2.5),
                                lipschitz_bound=1.0, value_bound=3.0)
        assert lp_norm(xi, 3.0, BAND, TIME, SPACE) == pytest.approx(2.5, abs=1e-9)

    def test_l2_of_the_terminal_level(self):
        xi = CylinderFunctional(times=(1.0,), payoff=lambda x: x,
                                lipschitz_bound=1.0, value_bound=10.0)
        assert lp_norm(xi, 2.0, BAND, TIME, SPACE) == pytest.approx(2.0, rel=0.01)

    def test_l1_of_the_terminal_level(self):
        xi = CylinderFunctional(times=(1.0,), payoff=lambda x: x,
                                lipschitz_bound=1.0, value_bound=10.0)
        want = oracles.normal_abs_moment(1, 2.0)
        assert lp_norm(xi, 1.0, BAND, TIME, SPACE) == pytest.approx(want, rel=0.01)

    def test_absolute_homogeneity(self):
        xi = CylinderFunctional(times=(1.0,), payoff=oracles.butterfly,
                                lipschitz_bound=1.0, value_bound=1.0)
        scaled = CylinderFunctional(times=(1.0,),
                                    payoff=lambda x: -2.0 * oracles.butterfly(x),
                                    lipschitz_bound=2.0, value_bound=2.0)
        assert lp_norm(scaled, 2.0, BAND, TIME, SPACE) == pytest.approx(
            2.0 * lp_norm(xi, 2.0, BAND, TIME, SPACE), rel=1e-9)

    def test_rejects_p_below_one(self):
        xi = functional_b1_squared()
        with pytest.raises(DomainError):
            lp_norm(xi, 0.5, BAND, TIME, SPACE)
