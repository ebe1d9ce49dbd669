"""
Tests for momentum-space evaluations: dispersion, sigma transform, bound integrals
and the dispersion exponent fixed point.
"""
import math

import numpy as np
import pytest

from app.core.exceptions import ContractViolationError, DegenerateSpecError
from app.services.hierarchy_service import HierarchyService
from app.services.lattice_model import Torus
from app.services.spectral_bound_service import (
    MomentumGrid,
    bound_constant,
    bound_integral,
    bound_profile,
    bound_rows,
    default_u_grid,
    degree2_resolvent_fourier,
    degree3_lower_bound,
    dispersion,
    dispersion_fixed_point,
    dispersion_integral,
    fitted_exponent,
    geometric_lambdas,
    projected_sigma_norm,
    q2_matrix,
    resolvent_block_floor,
    sigma_fourier,
    zero_mode_projection,
)


# ============================================================
# DISPERSION AND GRID TESTS
# ============================================================

class TestDispersion:
    """Tests for W(p) and momentum grids."""

    def test_corner_and_origin(self):
        assert dispersion((math.pi, math.pi)) == 4.0
        assert dispersion((0.0, 0.0)) == 0.0

    def test_array_input(self):
        values = dispersion(np.array([[0.0, math.pi], [math.pi / 2, 0.0]]))
        assert values.tolist() == pytest.approx([2.0, 1.0])

    @pytest.mark.parametrize("n", [0, 1, 5])
    def test_grid_needs_even_size(self, n):
        with pytest.raises(ContractViolationError):
            MomentumGrid(n)

    def test_grid_weights_cover_torus(self):
        grid = MomentumGrid(6)
        assert grid.points.shape == (36, 2)
        assert grid.weights.sum() == pytest.approx((2.0 * math.pi) ** 2)
        assert dispersion(grid.points).min() == 0.0


# ============================================================
# SIGMA TRANSFORM TESTS
# ============================================================

class TestSigmaTransform:
    """Tests for sigma_hat and the projected constant."""

    @pytest.mark.parametrize("symmetric", [False, True])
    def test_zero_momentum_value(self, axes_model, mass_current_spec, symmetric):
        matrix = sigma_fourier(mass_current_spec, axes_model, symmetric=symmetric)
        assert matrix[0, 0] == pytest.approx(2.0)
        assert matrix[2, 2] == pytest.approx(-2.0)
        assert matrix[0, 1] == 0.0

    def test_pinned_convention_at_corner(self, axes_model, mass_current_spec):
        matrix = sigma_fourier(mass_current_spec, axes_model, p=(math.pi, 0.0))
        assert abs(matrix[0, 0]) == pytest.approx(0.0, abs=1e-12)

    def test_zero_mode_projection(self, axes_model, mass_current_spec):
        projection = zero_mode_projection(mass_current_spec, axes_model)
        assert projection[0, 1] == pytest.approx(4.0)
        assert projection[0, 0] == pytest.approx(0.0)

    def test_degenerate_spec_rejected(self, axes_model, degenerate_spec):
        with pytest.raises(DegenerateSpecError):
            zero_mode_projection(degenerate_spec, axes_model)

    def test_projected_norm_and_constant(self, axes_model, mass_current_spec):
        assert projected_sigma_norm(mass_current_spec, axes_model) == pytest.approx(2.0)
        assert bound_constant(mass_current_spec, axes_model) == pytest.approx(1.0 / (32.0 * math.pi ** 2))


# ============================================================
# DEGREE-TWO FOURIER TESTS
# ============================================================

class TestDegreeTwoFourier:
    """Tests for the momentum-space degree-2 resolvent."""

    def test_q2_is_symmetric_and_nonpositive(self, cube_model):
        q2 = q2_matrix(cube_model)
        assert q2.shape == (16, 16)
        assert np.allclose(q2, q2.T)
        assert np.linalg.eigvalsh(q2).max() <= 1e-12

    def test_block_floor_is_lambda(self, cube_model):
        assert resolvent_block_floor(cube_model, MomentumGrid(6), 0.3) == pytest.approx(0.3)

    @pytest.mark.parametrize("lam", [1.0, 0.1, 0.01])
    def test_matches_class_space_solve(self, any_model, mass_current_spec, lam):
        fourier = degree2_resolvent_fourier(mass_current_spec, lam, MomentumGrid(6), any_model)
        service = HierarchyService(any_model, Torus(6), hardcore=False, collision="Qn")
        direct = service.spec_resolvent(mass_current_spec, lam, 2).value
        assert fourier == pytest.approx(direct, rel=1e-8)

    def test_nonpositive_lambda(self, axes_model, mass_current_spec):
        with pytest.raises(ContractViolationError):
            degree2_resolvent_fourier(mass_current_spec, 0.0, MomentumGrid(4), axes_model)


# ============================================================
# BOUND INTEGRAL TESTS
# ============================================================

class TestBoundIntegral:
    """Tests for the degree-3 lower-bound integral and its profile."""

    @pytest.mark.parametrize("lam,c1,epsilon", [
        (0.0, 1.0, 1.0),
        (1.0, 1.0, 1.0),
        (0.1, -1.0, 1.0),
        (0.1, 1.0, 0.0),
        (0.1, 1.0, 4.0),
    ])
    def test_contract(self, lam, c1, epsilon):
        with pytest.raises(ContractViolationError):
            bound_integral(lam, c1, epsilon)

    def test_grows_as_lambda_shrinks(self):
        values = [bound_integral(lam, 1.0, 1.0) for lam in (1e-2, 1e-3, 1e-6)]
        assert 0 < values[0] < values[1] < values[2]

    def test_log_term_reduces_integral(self):
        assert bound_integral(1e-3, 1.0, 1.0) < bound_integral(1e-3, 0.0, 1.0)

    def test_radial_agrees_with_planar_quadrature(self):
        # Raises AccuracyError above 5% disagreement
        assert bound_integral(1e-3, 1.0, math.pi, check=True) > 0

    def test_lower_bound_scales_with_constant(self, axes_model, mass_current_spec):
        value = degree3_lower_bound(mass_current_spec, 1e-3, 1.0, 1.0, axes_model)
        expected = bound_constant(mass_current_spec, axes_model) * bound_integral(1e-3, 1.0, 1.0)
        assert value == pytest.approx(expected)

    def test_geometric_lambdas(self):
        assert geometric_lambdas(1e-2, 1e-4, 3) == pytest.approx([1e-2, 1e-3, 1e-4])
        with pytest.raises(ContractViolationError):
            geometric_lambdas(1e-4, 1e-2, 3)
        with pytest.raises(ContractViolationError):
            geometric_lambdas(1e-2, 1e-4, 1)

    def test_profile_follows_log_log(self, cube_model, mass_current_spec):
        lambdas = geometric_lambdas(1e-6, 1e-30, 9)
        profile = bound_profile(mass_current_spec, cube_model, lambdas, c1=1.0, epsilon=1.0)
        loglog, log = profile.fit("loglog"), profile.fit("log")

        assert all(b > a for a, b in zip(profile.values, profile.values[1:]))
        assert loglog.slope > 0
        assert loglog.relative_residual < 0.05
        assert len(bound_rows(profile)) == 9

    def test_control_without_log_term_grows_like_log(self, cube_model, mass_current_spec):
        lambdas = geometric_lambdas(1e-6, 1e-30, 9)
        profile = bound_profile(mass_current_spec, cube_model, lambdas, c1=0.0, epsilon=1.0)
        assert profile.fit("log").relative_residual < profile.fit("loglog").relative_residual


# ============================================================
# DISPERSION EXPONENT TESTS
# ============================================================

class TestDispersionExponent:
    """Tests for the self-consistent exponent iteration."""

    def test_integral_without_log_correction(self):
        # kappa = 0 makes the integrand 1/2 in s = log(u + W)
        expected = math.pi * math.log1p(0.5 / 1e-6)
        assert dispersion_integral(1e-6, 0.0, 1.0) == pytest.approx(expected, rel=1e-8)

    def test_default_grid_spans_eight_decades(self):
        grid = default_u_grid()
        assert grid[0] == pytest.approx(1e-12)
        assert grid[-1] == pytest.approx(1e-4)
        assert len(grid) == 33

    @pytest.mark.parametrize("kappa", [0.3, 0.7])
    def test_fit_returns_input_exponent(self, kappa):
        # the slope is 2 pi / (1 + ell^kappa) up to the upper-limit term, so kappa -> 1 - kappa
        alpha, residual = fitted_exponent(kappa, default_u_grid(), 1.0)
        assert alpha == pytest.approx(kappa, abs=0.02)
        assert residual < 0.01

    def test_converges_to_one_half(self):
        trace = dispersion_fixed_point(max_iter=6)
        assert abs(trace.kappa - 0.5) <= 0.05
        assert len(trace.iterations) == 6
        assert trace.iterations[0].kappa_in == 0.0

    @pytest.mark.parametrize("grid", [
        [1e-10, 1e-4],
        [1e-12, 1e-1],
        [0.0, 1e-4],
    ])
    def test_rejects_bad_grids(self, grid):
        with pytest.raises(ContractViolationError):
            dispersion_fixed_point(u_grid=grid)

    def test_needs_an_iteration(self):
        with pytest.raises(ContractViolationError):
            dispersion_fixed_point(max_iter=0)
