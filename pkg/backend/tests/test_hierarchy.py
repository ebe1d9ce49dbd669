"""
Tests for truncated resolvents of the dual hierarchy.
"""
import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from app.core.exceptions import ContractViolationError, UnknownOperatorError
from app.services.dual_algebra import SetFunction, transform
from app.services.equilibrium_service import sigma_observable
from app.services.hierarchy_service import (
    HierarchyService,
    compare_hardcore_removed,
    get_hierarchy_service,
    interleaving_values,
)
from app.services.lattice_model import UNIT_VECTORS, Torus


@pytest.fixture
def service(axes_model, small_torus) -> HierarchyService:
    return get_hierarchy_service(axes_model, small_torus)


def pair_current(model, torus) -> SetFunction:
    """Mass current along e1 written out by hand on one pair per velocity."""
    e1 = tuple(UNIT_VECTORS[0])
    return SetFunction.from_points(
        model, torus, {(((0, 0), 0), (e1, 0)): 1.0, (((0, 0), 2), (e1, 2)): -1.0}
    )


# ============================================================
# DEGREE-TWO TESTS
# ============================================================

class TestDegreeTwo:
    """Tests for the n = 2 truncation."""

    def test_sigma_vector_norm(self, service, mass_current_spec):
        sigma_hat = service.symmetrized(service.sigma_vector(mass_current_spec), 2)
        assert float(sigma_hat @ sigma_hat) == pytest.approx(1.0 / 8.0)

    def test_matches_direct_solve(self, service, mass_current_spec):
        lam = 0.5
        sigma_hat = service.symmetrized(service.sigma_vector(mass_current_spec), 2)
        direct = float(sigma_hat @ spsolve(service.level(2).shifted(lam).tocsc(), sigma_hat))

        result = service.spec_resolvent(mass_current_spec, lam, 2)
        assert result.value == pytest.approx(direct, rel=1e-8)
        assert result.class_counts == {"2": 2016}
        assert result.method == "schur"

    def test_large_lambda_expansion(self, service, mass_current_spec):
        """(lambda + G)^-1 = 1/lambda - G/lambda^2 + O(lambda^-3)."""
        lam = 1e4
        sigma_hat = service.symmetrized(service.sigma_vector(mass_current_spec), 2)
        norm = float(sigma_hat @ sigma_hat)
        quadratic = float(sigma_hat @ (service.level(2).generator @ sigma_hat))

        value = service.spec_resolvent(mass_current_spec, lam, 2).value
        assert abs(value - (norm / lam - quadratic / lam ** 2)) <= 1e-4 * norm / lam
        assert value == pytest.approx(norm / lam, rel=1e-2)

    def test_generator_block_is_positive(self, service):
        generator = service.level(2).generator
        assert abs(generator - generator.T).max() <= 1e-12
        trial = np.random.default_rng(1).standard_normal(generator.shape[0])
        assert float(trial @ (generator @ trial)) >= 0.0

    def test_value_decreases_with_lambda(self, service, mass_current_spec):
        values = [service.spec_resolvent(mass_current_spec, lam, 2).value for lam in (0.1, 0.5, 2.0)]
        assert values[0] > values[1] > values[2] > 0


# ============================================================
# DEEPER TRUNCATION TESTS
# ============================================================

class TestDeeperTruncations:
    """Tests for n = 3 and the interleaving of truncations."""

    def test_three_below_two(self, service, mass_current_spec):
        t2 = service.spec_resolvent(mass_current_spec, 0.5, 2).value
        t3 = service.spec_resolvent(mass_current_spec, 0.5, 3).value
        assert 0 < t3 <= t2

    def test_schur_matches_coupled(self, service, mass_current_spec):
        schur = service.spec_resolvent(mass_current_spec, 0.5, 3, method="schur").value
        coupled = service.spec_resolvent(mass_current_spec, 0.5, 3, method="coupled").value
        assert schur == pytest.approx(coupled, rel=1e-7)

    def test_variational_bound(self, service, mass_current_spec):
        lam = 0.5
        t3 = service.spec_resolvent(mass_current_spec, lam, 3).value
        sigma = service.spec_sigma(mass_current_spec)
        rough = service.solution_function(sigma, lam, 2)
        optimal = service.solution_function(sigma, lam, 3)

        assert service.variational_value(sigma, lam, rough) <= t3 + 1e-10
        assert service.variational_value(sigma, lam, optimal) == pytest.approx(t3, rel=1e-6)

    @pytest.mark.slow
    def test_interleaving_to_degree_four(self, axes_model, small_torus, mass_current_spec):
        values = interleaving_values(mass_current_spec, axes_model, small_torus, 0.5)
        slack = 1e-9 * max(values.values())
        assert values[3] <= values[4] + slack
        assert values[4] <= values[2] + slack

    def test_hardcore_and_removed(self, cube_model, small_torus, mass_current_spec):
        comparison = compare_hardcore_removed(mass_current_spec, cube_model, small_torus, 0.5)
        assert comparison["hardcore"] > 0
        assert comparison["removed"] > 0
        assert comparison["ratio"] == pytest.approx(comparison["hardcore"] / comparison["removed"])


# ============================================================
# CONTRACT TESTS
# ============================================================

class TestContracts:
    """Tests for argument validation."""

    def test_nonpositive_lambda(self, service, mass_current_spec):
        with pytest.raises(ContractViolationError):
            service.spec_resolvent(mass_current_spec, 0.0, 2)

    def test_degree_below_two(self, service, mass_current_spec):
        with pytest.raises(ContractViolationError):
            service.spec_resolvent(mass_current_spec, 0.5, 1)

    def test_unknown_method(self, service, mass_current_spec):
        with pytest.raises(UnknownOperatorError):
            service.spec_resolvent(mass_current_spec, 0.5, 2, method="gmres")

    def test_unknown_collision_variant(self, axes_model):
        with pytest.raises(UnknownOperatorError):
            HierarchyService(axes_model, Torus(4), collision="Lc2")

    def test_services_are_shared(self, axes_model):
        assert get_hierarchy_service(axes_model, Torus(4)) is get_hierarchy_service(axes_model, Torus(4))


# ============================================================
# SET FUNCTION INPUT TESTS
# ============================================================

class TestSetFunctionInput:
    """Tests for resolvents of observables given as set functions."""

    def test_hand_built_pair_current(self, service, axes_model, small_torus, mass_current_spec):
        sigma = pair_current(axes_model, small_torus)
        for n in (2, 3):
            value = service.truncated_resolvent(sigma, 0.5, n).value
            assert value == pytest.approx(service.spec_resolvent(mass_current_spec, 0.5, n).value, rel=1e-10)

    def test_transformed_local_observable(self, service, axes_model, small_torus, mass_current_spec):
        sigma = transform(sigma_observable(mass_current_spec, axes_model, small_torus))
        result = service.truncated_resolvent(sigma, 0.5, 2)

        assert result.sigma_norm == pytest.approx(1.0 / 8.0)
        assert result.value == pytest.approx(service.spec_resolvent(mass_current_spec, 0.5, 2).value, rel=1e-10)

    def test_scaling_is_quadratic(self, service, axes_model, small_torus):
        sigma = pair_current(axes_model, small_torus)
        single = service.truncated_resolvent(sigma, 0.5, 2).value
        assert service.truncated_resolvent(sigma.scale(3.0), 0.5, 2).value == pytest.approx(9.0 * single)

    def test_variational_value_takes_set_functions(self, service, axes_model, small_torus):
        sigma = pair_current(axes_model, small_torus)
        t3 = service.truncated_resolvent(sigma, 0.5, 3).value
        trial = service.solution_function(sigma, 0.5, 3)
        assert service.variational_value(sigma, 0.5, trial) == pytest.approx(t3, rel=1e-6)

    @pytest.mark.parametrize("extra_key", [(5,), (0, 16, 33)])
    def test_off_degree_support_rejected(self, service, axes_model, small_torus, extra_key):
        values = dict(pair_current(axes_model, small_torus).values)
        values[extra_key] = 0.25
        sigma = SetFunction(axes_model, small_torus, values)

        with pytest.raises(ContractViolationError) as exc_info:
            service.truncated_resolvent(sigma, 0.5, 2)
        assert f"[{len(extra_key)}]" in exc_info.value.message

    def test_other_torus_rejected(self, service, axes_model):
        sigma = pair_current(axes_model, Torus(5))
        with pytest.raises(ContractViolationError):
            service.truncated_resolvent(sigma, 0.5, 2)


# ============================================================
# INTERLEAVING AT L = 6
# ============================================================

class TestInterleavingSixTorus:
    """T_3 <= T_4 <= T_2 on the 6 x 6 torus of the bundled interleaving run."""

    @pytest.mark.slow
    @pytest.mark.parametrize("lam", [1.0, 0.1])
    def test_odd_below_even(self, axes_model, mass_current_spec, lam):
        values = interleaving_values(mass_current_spec, axes_model, Torus(6), lam, degrees=(2, 3, 4))
        slack = 1e-9 * max(values.values())

        assert values[3] <= values[4] + slack
        assert values[4] <= values[2] + slack
