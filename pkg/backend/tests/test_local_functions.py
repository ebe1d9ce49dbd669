"""
Unit tests for truth-table local functions and exact generator application.
"""
import numpy as np
import pytest

from app.core.exceptions import ContractViolationError
from app.services.lattice_model import Configuration
from app.services.local_functions import (
    LocalFunction,
    apply_collision,
    apply_collision_projection,
    apply_exchange,
    apply_generator,
    collision_phi,
    random_local_function,
    state_matrix,
)


def random_pairs(model, torus, rng, count=10):
    return [
        (random_local_function(model, torus, rng), random_local_function(model, torus, rng))
        for _ in range(count)
    ]


# ============================================================
# TRUTH TABLE TESTS
# ============================================================

class TestTruthTables:
    """Tests for construction, evaluation and algebra."""

    def test_state_matrix_bit_order(self):
        states = state_matrix(3)
        assert states.shape == (8, 3)
        assert states[6].tolist() == [0, 1, 1]

    def test_table_size_checked(self, axes_model, small_torus):
        with pytest.raises(ContractViolationError):
            LocalFunction(axes_model, small_torus, [0, 1], [0.0, 1.0])

    def test_repeated_bits_rejected(self, axes_model, small_torus):
        with pytest.raises(ContractViolationError):
            LocalFunction(axes_model, small_torus, [3, 3], [0.0] * 4)

    def test_occupation_evaluates_bit(self, axes_model, small_torus):
        f = LocalFunction.occupation(axes_model, small_torus, (1, 2), 3)
        config = Configuration.from_particles(axes_model, small_torus, [((1, 2), 3)])

        assert f.evaluate(config) == 1.0
        assert f.evaluate(Configuration.empty(axes_model, small_torus)) == 0.0

    def test_from_callable_matches_evaluate(self, axes_model, small_torus):
        points = [((0, 0), 0), ((1, 0), 0)]
        f = LocalFunction.from_callable(
            axes_model, small_torus, points, lambda bits: 3 * bits[((0, 0), 0)] - bits[((1, 0), 0)]
        )
        config = Configuration.from_particles(axes_model, small_torus, [((0, 0), 0), ((1, 0), 0)])
        assert f.evaluate(config) == 2.0

    def test_evaluate_many_matches_evaluate(self, cube_model, small_torus, rng):
        f = random_local_function(cube_model, small_torus, rng, n_bits=5)
        batch = rng.integers(0, 2, size=(6, small_torus.n_sites * 4)).astype(np.uint8)
        expected = [f.evaluate(Configuration(cube_model, small_torus, row)) for row in batch]
        assert f.evaluate_many(batch).tolist() == expected

    def test_product_of_centered_occupations(self, axes_model, small_torus):
        a = LocalFunction.centered_occupation(axes_model, small_torus, (0, 0), 0)
        b = LocalFunction.centered_occupation(axes_model, small_torus, (0, 1), 0)
        product = a * b

        assert product.expectation() == 0.0
        assert product.inner(product) == 1.0 / 16.0

    def test_shift_wraps_around(self, axes_model, small_torus):
        f = LocalFunction.occupation(axes_model, small_torus, (3, 3), 1)
        shifted = f.shift((1, 1))
        assert shifted.points == [((0, 0), 1)]

    def test_on_bits_requires_superset(self, axes_model, small_torus):
        f = LocalFunction.occupation(axes_model, small_torus, (0, 0), 0)
        with pytest.raises(ContractViolationError):
            f.on_bits([1, 2])


# ============================================================
# GENERATOR TESTS
# ============================================================

class TestGenerators:
    """Exact identities of the exclusion and collision generators at lambda = 0."""

    def test_stationarity(self, any_model, small_torus, rng):
        for f, _ in random_pairs(any_model, small_torus, rng):
            assert abs(apply_generator(f).expectation()) <= 1e-12

    def test_collision_generator_is_symmetric(self, any_model, small_torus, rng):
        for f, g in random_pairs(any_model, small_torus, rng):
            assert g.inner(apply_collision(f)) == pytest.approx(apply_collision(g).inner(f), abs=1e-12)

    def test_exchange_adjoint_reverses_drift(self, any_model, small_torus, rng):
        for f, g in random_pairs(any_model, small_torus, rng):
            lhs = g.inner(apply_exchange(f))
            rhs = apply_exchange(g, adjoint=True).inner(f)
            assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_drift_couples_degree_one_to_degree_two(self, axes_model, small_torus):
        """The asymmetric part of L maps xi_y to (e.v) xi_y xi_{y+e}."""
        f = LocalFunction.centered_occupation(axes_model, small_torus, (1, 0), 0)
        g = f * LocalFunction.centered_occupation(axes_model, small_torus, (2, 0), 0)

        assert g.inner(apply_exchange(f)) == 1.0 / 16.0
        assert apply_exchange(g).inner(f) == -1.0 / 16.0

    def test_exchange_moves_single_particle(self, axes_model, small_torus):
        """L eta(x, v) = sum_e p(e, v) [eta(x - e, v)(1 - eta(x, v)) - eta(x, v)(1 - eta(x + e, v))]."""
        f = LocalFunction.occupation(axes_model, small_torus, (1, 1), 0)
        lf = apply_exchange(f)
        behind = Configuration.from_particles(axes_model, small_torus, [((0, 1), 0)])
        here = Configuration.from_particles(axes_model, small_torus, [((1, 1), 0)])

        assert lf.evaluate(behind) == 1.5
        assert lf.evaluate(here) == -4.0

    def test_collision_on_opposite_pair(self, axes_model, small_torus):
        f = LocalFunction.occupation(axes_model, small_torus, (0, 0), 0)
        config = Configuration.from_particles(axes_model, small_torus, [((0, 0), 0), ((0, 0), 2)])
        # Four quadruples empty velocity 0 at rate one each
        assert apply_collision(f).evaluate(config) == -4.0


# ============================================================
# COLLISION PIECE TESTS
# ============================================================

class TestCollisionPieces:
    """Tests for phi_1, phi_3 and the projected collision operators."""

    def test_phi_degrees(self, axes_model):
        states = state_matrix(4)
        quadruple = axes_model.collisions[0]
        phi1 = collision_phi(states, range(4), quadruple, 1)
        phi3 = collision_phi(states, range(4), quadruple, 3)

        assert phi1.mean() == 0.0
        assert float(np.mean(phi1 * phi3)) == 0.0
        with pytest.raises(ContractViolationError):
            collision_phi(states, range(4), quadruple, 2)

    def test_projection_kills_degree_two(self, axes_model, small_torus):
        a = LocalFunction.centered_occupation(axes_model, small_torus, (0, 0), 0)
        b = LocalFunction.centered_occupation(axes_model, small_torus, (0, 0), 2)
        projected = apply_collision_projection(a * b, degree=1)
        assert np.abs(projected.values).max() == 0.0

    def test_projection_is_negative_semidefinite(self, any_model, small_torus, rng):
        for f, _ in random_pairs(any_model, small_torus, rng):
            assert f.inner(apply_collision_projection(f, degree=1)) <= 1e-12
            assert f.inner(apply_collision_projection(f, degree=3)) <= 1e-12
