import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from communitypoll.census import MarginalTable
from communitypoll.errors import DomainError
from communitypoll.ipf import IpfConfig, fit_arrays, ipf_fit, normalize_targets


def reference_ipf(seed, targets, iterations):
    """Plain dense IPF, one full sweep per iteration."""
    x = np.asarray(seed, dtype=float)
    x = x / x.sum()
    for _ in range(iterations):
        for d, t in enumerate(targets):
            axes = tuple(a for a in range(x.ndim) if a != d)
            m = x.sum(axis=axes)
            ratio = np.divide(t, m, out=np.zeros_like(t), where=m > 0)
            shape = [1] * x.ndim
            shape[d] = -1
            x = x * ratio.reshape(shape)
    return x


def test_two_by_two_product():
    joint = fit_arrays([[0.6, 0.4], [0.7, 0.3]])
    np.testing.assert_allclose(joint.to_dense(), [[0.42, 0.18], [0.28, 0.12]], atol=1e-12)
    assert joint.converged and joint.iterations == 1


def test_uniform_targets_are_a_fixed_point():
    joint = fit_arrays([[2, 2, 2], [3, 3]])
    np.testing.assert_allclose(joint.to_dense(), np.full((3, 2), 1 / 6), atol=1e-15)
    assert joint.iterations == 1


def test_counts_and_probabilities_agree():
    a = fit_arrays([[60, 40], [70, 30]]).to_dense()
    b = fit_arrays([[0.6, 0.4], [0.7, 0.3]]).to_dense()
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_three_dimensional_seed_matches_reference():
    rng = np.random.default_rng(3)
    seed = rng.random((2, 2, 2)) + 0.1
    targets = [np.array([0.3, 0.7]), np.array([0.55, 0.45]), np.array([0.2, 0.8])]
    joint = fit_arrays(targets, IpfConfig(max_iterations=10), initial=seed)
    expected = reference_ipf(seed, targets, joint.iterations)
    np.testing.assert_allclose(joint.to_dense(), expected, atol=1e-12)
    for d, t in enumerate(targets):
        np.testing.assert_allclose(joint.marginal(d), t, atol=1e-9)


def test_per_update_callback_sees_each_dimension():
    seen = []
    fit_arrays([[0.5, 0.5], [0.2, 0.8]], on_update=lambda k, d, w: seen.append((k, d)))
    assert seen == [(1, 0), (1, 1)]


def test_product_form_equals_cell_form():
    targets = [np.array([0.1, 0.2, 0.7]), np.array([0.4, 0.6]), np.array([0.25, 0.25, 0.5])]
    cells = fit_arrays(targets)
    product = fit_arrays(targets, dense_limit=1)
    assert product.is_product and not cells.is_product
    np.testing.assert_allclose(product.to_dense(), cells.to_dense(), atol=1e-15)


def test_zero_target_cells_get_no_mass():
    joint = fit_arrays([[0.5, 0.0, 0.5], [0.3, 0.7]])
    assert np.all(joint.to_dense()[1] == 0)


@pytest.mark.parametrize("targets", [
    [[0.5, -0.1, 0.6], [0.5, 0.5]],
    [[0.5, 0.5], [0.3, 0.3]],
    [[0.0, 0.0], [0.0, 0.0]],
    [[float("nan"), 1.0], [0.5, 0.5]],
])
def test_invalid_targets_raise(targets):
    with pytest.raises(DomainError):
        normalize_targets(targets)


def test_seed_without_allowed_mass_raises():
    with pytest.raises(DomainError):
        fit_arrays([[1.0, 0.0], [0.5, 0.5]], initial=np.array([[0.0, 0.0], [1.0, 1.0]]))


def test_seed_shape_mismatch():
    with pytest.raises(DomainError, match="shape"):
        fit_arrays([[0.5, 0.5], [0.5, 0.5]], initial=np.ones((3, 2)))


def test_config_validation():
    with pytest.raises(DomainError):
        IpfConfig(max_iterations=0)
    with pytest.raises(DomainError):
        IpfConfig(epsilon=0)


def test_tables_with_different_universes():
    persons = MarginalTable.from_counts("sex", ("Male", "Female"), (500, 500))
    households = MarginalTable.from_counts("vehicles", ("0", "1+"), (20, 80))
    joint = ipf_fit([persons, households])
    np.testing.assert_allclose(joint.marginal(1), [0.2, 0.8])
    assert joint.dimensions == ("sex", "vehicles")


def test_large_problem_uses_product_form(taylor_tables):
    from communitypoll.population import CensusTargets
    joint = ipf_fit(CensusTargets.from_tables(taylor_tables).ipf)
    assert joint.converged and joint.iterations == 1
    assert joint.marginal_deviation() < 1e-9
    assert joint.total() == pytest.approx(1.0)


prob_vector = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5).map(lambda v: np.array(v) / sum(v))


@settings(max_examples=60, deadline=None)
@given(st.lists(prob_vector, min_size=2, max_size=3), st.integers(0, 2**32 - 1))
def test_fit_matches_targets_and_preserves_mass(targets, seed):
    shape = tuple(len(t) for t in targets)
    initial = np.random.default_rng(seed).random(shape) + 0.05
    joint = fit_arrays(targets, IpfConfig(max_iterations=200, epsilon=1e-10), initial=initial)
    assert joint.total() == pytest.approx(1.0, abs=1e-12)
    assert np.all(joint.to_dense() >= 0)
    if joint.converged:
        for d, t in enumerate(targets):
            np.testing.assert_allclose(joint.marginal(d), t, atol=1e-9)
    np.testing.assert_allclose(joint.to_dense(), reference_ipf(initial, targets, joint.iterations), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.lists(prob_vector, min_size=1, max_size=4))
def test_uniform_seed_converges_to_outer_product(targets):
    joint = fit_arrays(targets)
    expected = np.ones(())
    for t in targets:
        expected = np.multiply.outer(expected, t)
    np.testing.assert_allclose(joint.to_dense(), expected, atol=1e-12)
    assert joint.iterations == 1
