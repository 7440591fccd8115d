import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epprobit.constraints import (
    ConstraintSystem,
    axis_align,
    build_constraints,
    marginalize_model,
    reduce_covariance,
    reduce_reference,
    reduction_matrix,
    untransform_moments,
)
from epprobit.errors import DimensionMismatch, EmptySubset, InvalidOutcome, NotInvolutory
from epprobit.model import ModelKind, ProbitModel, TmvnMoments
from epprobit.simulate import choose
from oracles import random_spd


def test_choice_matrix_example():
    cs = build_constraints(ModelKind.reference(0), 1, 3)
    np.testing.assert_array_equal(cs.a_matrix, [[-1, 1, 0], [0, 1, 0], [0, 1, -1]])
    np.testing.assert_array_equal(cs.lower, np.zeros(3))
    assert np.all(np.isposinf(cs.upper))
    assert cs.involutory and not cs.axis_aligned


def test_multivariate_region():
    cs = build_constraints(ModelKind.multivariate(), [1, 0, 1], 3)
    np.testing.assert_array_equal(cs.a_matrix, np.eye(3))
    np.testing.assert_array_equal(cs.lower, [0, -np.inf, 0])
    np.testing.assert_array_equal(cs.upper, [np.inf, 0, np.inf])
    assert cs.axis_aligned


def test_outside_chosen_is_negative_orthant():
    cs = build_constraints(ModelKind.outside(), None, 3)
    np.testing.assert_array_equal(cs.a_matrix, -np.eye(3))
    assert cs.involutory
    assert cs.contains([-1.0, -0.5, -2.0])
    assert not cs.contains([-1.0, 0.5, -2.0])


@pytest.mark.parametrize("bad", [3, -1, 1.5, True, "a"])
def test_invalid_outcome(bad):
    with pytest.raises(InvalidOutcome):
        build_constraints(ModelKind.outside(), bad, 3)


def test_invalid_multivariate_outcome():
    with pytest.raises(InvalidOutcome):
        build_constraints(ModelKind.multivariate(), [1, 2, 0], 3)
    with pytest.raises(InvalidOutcome):
        build_constraints(ModelKind.multivariate(), [1, 0], 3)


def test_involution_random(rng):
    for _ in range(1000):
        d = int(rng.integers(1, 40))
        j = int(rng.integers(-1, d))
        cs = build_constraints(ModelKind.outside(), None if j < 0 else j, d)
        assert np.abs(cs.a_matrix @ cs.a_matrix - np.eye(d)).max() <= 1e-12


def test_region_matches_argmax_rule(rng):
    kind = ModelKind.outside()
    for d in (1, 2, 4, 6):
        z = rng.normal(size=(4000, d))
        codes = [choose(kind, zi) for zi in z]
        for j in [None, *range(d)]:
            inside = build_constraints(kind, j, d).contains(z)
            expected = np.array([c == j if j is not None else c is None for c in codes])
            np.testing.assert_array_equal(inside, expected)


def test_reduce_reference_rows():
    x = np.arange(12.0).reshape(3, 4) ** 1.5
    red = reduce_reference(x, 2, 0)
    np.testing.assert_allclose(red.x_tilde, [x[1] - x[0], x[2] - x[0]])
    assert red.chosen_reduced == 1
    assert reduce_reference(x, 0, 0).chosen_reduced is None
    red = reduce_reference(x, 2, 1)
    np.testing.assert_allclose(red.x_tilde, [x[0] - x[1], x[2] - x[1]])
    assert red.chosen_reduced == 1


def test_reduce_covariance_compound_symmetric():
    s = 0.5 * np.eye(3) + 0.5 * np.ones((3, 3))
    np.testing.assert_allclose(reduce_covariance(s, 0), [[1.0, 0.5], [0.5, 1.0]])


def test_reduction_preserves_outcomes(rng):
    m = 5
    for ref in range(m):
        d = reduction_matrix(m, ref)
        z = rng.normal(size=(3000, m))
        zt = z @ d.T
        for zi, zti in zip(z, zt):
            chosen = int(np.argmax(zi))
            red = reduce_reference(np.eye(m), chosen, ref)
            cs = build_constraints(ModelKind.reference(ref), red.chosen_reduced, m - 1)
            assert cs.contains(zti)


def test_axis_align_examples():
    mu = np.array([0.3, -1.2, 2.0])
    s = random_spd(np.random.default_rng(1), 3)
    cs = ConstraintSystem.box(np.zeros(3), np.full(3, np.inf))
    lo, hi, c = axis_align(cs, np.zeros(3), s)
    np.testing.assert_array_equal(lo, cs.lower)
    np.testing.assert_allclose(c, s)

    cs = build_constraints(ModelKind.outside(), None, 3)
    lo, hi, c = axis_align(cs, mu, s)
    np.testing.assert_allclose(lo, mu)
    assert np.all(np.isposinf(hi))
    np.testing.assert_allclose(c, s)

    cs = build_constraints(ModelKind.reference(0), 1, 3)
    lo, hi, c = axis_align(cs, mu, s)
    a = cs.a_matrix
    np.testing.assert_allclose(c, a @ s @ a.T)
    np.testing.assert_array_equal(c, c.T)
    assert np.linalg.eigvalsh(c).min() > 0


def test_axis_align_requires_involution():
    cs = ConstraintSystem.general([[1.0, 1.0], [0.0, 1.0]], [0, 0], [np.inf, np.inf])
    assert not cs.involutory
    with pytest.raises(NotInvolutory):
        axis_align(cs, np.zeros(2), np.eye(2))


def test_untransform_examples():
    mu = np.array([1.0, -2.0])
    u = TmvnMoments(-0.7, np.array([0.2, 0.4]), np.array([[0.5, 0.1], [0.1, 0.3]]))
    out = untransform_moments(ConstraintSystem.box([0, 0], [1, 1]), np.zeros(2), u)
    np.testing.assert_allclose(out.mean, u.mean)
    out = untransform_moments(build_constraints(ModelKind.outside(), None, 2), mu, u)
    np.testing.assert_allclose(out.mean, mu - u.mean)
    np.testing.assert_allclose(out.cov, u.cov)
    assert out.log_mass == u.log_mass
    with pytest.raises(DimensionMismatch):
        untransform_moments(build_constraints(ModelKind.outside(), None, 3), np.zeros(3), u)


@settings(max_examples=100, deadline=None)
@given(d=st.integers(1, 8), j=st.integers(-1, 7), seed=st.integers(0, 10**6))
def test_round_trip(d, j, seed):
    j = None if j < 0 or j >= d else j
    rng = np.random.default_rng(seed)
    cs = build_constraints(ModelKind.outside(), j, d)
    mu = rng.normal(size=d)
    m = rng.normal(size=d)
    c = random_spd(rng, d)
    # moments of Z mapped to U = A (Z - mu) and back
    a = cs.a_matrix
    u = TmvnMoments(0.0, a @ (m - mu), a @ c @ a.T)
    back = untransform_moments(cs, mu, u)
    np.testing.assert_allclose(back.mean, m, atol=1e-12)
    np.testing.assert_allclose(back.cov, c, atol=1e-12)


def test_marginalize():
    s = 0.5 * np.eye(5) + 0.5 * np.ones((5, 5))
    model = ProbitModel(np.ones(2), s)
    full = marginalize_model(model, range(5))
    np.testing.assert_array_equal(full.sigma, s)
    sub = marginalize_model(model, [4, 1, 2])
    np.testing.assert_array_equal(sub.sigma, 0.5 * np.eye(3) + 0.5 * np.ones((3, 3)))
    np.testing.assert_array_equal(sub.beta, model.beta)
    one = marginalize_model(model, [3])
    assert one.sigma.shape == (1, 1) and one.sigma[0, 0] == 1.0
    with pytest.raises(EmptySubset):
        marginalize_model(model, [])


def test_constraint_system_validation():
    with pytest.raises(DimensionMismatch):
        ConstraintSystem(np.eye(2), [0, 0, 0], [1, 1, 1])
    with pytest.raises(ValueError):
        ConstraintSystem.box([0, 1], [1, 1])
