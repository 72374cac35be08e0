import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mops import kernels
from mops.core_math import (finite_diff_grad, is_on_simplex, min_norm_weights, project_simplex,
                            stack_gradients)
from mops.errors import InvalidArgument, NumericFailure
from mops.rng import RngState, prng_draw, raw_u64, stream_id

from oracles import grid_min_norm, grid_project

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# -- simplex projection ----------------------------------------------------------

def test_project_known_values():
    np.testing.assert_allclose(project_simplex([0.4, 0.5]), [0.45, 0.55], atol=1e-15)
    np.testing.assert_array_equal(project_simplex([2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex([-1.0, -1.0, -1.0]), [1 / 3] * 3)


def test_project_rejects_empty_and_nan():
    with pytest.raises(InvalidArgument):
        project_simplex([])
    with pytest.raises(NumericFailure):
        project_simplex([0.2, np.nan])


@pytest.mark.parametrize("n", [2, 3])
def test_project_matches_grid_oracle(n, np_rng):
    for _ in range(20):
        v = np_rng.uniform(-1.5, 1.5, n)
        assert np.max(np.abs(project_simplex(v) - grid_project(v))) <= 1e-3


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_project_lands_on_simplex_and_is_idempotent(v):
    p = project_simplex(v)
    assert is_on_simplex(p, 1e-12)
    np.testing.assert_array_equal(project_simplex(p), p)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite),
       arrays(np.float64, 6, elements=st.floats(0, 1)))
def test_projection_is_closest_point(v, raw):
    # variational inequality: <v - p, q - p> <= 0 for every q on the simplex
    p = project_simplex(v)
    q = raw[: v.size] + 1e-3
    q = q / q.sum()
    assert np.dot(v - p, q - p) <= 1e-9 * (1 + np.abs(v).max())


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(0.01, 1)), st.floats(-5, 5))
def test_uniform_shift_is_absorbed(raw, shift):
    w = raw / raw.sum()
    np.testing.assert_allclose(project_simplex(w + shift), w, atol=1e-12)


# -- min-norm solver -------------------------------------------------------------

def test_min_norm_hand_cases():
    w, norm = min_norm_weights([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(w, [0.5, 0.5])
    assert norm == 0.0
    w, norm = min_norm_weights([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-6)
    assert norm == pytest.approx(np.sqrt(0.5), abs=1e-6)
    w, norm = min_norm_weights([[3.0, 4.0]])
    assert w.tolist() == [1.0] and norm == 5.0


def test_min_norm_zero_gradients_give_uniform():
    w, norm = min_norm_weights(np.zeros((3, 4)))
    np.testing.assert_allclose(w, [1 / 3] * 3)
    assert norm == 0.0


def test_min_norm_dominated_gradient():
    # a zero gradient is Pareto stationary on its own
    w, norm = min_norm_weights([[0.0, 0.0], [1.0, 2.0], [-2.0, 1.0]])
    # the 1e-8 objective tolerance bounds the norm by about 1e-4 * max ||g||
    assert norm <= 1e-4 * np.sqrt(5.0)
    assert w[0] > 0.99


@pytest.mark.parametrize("n", [2, 3])
def test_min_norm_matches_grid_oracle(n, np_rng):
    for _ in range(10):
        dim = int(np_rng.integers(1, 5))
        grads = np_rng.uniform(-1, 1, (n, dim))
        _, norm = min_norm_weights(grads)
        _, grid_norm = grid_min_norm(grads)
        assert norm <= grid_norm + 1e-9
        assert abs(norm - grid_norm) <= 1e-3


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(1, 6)),
              elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_min_norm_invariants(grads, scale):
    w, norm = min_norm_weights(grads)
    assert is_on_simplex(w, 1e-9)
    # never worse than any single gradient or the uniform mix
    # objective tolerance 1e-8 relative to the largest squared norm
    slack = 1e-4 * np.linalg.norm(grads, axis=1).max() + 1e-12
    assert norm <= np.linalg.norm(grads, axis=1).min() + slack
    assert norm <= np.linalg.norm(grads.mean(axis=0)) + slack
    _, scaled = min_norm_weights(grads * scale)
    assert scaled == pytest.approx(scale * norm, abs=2 * scale * slack)


def test_stack_gradients_checks_shapes():
    with pytest.raises(InvalidArgument):
        stack_gradients([[1.0, 2.0], [1.0]])
    with pytest.raises(InvalidArgument):
        stack_gradients([])


# -- backends ------------------------------------------------------------------

def test_backends_agree(np_rng):
    if kernels.compiled is None:
        pytest.skip("compiled kernels not built")
    for _ in range(200):
        v = np_rng.normal(size=int(np_rng.integers(1, 12))) * 3
        np.testing.assert_array_equal(kernels.compiled.project_simplex(v), kernels.py.project_simplex(v))
    for _ in range(50):
        g = np_rng.normal(size=(3, 4))
        gram = g @ g.T
        step = 1.0 / np.linalg.eigvalsh(gram)[-1]
        # summation order differs (loops vs BLAS), so restarts may trigger on
        # different iterations; both must reach the same tolerance
        wc, _ = kernels.compiled.min_norm_pg(gram, step, 10000, 1e-12)
        wp, _ = kernels.py.min_norm_pg(gram, step, 10000, 1e-12)
        assert abs(wc @ gram @ wc - wp @ gram @ wp) <= 2e-12
        np.testing.assert_allclose(wc, wp, atol=1e-5)


# -- finite differences and rng --------------------------------------------------

def test_finite_diff_on_quadratic():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    f = lambda x: float(x @ a @ x)
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(finite_diff_grad(f, x), 2 * a @ x, atol=1e-9)


def test_finite_diff_rejects_bad_step_and_nan():
    with pytest.raises(InvalidArgument):
        finite_diff_grad(lambda x: 0.0, [1.0], h=0.0)
    with pytest.raises(NumericFailure):
        finite_diff_grad(lambda x: float("nan"), [1.0])


def test_rng_is_counter_based():
    a = RngState(7, stream_id(2, 1))
    first = a.uniform(5)
    b = RngState(7, stream_id(2, 1), counter=2)
    np.testing.assert_array_equal(b.uniform(3), first[2:])
    np.testing.assert_array_equal(raw_u64(7, stream_id(2, 1), 0, 4), raw_u64(7, stream_id(2, 1), 0, 4))
    assert not np.array_equal(raw_u64(7, 1, 0, 4), raw_u64(7, 2, 0, 4))
    assert not np.array_equal(raw_u64(7, 1, 0, 4), raw_u64(8, 1, 0, 4))


def test_rng_distributions():
    r = RngState(1, 3)
    u = r.uniform(200_000)
    assert 0.0 <= u.min() and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005
    z = RngState(1, 4).normal(200_000)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
    k = RngState(1, 5).integers(7, 70_000)
    assert set(np.unique(k)) == set(range(7))
    assert isinstance(prng_draw(RngState(1, 6), "gaussian"), float)
    with pytest.raises(ValueError):
        prng_draw(RngState(1, 6), "poisson")
