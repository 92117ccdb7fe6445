import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.optimize import linear_sum_assignment

from latticegen.assign import (
    bench_assign,
    build_cost_matrix,
    check_cost_matrix,
    solve,
    solve_brute_force,
    solve_greedy,
    solve_hungarian,
)
from latticegen.errors import CapacityError, NumericError, ShapeError
from latticegen.metrics import LossSpec, loss
from latticegen.prior import Lattice, PriorSpec
from latticegen.tensorcore import DecoderParams, Layer, forward, init_decoder


def _identity_decoder(d):
    return DecoderParams([Layer(np.eye(d), np.zeros(d))], "relu", "identity")


def _lattice(points):
    return Lattice(np.asarray(points, dtype=float), PriorSpec("uniform01_coordinatewise", np.shape(points)[1]), "sobol")


def _injective(mapping):
    return len(set(mapping.tolist())) == len(mapping)


square_costs = st.integers(1, 7).flatmap(
    lambda n: hnp.arrays(np.float64, (n, n), elements=st.floats(0, 100, allow_nan=False))
)
integer_costs = st.integers(1, 6).flatmap(
    lambda n: hnp.arrays(np.float64, (n, n), elements=st.integers(0, 3).map(float))
)


# -- examples ----------------------------------------------------------------


def test_hungarian_small_examples():
    a = solve_hungarian([[0.0, 1.0], [1.0, 0.0]])
    assert a.mapping.tolist() == [0, 1] and a.total_cost == 0.0
    for scale in (1e-6, 1.0, 3.5, 1e6):
        assert solve_hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]) * scale).mapping.tolist() == [0, 1]


def test_greedy_hand_trace():
    c = [[1.0, 2.0], [1.0, 10.0]]
    g = solve_greedy(c)
    h = solve_hungarian(c)
    assert (g.mapping.tolist(), g.total_cost) == ([0, 1], 11.0)
    assert (h.mapping.tolist(), h.total_cost) == ([1, 0], 3.0)


def test_greedy_ties_go_to_lowest_column():
    assert solve_greedy([[1.0, 1.0, 1.0], [0.0, 0.0, 5.0]]).mapping.tolist() == [0, 1]


def test_brute_force_examples():
    assert solve_brute_force([[4.0]]).mapping.tolist() == [0]
    assert solve_brute_force([[0.0, 1.0], [1.0, 0.0]]).mapping.tolist() == [0, 1]
    with pytest.raises(CapacityError):
        solve_brute_force(np.zeros((10, 10)))


def test_all_zero_matrix_gives_identity():
    for method in ("hungarian", "greedy", "brute_force"):
        assert solve(np.zeros((5, 5)), method).mapping.tolist() == [0, 1, 2, 3, 4]


# -- exactness against independent oracles -----------------------------------


def test_hungarian_equals_exhaustive_minimum_6x6():
    perms = np.array(list(itertools.permutations(range(6))))
    for seed in range(200):
        c = np.random.default_rng(seed).random((6, 6))
        exhaustive = min(sum(c[i, p[i]] for i in range(6)) for p in perms)
        assert solve_hungarian(c).total_cost == pytest.approx(exhaustive, abs=1e-12)


@given(square_costs)
def test_hungarian_matches_brute_force_exactly(c):
    h = solve_hungarian(c)
    b = solve_brute_force(c)
    assert h.total_cost == b.total_cost
    assert h.mapping.tolist() == b.mapping.tolist()


@given(integer_costs)
def test_lexicographic_tie_break_on_tied_matrices(c):
    assert solve_hungarian(c).mapping.tolist() == solve_brute_force(c).mapping.tolist()


@pytest.mark.parametrize("shape", [(1, 1), (3, 5), (40, 40), (50, 80), (300, 300)])
def test_hungarian_matches_scipy(shape):
    c = np.random.default_rng(shape[0]).random(shape)
    rows, cols = linear_sum_assignment(c)
    a = solve_hungarian(c)
    assert a.total_cost == pytest.approx(c[rows, cols].sum(), rel=1e-12)
    assert _injective(a.mapping)


@given(square_costs)
def test_injective_and_cost_consistent(c):
    for method in ("hungarian", "greedy", "brute_force"):
        a = solve(c, method)
        assert _injective(a.mapping)
        assert abs(a.total_cost - sum(c[i, j] for i, j in enumerate(a.mapping))) <= 1e-9


@given(square_costs)
def test_greedy_dominates_hungarian(c):
    assert solve_greedy(c).total_cost >= solve_hungarian(c).total_cost


@given(square_costs, st.floats(1e-3, 1e3))
def test_scale_invariance_of_mapping(c, k):
    assert solve_hungarian(c * k).mapping.tolist() == solve_hungarian(c).mapping.tolist()


@given(st.integers(2, 7), st.integers(0, 2**32 - 1))
def test_row_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    c = rng.random((n, n))  # continuous entries: distinct with probability one
    sigma = rng.permutation(n)
    base = solve_hungarian(c).mapping
    np.testing.assert_array_equal(solve_hungarian(c[sigma]).mapping, base[sigma])


def test_one_dimensional_rearrangement():
    # squared-distance cost between points on a line: sorted-to-sorted is optimal
    for seed in range(30):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        z = rng.random(n)
        q = np.sort(rng.random(n))
        c = (z[:, None] - q[None, :]) ** 2
        expected = np.empty(n, dtype=int)
        expected[np.argsort(z)] = np.arange(n)
        np.testing.assert_array_equal(solve_brute_force(c).mapping, expected)
        np.testing.assert_array_equal(solve_hungarian(c).mapping, expected)


def test_rectangular_uses_distinct_columns():
    c = np.array([[5.0, 1.0, 9.0, 0.5], [5.0, 0.2, 9.0, 0.4]])
    a = solve_hungarian(c)
    assert a.total_cost == pytest.approx(0.7)
    assert a.mapping.tolist() == [3, 1]


# -- validation --------------------------------------------------------------


@pytest.mark.parametrize(
    "bad, err",
    [
        (np.zeros((3, 2)), ShapeError),
        (np.zeros(3), ShapeError),
        (np.array([[0.0, -1.0], [1.0, 0.0]]), ValueError),
        (np.array([[0.0, np.inf], [1.0, 0.0]]), NumericError),
    ],
)
def test_cost_matrix_validation(bad, err):
    with pytest.raises(err):
        check_cost_matrix(bad)


def test_unknown_method():
    with pytest.raises(ValueError):
        solve(np.zeros((2, 2)), "auction")


# -- cost matrices -----------------------------------------------------------


def test_identity_decoder_zero_diagonal():
    x = np.random.default_rng(0).random((5, 3))
    c = build_cost_matrix(x, _identity_decoder(3), _lattice(x), LossSpec("l2"))
    np.testing.assert_array_equal(np.diag(c), 0.0)


def test_one_by_one_cost():
    x = np.array([[0.2, 0.4]])
    q = np.array([[0.5, 0.1]])
    c = build_cost_matrix(x, _identity_decoder(2), _lattice(q), LossSpec("l1"))
    assert c[0, 0] == pytest.approx(0.3)


@pytest.mark.parametrize("kind", ["l1", "l2", "ssim_l1"])
def test_cost_matrix_compositional(kind):
    rng = np.random.default_rng(3)
    spec = LossSpec(kind, image_shape=(8, 8, 1) if kind == "ssim_l1" else None)
    params = init_decoder([2, 10, 64], "relu", "sigmoid", seed=3)
    x = rng.random((3, 64))
    q = rng.standard_normal((3, 2))
    c = build_cost_matrix(x, params, _lattice(q), spec)
    for i in range(3):
        for k in range(3):
            assert c[i, k] == pytest.approx(loss(spec, x[i], forward(params, q[k])), abs=1e-12)


def test_cost_matrix_dimension_errors():
    params = init_decoder([2, 4, 3], seed=0)
    with pytest.raises(ShapeError):
        build_cost_matrix(np.zeros((2, 3)), params, _lattice(np.zeros((2, 3))), LossSpec())
    with pytest.raises(ShapeError):
        build_cost_matrix(np.zeros((2, 4)), params, _lattice(np.zeros((2, 2))), LossSpec())


def test_cost_matrix_non_finite_reports_entry():
    x = np.array([[0.0], [np.inf]])
    with pytest.raises(NumericError, match=r"\(1, 0\)"):
        build_cost_matrix(x, _identity_decoder(1), _lattice([[0.0], [1.0]]), LossSpec())


# -- benchmark ---------------------------------------------------------------


def test_bench_smoke():
    rows = bench_assign(2, "both", repeats=1)
    assert [r.method for r in rows] == ["hungarian", "greedy"]
    assert all(r.mean_ms >= 0 and np.isfinite(r.std_ms) for r in rows)


def test_bench_greedy_faster_at_512():
    h, g = bench_assign(512, "both", repeats=3)
    assert g.mean_ms < h.mean_ms


def test_bench_validation():
    with pytest.raises(ValueError):
        bench_assign(1)
    with pytest.raises(ValueError):
        bench_assign(4, "auction")
