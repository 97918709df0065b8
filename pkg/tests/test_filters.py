import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specfuse.filters import (
    BasisStack,
    KrawtchoukShape,
    cheb_propagate,
    cheb_scalar,
    collapse_degree,
    krawtchouk_hypergeom,
    krawtchouk_propagate,
    krawtchouk_scalar,
    overflow_degree,
    scalar_response,
)
from specfuse.linalg import CsrMatrix

RNG = np.random.default_rng(7)


class TestChebScalar:
    def test_cosine_oracle(self):
        grid = np.linspace(-1.0, 1.0, 201)
        table = cheb_scalar(grid, 16)
        for k in range(17):
            assert np.max(np.abs(table[k] - np.cos(k * np.arccos(grid)))) < 1e-9

    def test_values_at_half(self):
        table = cheb_scalar([0.5], 3)
        assert table[2, 0] == pytest.approx(-0.5, abs=1e-15)
        assert table[3, 0] == pytest.approx(-1.0, abs=1e-15)

    def test_boundedness_through_64(self):
        grid = np.linspace(-1.0, 1.0, 1001)
        table = cheb_scalar(grid, 64)
        assert np.max(np.abs(table)) <= 1.0 + 1e-9


class TestChebStack:
    def test_base_cases(self):
        dense = np.array([[0.0, -1.0], [-1.0, 0.0]])
        op = CsrMatrix.from_dense(dense, symmetric=True)
        x = RNG.standard_normal((2, 3))
        stack = cheb_propagate(op, x, 1)
        assert stack.mats[0] is not x  # own copy semantics via as_dense
        assert np.array_equal(stack.mats[0], x)
        assert np.allclose(stack.mats[1], dense @ x)

    def test_one_node_alternating_pattern(self):
        op = CsrMatrix.from_dense([[0.0]], symmetric=True)
        stack = cheb_propagate(op, [[3.0]], 6)
        got = [m[0, 0] for m in stack.mats]
        assert got == [3.0, 0.0, -3.0, 0.0, 3.0, 0.0, -3.0]

    def test_matches_dense_operator_polynomial(self):
        for seed in range(4):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(3, 17))
            adj = (rng.random((n, n)) < 0.4).astype(float)
            adj = np.triu(adj, 1)
            adj = adj + adj.T
            from specfuse.graphs import sym_laplacian, l_hat

            lhat = l_hat(sym_laplacian(CsrMatrix.from_dense(adj, symmetric=True)))
            dense = lhat.to_dense()
            x = rng.standard_normal((n, 3))
            k_max = 10
            stack = cheb_propagate(lhat, x, k_max)
            t_prev, t_cur = np.eye(n), dense.copy()
            for k in range(k_max + 1):
                if k == 0:
                    poly = np.eye(n)
                elif k == 1:
                    poly = dense
                else:
                    poly = 2.0 * dense @ t_cur - t_prev
                    t_prev, t_cur = t_cur, poly
                assert np.max(np.abs(stack.mats[k] - poly @ x)) < 1e-8


KRAW_EXACT = [
    # (n, x, p, N, exact value) hand-derived with exact fractions
    (1, 1.0, 0.5, 4, 0.5),
    (2, 3.0, 0.5, 4, 0.0),
    (2, 2.0, 0.5, 4, -1.0 / 3.0),
    (3, 2.0, 0.25, 8, -2.0 / 7.0),
    (0, 5.0, 0.3, 8, 1.0),
]


class TestKrawtchoukScalar:
    @pytest.mark.parametrize("n,x,p,lattice,expected", KRAW_EXACT)
    def test_frozen_exact_values(self, n, x, p, lattice, expected):
        got = krawtchouk_scalar([x], max(n, 1), KrawtchoukShape(p, lattice))[n, 0]
        assert got == pytest.approx(expected, abs=1e-14)
        assert krawtchouk_hypergeom(n, x, p, lattice) == pytest.approx(expected, abs=1e-12)

    def test_recurrence_matches_hypergeometric_on_lattice(self):
        worst = 0.0
        for lattice in (4, 8, 16):
            for p in (0.1, 0.3, 0.5, 0.7, 0.9):
                shape = KrawtchoukShape(p, lattice)
                table = krawtchouk_scalar(np.arange(lattice + 1.0), min(8, lattice), shape)
                for n in range(min(8, lattice) + 1):
                    for x in range(lattice + 1):
                        oracle = krawtchouk_hypergeom(n, float(x), p, lattice)
                        err = abs(table[n, x] - oracle) / max(1.0, abs(oracle), abs(table[n, x]))
                        worst = max(worst, err)
        assert worst < 1e-8

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(2, 12),
        st.floats(0.05, 0.95),
        st.integers(0, 12),
    )
    def test_lattice_property(self, lattice, p, x):
        x = min(x, lattice)
        shape = KrawtchoukShape(p, lattice)
        n = min(6, lattice)
        table = krawtchouk_scalar([float(x)], n, shape)
        for deg in range(n + 1):
            oracle = krawtchouk_hypergeom(deg, float(x), p, lattice)
            assert abs(table[deg, 0] - oracle) <= 1e-8 * max(1.0, abs(oracle))

    def test_degree_above_lattice_rejected_in_oracle(self):
        with pytest.raises(ValueError):
            krawtchouk_hypergeom(5, 1.0, 0.5, 4)


class TestKrawtchoukStack:
    def test_order_zero_is_input(self):
        op = CsrMatrix.from_dense([[0.25]], symmetric=True)
        x = np.array([[2.0, 3.0]])
        stack = krawtchouk_propagate(op, x, 2, KrawtchoukShape(0.5, 4))
        assert np.array_equal(stack.mats[0], x)

    def test_matches_scalar_recurrence_via_diagonal_operator(self):
        lam = 0.6
        op = CsrMatrix.from_dense([[lam]], symmetric=True)
        shape = KrawtchoukShape(0.35, 6)
        stack = krawtchouk_propagate(op, [[1.0]], 5, shape)
        scalar = krawtchouk_scalar([lam * shape.lattice], 5, shape)
        for k in range(6):
            assert stack.mats[k][0, 0] == pytest.approx(scalar[k, 0], rel=1e-12)

    def test_lattice_must_cover_degree(self):
        op = CsrMatrix.from_dense([[0.5]], symmetric=True)
        with pytest.raises(ValueError):
            krawtchouk_propagate(op, [[1.0]], 5, KrawtchoukShape(0.5, 4))

    def test_instrumentation_minimal_nonfinite_order(self):
        # tiny p at the spectrum edge overflows quickly; check the brute scan
        op = CsrMatrix.from_dense([[1.0]], symmetric=True)
        shape = KrawtchoukShape(1e-300, 60)
        stack = krawtchouk_propagate(op, [[1.0]], 12, shape)
        brute = None
        for k, m in enumerate(stack.mats):
            if not np.isfinite(m).all():
                brute = k
                break
        assert stack.first_nonfinite_order == brute
        assert brute is not None
        # propagation continued past the failure, poisoned values intact
        assert len(stack.mats) == 13
        assert not np.isfinite(stack.mats[-1]).all()

    def test_max_abs_recorded_per_order(self):
        op = CsrMatrix.from_dense([[0.5, 0.1], [0.1, 0.4]], symmetric=True)
        x = RNG.standard_normal((2, 2))
        stack = krawtchouk_propagate(op, x, 3, KrawtchoukShape(0.5, 4))
        for k, m in enumerate(stack.mats):
            assert stack.max_abs[k] == pytest.approx(np.max(np.abs(m)))


class TestScalarResponse:
    def test_e0_gives_constant_one(self):
        grid = np.linspace(-1, 1, 7)
        assert np.allclose(scalar_response("cheb", [1.0, 0.0], grid), 1.0)

    def test_cheb_e1_is_identity_line(self):
        grid = np.linspace(-1, 1, 7)
        assert np.allclose(scalar_response("cheb", [0.0, 1.0], grid), grid)

    def test_response_shifts_monotonically_with_p(self):
        grid = np.linspace(0.1, 1.0, 10)
        weights = [0.0, 1.0]  # pure first-order response
        lattice = 8
        values = [
            scalar_response("krawtchouk", weights, grid, KrawtchoukShape(p, lattice))
            for p in (0.3, 0.5, 0.7)
        ]
        # d(K_1)/dp = x / (p^2 N) > 0 for x > 0: strictly increasing in p
        assert np.all(values[1] > values[0])
        assert np.all(values[2] > values[1])

    def test_grid_domain_errors(self):
        with pytest.raises(ValueError):
            scalar_response("cheb", [1.0], [1.5])
        with pytest.raises(ValueError):
            scalar_response("krawtchouk", [1.0], [-0.2], KrawtchoukShape(0.5, 4))


class TestOverflowScan:
    def test_cheb_never_overflows_on_domain(self):
        assert overflow_degree("cheb", 1.0, cap=200) is None
        assert overflow_degree("cheb", -1.0, cap=200) is None

    def test_small_p_overflows_at_finite_order(self):
        p = 1.0 / (1.0 + math.exp(12.0))  # sigmoid(-12)
        deg = overflow_degree("krawtchouk", 1.0, cap=200, shape=KrawtchoukShape(p, 200))
        assert deg is not None and 1 < deg < 200

    def test_balanced_p_growth_recorded_without_overflow(self):
        shape = KrawtchoukShape(0.5, 30)
        assert overflow_degree("krawtchouk", 1.0, cap=30, shape=shape) is None
        table = krawtchouk_scalar([0.97 * 30], 30, shape)[:, 0]
        assert np.isfinite(table).all()
        assert np.max(np.abs(table[25:])) > np.max(np.abs(table[:6]))  # growth, no overflow

    def test_collapse_degree_monotone_in_p(self):
        lam = 0.9
        steep = collapse_degree(1e-8, lam)
        shallow = collapse_degree(1e-5, lam)
        assert steep is not None and shallow is not None
        assert steep < shallow
        assert collapse_degree(0.5, lam) is None  # stable at desk scale in float64

    def test_cap_validation(self):
        with pytest.raises(ValueError):
            overflow_degree("cheb", 0.5, cap=500)
