import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defnet.defpool import (
    ConfigurationError,
    DefPoolConfig,
    DegeneratePenaltyError,
    PenaltyBasis,
    defpool_backward,
    defpool_forward,
    make_directional_basis,
    make_directional_bases,
    make_global_basis,
    make_maxpool_basis,
    make_quadratic_basis,
    quadratic_offset,
)
from defnet.dpm import QuadraticDeformation, dpm_score
from defnet.tensor import DimensionError, ParameterError, max_pool
from oracles import central_difference, defpool_enumerate, rel_error

INF = np.inf


def random_config(rng, C, R, s, N, with_inf=True):
    S = 2 * R + 1
    tables = rng.uniform(0, 2, size=(N, S, S))
    if with_inf and R > 0:
        tables[0][rng.random((S, S)) < 0.2] = INF
        tables[0, R, R] = 0.0
    coeffs = rng.normal(size=(C, N))
    return DefPoolConfig(s, s, PenaltyBasis(R, tables), coeffs)


class TestForward:
    def test_radius_zero_is_penalised_subsample(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(2, 6, 7))
        tables = np.array([[[0.3]], [[1.2]]])
        cfg = DefPoolConfig(2, 3, PenaltyBasis(0, tables), [[0.5, -1.0], [2.0, 0.25]])
        out, rec = defpool_forward(m, cfg)
        assert out.shape == (2, 2, 3)
        for c in range(2):
            pen = 0.0 + cfg.coeffs[c, 0] * 0.3 + cfg.coeffs[c, 1] * 1.2
            np.testing.assert_array_equal(out[c], m[c, ::3, ::2][:2, :3] - pen)
        assert np.all(rec.dy == 0) and np.all(rec.dx == 0)

    def test_ramp_manhattan_matches_enumeration(self):
        m = np.add.outer(np.arange(5.0), np.arange(5.0))[None]
        offs = np.arange(-1, 2)
        d = np.abs(offs)[:, None] + np.abs(offs)[None, :]
        cfg = DefPoolConfig(2, 2, PenaltyBasis(1, d), [[1.0]])
        out, rec = defpool_forward(m, cfg)
        ref, winners = defpool_enumerate(m, 1, 2, 2, [[d]], [[1.0]])
        np.testing.assert_array_equal(out, ref)
        # i + j rises by 1 per step and costs 1 per step: ties keep the smallest offset
        assert [[(int(rec.dy[0, y, x]), int(rec.dx[0, y, x])) for x in range(2)] for y in range(2)] \
            == [[winners[0][y][x] for x in range(2)] for y in range(2)]
        assert out.tolist() == [[[0.0, 2.0], [2.0, 4.0]]]

    @pytest.mark.parametrize("R,s,N", list(itertools.product([0, 1, 2], [1, 2, 3], [1, 4])))
    def test_enumeration_grid(self, R, s, N):
        rng = np.random.default_rng(100 * R + 10 * s + N)
        m = rng.normal(size=(3, 8, 9))
        cfg = random_config(rng, 3, R, s, N)
        out, rec = defpool_forward(m, cfg)
        ref, winners = defpool_enumerate(m, R, s, s, cfg.tables(), cfg.coeffs)
        np.testing.assert_array_equal(out, ref)
        for c, y, x in np.ndindex(out.shape):
            assert (rec.dy[c, y, x], rec.dx[c, y, x]) == winners[c][y][x]

    def test_record_reproduces_output(self):
        rng = np.random.default_rng(7)
        m = rng.normal(size=(2, 9, 9))
        cfg = random_config(rng, 2, 2, 2, 4)
        out, rec = defpool_forward(m, cfg)
        H, W = m.shape[1:]
        pen, _ = cfg.penalty()
        R = cfg.R
        for c, y, x in np.ndindex(out.shape):
            r, q = rec.rows[c, y, x], rec.cols[c, y, x]
            assert 0 <= r < H and 0 <= q < W
            assert m[c, r, q] - pen[c, rec.dy[c, y, x] + R, rec.dx[c, y, x] + R] == out[c, y, x]

    def test_batched_matches_single(self):
        rng = np.random.default_rng(8)
        m = rng.normal(size=(3, 2, 7, 7))
        cfg = random_config(rng, 2, 1, 2, 4)
        out, rec = defpool_forward(m, cfg)
        for b in range(3):
            o, r = defpool_forward(m[b], cfg)
            np.testing.assert_array_equal(out[b], o)
            np.testing.assert_array_equal(rec.rows[b], r.rows)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            defpool_forward(np.zeros((2, 4, 4)), make_maxpool_basis(1, channels=3))

    def test_map_smaller_than_stride(self):
        with pytest.raises(ConfigurationError):
            defpool_forward(np.zeros((1, 2, 5)), make_maxpool_basis(1, sx=1, sy=3))

    def test_all_offsets_forbidden(self):
        t = np.full((3, 3), INF)
        t[0, 0] = 0.0  # only (-1, -1) allowed, out of bounds at the origin anchor
        cfg = DefPoolConfig(1, 1, PenaltyBasis(1, t), [[1.0]])
        with pytest.raises(DegeneratePenaltyError):
            defpool_forward(np.zeros((1, 3, 3)), cfg)

    def test_nan_table_rejected(self):
        with pytest.raises(ParameterError):
            PenaltyBasis(0, [[[np.nan]]])

    def test_inf_with_zero_coefficient_is_still_excluded(self):
        t = np.array([[INF, 0.0, 0.0]] * 3)
        cfg = DefPoolConfig(1, 1, PenaltyBasis(1, t), [[0.0]])
        m = np.zeros((1, 3, 3))
        m[0, :, 0] = 10.0
        out, _ = defpool_forward(m, cfg)
        assert np.all(np.isfinite(out))
        # column 0 is only reachable through dx = -1, which is forbidden
        assert out[0, :, 1].tolist() == [0.0, 0.0, 0.0]


class TestMaxPoolSpecialCase:
    def test_k1_equals_centered_3x3(self):
        rng = np.random.default_rng(9)
        m = rng.normal(size=(2, 6, 6))
        out, _ = defpool_forward(m, make_maxpool_basis(1, channels=2))
        ref, _ = max_pool(m, 3, 1, pad=1)
        np.testing.assert_array_equal(out, ref)

    def test_k0_identity_subsample(self):
        rng = np.random.default_rng(10)
        m = rng.normal(size=(1, 7, 8))
        out, _ = defpool_forward(m, make_maxpool_basis(0, sx=2, sy=3))
        np.testing.assert_array_equal(out, m[:, 0:6:3, 0:8:2])

    def test_constant_map(self):
        out, _ = defpool_forward(np.full((1, 5, 5), 2.5), make_maxpool_basis(2, sx=2))
        assert np.all(out == 2.5)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 3), st.integers(3, 16), st.integers(3, 16), st.integers(0, 3),
           st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_bitwise_equivalence(self, C, H, W, k, s, seed):
        m = np.random.default_rng(seed).normal(size=(C, H, W))
        out, rec = defpool_forward(m, make_maxpool_basis(k, channels=C, sx=s))
        ref, arg = max_pool(m, 2 * k + 1, s, pad=k)
        Ho, Wo = out.shape[1:]
        assert out.tobytes() == np.ascontiguousarray(ref[:, :Ho, :Wo]).tobytes()
        np.testing.assert_array_equal(rec.rows * W + rec.cols, arg[:, :Ho, :Wo])


class TestGlobalBasis:
    def test_zero_penalty_is_global_max(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(3, 5, 7))
        out, _ = defpool_forward(m, make_global_basis(5, 7, channels=3))
        assert out.shape == (3, 1, 1)
        np.testing.assert_array_equal(out[:, 0, 0], m.max(axis=(1, 2)))

    def test_only_anchor_allowed(self):
        R = 6
        t = np.full((2 * R + 1, 2 * R + 1), INF)
        t[R, R] = 0.0
        m = np.random.default_rng(12).normal(size=(1, 5, 6))
        out, _ = defpool_forward(m, make_global_basis(5, 6, basis=PenaltyBasis(R, t)))
        assert out[0, 0, 0] == m[0, 0, 0]

    def test_quadratic_matches_dpm_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            H, W = rng.integers(7, 10, size=2)
            m = rng.normal(size=(1, H, W))
            q = QuadraticDeformation(*rng.uniform(0.05, 1.0, size=2), *rng.normal(size=2),
                                     int(rng.integers(H)), int(rng.integers(W)))
            out, _ = defpool_forward(m, make_quadratic_basis(q, H, W))
            assert abs(out[0, 0, 0] + quadratic_offset(q) - dpm_score(m, q)) < 1e-9


class TestDirectionalBasis:
    def test_left_cheaper_than_right(self):
        d = np.zeros((3, 3))
        d[:, 0] = 1.0  # dx < 0
        d[:, 2] = 2.0  # dx > 0
        basis = make_directional_basis(d)
        assert basis.N == 1 and not basis.learnable
        cfg = DefPoolConfig(1, 1, basis, [[1.0]], learnable=False)
        m = np.array([[[5.0, 0.0, 5.0]]])
        out, rec = defpool_forward(m, cfg)
        # from the centre anchor: left 5 - 1 = 4 beats right 5 - 2 = 3
        assert out[0, 0, 1] == 4.0
        assert rec.dx[0, 0, 1] == -1

    def test_zero_map_is_plain_window_max(self):
        rng = np.random.default_rng(14)
        m = rng.normal(size=(1, 6, 6))
        cfg = DefPoolConfig(1, 1, make_directional_basis(np.zeros((5, 5))), [[1.0]])
        out, _ = defpool_forward(m, cfg)
        ref, _ = max_pool(m, 5, 1, pad=2)
        np.testing.assert_array_equal(out, ref)

    def test_forced_shift_by_one_column(self):
        d = np.full((3, 3), INF)
        d[1, 2] = 0.0  # only (dy, dx) = (0, +1)
        m = np.random.default_rng(15).normal(size=(1, 4, 5))
        out, _ = defpool_forward(m, DefPoolConfig(2, 1, make_directional_basis(d), [[1.0]]))
        np.testing.assert_array_equal(out[0], m[0, :, 1:5:2])
        # with unit stride the last column's anchor has nowhere to go
        with pytest.raises(DegeneratePenaltyError):
            defpool_forward(m, DefPoolConfig(1, 1, make_directional_basis(d), [[1.0]]))

    def test_even_map_rejected(self):
        with pytest.raises(ParameterError):
            make_directional_basis(np.zeros((4, 4)))

    def test_learnable_bases_cost_by_direction(self):
        b = make_directional_bases(2)
        assert b.N == 4 and b.learnable
        # offset (dy, dx) = (-1, +2): right 2, up 1
        assert b.tables[:, 1, 4].tolist() == [0.0, 2.0, 1.0, 0.0]


class TestQuadraticBasis:
    def test_huge_curvature_pins_part(self):
        m = np.random.default_rng(16).normal(size=(1, 7, 7))
        q = QuadraticDeformation(1e6, 1e6, 0.0, 0.0, 3, 2)
        out, rec = defpool_forward(m, make_quadratic_basis(q, 7, 7))
        assert out[0, 0, 0] == pytest.approx(m[0, 3, 2])
        assert (rec.rows[0, 0, 0], rec.cols[0, 0, 0]) == (3, 2)

    def test_no_cost_is_global_max(self):
        m = np.random.default_rng(17).normal(size=(1, 7, 7))
        q = QuadraticDeformation(0.0, 0.0, 0.0, 0.0, 1, 5)
        out, _ = defpool_forward(m, make_quadratic_basis(q, 7, 7))
        assert out[0, 0, 0] == m.max()

    def test_offset_needs_positive_curvature(self):
        with pytest.raises(ParameterError):
            quadratic_offset(QuadraticDeformation(0.0, 1.0, 1.0, 1.0, 0, 0))

    def test_anchor_outside_map(self):
        with pytest.raises(ParameterError):
            make_quadratic_basis(QuadraticDeformation(1, 1, 0, 0, 7, 0), 7, 7)


class TestBackward:
    def test_zero_grad(self):
        rng = np.random.default_rng(18)
        m = rng.normal(size=(2, 6, 6))
        cfg = random_config(rng, 2, 1, 2, 4)
        out, rec = defpool_forward(m, cfg)
        gm, ga = defpool_backward(np.zeros_like(out), rec, cfg)
        assert not gm.any() and not ga.any()

    def test_single_element_coefficient_grad(self):
        t = np.full((3, 3), 5.0)
        t[1, 2] = 0.7
        cfg = DefPoolConfig(1, 1, PenaltyBasis(1, t), [[0.1]])
        m = np.array([[[0.0, 10.0]]])
        out, rec = defpool_forward(m, cfg)
        g = np.zeros_like(out)
        g[0, 0, 0] = 1.0  # only the anchor at column 0, which picks dx = +1
        gm, ga = defpool_backward(g, rec, cfg)
        assert rec.dx[0, 0, 0] == 1
        assert ga.tolist() == [[-0.7]]
        assert gm.tolist() == [[[0.0, 1.0]]]

    def test_shared_source_accumulates(self):
        m = np.array([[[0.0, 9.0, 0.0]]])
        cfg = make_maxpool_basis(1)
        out, rec = defpool_forward(m, cfg)
        gm, _ = defpool_backward(np.array([[[1.0, 2.0, 3.0]]]), rec, cfg)
        assert gm.tolist() == [[[0.0, 6.0, 0.0]]]

    def test_shape_mismatch(self):
        cfg = make_maxpool_basis(1)
        out, rec = defpool_forward(np.zeros((1, 4, 4)), cfg)
        with pytest.raises(DimensionError):
            defpool_backward(np.zeros((1, 3, 4)), rec, cfg)

    @pytest.mark.parametrize("R,s,N", list(itertools.product([0, 1, 2], [1, 2, 3], [1, 4])))
    def test_finite_differences(self, R, s, N):
        rng = np.random.default_rng(1000 + 100 * R + 10 * s + N)
        m = rng.normal(size=(2, 7, 8))
        cfg = random_config(rng, 2, R, s, N)
        out, rec = defpool_forward(m, cfg)
        g = rng.normal(size=out.shape)
        gm, ga = defpool_backward(g, rec, cfg)

        def f_m(v):
            return float(np.sum(g * defpool_forward(v, cfg)[0]))

        def f_a(a):
            return float(np.sum(g * defpool_forward(m, DefPoolConfig(s, s, cfg.basis, a))[0]))

        assert rel_error(gm, central_difference(f_m, m, 1e-5)) < 1e-6
        assert rel_error(ga, central_difference(f_a, cfg.coeffs, 1e-5)) < 1e-6


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 2), st.integers(1, 3))
    def test_monotone_in_penalties(self, seed, R, s):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(2, 7, 7))
        S = 2 * R + 1
        t = rng.uniform(0, 1, size=(1, S, S))
        coeffs = np.abs(rng.normal(size=(2, 1)))
        base, _ = defpool_forward(m, DefPoolConfig(s, s, PenaltyBasis(R, t), coeffs))
        t2 = t.copy()
        t2[0, rng.integers(S), rng.integers(S)] += rng.uniform(0, 3)
        bumped, _ = defpool_forward(m, DefPoolConfig(s, s, PenaltyBasis(R, t2), coeffs))
        assert np.all(bumped <= base)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_upper_bound_by_channel_max(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(3, 6, 6))
        cfg = random_config(rng, 3, 2, 2, 1)
        cfg.coeffs = np.abs(cfg.coeffs)
        out, _ = defpool_forward(m, cfg)
        assert np.all(out <= m.max(axis=(1, 2))[:, None, None])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
    def test_uniform_shift(self, seed, const):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(2, 6, 7))
        cfg = random_config(rng, 2, 1, 2, 1, with_inf=False)
        out, rec = defpool_forward(m, cfg)
        shifted = DefPoolConfig(2, 2, PenaltyBasis(1, cfg.basis.tables + const), cfg.coeffs)
        out2, rec2 = defpool_forward(m, shifted)
        a = cfg.coeffs[:, 0][:, None, None]
        np.testing.assert_allclose(out2, out - a * const, atol=1e-12)
        np.testing.assert_array_equal(rec.dy, rec2.dy)
        np.testing.assert_array_equal(rec.dx, rec2.dx)


class TestSerialization:
    def test_json_round_trip_keeps_inf(self):
        cfg = make_maxpool_basis(1, channels=2, sx=2)
        back = DefPoolConfig.from_json(cfg.to_json())
        assert '"inf"' in cfg.to_json()
        np.testing.assert_array_equal(back.tables(), cfg.tables())
        np.testing.assert_array_equal(back.coeffs, cfg.coeffs)
        assert (back.sx, back.sy, back.R, back.N, back.learnable) == (2, 2, 2, 1, False)

    def test_per_channel_bases(self):
        b1 = make_directional_bases(1)
        b2 = PenaltyBasis(1, b1.tables * 2)
        cfg = DefPoolConfig(1, 1, [b1, b2], np.ones((2, 4)))
        back = DefPoolConfig.from_json(cfg.to_json())
        assert not back.shared_basis
        np.testing.assert_array_equal(back.tables(), cfg.tables())
