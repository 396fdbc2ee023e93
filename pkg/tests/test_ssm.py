import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sigmaseg import tensor as T
from sigmaseg.checks import random_params
from sigmaseg.errors import DimensionError, DomainError, NumericError, StabilityError
from sigmaseg.oracles import (max_relative_error, naive_scan_inputs, naive_selection, naive_selective_scan,
                              random_scan_inputs)
from sigmaseg.ssm import (DT_MAX, DT_MIN, DiscreteScanInputs, default_dt_rank, derive_selection,
                          discretize_taylor, discretize_zoh, init_ssm_params, prepare_scan, selective_scan,
                          selective_scan_backward, selective_scan_chunked, selective_scan_seq)

dims = st.tuples(st.integers(1, 64), st.integers(1, 8), st.integers(1, 8))


def scalar_inputs(a, b, c, d, x):
    L = len(x)
    return DiscreteScanInputs(np.full((L, 1, 1), a, float), np.full((L, 1, 1), b, float),
                              np.full((L, 1), c, float), np.array([d], float), np.array(x, float).reshape(L, 1))


class TestSelection:
    def test_zero_input(self, rng):
        p = random_params(rng, 3, 2)
        p.dt_bias = np.zeros(3)
        B, C, delta = derive_selection(np.zeros((5, 3)), p)
        assert not B.any() and not C.any()
        np.testing.assert_allclose(delta, math.log(2), rtol=1e-15)

    def test_identity_embedding(self, rng):
        p = random_params(rng, 4, 2)
        p.W_B = np.eye(4)[:, :2]
        x = rng.normal(size=(6, 4))
        assert np.array_equal(derive_selection(x, p)[0], x[:, :2])

    def test_matches_naive(self, rng):
        p = random_params(rng, 5, 3)
        x = rng.normal(size=(7, 5))
        for got, want in zip(derive_selection(x, p), naive_selection(x, p)):
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_delta_positive(self, rng):
        p = random_params(rng, 3, 2)
        p.dt_bias = np.full(3, -40.0)
        assert (derive_selection(rng.normal(size=(4, 3)), p)[2] > 0).all()

    def test_nonfinite_input(self, rng):
        x = rng.normal(size=(5, 3))
        x[3, 1] = np.nan
        with pytest.raises(NumericError) as err:
            derive_selection(x, random_params(rng, 3, 2))
        assert err.value.index == 3

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            derive_selection(np.ones((4, 2)), random_params(rng, 3, 2))


class TestDiscretization:
    def test_zoh_scalar(self):
        A_bar, B_bar = discretize_zoh(np.array([[-1.0]]), np.array([[1.0]]), np.array([[0.1]]))
        assert A_bar[0, 0, 0] == pytest.approx(0.9048374180359595, abs=1e-15)
        assert B_bar[0, 0, 0] == pytest.approx(0.09516258196404048, abs=1e-15)

    def test_zoh_half(self):
        A_bar, _ = discretize_zoh(np.array([[-1.0]]), np.array([[1.0]]), np.array([[math.log(2)]]))
        assert A_bar[0, 0, 0] == pytest.approx(0.5, abs=1e-16)

    def test_zoh_zero_step_limit(self):
        A_bar, B_bar = discretize_zoh(np.array([[-2.0]]), np.array([[1.0]]), np.array([[1e-300]]))
        assert A_bar[0, 0, 0] == 1.0 and abs(B_bar[0, 0, 0]) < 1e-299

    def test_unstable_A(self):
        with pytest.raises(StabilityError):
            discretize_zoh(np.array([[0.0]]), np.array([[1.0]]), np.array([[0.1]]))

    @pytest.mark.parametrize("dt", [0.0, -0.1])
    def test_nonpositive_step(self, dt):
        with pytest.raises(DomainError):
            discretize_zoh(np.array([[-1.0]]), np.array([[1.0]]), np.array([[dt]]))
        with pytest.raises(DomainError):
            discretize_taylor(np.array([[1.0]]), np.array([[dt]]))

    def test_taylor_literal(self):
        assert discretize_taylor(np.array([[1.0]]), np.array([[0.1]]))[0, 0, 0] == 0.1
        assert discretize_taylor(np.array([[2.5]]), np.array([[1.0]]))[0, 0, 0] == 2.5

    def test_taylor_error_quarters_per_halving(self):
        errs = []
        for dt in (0.1, 0.05, 0.025):
            _, zoh = discretize_zoh(np.array([[-1.0]]), np.array([[1.0]]), np.array([[dt]]))
            errs.append(abs(zoh - discretize_taylor(np.array([[1.0]]), np.array([[dt]])))[0, 0, 0])
        for e0, e1 in zip(errs, errs[1:]):
            assert 3.8 <= e0 / e1 <= 4.1

    def test_zoh_matches_closed_form(self, rng):
        A = -rng.uniform(0.5, 4, size=(3, 2))
        B = rng.normal(size=(4, 2))
        delta = rng.uniform(0.01, 0.5, size=(4, 3))
        A_bar, B_bar = discretize_zoh(A, B, delta)
        for l in range(4):
            for d in range(3):
                for n in range(2):
                    a = A[d, n]
                    assert A_bar[l, d, n] == pytest.approx(math.exp(delta[l, d] * a), rel=1e-14)
                    assert B_bar[l, d, n] == pytest.approx((math.exp(delta[l, d] * a) - 1) / a * B[l, n], rel=1e-12)

    def test_prepare_unknown_method(self, rng):
        with pytest.raises(DomainError):
            prepare_scan(np.ones((2, 1)), np.array([[-1.0]]), np.ones(1), np.ones((2, 1)), np.ones((2, 1)),
                         np.ones((2, 1)), method="euler")


class TestSequentialScan:
    def test_cumulative_sum(self):
        y = selective_scan_seq(scalar_inputs(1, 1, 1, 0, [1, 2, 3]))
        assert y[:, 0].tolist() == [1.0, 3.0, 6.0]

    def test_memoryless(self, rng):
        inp = random_scan_inputs(rng, 6, 3, 4)
        inp.A_bar = np.zeros_like(inp.A_bar)
        want = np.einsum("ln,ldn->ld", inp.C, inp.B_bar) * inp.x + inp.D_skip * inp.x
        np.testing.assert_allclose(selective_scan_seq(inp), want, rtol=1e-13)

    def test_matches_naive(self, rng):
        inp = random_scan_inputs(rng, 16, 3, 4)
        assert max_relative_error(selective_scan_seq(inp), naive_scan_inputs(inp)) <= 1e-12

    def test_nonfinite_reports_first_index(self, rng):
        inp = random_scan_inputs(rng, 10, 2, 2)
        inp.B_bar[6, 1, 0] = np.inf
        with pytest.raises(NumericError) as err:
            selective_scan_seq(inp)
        assert err.value.index == 6

    def test_shape_mismatch(self, rng):
        inp = random_scan_inputs(rng, 5, 2, 3)
        inp.C = inp.C[:, :2]
        with pytest.raises(DimensionError):
            selective_scan_seq(inp)

    def test_return_states(self, rng):
        inp = random_scan_inputs(rng, 5, 2, 3)
        y, H = selective_scan_seq(inp, return_states=True)
        assert H.shape == (5, 2, 3)
        np.testing.assert_allclose(H[0], inp.B_bar[0] * inp.x[0][:, None])


class TestChunkedScan:
    @pytest.mark.parametrize("chunk", ["one", "all"])
    def test_bitwise_at_extremes(self, rng, chunk):
        inp = random_scan_inputs(rng, 23, 4, 5)
        c = 1 if chunk == "one" else 23
        assert selective_scan_chunked(inp, c).tobytes() == selective_scan_seq(inp).tobytes()

    @pytest.mark.parametrize("chunk", [2, 3, 5, 7])
    def test_small_chunks(self, rng, chunk):
        inp = random_scan_inputs(rng, 40, 3, 4)
        assert max_relative_error(selective_scan_chunked(inp, chunk), selective_scan_seq(inp)) <= 1e-10

    @given(dims, st.integers(0, 2 ** 32 - 1))
    def test_every_chunk_size(self, shape, seed):
        L, D, N = shape
        g = np.random.default_rng(seed)
        inp = random_scan_inputs(g, L, D, N)
        ref = selective_scan_seq(inp)
        for chunk in range(1, L + 1):
            assert max_relative_error(selective_scan_chunked(inp, chunk), ref) <= 1e-10

    def test_chunk_larger_than_length(self, rng):
        inp = random_scan_inputs(rng, 5, 2, 2)
        assert selective_scan_chunked(inp, 50).tobytes() == selective_scan_seq(inp).tobytes()

    def test_auto_chunk(self, rng):
        inp = random_scan_inputs(rng, 100, 2, 2)
        assert max_relative_error(selective_scan_chunked(inp, "auto"), selective_scan_seq(inp)) <= 1e-10

    @pytest.mark.parametrize("chunk", [0, -3, 2.5])
    def test_bad_chunk(self, rng, chunk):
        with pytest.raises(DomainError):
            selective_scan_chunked(random_scan_inputs(rng, 4, 1, 1), chunk)


class TestBackward:
    def test_zero_upstream(self, rng):
        inp = random_scan_inputs(rng, 7, 2, 3)
        grads = selective_scan_backward(inp, np.zeros((7, 2))).as_dict()
        assert all(not g.any() for g in grads.values())

    def test_single_step(self, rng):
        inp = random_scan_inputs(rng, 1, 3, 4)
        gy = rng.normal(size=(1, 3))
        gx = selective_scan_backward(inp, gy).x
        want = (np.einsum("n,dn->d", inp.C[0], inp.B_bar[0]) + inp.D_skip) * gy[0]
        np.testing.assert_allclose(gx[0], want, rtol=1e-13)

    def test_finite_differences(self, rng):
        from sigmaseg.analysis import gradcheck

        rep = gradcheck("selective_scan", seed=11)
        assert rep.passed and rep.max_rel_error <= 1e-4

    def test_fixed_instance_shape(self):
        # L=8, D=2, N=3 against central differences, every input
        g = np.random.default_rng(5)
        inp = random_scan_inputs(g, 8, 2, 3)
        gy = g.normal(size=(8, 2))
        grads = selective_scan_backward(inp, gy, chunk=3).as_dict()
        fields = {"x": inp.x, "A_bar": inp.A_bar, "B_bar": inp.B_bar, "C": inp.C, "D_skip": inp.D_skip}
        h = 1e-5
        for name, arr in fields.items():
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = np.sum(gy * selective_scan_seq(inp))
                flat[i] = orig - h
                down = np.sum(gy * selective_scan_seq(inp))
                flat[i] = orig
                fd = (up - down) / (2 * h)
                an = grads[name].reshape(-1)[i]
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_adjoint_identity(self, seed):
        g = np.random.default_rng(seed)
        L, D, N = (int(v) for v in g.integers(1, [20, 5, 5]))
        inp = random_scan_inputs(g, L, D, N)
        gy, v = g.normal(size=(L, D)), g.normal(size=(L, D))
        gx = selective_scan_backward(inp, gy).x
        eps = 1e-6
        shifted = DiscreteScanInputs(inp.A_bar, inp.B_bar, inp.C, inp.D_skip, inp.x + eps * v)
        lhs = np.sum(gy * selective_scan_seq(shifted)) - np.sum(gy * selective_scan_seq(inp))
        rhs = eps * np.sum(gx * v)
        assert abs(lhs - rhs) <= 1e-4 * max(abs(rhs), 1e-9)

    @pytest.mark.parametrize("chunk", [1, 2, 5, 100])
    def test_checkpoint_size_does_not_matter(self, rng, chunk):
        inp = random_scan_inputs(rng, 13, 2, 3)
        gy = rng.normal(size=(13, 2))
        ref = selective_scan_backward(inp, gy, chunk=13).as_dict()
        got = selective_scan_backward(inp, gy, chunk=chunk).as_dict()
        for k in ref:
            np.testing.assert_allclose(got[k], ref[k], rtol=1e-12, atol=1e-14)

    def test_grad_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            selective_scan_backward(random_scan_inputs(rng, 4, 2, 2), np.zeros((4, 3)))


class TestProperties:
    def test_bounded_over_long_sequence(self, rng):
        L, D, N = 4096, 3, 4
        A = -np.arange(1, N + 1, dtype=float)[None].repeat(D, 0)
        delta = rng.uniform(0.01, 0.1, size=(L, D))
        x = rng.uniform(-1, 1, size=(L, D))
        B, C = rng.uniform(-1, 1, size=(L, N)), rng.uniform(-1, 1, size=(L, N))
        inp = prepare_scan(x, A, np.zeros(D), B, C, delta, "zoh")
        _, H = selective_scan_chunked(inp, 64, return_states=True)
        bound = np.abs(inp.B_bar * x[:, :, None]).max() / (1 - inp.A_bar.max())
        assert np.isfinite(H).all() and np.abs(H).max() <= bound * (1 + 1e-9)
        # no growth: the second half is not larger than the first half bound
        assert np.abs(H[L // 2:]).max() <= bound

    @given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.integers(0, 2 ** 32 - 1))
    def test_linear_in_x_with_fixed_selection(self, a, seed):
        g = np.random.default_rng(seed)
        inp = random_scan_inputs(g, 12, 3, 2)
        scaled = DiscreteScanInputs(inp.A_bar, inp.B_bar, inp.C, inp.D_skip, a * inp.x)
        np.testing.assert_allclose(selective_scan_seq(scaled), a * selective_scan_seq(inp), rtol=1e-9, atol=1e-12)

    def test_f32_tracks_f64(self, rng):
        p64 = random_params(rng, 6, 4)
        x = rng.normal(size=(48, 6))
        y64 = selective_scan(x, p64, chunk=7)
        p32 = type(p64)(**{k: v.astype(np.float32) for k, v in vars(p64).items()})
        y32 = selective_scan(x.astype(np.float32), p32, chunk=7)
        assert y32.dtype == np.float32
        assert max_relative_error(y32, y64) <= 1e-3

    def test_full_scan_matches_oracle(self, rng):
        p = random_params(rng, 4, 3)
        x = rng.normal(size=(20, 4))
        for method in ("taylor", "zoh"):
            assert max_relative_error(selective_scan(x, p, method), naive_selective_scan(x, p, method)) <= 1e-12

    def test_deterministic(self, rng):
        p = random_params(rng, 4, 3)
        x = rng.normal(size=(30, 4))
        assert selective_scan(x, p, chunk=4).tobytes() == selective_scan(x, p, chunk=4).tobytes()


class TestInit:
    def test_state_matrix_and_step(self):
        init = T.WeightInit(np.random.default_rng(0), np.float64)
        p = init_ssm_params(init, 64, 16, model_dim=96)
        np.testing.assert_allclose(p.A[0], -np.arange(1, 17, dtype=float), rtol=1e-15)
        assert (p.A < 0).all()
        dt = T.softplus(p.dt_bias)
        assert dt.min() >= DT_MIN * (1 - 1e-9) and dt.max() <= DT_MAX * (1 + 1e-9)
        assert p.dt_rank == 6 == default_dt_rank(96)
        p.validate()

    def test_validate_rejects_drift(self):
        p = init_ssm_params(T.WeightInit(np.random.default_rng(0)), 8, 4)
        p.W_C = p.W_C[:, :3]
        with pytest.raises(DimensionError):
            p.validate()
