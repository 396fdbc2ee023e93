import numpy as np
import pytest
from hypothesis import given, strategies as st

from sigmaseg import tensor as T
from sigmaseg.checks import random_params
from sigmaseg.errors import ConfigError, DimensionError
from sigmaseg.fusion import (CrossExchangeMode, ModalityPair, concat_selective_scan, conmb, consa_baseline,
                             cromb, cross_selective_scan, init_conmb, init_consa, init_cromb, self_attention)
from sigmaseg.oracles import (max_relative_error, naive_attention, naive_concat_scan, naive_cross_scan,
                              traversal_order)
from sigmaseg.scan2d import DIRECTIONS, ScanDirection, flatten_direction
from sigmaseg.ssm import prepare_scan, derive_selection, selective_scan, selective_scan_seq

MODES = {"C": ("C",), "B": ("B",), "D": ("D",), "B&C": ("B", "C"), "C&D": ("C", "D")}


def f64_init(seed=0):
    return T.WeightInit(np.random.default_rng(seed), np.float64)


def random_pair(rng, H=4, W=4, C=8, scale=1.0):
    return ModalityPair(rng.normal(0, scale, size=(H, W, C)), rng.normal(0, scale, size=(H, W, C)))


class TestModes:
    @pytest.mark.parametrize("text,member", [("C", "C"), ("B&C", "B_and_C"), ("C&D", "C_and_D"),
                                             ("B_and_C", "B_and_C"), ("D", "D"), ("B", "B")])
    def test_parse(self, text, member):
        assert CrossExchangeMode.parse(text).value == member

    @pytest.mark.parametrize("text", ["A", "C&B", "", "c"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            CrossExchangeMode.parse(text)

    def test_swaps(self):
        assert CrossExchangeMode.B_AND_C.swaps == {"B", "C"}
        assert CrossExchangeMode.C.swaps == {"C"}


class TestCrossScan:
    def test_symmetry(self, rng):
        p = random_params(rng, 3, 4)
        s = rng.normal(size=(9, 3))
        for mode in MODES:
            a, b = cross_selective_scan(s, s.copy(), p, p, mode)
            assert a.tobytes() == b.tobytes()

    def test_equal_C_reduces_to_independent_scans(self, rng):
        p, q = random_params(rng, 2, 4), random_params(rng, 2, 4)
        a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        # zero projections make C identical (zero) for both sequences
        p.W_C = np.zeros_like(p.W_C)
        q.W_C = np.zeros_like(q.W_C)
        ya, yb = cross_selective_scan(a, b, p, q, "C")
        np.testing.assert_allclose(ya, selective_scan(a, p), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(yb, selective_scan(b, q), rtol=1e-12, atol=1e-15)

    def test_equal_C_same_sequence(self, rng):
        # identical C via identical x and W_C; the other parameters differ
        p, q = random_params(rng, 2, 3), random_params(rng, 2, 3)
        q.W_C = p.W_C.copy()
        s = rng.normal(size=(10, 2))
        ya, yb = cross_selective_scan(s, s.copy(), p, q, "C")
        assert max_relative_error(ya, selective_scan(s, p)) <= 1e-12
        assert max_relative_error(yb, selective_scan(s, q)) <= 1e-12

    @pytest.mark.parametrize("mode", list(MODES))
    def test_matches_hand_swapped_oracle(self, rng, mode):
        p, q = random_params(rng, 2, 4), random_params(rng, 2, 4)
        a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        got = cross_selective_scan(a, b, p, q, mode)
        want = naive_cross_scan(a, b, p, q, MODES[mode])
        for g, w in zip(got, want):
            assert max_relative_error(g, w) <= 1e-12

    def test_length_mismatch(self, rng):
        p = random_params(rng, 2, 2)
        with pytest.raises(DimensionError):
            cross_selective_scan(np.zeros((3, 2)), np.zeros((4, 2)), p, p)

    def test_bad_mode(self, rng):
        p = random_params(rng, 2, 2)
        with pytest.raises(ConfigError):
            cross_selective_scan(np.zeros((3, 2)), np.zeros((3, 2)), p, p, "E")


class TestConcatScan:
    def test_reverse_and_separate_roundtrip(self, rng):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        S = np.concatenate([a, b])
        assert np.array_equal(S[::-1][::-1], S)
        assert np.array_equal(S[:5], a) and np.array_equal(S[5:], b)

    def test_matches_double_scan_oracle(self, rng):
        p = random_params(rng, 3, 4)
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        for g, w in zip(concat_selective_scan(a, b, p), naive_concat_scan(a, b, p)):
            assert max_relative_error(g, w) <= 1e-12

    def test_memoryless_double_count(self, rng):
        p = random_params(rng, 3, 2)
        p.A_log = np.full((3, 2), 600.0)  # A_bar underflows to exactly 0
        a, b = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
        S = np.concatenate([a, b])
        B, C, dt = derive_selection(S, p)
        single = selective_scan_seq(prepare_scan(S, p.A, p.D_skip, B, C, dt))
        ya, yb = concat_selective_scan(a, b, p)
        assert np.array_equal(np.concatenate([ya, yb]), 2 * single)

    def test_chunked(self, rng):
        p = random_params(rng, 2, 3)
        a, b = rng.normal(size=(9, 2)), rng.normal(size=(9, 2))
        for g, w in zip(concat_selective_scan(a, b, p, chunk=4), concat_selective_scan(a, b, p)):
            assert max_relative_error(g, w) <= 1e-12


def cromb_oracle(pair, w, swaps):
    H, W, _ = pair.shape

    def pre(F, bw):
        n = T.layer_norm(F, bw.norm_gamma, bw.norm_beta)
        return T.silu(T.depthwise_conv2d(n @ bw.W_in, bw.conv_kernel, bw.conv_bias)), T.silu(n @ bw.W_gate)

    (u_r, g_r), (u_x, g_x) = pre(pair.rgb, w.rgb), pre(pair.x, w.x)
    y_r, y_x = np.zeros_like(u_r), np.zeros_like(u_x)
    for d in range(4):
        cells = traversal_order(H, W, d)
        s_r = np.array([u_r[i, j] for i, j in cells])
        s_x = np.array([u_x[i, j] for i, j in cells])
        o_r, o_x = naive_cross_scan(s_r, s_x, w.rgb.scans.scans[d], w.x.scans.scans[d], swaps)
        for k, (i, j) in enumerate(cells):
            y_r[i, j] += o_r[k]
            y_x[i, j] += o_x[k]
    return pair.rgb + (y_r * g_r) @ w.rgb.W_out, pair.x + (y_x * g_x) @ w.x.W_out


class TestCroMB:
    def test_zero_input_zero_output(self):
        w = init_cromb(f64_init(), 8, 16, 4)
        out_r, out_x = cromb(ModalityPair(np.zeros((4, 4, 8)), np.zeros((4, 4, 8))), w)
        assert not out_r.any() and not out_x.any()

    def test_symmetry_bitwise(self, rng):
        w = init_cromb(f64_init(), 8, 16, 4)
        w.x = w.rgb
        F = rng.normal(size=(4, 4, 8))
        for mode in MODES:
            out_r, out_x = cromb(ModalityPair(F, F.copy()), w, mode)
            assert out_r.tobytes() == out_x.tobytes()

    def test_swap_inputs_and_weights(self, rng):
        w = init_cromb(f64_init(3), 8, 16, 4)
        pair = random_pair(rng)
        a_r, a_x = cromb(pair, w, "B&C")
        b_r, b_x = cromb(ModalityPair(pair.x, pair.rgb), w.swapped(), "B&C")
        assert a_r.tobytes() == b_x.tobytes() and a_x.tobytes() == b_r.tobytes()

    @pytest.mark.parametrize("mode", ["C", "D", "C&D"])
    def test_matches_pipeline_oracle(self, rng, mode):
        w = init_cromb(f64_init(4), 8, 16, 4)
        pair = random_pair(rng, C=8, scale=3.0)
        got = cromb(pair, w, mode)
        want = cromb_oracle(pair, w, MODES[mode])
        for g, wv in zip(got, want):
            np.testing.assert_allclose(g, wv, rtol=1e-9, atol=1e-12)

    def test_shape(self, rng):
        w = init_cromb(f64_init(), 4, 8, 2)
        out = cromb(random_pair(rng, 3, 5, 4), w)
        assert out[0].shape == out[1].shape == (3, 5, 4)


def conmb_oracle(pair, w):
    H, W, _ = pair.shape
    u_r = T.silu(T.depthwise_conv2d(pair.rgb @ w.W_in_rgb, w.conv_kernel_rgb, w.conv_bias_rgb))
    u_x = T.silu(T.depthwise_conv2d(pair.x @ w.W_in_x, w.conv_kernel_x, w.conv_bias_x))
    cells = traversal_order(H, W, 0)
    y_r, y_x = naive_concat_scan(np.array([u_r[i, j] for i, j in cells]),
                                 np.array([u_x[i, j] for i, j in cells]), w.scan)
    E = u_r.shape[2]
    cat = np.concatenate([y_r * w.scale_rgb[0], y_x * w.scale_x[0]], axis=1)
    return (cat @ w.W_out).reshape(H, W, -1), E


class TestConMB:
    def test_matches_pipeline_oracle(self, rng):
        w = init_conmb(f64_init(5), 8, 16, 4)
        pair = random_pair(rng, scale=3.0)
        want, _ = conmb_oracle(pair, w)
        np.testing.assert_allclose(conmb(pair, w), want, rtol=1e-9, atol=1e-12)

    def test_scale_gate_isolates_rgb(self, rng):
        # with s_x = 0 the x-half rows of the output projection are never read
        w = init_conmb(f64_init(6), 8, 16, 4)
        w.scale_x = np.zeros(1)
        pair = random_pair(rng)
        before = conmb(pair, w)
        w.W_out[16:] = 123.0
        np.testing.assert_array_equal(conmb(pair, w), before)

    def test_identical_inputs_swap_invariant(self, rng):
        w = init_conmb(f64_init(7), 8, 16, 4)
        w.W_in_x, w.conv_kernel_x, w.conv_bias_x = w.W_in_rgb, w.conv_kernel_rgb, w.conv_bias_rgb
        F = rng.normal(size=(3, 3, 8))
        a = conmb(ModalityPair(F, F.copy()), w)
        b = conmb(ModalityPair(F.copy(), F), w)
        assert a.tobytes() == b.tobytes()

    @given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([4, 8]))
    def test_shape(self, H, W, C):
        g = np.random.default_rng(H * 100 + W * 10 + C)
        w = init_conmb(f64_init(), C, 2 * C, 2)
        assert conmb(random_pair(g, H, W, C), w).shape == (H, W, C)

    def test_pair_mismatch(self):
        with pytest.raises(DimensionError):
            ModalityPair(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
        with pytest.raises(DimensionError):
            ModalityPair(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conmb(random_pair(rng, C=4), init_conmb(f64_init(), 8, 16, 2))


class TestConSA:
    def test_single_token_returns_value_projection(self, rng):
        S = rng.normal(size=(1, 4))
        Wq, Wk, Wv, Wo = (rng.normal(size=(4, 4)) for _ in range(4))
        np.testing.assert_allclose(self_attention(S, Wq, Wk, Wv, Wo), S @ Wv @ Wo, rtol=1e-13)

    def test_uniform_values(self, rng):
        S = rng.normal(size=(6, 4))
        S[:, 0] = 2.0
        Wv = np.zeros((4, 4))
        Wv[0, :] = 1.0  # every value row becomes [2, 2, 2, 2]
        out = self_attention(S, rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), Wv, np.eye(4))
        np.testing.assert_allclose(out, np.full((6, 4), 2.0), rtol=1e-13)

    def test_matches_naive_attention(self, rng):
        w = init_consa(f64_init(8), 4, 8)
        for name in ("W_q", "W_k", "W_v"):
            setattr(w, name, rng.normal(size=(8, 8)))
        pair = random_pair(rng, 2, 2, 4)
        u_r = T.silu(T.depthwise_conv2d(pair.rgb @ w.W_in_rgb, w.conv_kernel_rgb, w.conv_bias_rgb))
        u_x = T.silu(T.depthwise_conv2d(pair.x @ w.W_in_x, w.conv_kernel_x, w.conv_bias_x))
        S = np.concatenate([flatten_direction(u_r, ScanDirection.ROW_MAJOR),
                            flatten_direction(u_x, ScanDirection.ROW_MAJOR)])
        att = naive_attention(S @ w.W_q, S @ w.W_k, S @ w.W_v) @ w.W_o
        want = (np.concatenate([att[:4] * w.scale_rgb[0], att[4:] * w.scale_x[0]], axis=1) @ w.W_out)
        np.testing.assert_allclose(consa_baseline(pair, w), want.reshape(2, 2, 4), rtol=1e-10, atol=1e-14)

    def test_shape(self, rng):
        w = init_consa(f64_init(), 4, 8)
        assert consa_baseline(random_pair(rng, 3, 2, 4), w).shape == (3, 2, 4)
