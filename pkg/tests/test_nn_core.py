from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from steerlab.errors import NumericError, ShapeError, ValidationError
from steerlab.nn import Adam, AdamSettings, Graph, Rng, load_tensor, ops, randn, save_tensor, stream_id
from steerlab.nn import backward as graph_backward


def naive_matmul(a, b):
    """Triple loop in float32, accumulating k in ascending order."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc = np.float32(acc + np.float32(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


_M64 = (1 << 64) - 1


def philox4x64_10(counter, key):
    """Plain-Python Philox4x64 with 10 rounds (Salmon et al. constants)."""
    c, k = list(counter), list(key)
    for _ in range(10):
        p0 = 0xD2E7470EE14C6C93 * c[0]
        p1 = 0xCA5A826395121157 * c[2]
        c = [(p1 >> 64) ^ c[1] ^ k[0], p1 & _M64, (p0 >> 64) ^ c[3] ^ k[1], p0 & _M64]
        k = [(k[0] + 0x9E3779B97F4A7C15) & _M64, (k[1] + 0xBB67AE8584CAA73B) & _M64]
    return c


class TestMatmul:
    def test_identity_example(self):
        eye = np.eye(2, dtype=np.float32)
        b = np.array([[5, 6], [7, 8]], np.float32)
        assert np.array_equal(ops.matmul(eye, b), b)

    def test_dot_example(self):
        out = ops.matmul(np.array([[1, 2]], np.float32), np.array([[3], [4]], np.float32))
        assert out.tolist() == [[11.0]]

    def test_bit_match_naive_loop(self, np_rng):
        a = np_rng.standard_normal((7, 5)).astype(np.float32)
        b = np_rng.standard_normal((5, 3)).astype(np.float32)
        assert np.array_equal(ops.matmul(a, b), naive_matmul(a, b))

    @given(m=st.integers(1, 9), k=st.integers(1, 9), n=st.integers(1, 9), seed=st.integers(0, 2**32 - 1))
    def test_bit_match_naive_loop_any_shape(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        a = r.standard_normal((m, k)).astype(np.float32)
        b = r.standard_normal((k, n)).astype(np.float32)
        assert np.array_equal(ops.matmul(a, b), naive_matmul(a, b))

    def test_batched_matches_per_slice(self, np_rng):
        a = np_rng.standard_normal((3, 6, 4)).astype(np.float32)
        b = np_rng.standard_normal((3, 4, 5)).astype(np.float32)
        out = ops.matmul(a, b)
        for s in range(3):
            assert np.array_equal(out[s], naive_matmul(a[s], b[s]))

    def test_row_results_do_not_depend_on_batch(self, np_rng):
        a = np_rng.standard_normal((9, 16)).astype(np.float32)
        b = np_rng.standard_normal((16, 8)).astype(np.float32)
        full = ops.matmul(a, b)
        for i in range(9):
            assert np.array_equal(ops.matmul(a[i : i + 1], b)[0], full[i])

    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                      elements=st.floats(-1e3, 1e3, width=32)))
    def test_identity_exact_both_sides(self, a):
        assert np.array_equal(ops.matmul(np.eye(a.shape[0], dtype=np.float32), a), a)
        assert np.array_equal(ops.matmul(a, np.eye(a.shape[1], dtype=np.float32)), a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))

    def test_overflow_is_an_error(self):
        big = np.full((1, 2), 3e38, np.float32)
        with pytest.raises(NumericError):
            ops.matmul(big, np.full((2, 1), 10.0, np.float32))


class TestSoftmax:
    def test_uniform(self):
        out = ops.softmax_rows(np.zeros((1, 3), np.float32))
        assert np.allclose(out, 1 / 3, atol=1e-7)

    def test_large_equal(self):
        assert np.array_equal(ops.softmax_rows(np.array([[1000, 1000]], np.float32)), np.array([[0.5, 0.5]], np.float32))

    def test_against_float64_reference(self):
        x = np.array([1.0, 2.0, 3.0])
        ref = np.exp(x - x.max()) / np.exp(x - x.max()).sum()
        assert np.max(np.abs(ops.softmax_rows(x[None].astype(np.float32))[0] - ref)) < 1e-6

    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                      elements=st.floats(-500, 500, width=32)))
    def test_rows_sum_to_one(self, x):
        s = ops.softmax_rows(x).astype(np.float64).sum(axis=1)
        assert np.all(np.abs(s - 1.0) <= 1e-6)

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericError):
            ops.softmax_rows(np.array([[np.nan, 0.0]], np.float32))


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = ops.layer_norm(np.full((4,), 3.5, np.float32), np.ones(4, np.float32), np.zeros(4, np.float32))
        assert np.array_equal(out, np.zeros(4, np.float32))

    def test_two_element_formula(self):
        out = ops.layer_norm(np.array([1, -1], np.float32), np.ones(2, np.float32), np.zeros(2, np.float32))
        expect = 1 / np.sqrt(1 + 1e-5)
        assert np.allclose(out, [expect, -expect], atol=1e-7)
        assert abs(out[0] - 0.999995) < 1e-6

    def test_against_float64_reference(self, np_rng):
        x = np_rng.standard_normal(16)
        g = np_rng.standard_normal(16)
        b = np_rng.standard_normal(16)
        ref = (x - x.mean()) / np.sqrt(x.var() + 1e-5) * g + b
        out = ops.layer_norm(x.astype(np.float32), g.astype(np.float32), b.astype(np.float32))
        assert np.max(np.abs(out - ref)) < 1e-5

    def test_affine_shape_checked(self):
        with pytest.raises(ShapeError):
            ops.layer_norm(np.zeros((2, 4), np.float32), np.ones(3, np.float32), np.zeros(3, np.float32))


def test_gelu_matches_float64_tanh_form(np_rng):
    x = (np_rng.standard_normal(1000) * 4).astype(np.float32)
    v = x.astype(np.float64)
    ref = 0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v**3)))
    assert np.max(np.abs(ops.gelu(x) - ref)) < 1e-6 * max(1.0, np.abs(ref).max())


def test_im2col_col2im_are_adjoint(np_rng):
    x = np_rng.standard_normal((2, 3, 8, 8)).astype(np.float64)
    cols = ops.im2col(x, 3, 2, 1)
    y = np_rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * ops.col2im(y, x.shape, 3, 2, 1))
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


class TestRng:
    def test_same_seed_identical(self):
        assert np.array_equal(randn(Rng(7, "x"), (5, 4)), randn(Rng(7, "x"), (5, 4)))

    def test_streams_differ(self):
        assert not np.array_equal(Rng(7, "a").randn((64,)), Rng(7, "b").randn((64,)))

    def test_moments(self):
        z = Rng(123, "moments").randn((100_000,)).astype(np.float64)
        assert abs(z.mean()) < 0.02
        assert abs(z.var() - 1.0) < 0.02

    def test_counter_addressing(self):
        """A draw depends only on (seed, stream, index): split reads equal one read."""
        whole = Rng(5, 9).raw(11)
        r = Rng(5, 9)
        parts = np.concatenate([r.raw(3), r.raw(5), r.raw(3)])
        assert np.array_equal(whole, parts)
        assert np.array_equal(Rng(5, 9, position=6).raw(5), whole[6:])

    def test_matches_reference_philox(self):
        """Draw i is word i % 4 of Philox4x64-10 at counter i // 4 + 1."""
        seed, sid = 42, stream_id("pin")
        ref = []
        for block in range(1, 4):
            ref += philox4x64_10([block, 0, 0, 0], [seed, sid])
        assert Rng(seed, "pin").raw(12).tolist() == ref

    def test_substreams_independent(self):
        root = Rng(1, "root")
        a, b = root.substream("a").raw(100), root.substream("b").raw(100)
        assert len(set(a.tolist()) & set(b.tolist())) == 0

    def test_permutation_is_a_permutation(self):
        p = Rng(3).permutation(50)
        assert sorted(p.tolist()) == list(range(50))


class TestBackward:
    def test_sum_gives_ones(self):
        g = Graph()
        p = g.param("p", np.arange(6, dtype=np.float32).reshape(2, 3))
        grads = g.backward(g.sum(p))
        assert np.array_equal(grads["p"], np.ones((2, 3), np.float32))

    def test_mse_single_element(self):
        g = Graph()
        p = g.param("p", np.array([2.0], np.float32))
        grads = graph_backward(g, g.mse(p, g.const(np.zeros(1))))
        assert np.allclose(grads["p"], [4.0])

    def test_disconnected_param_gets_zeros(self):
        g = Graph()
        p = g.param("p", np.ones(3, np.float32))
        q = g.param("q", np.ones((2, 2), np.float32))
        grads = g.backward(g.sum(p))
        assert np.array_equal(grads["q"], np.zeros((2, 2), np.float32))

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        p = g.param("p", np.ones(3, np.float32))
        with pytest.raises(ValidationError):
            g.backward(g.add(p, p))

    def test_forward_only_graph_cannot_backward(self):
        g = Graph(record=False)
        p = g.param("p", np.ones(3, np.float32))
        with pytest.raises(ValidationError):
            g.backward(g.sum(p))

    @pytest.mark.parametrize("op", ["matmul", "softmax", "layer_norm", "gelu", "mul", "slice", "mean", "conv", "xent", "take"])
    def test_ops_against_finite_differences(self, op, np_rng):
        shapes = {"a": (3, 4), "b": (4, 5), "g": (4,), "w": (3 * 9, 4), "c": (4,)}
        init = {k: np_rng.standard_normal(s) for k, s in shapes.items()}
        img = np_rng.standard_normal((2, 3, 6, 6))
        labels = np.array([0, 2, 1])

        def loss_fn(P, g):
            a, b = P["a"], P["b"]
            if op == "matmul":
                y = g.matmul(a, b)
            elif op == "softmax":
                y = g.mul(g.softmax_rows(a), g.const(np.arange(12.0).reshape(3, 4)))
            elif op == "layer_norm":
                y = g.mul(g.layer_norm(a, P["g"], P["c"]), g.const(np.arange(12.0).reshape(3, 4)))
            elif op == "gelu":
                y = g.gelu(g.scale(a, 2.0))
            elif op == "mul":
                y = g.mul(a, g.sub(a, g.scale(a, 0.5)))
            elif op == "slice":
                y = g.mul(g.slice(b, slice(1, 3)), g.slice(b, slice(2, 4)))
            elif op == "mean":
                y = g.mul(g.mean(a, axis=1), g.mean(a, axis=1))
            elif op == "conv":
                y = g.gelu(g.conv2d(g.const(img), P["w"], P["c"], 2, 1))
            elif op == "xent":
                return g.cross_entropy(g.matmul(a, b), labels)
            else:
                y = g.take_rows(b, np.array([3, 0, 3]))
                y = g.mul(y, y)
            return g.mse(y, g.const(np.zeros(y.shape)))

        g = Graph(dtype=np.float64)
        P = {k: g.param(k, v) for k, v in init.items()}
        grads = g.backward(loss_fn(P, g))
        h = 1e-6
        for name, base in init.items():
            num = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                vals = []
                for sgn in (1, -1):
                    pert = {k: v.copy() for k, v in init.items()}
                    pert[name][idx] += sgn * h
                    gg = Graph(dtype=np.float64, record=False)
                    vals.append(float(loss_fn({k: gg.param(k, v) for k, v in pert.items()}, gg).value))
                num[idx] = (vals[0] - vals[1]) / (2 * h)
            err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), 1e-12)
            assert err < 1e-5 or np.linalg.norm(num) < 1e-12, (op, name, err)

    def test_backward_is_deterministic(self, np_rng):
        a = np_rng.standard_normal((5, 7)).astype(np.float32)
        b = np_rng.standard_normal((7, 3)).astype(np.float32)

        def run():
            g = Graph()
            A, B = g.param("a", a), g.param("b", b)
            return g.backward(g.mse(g.gelu(g.matmul(A, B)), g.const(np.ones((5, 3)))))

        r1, r2 = run(), run()
        assert all(np.array_equal(r1[k], r2[k]) for k in r1)


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -1.0], np.float32)}
    Adam(p, AdamSettings(lr=0.1)).step(p, {"w": np.array([0.5, -2.0], np.float32)})
    assert np.allclose(p["w"], [0.9, -0.9], atol=1e-6)


class TestTensorIO:
    def test_round_trip(self, tmp_path, np_rng):
        x = np_rng.standard_normal((3, 2, 5)).astype(np.float32)
        save_tensor(tmp_path / "x.stensor", x)
        assert np.array_equal(load_tensor(tmp_path / "x.stensor"), x)
        head = (tmp_path / "x.stensor").read_bytes().split(b"\n", 1)[0]
        assert head == b"STEERTENSOR 1 f32 3 3 2 5"

    def test_truncated_payload_rejected(self, tmp_path):
        (tmp_path / "bad.stensor").write_bytes(b"STEERTENSOR 1 f32 1 4\n" + b"\0" * 8)
        with pytest.raises(ValidationError):
            load_tensor(tmp_path / "bad.stensor")

    def test_wrong_magic_rejected(self, tmp_path):
        (tmp_path / "bad.stensor").write_bytes(b"NOTATENSOR 1 f32 1 1\n" + b"\0" * 4)
        with pytest.raises(ValidationError):
            load_tensor(tmp_path / "bad.stensor")
