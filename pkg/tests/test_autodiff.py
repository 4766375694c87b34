import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mdnal import autodiff as ad


def fd_ok(fn, *arrays, tol=1e-6):
    rep = ad.finite_diff_check(fn, list(arrays), tolerance=tol)
    assert rep.passed, rep
    return rep


class TestForward:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(ad.softmax(ad.Tensor(np.zeros(4))).data, [0.25] * 4)

    def test_sigmoid_zero(self):
        assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5

    def test_log_exp_inverse(self):
        assert ad.log(ad.exp(ad.Tensor(3.0))).item() == pytest.approx(3.0, abs=1e-15)

    def test_sigmoid_extremes_are_finite(self):
        out = ad.sigmoid(ad.Tensor(np.array([-800.0, 800.0]))).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_log_clamps_at_zero(self):
        assert ad.log(ad.Tensor(0.0)).item() == pytest.approx(np.log(1e-300))

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.random.default_rng(0).normal(size=(3, 5)) * 10
        np.testing.assert_allclose(ad.log_softmax(ad.Tensor(x)).data, np.log(ad.softmax(ad.Tensor(x)).data))

    def test_non_finite_raises(self):
        with pytest.raises(ad.NonFiniteError):
            ad.exp(ad.Tensor(1000.0))

    def test_shape_error(self):
        with pytest.raises(ad.ShapeError):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))

    def test_conv2d_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 6, 5, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ref = np.zeros_like(out)
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                ref[:, i, j, :] = np.einsum("bhwc,hwco->bo", patch, w)
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestBackward:
    def test_square_sum(self):
        x = ad.param([1.0, 2.0])
        (g,) = ad.backward(ad.tsum(x * x), [x])
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_constant_root_gives_zero(self):
        x = ad.param([1.0, 2.0])
        y = ad.param(3.0)
        g = ad.backward(y * 2.0, [x, y])
        np.testing.assert_array_equal(g[0], [0.0, 0.0])
        assert g[1] == 2.0

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.backward(ad.param([1.0, 2.0]) * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = ad.param(3.0)
        y = x * x
        (g,) = ad.backward(y + y, [x])
        assert g == 12.0

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(2)
        fd_ok(lambda t: ad.tsum(ad.mul(t[0], t[1]) / (ad.square(t[1]) + 1.0)),
              rng.normal(size=(3, 4)), rng.normal(size=(4,)))

    def test_softmax_and_sigmoid(self):
        rng = np.random.default_rng(3)
        fd_ok(lambda t: ad.tsum(ad.softmax(t[0]) * ad.sigmoid(t[1])), rng.normal(size=(2, 5)), rng.normal(size=(2, 5)))

    def test_log_softmax_gather(self):
        rng = np.random.default_rng(4)
        idx = np.array([[1], [0], [3]])
        fd_ok(lambda t: ad.tsum(ad.gather(ad.log_softmax(t[0]), idx)), rng.normal(size=(3, 4)))

    def test_index_and_concat(self):
        rng = np.random.default_rng(5)
        mask = np.array([True, False, True])
        fd_ok(lambda t: ad.tsum(ad.square(ad.concat([t[0][mask], t[1]], axis=0))),
              rng.normal(size=(3, 2)), rng.normal(size=(1, 2)))

    def test_matmul_reshape_transpose(self):
        rng = np.random.default_rng(6)
        fd_ok(lambda t: ad.tsum(ad.sqrt(ad.square(ad.matmul(ad.transpose(t[0]), t[1])) + 1.0)),
              rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))

    def test_max_and_mean(self):
        rng = np.random.default_rng(7)
        fd_ok(lambda t: ad.tsum(ad.tmax(t[0], axis=1)) + ad.mean(ad.exp(t[0])), rng.normal(size=(3, 4)))

    def test_conv2d(self):
        rng = np.random.default_rng(8)
        fd_ok(lambda t: ad.tsum(ad.square(ad.conv2d(t[0], t[1], stride=2, pad=1))),
              rng.normal(size=(1, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3)))


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        rep = ad.finite_diff_check(lambda t: ad.tsum(t[0] * t[0] * 3.0), [np.array([0.5, -2.0, 4.0])])
        assert rep.max_rel_err < 1e-8

    def test_wrong_gradient_is_caught(self):
        def wrong_square(x):
            return ad.apply("bad_square", lambda a: a * a, lambda g, out, a: (g * 3.0 * a,), x)

        rep = ad.finite_diff_check(lambda t: ad.tsum(wrong_square(t[0])), [np.array([1.0, 2.0])])
        assert not rep.passed

    def test_nondeterministic_fn_raises(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ad.NonDeterministicError):
            ad.finite_diff_check(lambda t: ad.tsum(t[0] * rng.normal()), [np.ones(2)])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"w": rng.normal(size=(3, 3, 1, 2)), "b": rng.normal(size=(2,)), "s": np.array(1.5)}
        ad.save_params(tmp_path / "m.ckpt", params)
        back = ad.load_params(tmp_path / "m.ckpt")
        assert sorted(back) == sorted(params)
        for k in params:
            np.testing.assert_array_equal(back[k], params[k])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(ValueError):
            ad.load_params(tmp_path / "x.ckpt")


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalized(x, c):
    p = ad.softmax(ad.Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)
    np.testing.assert_allclose(ad.softmax(ad.Tensor(x + c)).data, p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-5, 5)))
def test_sigmoid_gradient_matches_closed_form(x):
    t = ad.param(x)
    (g,) = ad.backward(ad.tsum(ad.sigmoid(t)), [t])
    s = 1.0 / (1.0 + np.exp(-x))
    np.testing.assert_allclose(g, s * (1 - s), atol=1e-12)
