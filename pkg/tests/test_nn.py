"""Gradient and numerics tests for the hand-written kernels."""

import numpy as np
import pytest

from lipspeech import nn
from lipspeech.errors import InputError, NumericalError

RNG = np.random.default_rng(0)


def to_double(layer):
    for name in layer.param_names():
        setattr(layer, name, getattr(layer, name).astype(np.float64))
        setattr(layer, "g_" + name, np.zeros_like(getattr(layer, name)))
    for name in layer.buffer_names():
        setattr(layer, name, getattr(layer, name).astype(np.float64))
    return layer


def fd_max_rel_error(f, arrays, eps=1e-6, probes=5, rng=None):
    """Central finite differences of scalar f() against the returned grads.

    f() -> (loss, {name: grad}); arrays maps the same names to the tensors
    being perturbed in place.
    """
    rng = rng or np.random.default_rng(123)
    _, grads = f()
    # snapshot: layer grad buffers are mutated in place by later f() calls
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    worst = 0.0
    for name, p in arrays.items():
        g = grads[name]
        for _ in range(min(probes, p.size)):
            i = tuple(rng.integers(0, s) for s in p.shape)
            orig = p[i]
            p[i] = orig + eps
            lp, _ = f()
            p[i] = orig - eps
            lm, _ = f()
            p[i] = orig
            num = (lp - lm) / (2.0 * eps)
            denom = max(abs(num), abs(g[i]), 1e-6)
            worst = max(worst, abs(num - g[i]) / denom)
    return worst


def conv3d_loops(x, w, b, stride, padding):
    """Brute-force nested-loop conv3d, the independent oracle."""
    kt, kh, kw, cin, cout = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    ot = (x.shape[1] + 2 * pt - kt) // st + 1
    oh = (x.shape[2] + 2 * ph - kh) // sh + 1
    ow = (x.shape[3] + 2 * pw - kw) // sw + 1
    y = np.zeros((x.shape[0], ot, oh, ow, cout))
    for n in range(x.shape[0]):
        for a in range(ot):
            for bb in range(oh):
                for c in range(ow):
                    patch = xp[n, a * st : a * st + kt, bb * sh : bb * sh + kh,
                               c * sw : c * sw + kw, :]
                    for o in range(cout):
                        y[n, a, bb, c, o] = np.sum(patch * w[..., o]) + b[o]
    return y


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


class TestActivations:
    @pytest.mark.parametrize("fwd,bwd", [
        (nn.relu_forward, nn.relu_backward),
        (nn.tanh_forward, nn.tanh_backward),
        (nn.sigmoid_forward, nn.sigmoid_backward),
        (nn.softmax_forward, nn.softmax_backward),
    ])
    def test_gradients(self, fwd, bwd):
        x = RNG.standard_normal((3, 7)) + 0.01
        gy = RNG.standard_normal((3, 7))

        def f():
            y, cache = fwd(x)
            return float((y * gy).sum()), {"x": bwd(gy, cache)}

        assert fd_max_rel_error(f, {"x": x}) < 1e-6

    def test_softmax_rows_sum_to_one(self):
        y, _ = nn.softmax_forward(RNG.standard_normal((4, 9)) * 30)
        assert np.allclose(y.sum(axis=-1), 1.0)
        assert y.min() >= 0.0

    def test_dropout_scaling_and_mask(self):
        x = np.ones((200, 50))
        y, mask = nn.dropout_forward(x, 0.5, np.random.default_rng(1))
        kept = y != 0
        assert np.allclose(y[kept], 2.0)
        assert abs(kept.mean() - 0.5) < 0.05
        assert np.array_equal(nn.dropout_backward(np.ones_like(y), mask), mask)

    def test_dropout_rejects_bad_rate(self):
        with pytest.raises(InputError):
            nn.dropout_forward(np.ones(3), 1.0, RNG)

    def test_check_finite(self):
        nn.check_finite("ok", np.ones(3))
        with pytest.raises(NumericalError):
            nn.check_finite("bad", np.array([1.0, np.inf]))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class TestLinear:
    def test_gradients(self):
        lin = to_double(nn.Linear(5, 4, rng=RNG))
        x = RNG.standard_normal((3, 2, 5))
        gy = RNG.standard_normal((3, 2, 4))

        def f():
            lin.zero_grad()
            y, cache = lin.forward(x)
            gx = lin.backward(gy, cache)
            return float((y * gy).sum()), {**lin.grads(), "x": gx}

        assert fd_max_rel_error(f, {**lin.params(), "x": x}) < 1e-6

    def test_no_bias(self):
        lin = nn.Linear(3, 2, rng=RNG, bias=False)
        assert lin.param_names() == ("w",)

    def test_rejects_dim_mismatch(self):
        with pytest.raises(InputError):
            nn.Linear(3, 2, rng=RNG).forward(np.zeros((1, 4)))


class TestBatchNorm:
    def test_train_gradients(self):
        bn = to_double(nn.BatchNorm(4))
        x = RNG.standard_normal((6, 3, 4))
        gy = RNG.standard_normal((6, 3, 4))
        rm, rv = bn.running_mean.copy(), bn.running_var.copy()

        def f():
            bn.zero_grad()
            y, cache = bn.forward(x, train=True)
            bn.running_mean[...] = rm
            bn.running_var[...] = rv
            gx = bn.backward(gy, cache)
            return float((y * gy).sum()), {**bn.grads(), "x": gx}

        assert fd_max_rel_error(f, {**bn.params(), "x": x}) < 1e-6

    def test_eval_gradients(self):
        bn = to_double(nn.BatchNorm(4))
        bn.running_mean[...] = RNG.standard_normal(4)
        bn.running_var[...] = RNG.random(4) + 0.5
        x = RNG.standard_normal((5, 4))
        gy = RNG.standard_normal((5, 4))

        def f():
            bn.zero_grad()
            y, cache = bn.forward(x, train=False)
            gx = bn.backward(gy, cache)
            return float((y * gy).sum()), {**bn.grads(), "x": gx}

        assert fd_max_rel_error(f, {**bn.params(), "x": x}) < 1e-6

    def test_train_output_is_normalized(self):
        bn = nn.BatchNorm(3)
        y, _ = bn.forward(RNG.standard_normal((100, 3)).astype(np.float32), train=True)
        assert np.abs(y.mean(axis=0)).max() < 1e-5
        assert np.abs(y.std(axis=0) - 1.0).max() < 1e-2

    def test_running_stats_update(self):
        bn = nn.BatchNorm(2, momentum=0.5)
        x = np.full((10, 2), 4.0, dtype=np.float32)
        bn.forward(x, train=True)
        assert np.allclose(bn.running_mean, 2.0)  # 0.5*0 + 0.5*4


class TestConv3d:
    @pytest.mark.parametrize("kernel,stride,padding,shape", [
        ((3, 3, 3), (1, 2, 2), (1, 1, 1), (2, 4, 6, 6, 2)),
        ((3, 5, 5), (1, 2, 2), (1, 2, 2), (1, 3, 8, 8, 3)),
        ((3, 3, 3), (1, 1, 1), (1, 0, 0), (2, 4, 3, 3, 2)),
        ((3, 1, 1), (1, 1, 1), (1, 0, 0), (2, 4, 1, 1, 3)),
        ((1, 3, 3), (2, 1, 1), (0, 1, 1), (2, 5, 4, 4, 2)),
    ])
    def test_matches_loop_oracle_and_gradients(self, kernel, stride, padding, shape):
        conv = to_double(nn.Conv3d(shape[-1], 3, kernel, stride, padding, rng=RNG))
        x = RNG.standard_normal(shape)
        y, cache = conv.forward(x)
        oracle = conv3d_loops(x, conv.w, conv.b, stride, padding)
        assert np.abs(y - oracle).max() < 1e-12
        gy = RNG.standard_normal(y.shape)

        def f():
            conv.zero_grad()
            y, cache = conv.forward(x)
            gx = conv.backward(gy, cache)
            return float((y * gy).sum()), {**conv.grads(), "x": gx}

        assert fd_max_rel_error(f, {**conv.params(), "x": x}) < 1e-6

    def test_skip_input_grad(self):
        conv = nn.Conv3d(2, 2, rng=RNG)
        x = RNG.standard_normal((1, 3, 4, 4, 2)).astype(np.float32)
        y, cache = conv.forward(x)
        assert conv.backward(np.ones_like(y), cache, need_input_grad=False) is None
        assert np.abs(conv.g_w).sum() > 0

    def test_rejects_oversized_kernel(self):
        conv = nn.Conv3d(1, 1, (5, 5, 5), (1, 1, 1), (0, 0, 0), rng=RNG)
        with pytest.raises(InputError):
            conv.forward(np.zeros((1, 2, 2, 2, 1)))


class TestConv1d:
    def test_gradients(self):
        conv = to_double(nn.Conv1d(3, 4, 5, rng=RNG))
        x = RNG.standard_normal((2, 9, 3))
        gy = RNG.standard_normal((2, 9, 4))

        def f():
            conv.zero_grad()
            y, cache = conv.forward(x)
            gx = conv.backward(gy, cache)
            return float((y * gy).sum()), {**conv.grads(), "x": gx}

        assert fd_max_rel_error(f, {**conv.params(), "x": x}) < 1e-6

    def test_same_length_output(self):
        conv = nn.Conv1d(2, 3, 31, rng=RNG)
        y, _ = conv.forward(np.zeros((1, 50, 2), dtype=np.float32))
        assert y.shape == (1, 50, 3)

    def test_rejects_even_kernel(self):
        with pytest.raises(InputError):
            nn.Conv1d(2, 2, 4, rng=RNG)


class TestLSTMCell:
    def test_gradients(self):
        cell = to_double(nn.LSTMCell(5, 4, rng=RNG))
        x = RNG.standard_normal((3, 5))
        h0 = RNG.standard_normal((3, 4))
        c0 = RNG.standard_normal((3, 4))
        gh = RNG.standard_normal((3, 4))
        gc = RNG.standard_normal((3, 4))

        def f():
            cell.zero_grad()
            h, c, cache = cell.forward(x, h0, c0)
            gx, ghp, gcp = cell.backward(gh, gc, cache)
            return (
                float((h * gh).sum() + (c * gc).sum()),
                {**cell.grads(), "x": gx, "h0": ghp, "c0": gcp},
            )

        assert fd_max_rel_error(f, {**cell.params(), "x": x, "h0": h0, "c0": c0}) < 1e-5

    def test_forget_gate_carries_cell(self):
        cell = nn.LSTMCell(2, 3, rng=RNG)
        cell.b[3:6] = 100.0  # forget gate saturated open
        cell.b[:3] = -100.0  # input gate closed
        c0 = np.array([[1.0, -2.0, 0.5]], dtype=np.float32)
        _, c, _ = cell.forward(np.zeros((1, 2), np.float32), np.zeros((1, 3), np.float32), c0)
        assert np.allclose(c, c0, atol=1e-5)

    def test_rejects_shape_mismatch(self):
        cell = nn.LSTMCell(2, 3, rng=RNG)
        with pytest.raises(InputError):
            cell.forward(np.zeros((1, 5)), np.zeros((1, 3)), np.zeros((1, 3)))


# ---------------------------------------------------------------------------
# Optimizer and utilities
# ---------------------------------------------------------------------------


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = np.array([1.0, -1.0])
        g = np.array([0.3, -0.7])
        st = nn.AdamState(lr=0.1)
        nn.adam_step({"p": p}, {"p": g}, st)
        # after bias correction the first update is lr * g / (|g| + eps)
        assert np.allclose(p, [1.0 - 0.1, -1.0 + 0.1], atol=1e-6)

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(2)
        p = rng.standard_normal(6)
        ref = p.copy()
        st = nn.AdamState(lr=0.01)
        m = np.zeros(6)
        v = np.zeros(6)
        for t in range(1, 6):
            g = rng.standard_normal(6)
            nn.adam_step({"p": p}, {"p": g}, st)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert np.allclose(p, ref, atol=1e-12)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(InputError):
            nn.adam_step({"p": np.zeros(3)}, {"p": np.zeros(4)}, nn.AdamState())


class TestGradClip:
    def test_clips_to_max_norm(self):
        g = {"a": np.array([3.0, 4.0])}
        norm = nn.clip_grad_norm(g, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(g["a"]) == pytest.approx(1.0)

    def test_leaves_small_grads(self):
        g = {"a": np.array([0.3, 0.4])}
        nn.clip_grad_norm(g, 1.0)
        assert np.allclose(g["a"], [0.3, 0.4])


class TestTensorFile:
    def test_round_trip_preserves_order_and_values(self, tmp_path):
        tensors = {
            "b.w": RNG.standard_normal((3, 4)).astype(np.float32),
            "a.scalar": np.float32(2.5),
        }
        path = tmp_path / "t.l2w"
        nn.save_tensors(path, tensors)
        out = nn.load_tensors(path)
        assert list(out.keys()) == ["b.w", "a.scalar"]
        assert np.array_equal(out["b.w"], tensors["b.w"])
        assert out["a.scalar"] == np.float32(2.5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(InputError):
            nn.load_tensors(path)

    def test_byte_determinism(self, tmp_path):
        tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
        nn.save_tensors(tmp_path / "a", tensors)
        nn.save_tensors(tmp_path / "b", tensors)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
