"""Tests for the dual encoders, Adam and checkpoint persistence."""

import json
import struct

import numpy as np
import pytest

from fairsinkhorn.contrastive import EmbeddingBatch, FairClipConfig, fairclip_loss
from fairsinkhorn.encoders import (ADAM_PRESETS, Checkpoint, CheckpointError, EncoderParams,
                                   OptimizerState, backward, forward, init_encoder,
                                   load_checkpoint, optimizer_step, save_checkpoint)


def loop_forward(enc, x):
    def dense(rows, w, b, relu):
        out = []
        for row in rows:
            vals = []
            for j in range(w.shape[1]):
                s = b[j] + sum(row[k] * w[k, j] for k in range(w.shape[0]))
                vals.append(max(s, 0.0) if relu else s)
            out.append(vals)
        return out

    h = x.tolist()
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        h = dense(h, w, b, relu=i < len(enc.weights) - 1)
    return np.array(h)


class TestForward:
    def test_linear_identity(self):
        enc = EncoderParams("linear", [np.eye(3)], [np.zeros(3)])
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(forward(enc, x), x)

    def test_dead_relu(self):
        enc = EncoderParams("mlp1", [np.ones((2, 4)), np.ones((4, 3))],
                            [np.full(4, -100.0), np.array([0.5, -1.0, 2.0])])
        out = forward(enc, np.array([[1.0, 2.0], [0.0, 3.0]]))
        np.testing.assert_array_equal(out, [[0.5, -1.0, 2.0]] * 2)

    @pytest.mark.parametrize("kind", ["linear", "mlp1"])
    def test_matches_loop(self, kind):
        rng = np.random.default_rng(0)
        enc = init_encoder(kind, 4, 3, rng, hidden_dim=5)
        x = rng.normal(size=(6, 4))
        np.testing.assert_allclose(forward(enc, x), loop_forward(enc, x), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        enc = init_encoder("linear", 4, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward(enc, np.ones((3, 5)))

    def test_init_bounds_and_seed(self):
        a = init_encoder("mlp1", 9, 4, np.random.default_rng(5), hidden_dim=16)
        b = init_encoder("mlp1", 9, 4, np.random.default_rng(5), hidden_dim=16)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)
        assert np.all(np.abs(a.weights[0]) <= 1 / 3) and np.all(np.abs(a.weights[1]) <= 1 / 4)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            EncoderParams("linear", [np.ones((2, 3))], [np.ones(2)])
        with pytest.raises(ValueError):
            EncoderParams("linear", [np.full((2, 3), np.nan)], [np.ones(3)])
        with pytest.raises(ValueError):
            init_encoder("mlp1", 2, 3, np.random.default_rng(0))


class TestBackward:
    def test_zero_grad(self):
        rng = np.random.default_rng(1)
        enc = init_encoder("mlp1", 3, 2, rng, hidden_dim=4)
        grads, gx = backward(enc, rng.normal(size=(5, 3)), np.zeros((5, 2)))
        assert all(not a.any() for a in grads.arrays()) and not gx.any()

    def test_scalar_chain_rule(self):
        enc = EncoderParams("linear", [np.array([[0.7]])], [np.array([0.1])])
        grads, gx = backward(enc, np.array([[3.0]]), np.array([[-2.0]]))
        assert grads.weights[0][0, 0] == -6.0
        assert grads.biases[0][0] == -2.0
        assert gx[0, 0] == pytest.approx(-1.4)

    @pytest.mark.parametrize("kind", ["linear", "mlp1"])
    def test_finite_differences(self, kind):
        """L = sum(G * f(X)); check parameter and input gradients on 30 instances."""
        rng = np.random.default_rng(2 if kind == "linear" else 3)
        h = 1e-6
        for _ in range(30):
            enc = init_encoder(kind, 4, 3, rng, hidden_dim=6)
            x = rng.normal(size=(5, 4))
            G = rng.normal(size=(5, 3))
            grads, gx = backward(enc, x, G)
            arrays = enc.arrays()
            for slot, analytic in enumerate(grads.arrays() + [gx]):
                fd = np.zeros_like(analytic)
                for idx in np.ndindex(analytic.shape):
                    vals = []
                    for sign in (1, -1):
                        arrs = [a.copy() for a in arrays]
                        xx = x.copy()
                        if slot < len(arrs):
                            arrs[slot][idx] += sign * h
                        else:
                            xx[idx] += sign * h
                        vals.append(np.sum(G * forward(EncoderParams.from_arrays(kind, arrs), xx)))
                    fd[idx] = (vals[0] - vals[1]) / (2 * h)
                denom = max(np.linalg.norm(fd), 1e-12)
                assert np.linalg.norm(analytic - fd) / denom <= 1e-5

    def test_shape_mismatch(self):
        enc = init_encoder("linear", 4, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            backward(enc, np.ones((3, 4)), np.ones((3, 3)))


class TestOptimizer:
    def test_zero_grads_no_decay(self):
        params = [np.array([1.0, -2.0]), np.array([[0.5]])]
        state = OptimizerState.fresh(params, weight_decay=0.0)
        new, s2 = optimizer_step(params, [np.zeros(2), np.zeros((1, 1))], state)
        for p, q in zip(params, new):
            np.testing.assert_array_equal(p, q)
        assert s2.step_count == 1
        assert all(not m.any() for m in s2.first_moment + s2.second_moment)

    def test_single_step_by_hand(self):
        lr, b1, b2, eps, wd = 1e-3, 0.9, 0.999, 1e-8, 0.01
        p = np.array([0.5, -0.25])
        g = np.array([0.2, -3.0])
        state = OptimizerState.fresh([p], learning_rate=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        (new,), s2 = optimizer_step([p], [g], state)
        m_hat = ((1 - b1) * g) / (1 - b1)
        v_hat = ((1 - b2) * g * g) / (1 - b2)
        expected = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p)
        np.testing.assert_allclose(new, expected, rtol=1e-15)
        # first step moves each coordinate by ~lr against the gradient sign
        np.testing.assert_allclose((new - p + lr * wd * p) / lr, -np.sign(g), rtol=1e-6)
        np.testing.assert_allclose(s2.first_moment[0], 0.1 * g)
        np.testing.assert_allclose(s2.second_moment[0], 0.001 * g * g)

    def test_non_finite_grad(self):
        state = OptimizerState.fresh([np.zeros(2)])
        with pytest.raises(FloatingPointError):
            optimizer_step([np.zeros(2)], [np.array([np.inf, 0.0])], state)

    def test_shape_mismatch(self):
        state = OptimizerState.fresh([np.zeros(2)])
        with pytest.raises(ValueError):
            optimizer_step([np.zeros(2)], [np.zeros(3)], state)

    def test_presets(self):
        assert ADAM_PRESETS["default"] == (0.9, 0.999)
        assert ADAM_PRESETS["fairclip"] == (0.1, 0.1)

    def test_deterministic_100_steps(self):
        def run():
            rng = np.random.default_rng(11)
            params = [rng.normal(size=(3, 2)), rng.normal(size=2)]
            state = OptimizerState.fresh(params, learning_rate=1e-2)
            for _ in range(100):
                grads = [rng.normal(size=p.shape) for p in params]
                params, state = optimizer_step(params, grads, state)
            return params
        for a, b in zip(run(), run()):
            assert a.tobytes() == b.tobytes()


def _train_pairs(steps=500, lr=1e-2):
    rng = np.random.default_rng(0)
    x_img = np.array([[1.0, 0.0, 0.2], [0.0, 1.0, -0.3]])
    x_txt = np.array([[0.5, 1.0], [1.0, -0.5]])
    img = init_encoder("linear", 3, 4, rng)
    txt = init_encoder("linear", 2, 4, rng)
    n_img = len(img.arrays())
    state = OptimizerState.fresh(img.arrays() + txt.arrays(), learning_rate=lr, weight_decay=0.0)
    cfg = FairClipConfig(lambda_fair=0.0)
    loss = None
    for _ in range(steps):
        res = fairclip_loss(EmbeddingBatch(forward(img, x_img), forward(txt, x_txt)), {}, cfg, 0.07)
        loss = res.clip_loss
        gi, _ = backward(img, x_img, res.grads.image)
        gt, _ = backward(txt, x_txt, res.grads.text)
        params, state = optimizer_step(img.arrays() + txt.arrays(), gi.arrays() + gt.arrays(), state)
        img = EncoderParams.from_arrays("linear", params[:n_img])
        txt = EncoderParams.from_arrays("linear", params[n_img:])
    return loss


class TestSmokeConvergence:
    def test_two_pairs(self):
        assert _train_pairs() < 0.01


def make_checkpoint(kind="mlp1"):
    rng = np.random.default_rng(4)
    img = init_encoder(kind, 5, 3, rng, hidden_dim=4)
    txt = init_encoder(kind, 6, 3, rng, hidden_dim=4)
    params = img.arrays() + txt.arrays()
    state = OptimizerState.fresh(params, learning_rate=3e-4, beta1=0.1, beta2=0.1)
    _, state = optimizer_step(params, [rng.normal(size=p.shape) for p in params], state)
    gen = np.random.Generator(np.random.PCG64(7))
    return Checkpoint(img, txt, state, "abc123", {"batch": gen.bit_generator.state}, epoch=3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ck = make_checkpoint()
        save_checkpoint(ck, tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        for a, b in zip(ck.image_encoder.arrays() + ck.text_encoder.arrays(),
                        back.image_encoder.arrays() + back.text_encoder.arrays()):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(ck.optimizer.first_moment + ck.optimizer.second_moment,
                        back.optimizer.first_moment + back.optimizer.second_moment):
            assert a.tobytes() == b.tobytes()
        assert back.optimizer.step_count == 1
        assert (back.optimizer.beta1, back.optimizer.learning_rate) == (0.1, 3e-4)
        assert back.rng_state == ck.rng_state
        assert (back.config_hash, back.epoch, back.format_version) == ("abc123", 3, 1)
        # the restored rng continues the same stream
        g1 = np.random.Generator(np.random.PCG64())
        g1.bit_generator.state = back.rng_state["batch"]
        assert g1.integers(1 << 30) == np.random.Generator(np.random.PCG64(7)).integers(1 << 30)

    def test_byte_identical_saves(self, tmp_path):
        save_checkpoint(make_checkpoint("linear"), tmp_path / "a.bin")
        save_checkpoint(make_checkpoint("linear"), tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_truncated(self, tmp_path):
        p = tmp_path / "c.bin"
        save_checkpoint(make_checkpoint(), p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(p)

    def test_flipped_byte(self, tmp_path):
        p = tmp_path / "c.bin"
        save_checkpoint(make_checkpoint(), p)
        raw = bytearray(p.read_bytes())
        raw[-1] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(p)

    def test_version_bump(self, tmp_path):
        p = tmp_path / "c.bin"
        ck = make_checkpoint()
        ck.format_version = 2
        save_checkpoint(ck, p)
        with pytest.raises(CheckpointError, match="format_version"):
            load_checkpoint(p)

    def test_header_layout(self, tmp_path):
        p = tmp_path / "c.bin"
        save_checkpoint(make_checkpoint(), p)
        raw = p.read_bytes()
        assert raw[:8] == b"FSKCKPT\0"
        (hlen,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12:12 + hlen])
        assert set(header) == {"format_version", "checksum", "payload_length"}

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"hello world")
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
