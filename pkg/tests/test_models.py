"""Model oracles: forward math, init statistics, checkpoints, filter surgery."""

import numpy as np
import pytest

from coat import engine as eg
from coat import models


def tiny_cnn():
    return models.SingleLayerCNN(in_channels=1, side=6, filters=2, kernel=3,
                                 stride=1, padding=0, num_classes=3)


class TestSingleLayerCNN:
    def test_param_shapes(self):
        m = models.SingleLayerCNN(in_channels=3, side=32, filters=4, kernel=3,
                                  stride=2, padding=1, num_classes=10)
        shapes = m.param_shapes()
        assert shapes["conv.w"] == (4, 3, 3, 3)
        assert shapes["fc.w"] == (10, 4 * 16 * 16)

    def test_forward_matches_manual_computation(self, rng):
        m = tiny_cnn()
        p = m.init_params(seed=1)
        x = rng.standard_normal((2, 1, 6, 6))
        logits = m.logits(p, x)
        w, b = p["conv.w"].data, p["conv.b"].data
        u, c = p["fc.w"].data, p["fc.b"].data
        feats = np.empty((2, 2, 4, 4))
        for n in range(2):
            for f in range(2):
                for i in range(4):
                    for j in range(4):
                        feats[n, f, i, j] = (x[n, :, i:i + 3, j:j + 3] * w[f]).sum() + b[f]
        ref = np.maximum(feats, 0.0).reshape(2, -1) @ u.T + c
        assert np.allclose(logits, ref, atol=1e-12)

    def test_zero_weights_give_log_k_loss(self):
        m = tiny_cnn()
        p = m.init_params(seed=0)
        zero = {n: np.zeros_like(a) for n, a in p.to_arrays().items()}
        pz = m.params_from_arrays(zero)
        x = np.zeros((5, 1, 6, 6))
        y = np.array([0, 1, 2, 0, 1])
        assert m.loss(pz, x, y).item() == pytest.approx(np.log(3), rel=1e-12)

    def test_input_gradient_closed_form_in_linear_region(self):
        # large positive conv bias keeps every ReLU on: the map is affine and
        # d loss / d x is (p - onehot) @ u folded through the conv transpose
        m = tiny_cnn()
        p = m.init_params(seed=2)
        arrays = p.to_arrays()
        arrays["conv.b"] = arrays["conv.b"] + 100.0
        p = m.params_from_arrays(arrays)
        x = np.random.default_rng(3).standard_normal((1, 1, 6, 6)) * 0.1
        y = np.array([1])

        tx = eg.Tensor(x, requires_grad=True)
        loss = m.loss(p, tx, y)
        g = eg.backward(loss, [tx])[tx].data

        logits = m.logits(p, x)
        sm = np.exp(logits - logits.max())
        sm /= sm.sum()
        sm[0, 1] -= 1.0
        u = p["fc.w"].data
        # ppush (p - e_y) u back through the conv as a sum of shifted kernels
        gfeat = (sm @ u).reshape(1, 2, 4, 4)
        ref = np.zeros_like(x)
        w = p["conv.w"].data
        for f in range(2):
            for i in range(4):
                for j in range(4):
                    ref[0, :, i:i + 3, j:j + 3] += gfeat[0, f, i, j] * w[f]
        assert np.allclose(g, ref, atol=1e-10)

    def test_accuracy_and_predict(self):
        m = tiny_cnn()
        p = m.init_params(seed=4)
        x = np.random.default_rng(5).standard_normal((8, 1, 6, 6))
        y = m.predict(p, x)
        assert m.accuracy(p, x, y) == 1.0
        wrong = (y + 1) % 3
        assert m.accuracy(p, x, wrong) == 0.0

    def test_kaiming_init_statistics(self):
        m = models.SingleLayerCNN(in_channels=3, side=32, filters=64, kernel=3,
                                  stride=2, padding=1, num_classes=10)
        p = m.init_params(seed=6)
        w = p["conv.w"].data
        expect = np.sqrt(2.0 / 27)
        assert w.std() == pytest.approx(expect, rel=0.1)
        assert np.array_equal(p["conv.b"].data, np.zeros(64))

    def test_gaussian_init_scales(self):
        m = tiny_cnn()
        p = m.init_params(seed=7, scheme="gaussian", sigma_w=0.5, sigma_u=2.0)
        assert p["conv.w"].data.std() == pytest.approx(0.5, rel=0.35)
        assert p["fc.w"].data.std() == pytest.approx(2.0, rel=0.35)
        with pytest.raises(ValueError):
            m.init_params(scheme="unknown")

    def test_init_deterministic(self):
        m = tiny_cnn()
        a = m.init_params(seed=9).to_arrays()
        b = m.init_params(seed=9).to_arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_filter_outgoing_norms(self):
        m = tiny_cnn()
        p = m.init_params(seed=0)
        u = p["fc.w"].data.reshape(3, 2, 16)
        ref = np.sqrt((u ** 2).sum(axis=(0, 2)))
        assert np.allclose(m.filter_outgoing_norms(p), ref)


class TestSmallConvNet:
    def test_forward_shape_and_determinism(self):
        m = models.SmallConvNet(in_channels=1, side=8,
                                blocks=((4, 3, 2), (8, 3, 2)),
                                hidden=16, num_classes=5)
        p = m.init_params(seed=0)
        x = np.random.default_rng(1).standard_normal((3, 1, 8, 8))
        out = m.logits(p, x)
        assert out.shape == (3, 5)
        assert np.array_equal(out, m.logits(p, x))

    def test_single_block_rejected(self):
        with pytest.raises(ValueError):
            models.SmallConvNet(blocks=((4, 3, 2),))


class TestZeroFilter:
    def test_zeroed_filter_drops_out_of_logits(self, rng):
        m = tiny_cnn()
        p = m.init_params(seed=1)
        z = models.zero_filter(p, 0)
        x = rng.standard_normal((4, 1, 6, 6))
        # recompute with only filter 1 contributing
        w, b = p["conv.w"].data, p["conv.b"].data
        feats = eg.conv2d(eg.Tensor(x), eg.Tensor(w), eg.Tensor(b)).data
        feats = np.maximum(feats, 0.0)
        feats[:, 0] = 0.0
        ref = feats.reshape(4, -1) @ p["fc.w"].data.T + p["fc.b"].data
        assert np.allclose(m.logits(z, x), ref, atol=1e-12)

    def test_original_untouched(self):
        m = tiny_cnn()
        p = m.init_params(seed=2)
        before = p["conv.w"].data.copy()
        models.zero_filter(p, 1)
        assert np.array_equal(p["conv.w"].data, before)

    def test_bad_index(self):
        with pytest.raises(IndexError):
            models.zero_filter(tiny_cnn().init_params(), 5)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        m = tiny_cnn()
        p = m.init_params(seed=3)
        cfg = {"model": "tiny", "eps": "8/255"}
        extra = {"epoch": np.array(4.0), "m1": np.arange(3.0)}
        path = tmp_path / "a.ckpt"
        models.save_checkpoint(path, p, config=cfg, extra=extra)
        arrays, rcfg, rextra = models.load_checkpoint(path)
        for k, v in p.to_arrays().items():
            assert np.array_equal(arrays[k], v)
            assert arrays[k].dtype == v.dtype
        assert rcfg == cfg
        assert np.array_equal(rextra["m1"], extra["m1"])

    def test_corrupt_magic_rejected(self, tmp_path):
        m = tiny_cnn()
        path = tmp_path / "b.ckpt"
        models.save_checkpoint(path, m.init_params(seed=0))
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(models.CheckpointError):
            models.load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        m = tiny_cnn()
        path = tmp_path / "c.ckpt"
        models.save_checkpoint(path, m.init_params(seed=0))
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(models.CheckpointError):
            models.load_checkpoint(path)

    def test_reload_reproduces_logits(self, tmp_path):
        m = tiny_cnn()
        p = m.init_params(seed=8)
        x = np.random.default_rng(0).standard_normal((2, 1, 6, 6))
        path = tmp_path / "d.ckpt"
        models.save_checkpoint(path, p)
        arrays, _, _ = models.load_checkpoint(path)
        p2 = m.params_from_arrays(arrays)
        assert np.array_equal(m.logits(p, x), m.logits(p2, x))
