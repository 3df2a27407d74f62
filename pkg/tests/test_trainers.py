"""Training methods: configs, schedules, optimizers, penalties, the loop."""

import numpy as np
import pytest

from coat import engine as eg
from coat import models, training as tr
from coat.training import (Adam, ConfigError, MetricLog, MetricLogError, SGD,
                           TrainConfig, cyclic_lr, derive_seed,
                           gradalign_lambda_default, parse_ratio, train)


def tiny_cfg(**over):
    """Small end-to-end setup: 1-channel 8x8 synthetic blobs, 4 classes."""
    d = {
        "model": "cnn4",
        "model_options": {"in_channels": 1, "side": 8, "num_classes": 4},
        "dataset": "synthetic",
        "dataset_options": {"n_train": 192, "n_test": 64, "num_classes": 4,
                            "side": 8, "channels": 1},
        "method": {"name": "fgsm_at"},
        "eps": "8/255",
        "epochs": 2,
        "batch_size": 32,
        "seed": 0,
        "optimizer": "adam",
        "lr_max": 0.01,
        "eval_points": 64,
        "track_history": False,
    }
    d.update(over)
    return TrainConfig.from_dict(d)


def small_model(num_classes=3, seed=0):
    m = models.SingleLayerCNN(in_channels=1, side=4, filters=2, kernel=2,
                              stride=1, padding=0, num_classes=num_classes)
    return m, m.init_params(seed=seed)


class TestParseRatio:
    def test_values(self):
        assert parse_ratio("10/255") == pytest.approx(10 / 255)
        assert parse_ratio("0.25") == 0.25
        assert parse_ratio(3) == 3.0
        assert parse_ratio(0.5) == 0.5

    def test_errors(self):
        for bad in ("abc", "1/0", [1]):
            with pytest.raises(ConfigError):
                parse_ratio(bad)


class TestDeriveSeed:
    def test_stable_and_order_sensitive(self):
        assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
        assert derive_seed(1, "a", 2) != derive_seed(2, "a", 1)
        assert derive_seed("x", "y") != derive_seed("y", "x")


class TestGradalignLambda:
    def test_anchors_and_floor(self):
        assert gradalign_lambda_default(8 / 255) == pytest.approx(0.2)
        assert gradalign_lambda_default(16 / 255) == pytest.approx(2.0)
        assert gradalign_lambda_default(12 / 255) == pytest.approx(
            np.sqrt(0.2 * 2.0), rel=1e-6)  # log-linear midpoint
        assert gradalign_lambda_default(0.0) == pytest.approx(0.02)
        assert gradalign_lambda_default(4 / 255) == pytest.approx(
            np.exp(np.log(0.2) - 0.5 * np.log(10.0)), rel=1e-6)


class TestTrainConfig:
    def test_round_trip_and_run_id(self):
        cfg = tiny_cfg()
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again.canonical_json() == cfg.canonical_json()
        assert again.run_id() == cfg.run_id()
        assert len(cfg.run_id()) == 16
        other = tiny_cfg(seed=1)
        assert other.run_id() != cfg.run_id()

    def test_eps_string_kept_verbatim(self):
        cfg = tiny_cfg(eps="10/255")
        assert cfg.to_dict()["eps"] == "10/255"
        assert cfg.eps_value() == pytest.approx(10 / 255)

    def test_validation_errors(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            TrainConfig.from_dict({"learning_rate": 0.1})
        with pytest.raises(ConfigError, match="unknown method"):
            tiny_cfg(method={"name": "trades"})
        with pytest.raises(ConfigError, match="unknown method keys"):
            tiny_cfg(method={"name": "fgsm_at", "step": 1})
        with pytest.raises(ConfigError):
            tiny_cfg(epochs=0)
        with pytest.raises(ConfigError):
            tiny_cfg(optimizer="rmsprop")
        with pytest.raises(ConfigError):
            tiny_cfg(lr_schedule="cosine")
        with pytest.raises(ConfigError, match="lambda"):
            tiny_cfg(method={"name": "fgsm_gradnorm"})
        with pytest.raises(ConfigError, match="alpha"):
            tiny_cfg(method={"name": "fgsm_rs_at", "alpha": "3/255"},
                     eps="1/255")

    def test_eps_warmup_and_alpha_scaling(self):
        cfg = tiny_cfg(eps="8/255", eps_warmup_epochs=4,
                       method={"name": "fgsm_at", "alpha": "10/255"})
        eps = 8 / 255
        assert cfg.eps_at(0) == pytest.approx(eps / 4)
        assert cfg.eps_at(1) == pytest.approx(eps / 2)
        assert cfg.eps_at(3) == pytest.approx(eps)
        assert cfg.eps_at(10) == pytest.approx(eps)
        assert cfg.alpha_at(0) == pytest.approx(10 / 255 / 4)
        assert cfg.alpha_at(3) == pytest.approx(10 / 255)

    def test_lambda_resolution(self):
        plain = tiny_cfg(method={"name": "fgsm_at", "lambda": 9.0})
        assert plain.lam() == 0.0  # no penalty term for plain AT
        tuned = tiny_cfg(method={"name": "fgsm_gradalign", "lambda": 0.5})
        assert tuned.lam() == 0.5
        default = tiny_cfg(method={"name": "fgsm_gradalign"}, eps="8/255")
        assert default.lam() == pytest.approx(0.2)


class TestCyclicLR:
    def test_triangle_shape(self):
        lr = cyclic_lr(0.3, 100, peak_frac=0.4)
        assert lr(0) == 0.0
        assert lr(40) == pytest.approx(0.3)
        assert lr(100) == pytest.approx(0.0)
        assert lr(20) == pytest.approx(0.15)
        assert lr(70) == pytest.approx(0.15)
        assert lr(-5) == 0.0
        assert lr(400) == pytest.approx(0.0)

    def test_degenerate_peaks(self):
        assert cyclic_lr(0.1, 10, peak_frac=0.0)(0) == pytest.approx(0.1)
        assert cyclic_lr(0.1, 10, peak_frac=1.0)(10) == pytest.approx(0.1)

    def test_constant_schedule(self):
        cfg = tiny_cfg(lr_schedule="constant", lr_max=0.07)
        sched = tr.make_schedule(cfg, 50)
        assert sched(0) == sched(49) == 0.07


class TestOptimizers:
    def test_sgd_momentum_hand_math(self):
        _, p = small_model()
        before = p.to_arrays()
        g = {k: np.ones_like(v) for k, v in before.items()}
        opt = SGD(p, momentum=0.5)
        opt.step(p, g, lr=0.1)
        opt.step(p, g, lr=0.1)
        after = p.to_arrays()
        # v1 = 1, v2 = 1.5; total move 0.1 * (1 + 1.5) = 0.25
        for k in before:
            assert np.allclose(before[k] - after[k], 0.25)

    def test_adam_first_step_is_signed(self):
        _, p = small_model()
        before = p.to_arrays()
        g = {k: np.full_like(v, 3.0) for k, v in before.items()}
        opt = Adam(p)
        opt.step(p, g, lr=0.01)
        after = p.to_arrays()
        for k in before:
            assert np.allclose(before[k] - after[k], 0.01, rtol=1e-3)

    def test_state_round_trip(self):
        _, p = small_model()
        g = {k: np.random.default_rng(0).standard_normal(v.shape)
             for k, v in p.to_arrays().items()}
        for make in (lambda q: Adam(q), lambda q: SGD(q)):
            _, pa = small_model()
            _, pb = small_model()
            oa = make(pa)
            oa.step(pa, g, 0.01)
            ob = make(pb)
            ob.step(pb, g, 0.01)
            ob.load_state(oa.state_arrays())
            oa.step(pa, g, 0.01)
            ob.step(pb, g, 0.01)
            for k, v in pa.to_arrays().items():
                assert np.array_equal(v, pb.to_arrays()[k])


class TestPenalties:
    def fd_check(self, value_fn, params, n_coords=6, h=1e-5, rel=1e-3):
        """Central finite differences on random parameter coordinates."""
        with eg.Graph(eg.HIGHER_ORDER):
            pen = value_fn(params)
            grads = eg.grad_of_grad(pen, dict(params.items()))
        arrays = params.to_arrays()
        rng = np.random.default_rng(0)
        model = None
        for name in arrays:
            flat = arrays[name].reshape(-1)
            for idx in rng.choice(flat.size, min(n_coords, flat.size),
                                  replace=False):
                def at(v):
                    mod = {k: a.copy() for k, a in arrays.items()}
                    mod[name].reshape(-1)[idx] = v
                    q = params.with_arrays(mod)
                    with eg.Graph(eg.HIGHER_ORDER):
                        return float(value_fn(q).data)
                fd = (at(flat[idx] + h) - at(flat[idx] - h)) / (2 * h)
                got = grads[name].data.reshape(-1)[idx]
                assert got == pytest.approx(fd, rel=rel, abs=1e-7)

    def test_gradalign_zero_eta_is_zero(self, rng):
        m, p = small_model()
        x = rng.uniform(0.2, 0.8, (4, 1, 4, 4))
        y = rng.integers(0, 3, 4)
        with eg.Graph(eg.HIGHER_ORDER):
            pen = tr.grad_align_penalty(m, p, x, y, 0.1, eta=np.zeros_like(x))
            assert float(pen.data) == pytest.approx(0.0, abs=1e-12)

    def test_gradalign_parameter_gradients_match_fd(self, rng):
        m, p = small_model()
        x = rng.uniform(0.2, 0.8, (3, 1, 4, 4))
        y = rng.integers(0, 3, 3)
        eta = rng.uniform(-0.08, 0.08, x.shape)
        self.fd_check(lambda q: tr.grad_align_penalty(m, q, x, y, 0.08,
                                                      eta=eta), p)

    def test_gradnorm_value_and_gradients(self, rng):
        m, p = small_model()
        x = rng.uniform(0.2, 0.8, (3, 1, 4, 4))
        y = rng.integers(0, 3, 3)
        from coat import diagnostics
        g = diagnostics.input_grads(m, p, x, y)
        want = float((g.reshape(3, -1) ** 2).sum(axis=1).mean())
        with eg.Graph(eg.HIGHER_ORDER):
            pen = tr.grad_norm_penalty(m, p, x, y)
            assert float(pen.data) == pytest.approx(want, rel=1e-12)
        self.fd_check(lambda q: tr.grad_norm_penalty(m, q, x, y), p)

    def test_cure_zero_delta_is_zero_and_fd(self, rng):
        m, p = small_model()
        x = rng.uniform(0.2, 0.8, (3, 1, 4, 4))
        y = rng.integers(0, 3, 3)
        with eg.Graph(eg.HIGHER_ORDER):
            pen = tr.cure_penalty(m, p, x, y, 0.05, delta=np.zeros_like(x))
            assert float(pen.data) == pytest.approx(0.0, abs=1e-12)
        delta = tr.fgsm_direction(m, p, x, y, 0.05)
        self.fd_check(lambda q: tr.cure_penalty(m, q, x, y, 0.05,
                                                delta=delta), p)

    def test_stop_grad_second_arg_changes_gradients(self, rng):
        m, p = small_model()
        x = rng.uniform(0.2, 0.8, (4, 1, 4, 4))
        y = rng.integers(0, 3, 4)
        eta = rng.uniform(-0.05, 0.05, x.shape)
        outs = []
        for stop in (False, True):
            with eg.Graph(eg.HIGHER_ORDER):
                pen = tr.grad_align_penalty(m, p, x, y, 0.05, eta=eta,
                                            stop_grad_second_arg=stop)
                val = float(pen.data)
                grads = eg.grad_of_grad(pen, dict(p.items()))
            outs.append((val, {k: g.data.copy() for k, g in grads.items()}))
        assert outs[0][0] == pytest.approx(outs[1][0], rel=1e-12)
        diffs = [np.abs(outs[0][1][k] - outs[1][1][k]).max() for k in outs[0][1]]
        assert max(diffs) > 1e-9


class TestTrainLoop:
    def test_standard_fits_separable_synthetic(self):
        cfg = tiny_cfg(method={"name": "standard"}, epochs=10, batch_size=16,
                       lr_max=0.01, lr_schedule="constant")
        res = train(cfg)
        assert res.log.rows[-1]["train_clean_acc"] >= 0.99

    def test_gradalign_lambda_zero_equals_plain_fgsm(self):
        a = train(tiny_cfg(method={"name": "fgsm_at"}))
        b = train(tiny_cfg(method={"name": "fgsm_gradalign", "lambda": 0}))
        for k, v in a.final_arrays.items():
            assert np.array_equal(v, b.final_arrays[k])

    def test_free_m1_equals_plain_fgsm_at_full_step(self):
        a = train(tiny_cfg(method={"name": "fgsm_at"}))
        b = train(tiny_cfg(method={"name": "free_at", "m_replay": 1}))
        for k, v in a.final_arrays.items():
            assert np.array_equal(v, b.final_arrays[k])

    def test_free_replay_shortens_epochs(self):
        cfg = tiny_cfg(method={"name": "free_at", "m_replay": 2}, epochs=4)
        res = train(cfg)
        assert len(res.log.rows) == 2

    def test_deterministic(self):
        a = train(tiny_cfg(seed=3))
        b = train(tiny_cfg(seed=3))
        for k, v in a.final_arrays.items():
            assert np.array_equal(v, b.final_arrays[k])
        for col in ("train_loss", "train_clean_acc", "test_pgd_acc"):
            assert np.allclose(a.log.column(col), b.log.column(col),
                               equal_nan=True)

    def test_numeric_fault_aborts_and_rolls_back(self):
        # a huge constant lr blows the parameters up mid-epoch; the loop must
        # flag the abort and restore the last finite snapshot (here: the init)
        cfg = tiny_cfg(method={"name": "standard"}, epochs=3, optimizer="sgd",
                       lr_max=1e300, lr_schedule="constant")
        with np.errstate(all="ignore"):
            res = train(cfg)
        assert res.aborted
        assert res.abort_epoch == 0
        assert np.isnan(res.log.rows[-1]["train_loss"])
        fresh = tr.build_model(cfg).init_params(seed=cfg.seed).to_arrays()
        for k, v in res.final_arrays.items():
            assert np.array_equal(v, fresh[k])

    def test_metrics_csv_round_trip(self, tmp_path):
        path = tmp_path / "metrics.csv"
        res = train(tiny_cfg(), metrics_path=str(path))
        back = MetricLog.read_csv(path)
        assert len(back.rows) == len(res.log.rows)
        assert np.allclose(back.column("train_loss"),
                           res.log.column("train_loss"), equal_nan=True)

    def test_checkpoints_written_and_loadable(self, tmp_path):
        cfg = tiny_cfg(epochs=2)
        res = train(cfg, checkpoint_dir=str(tmp_path))
        arrays, config, extra = models.load_checkpoint(tmp_path / "last.ckpt")
        assert config == cfg.to_dict()
        assert float(extra["epoch"]) == 1.0
        for k, v in res.final_arrays.items():
            assert np.array_equal(arrays[k], v)

    def test_early_stop_tracks_best_pgd_epoch(self):
        res = train(tiny_cfg(epochs=3))
        assert 0 <= res.best_epoch <= 2
        accs = [r["train_pgd_acc"] for r in res.log.rows]
        assert res.best_train_pgd_acc == pytest.approx(np.nanmax(accs))
        assert set(res.best_arrays) == set(res.final_arrays)

    def test_eval_every_leaves_nan_rows(self):
        res = train(tiny_cfg(epochs=4, eval_every=2))
        pgd = [r["test_pgd_acc"] for r in res.log.rows]
        assert np.isnan(pgd[1])
        assert np.isfinite(pgd[0]) and np.isfinite(pgd[2])
        assert np.isfinite(pgd[3])  # final epoch always evaluated

    def test_history_tracking_toggle(self):
        on = train(tiny_cfg(track_history=True))
        off = train(tiny_cfg(track_history=False))
        assert len(on.history) == 2 and off.history == []


class TestMetricLog:
    def test_unknown_column_rejected(self):
        log = MetricLog()
        with pytest.raises(MetricLogError):
            log.append({"epoch": 0, "bogus": 1.0})
        with pytest.raises(MetricLogError):
            log.column("bogus")

    def test_schema_line_enforced(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("epoch,lr\n0,0.1\n")
        with pytest.raises(MetricLogError, match="schema"):
            MetricLog.read_csv(path)


class TestTrainingObjective:
    def test_recomputable(self, rng):
        cfg = tiny_cfg(method={"name": "fgsm_rs_at"})
        model = tr.build_model(cfg)
        p = model.init_params(seed=0)
        x = rng.uniform(0.2, 0.8, (8, 1, 8, 8))
        y = rng.integers(0, 4, 8)
        a = tr.training_objective(model, p, cfg, x, y, cfg.eps_value(), 3)
        b = tr.training_objective(model, p, cfg, x, y, cfg.eps_value(), 3)
        assert a == b
        c = tr.training_objective(model, p, cfg, x, y, cfg.eps_value(), 4)
        assert a != c
