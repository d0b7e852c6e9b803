import numpy as np
import pytest

import bisup.calibration as calib
from bisup.calibration import (
    STE_BOUNDARY,
    AdamWState,
    CalibBatch,
    CalibConfig,
    adamw_step,
    calibrate_layer,
    calibrate_model,
    finite_diff_check,
    mse_layer_loss,
    theta_gradcheck,
)
from bisup.errors import ConfigError, NumericError
from bisup.experiments import make_tokens
from bisup.model import (
    QuantizedModel,
    ToyModel,
    _layer,
    baseline_weight_clips,
    init_layer_theta,
    model_forward_fp,
    synth_model,
)
from bisup.quant import QuantConfig


def layer_problem(seed, spec="W3A3-g16", n=32, seq=32, **kw):
    """Default toy model, first layer, with batches built from fp inputs."""
    m = synth_model(seed=seed)
    lw = m.layers[0]
    cfg = CalibConfig(spec=spec, seed=seed, **kw)
    x = m.embed(make_tokens(seed, n, seq, m.vocab, 1))
    y = _layer(x, lw, "fp")[0]
    batches = [CalibBatch(y[i:i + cfg.batch_size], x[i:i + cfg.batch_size])
               for i in range(0, n, cfg.batch_size)]
    theta = init_layer_theta(lw, cfg.qcfg, cfg.effective_rank, np.random.default_rng(seed),
                             cfg.lowrank_mode, cfg.techniques)
    return lw, cfg, x, y, batches, theta


def full_loss(lw, cfg, x, y, theta):
    return mse_layer_loss(y, _layer(x, lw, "theta", cfg.qcfg, theta=theta)[0])


class TestLoss:
    def test_identical(self):
        assert mse_layer_loss(np.ones((2, 3)), np.ones((2, 3))) == 0.0

    def test_unit_offset(self):
        assert mse_layer_loss(np.zeros((2, 3)), np.ones((2, 3))) == 1.0

    def test_single_entry(self):
        assert mse_layer_loss(np.zeros(4), np.array([2.0, 0, 0, 0])) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_layer_loss(np.zeros(3), np.zeros(4))


class TestAdamW:
    def test_zero_gradient(self):
        p = {"p": np.array([1.0, -2.0])}
        adamw_step(p, {"p": np.zeros(2)}, AdamWState(lr=0.1))
        assert np.array_equal(p["p"], [1.0, -2.0])

    def test_quadratic_converges(self):
        p = {"p": np.array([0.0])}
        state = AdamWState(lr=0.1)
        for _ in range(200):
            adamw_step(p, {"p": 2 * (p["p"] - 3)}, state)
        assert abs(p["p"][0] - 3) < 1e-2

    def test_decoupled_decay(self):
        p = {"p": np.array([2.0])}
        state = AdamWState(lr=0.1, weight_decay=0.01)
        for step in range(1, 6):
            adamw_step(p, {"p": np.zeros(1)}, state)
            assert abs(p["p"][0] - 2.0 * (1 - 0.1 * 0.01) ** step) < 1e-15

    def test_first_step_is_lr_times_sign(self):
        p = {"p": np.array([0.0, 0.0])}
        adamw_step(p, {"p": np.array([5.0, -0.01])}, AdamWState(lr=0.01))
        assert np.allclose(p["p"], [-0.01, 0.01], atol=1e-8)


class TestConfig:
    def test_defaults(self):
        c = CalibConfig()
        assert (c.lr, c.epochs, c.batch_size, c.n_samples, c.seq_len) == (0.005, 5, 8, 32, 32)
        assert c.weight_decay == 0.0

    @pytest.mark.parametrize("kw", [{"techniques": ("magic",)}, {"lowrank_mode": "x"},
                                    {"epochs": -1}, {"prompt_len": 32}, {"lr": 0.0},
                                    {"spec": "W9"}])
    def test_rejected(self, kw):
        with pytest.raises(ConfigError):
            CalibConfig(**kw)

    def test_rank_dropped_without_lowrank(self):
        assert CalibConfig(techniques=("clip",)).effective_rank is None


class TestCalibrateLayer:
    def test_zero_epochs(self):
        lw, cfg, _, _, batches, theta = layer_problem(0, epochs=0)
        before = {k: v.copy() for k, v in theta.named_tensors(trainable_only=False).items()}
        res = calibrate_layer(lw, batches, theta, cfg.qcfg, cfg)
        assert res.losses == []
        for k, v in res.theta.named_tensors(trainable_only=False).items():
            assert np.array_equal(v, before[k])

    def test_step_zero_loss_is_rtn(self):
        lw, cfg, x, y, batches, theta = layer_problem(1, epochs=1)
        res = calibrate_layer(lw, batches, theta.copy(), cfg.qcfg, cfg)
        clips = baseline_weight_clips(lw, cfg.qcfg)
        rtn = _layer(x[:8], lw, "rtn", cfg.qcfg, clips=clips)[0]
        assert res.losses[0] == mse_layer_loss(y[:8], rtn)
        assert len(res.losses) == len(batches)

    def test_eight_bit_no_divergence(self):
        lw, cfg, x, y, batches, theta = layer_problem(2, spec="W8A8", n=16, epochs=2)
        before = full_loss(lw, cfg, x, y, theta)
        res = calibrate_layer(lw, batches, theta, cfg.qcfg, cfg)
        assert full_loss(lw, cfg, x, y, res.theta) <= before
        assert res.restarts == 0

    def test_w3a3_loss_decreases(self):
        lw, cfg, x, y, batches, theta = layer_problem(0)
        before = full_loss(lw, cfg, x, y, theta)
        res = calibrate_layer(lw, batches, theta, cfg.qcfg, cfg)
        assert full_loss(lw, cfg, x, y, res.theta) < before

    @pytest.mark.xfail(strict=True, reason="toy layer reaches about 20-26% reduction at the "
                                           "default schedule; see decisions ledger")
    def test_w3a3_loss_reduction_thirty_percent(self):
        lw, cfg, x, y, batches, theta = layer_problem(0)
        before = full_loss(lw, cfg, x, y, theta)
        res = calibrate_layer(lw, batches, theta, cfg.qcfg, cfg)
        assert full_loss(lw, cfg, x, y, res.theta) <= 0.7 * before

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            lw, cfg, _, _, batches, theta = layer_problem(3, epochs=1)
            runs.append(calibrate_layer(lw, batches, theta, cfg.qcfg, cfg).losses)
        assert runs[0] == runs[1]

    def test_nan_input_raises(self):
        lw, cfg, _, _, batches, theta = layer_problem(4, n=8, epochs=1)
        bad = batches[0].x_int.copy()
        bad[0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            calibrate_layer(lw, [CalibBatch(batches[0].x_fp, bad)], theta, cfg.qcfg, cfg)

    def test_nan_loss_raises(self, monkeypatch):
        lw, cfg, _, _, batches, theta = layer_problem(4, n=8, epochs=1)
        monkeypatch.setattr(calib, "layer_loss_and_grad", lambda *a, **k: float("nan"))
        with pytest.raises(NumericError, match="learning rate"):
            calibrate_layer(lw, batches, theta, cfg.qcfg, cfg)

    def test_divergence_restarts_at_half_lr(self, monkeypatch):
        lw, cfg, _, _, batches, theta = layer_problem(5, n=16, epochs=2)
        seq = iter([1.0, 20.0] + [1.0, 0.9, 0.8, 0.7])
        monkeypatch.setattr(calib, "layer_loss_and_grad", lambda *a, **k: next(seq))
        res = calibrate_layer(lw, batches, theta, cfg.qcfg, cfg)
        assert res.restarts == 1 and res.lr == cfg.lr / 2
        assert res.losses == [1.0, 0.9, 0.8, 0.7]

    def test_second_divergence_aborts(self, monkeypatch):
        lw, cfg, _, _, batches, theta = layer_problem(5, n=16, epochs=2)
        seq = iter([1.0, 20.0, 1.0, 20.0])
        monkeypatch.setattr(calib, "layer_loss_and_grad", lambda *a, **k: next(seq))
        with pytest.raises(NumericError):
            calibrate_layer(lw, batches, theta, cfg.qcfg, cfg)

    def test_monotone_median_over_seeds(self):
        first, last = [], []
        for seed in range(20):
            lw, cfg, _, _, batches, theta = layer_problem(seed, n=16, seq=16)
            losses = calibrate_layer(lw, batches, theta, cfg.qcfg, cfg).losses
            per_epoch = len(batches)
            first.append(np.mean(losses[:per_epoch]))
            last.append(np.mean(losses[-per_epoch:]))
        assert np.median(last) <= np.median(first)


class TestLowRankForms:
    def test_multiplicative_form_stable_at_high_lr(self):
        # at lr 0.05 the additive form blows past the divergence guard
        restarts = {}
        for mode in ("slrec", "lrec"):
            lw, cfg, _, _, batches, theta = layer_problem(0, lr=0.05, lowrank_mode=mode)
            restarts[mode] = calibrate_layer(lw, batches, theta, cfg.qcfg, cfg).restarts
        assert restarts == {"slrec": 0, "lrec": 1}


class TestCalibrateModel:
    cfg = CalibConfig(epochs=1, n_samples=8, seq_len=8, rank=4)

    def small(self, seed=0, n_layers=2):
        return synth_model(d=16, n_heads=2, hidden=32, n_layers=n_layers, vocab=40, seed=seed)

    def test_fp_stream_untouched(self):
        m = self.small()
        tok = make_tokens(0, 8, 8, m.vocab, 1)
        res = calibrate_model(m, tok, self.cfg)
        assert np.array_equal(res.x_fp, model_forward_fp(m, tok)[-1])

    def test_fp_stream_untouched_with_prompt(self):
        m = self.small()
        tok = make_tokens(0, 8, 8, m.vocab, 1)
        res = calibrate_model(m, tok, CalibConfig(epochs=1, n_samples=8, seq_len=8, rank=4,
                                                  prompt_len=2))
        assert np.array_equal(res.x_fp, model_forward_fp(m, tok)[-1])
        assert res.qmodel.boundary == 2 and res.x_int.shape == (8, 6, 16)

    def test_one_layer_equals_calibrate_layer(self):
        m = self.small(1, n_layers=1)
        tok = make_tokens(1, 8, 8, m.vocab, 1)
        res = calibrate_model(m, tok, self.cfg)
        x = m.embed(tok)
        y = _layer(x, m.layers[0], "fp")[0]
        theta = init_layer_theta(m.layers[0], self.cfg.qcfg, 4, np.random.default_rng(0))
        direct = calibrate_layer(m.layers[0], [CalibBatch(y, x)], theta, self.cfg.qcfg, self.cfg)
        assert res.histories[0] == direct.losses
        for k, v in direct.theta.named_tensors().items():
            assert np.array_equal(v, res.qmodel.thetas[0].named_tensors()[k])

    def test_deterministic(self):
        m = self.small(2)
        tok = make_tokens(2, 8, 8, m.vocab, 1)
        assert calibrate_model(m, tok, self.cfg).histories == calibrate_model(m, tok, self.cfg).histories

    def test_layer_index_in_error(self, monkeypatch):
        m = self.small(3)
        tok = make_tokens(3, 8, 8, m.vocab, 1)
        monkeypatch.setattr(calib, "layer_loss_and_grad", lambda *a, **k: float("inf"))
        with pytest.raises(NumericError, match="layer 0"):
            calibrate_model(m, tok, self.cfg)

    def test_unknown_preprocess(self):
        cfg = CalibConfig(preprocess="rotate")
        with pytest.raises(ConfigError):
            calibrate_model(self.small(), make_tokens(0, 2, 4, 40, 1), cfg)

    def test_result_is_quantized_model(self):
        m = self.small()
        res = calibrate_model(m, make_tokens(0, 8, 8, m.vocab, 1), self.cfg)
        assert isinstance(res.qmodel, QuantizedModel) and isinstance(res.qmodel.model, ToyModel)


class TestFiniteDiff:
    def test_quadratic(self):
        p = {"p": np.array([1.3])}
        rep = finite_diff_check(lambda ps: float((ps["p"][0] - 3) ** 2), p, {"p": 2 * (p["p"] - 3)})
        assert rep.max_rel_error < 1e-8 and rep.n_checked == 1

    def test_wrong_gradient_detected(self):
        p = {"p": np.array([1.0, 2.0])}
        rep = finite_diff_check(lambda ps: float(np.sum(ps["p"] ** 2)), p, {"p": np.array([2.0, 5.0])})
        assert not rep.passed and rep.worst[:2] == ("p", 1)

    def test_flagged_coordinate_excluded(self):
        # |p0| has a kink at 0; the loss reports when its evaluation lands past it
        p = {"p": np.array([1e-6, 1.0])}

        def loss(ps):
            v = float(np.sum(np.abs(ps["p"])))
            return v, (STE_BOUNDARY if ps["p"][0] < 0 else None)

        rep = finite_diff_check(loss, p, {"p": np.array([1.0, 1.0])})
        assert rep.excluded == [("p", 0, STE_BOUNDARY)] and rep.n_checked == 1 and rep.passed

    def test_sampling(self):
        p = {"p": np.ones(50)}
        rep = finite_diff_check(lambda ps: float(np.sum(ps["p"] ** 2)), p, {"p": 2 * np.ones(50)},
                                max_coords=7)
        assert rep.n_checked == 7

    def test_layer_gradcheck(self):
        rng = np.random.default_rng(1)
        m = synth_model(d=8, n_heads=2, hidden=16, n_layers=1, vocab=20, seed=3)
        lw = m.layers[0]
        q = QuantConfig.parse("W3A3-g4")
        th = init_layer_theta(lw, q, 2, rng)
        for s in th.sites.values():
            s.clip.w_clip[:] = rng.uniform(0.6, 1.0, s.clip.w_clip.shape)
            s.clip.a_clip[:] = rng.uniform(0.6, 1.0, s.clip.a_clip.shape)
            s.smooth.log_s1[:] = rng.normal(0, 0.2, s.smooth.log_s1.shape)
            s.smooth.log_s2[:] = rng.normal(0, 0.2, s.smooth.log_s2.shape)
            s.lowrank.a[:] = rng.normal(0, 0.3, s.lowrank.a.shape)
            s.lowrank.b[:] = rng.normal(0, 0.3, s.lowrank.b.shape)
            if s.clip.kv_clip is not None:
                s.clip.kv_clip[:] = [0.8, 0.75]
        x = m.embed(rng.integers(0, 20, (2, 5)))
        pk, pv = rng.normal(size=(2, 1, 8)), rng.normal(size=(2, 1, 8))
        y = _layer(x[:, 1:], lw, "fp", past_kv=(pk, pv))[0]
        rep = theta_gradcheck(lw, th, q, CalibBatch(y, x[:, 1:], (pk, pv)))
        assert rep.passed, rep.to_dict()
        assert "qkv.kv_clip" in th.named_tensors()
