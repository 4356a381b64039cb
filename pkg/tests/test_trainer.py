"""优化器、学习率、数据增强与训练循环。"""
import numpy as np
import pytest

from app.core.exceptions import DataError, NumericError
from app.models.run_config import TrainConfig
from app.services.checkpoint import load_checkpoint
from app.services.nn import Parameter
from app.services.optimizer import AdamW, clip_grad_norm, opt_step
from app.services.segmenter import DiffSegModel
from app.tasks.train_tasks import AugmentParams, apply_augment, augment, draw_augment, fit, lr_at, train_step
from tests.utils import make_sample, tiny_model_config


class TestLearningRate:
    CFG = TrainConfig(lr=1.0, warmup=0.1, power=1.0)

    @pytest.mark.parametrize("step,expected", [(0, 0.0), (5, 0.5), (10, 1.0), (55, 0.5), (100, 0.0)])
    def test_warmup_poly(self, step, expected):
        assert lr_at(step, 100, self.CFG) == pytest.approx(expected)

    def test_default_peak(self):
        cfg = TrainConfig()
        assert lr_at(int(round(cfg.warmup * 50)), 50, cfg) == pytest.approx(6e-5)

    def test_no_warmup_starts_at_peak(self):
        assert lr_at(0, 10, TrainConfig(lr=0.5, warmup=0.0)) == pytest.approx(0.5)

    def test_power(self):
        cfg = TrainConfig(lr=1.0, warmup=0.0, power=2.0)
        assert lr_at(5, 10, cfg) == pytest.approx(0.25)

    def test_never_negative(self):
        assert all(lr_at(s, 37, self.CFG) >= 0 for s in range(40))

    def test_warmup_out_of_range(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup=1.0)


class TestAdamW:
    def _param(self, value, grad):
        p = Parameter(np.array([value], dtype=np.float64))
        p.grad = np.array([grad])
        return p

    def test_first_step_moves_lr(self):
        p = self._param(1.0, 0.5)
        opt_step(AdamW([p], weight_decay=0.0), 0.1)
        assert p.numpy()[0] == pytest.approx(0.9, abs=1e-6)

    def test_decoupled_weight_decay(self):
        p = self._param(1.0, 0.5)
        AdamW([p], weight_decay=0.01).step(0.1)
        assert p.numpy()[0] == pytest.approx(1.0 - 0.1 * (1.0 + 0.01), abs=1e-6)

    def test_zero_grad_pure_shrink(self):
        p = self._param(2.0, 0.0)
        AdamW([p], weight_decay=0.1).step(0.5)
        assert p.numpy()[0] == pytest.approx(2.0 * (1 - 0.5 * 0.1), abs=1e-6)

    def test_constant_gradient_sign_following(self):
        p = self._param(0.0, -3.0)
        opt = AdamW([p], weight_decay=0.0)
        for _ in range(200):
            before = p.numpy()[0]
            p.grad = np.array([-3.0])
            opt.step(0.01)
        assert p.numpy()[0] - before == pytest.approx(0.01, rel=1e-4)

    def test_zero_lr_keeps_weights_but_moves_moments(self):
        p = self._param(1.0, 0.5)
        opt = AdamW([p])
        opt.step(0.0)
        assert p.numpy()[0] == 1.0
        assert opt.m[0][0] == pytest.approx(0.05)
        assert opt.step_count == 1

    def test_clip_grad_norm(self):
        p, q = Parameter(np.zeros(1)), Parameter(np.zeros(1))
        p.grad, q.grad = np.array([3.0]), np.array([4.0])
        assert clip_grad_norm([p, q], 1.0) == pytest.approx(5.0)
        assert np.hypot(p.grad[0], q.grad[0]) == pytest.approx(1.0, abs=1e-5)

    def test_clip_leaves_small_gradients(self):
        p = Parameter(np.zeros(2))
        p.grad = np.array([0.3, 0.4])
        clip_grad_norm([p], 1.0)
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])


class TestAugment:
    @staticmethod
    def coordinate_sample(h=32, w=32):
        """每个像素的 label/depth/rgb 都编码了它的原始坐标。"""
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        label = ((yy // 8) * 4 + xx // 8).astype(np.uint8)
        depth = (yy * w + xx + 1).astype(np.uint16)
        rgb = np.stack([yy / (h - 1), xx / (w - 1), np.zeros((h, w))], axis=-1).astype(np.float32)
        return make_sample(h, w).replace(rgb=rgb, depth=depth, label=label)

    def test_flip_twice_is_identity(self):
        s = self.coordinate_sample()
        params = AugmentParams(1.0, 0, 0, True, 32, 32)
        twice = apply_augment(apply_augment(s, params), params)
        np.testing.assert_array_equal(twice.label, s.label)
        np.testing.assert_array_equal(twice.depth, s.depth)
        np.testing.assert_allclose(twice.rgb, s.rgb, atol=1e-6)

    def test_flip_mirrors_columns(self):
        s = self.coordinate_sample()
        out = apply_augment(s, AugmentParams(1.0, 0, 0, True, 32, 32))
        np.testing.assert_array_equal(out.depth, s.depth[:, ::-1])

    def test_labels_closed_under_resize(self, rng):
        s = make_sample(num_classes=3)
        label = s.label.copy()
        label[:4] = 255
        s = s.replace(label=label)
        for _ in range(5):
            out = augment(s, rng)
            assert set(np.unique(out.label)) <= set(np.unique(label))

    def test_alignment(self, rng):
        """depth 编码了源像素位置，label 与 rgb 必须来自同一位置。"""
        s = self.coordinate_sample()
        for _ in range(5):
            params = draw_augment(32, 32, rng)
            out = apply_augment(s, params)
            src = out.depth.astype(np.int64) - 1
            ys, xs = src // 32, src % 32
            np.testing.assert_array_equal(out.label, s.label[ys, xs])
            # rgb 双线性采样与最近邻位置相差不超过半个像素
            assert np.abs(out.rgb[..., 0] * 31 - ys).max() <= 0.5 + 1e-4
            assert np.abs(out.rgb[..., 1] * 31 - xs).max() <= 0.5 + 1e-4
            assert out.rgb.shape == (32, 32, 3)

    def test_invalid_depth_stays_zero(self, rng):
        s = make_sample()
        depth = s.depth.copy()
        depth[:, :16] = 0
        s = s.replace(depth=depth)
        out = augment(s, rng)
        assert np.all((out.depth == 0) | (out.depth >= 500))
        assert (out.depth == 0).any()

    def test_crop_larger_than_image(self):
        with pytest.raises(DataError):
            apply_augment(make_sample(), AugmentParams(1.0, 4, 0, False, 32, 32))

    def test_draw_within_bounds(self, rng):
        for _ in range(20):
            p = draw_augment(32, 48, rng)
            assert 1.0 <= p.scale <= 1.25
            assert p.top + p.out_h <= round(32 * p.scale)
            assert p.left + p.out_w <= round(48 * p.scale)


class TestTrainStep:
    def test_first_loss_near_uniform(self):
        cfg = tiny_model_config(num_classes=6)
        model = DiffSegModel(cfg, seed=0)
        batch = [make_sample(num_classes=6, seed=i, sample_id=i) for i in range(2)]
        loss = train_step(batch, model, AdamW(model.parameters()), 0.0, np.random.default_rng(0))
        assert loss == pytest.approx(np.log(6), abs=0.5)

    def test_zero_lr_weights_unchanged(self, tiny_model, tiny_samples):
        before = tiny_model.state_dict()
        train_step(tiny_samples[:2], tiny_model, AdamW(tiny_model.parameters()), 0.0, np.random.default_rng(0))
        for name, value in tiny_model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_step_updates_weights(self, tiny_model, tiny_samples):
        before = tiny_model.state_dict()
        train_step(tiny_samples[:2], tiny_model, AdamW(tiny_model.parameters()), 1e-3, np.random.default_rng(0))
        after = tiny_model.state_dict()
        assert any(not np.array_equal(after[k], before[k]) for k in before)

    def test_non_finite_loss(self, tiny_model, tiny_samples):
        tiny_model.decoder.head.bias.data[:] = np.nan
        with pytest.raises(NumericError):
            train_step(tiny_samples[:1], tiny_model, AdamW(tiny_model.parameters()), 1e-3, np.random.default_rng(0))


class TestFit:
    def test_reproducible_checkpoints(self, tmp_path, tiny_cfg, tiny_samples):
        cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, seed=3)
        for name in ("a", "b"):
            fit(tiny_samples, tiny_cfg, cfg, str(tmp_path / f"{name}.ddsg"), str(tmp_path / f"{name}.csv"))
        assert (tmp_path / "a.ddsg").read_bytes() == (tmp_path / "b.ddsg").read_bytes()

    def test_log_and_checkpoint(self, tmp_path, tiny_cfg, tiny_samples):
        cfg = TrainConfig(epochs=2, batch_size=3, lr=1e-3, ckpt_every=1)
        model, log = fit(tiny_samples, tiny_cfg, cfg, str(tmp_path / "m.ddsg"), str(tmp_path / "loss.csv"))
        assert list(log.columns) == ["epoch", "step", "loss", "lr"]
        assert len(log) == 4
        assert log["step"].tolist() == [0, 1, 2, 3]
        assert np.all(np.isfinite(log["loss"]))
        state, meta = load_checkpoint(str(tmp_path / "m.ddsg"))
        assert meta["epoch"] == 2
        assert set(state) == set(model.state_dict())
        assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,step,loss,lr"

    def test_empty_dataset(self, tmp_path, tiny_cfg):
        with pytest.raises(DataError):
            fit([], tiny_cfg, TrainConfig(), str(tmp_path / "m.ddsg"))

    @pytest.mark.slow
    def test_loss_decreases_on_synthetic_scenes(self, tmp_path, small_scene_spec):
        from app.services.scene_synth import synth_split
        samples = synth_split(small_scene_spec, 20, seed=0)
        cfg = TrainConfig(epochs=40, batch_size=4, lr=1e-3)
        _, log = fit(samples, tiny_model_config(), cfg, str(tmp_path / "m.ddsg"))
        assert len(log) == 200
        losses = log["loss"].to_numpy()
        assert losses[-20:].mean() < losses[:20].mean()
