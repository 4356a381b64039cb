import numpy as np
import pytest

from app.core.exceptions import DataError, ShapeError
from app.core.model_config import COSINE_DS, COSINE_NS, ScheduleKind
from app.models.run_config import SamplerConfig
from app.services import tensor as T
from app.services.diffusion import (LabelCodebook, NoiseSchedule, alpha_bar, corrupt, ddim_step, encode_labels,
                                    initial_noise, log_snr, resize_labels, sample, timesteps)
from app.services.mask_decoder import predict_mask
from app.services.tensor import Tensor
from tests.utils import make_sample


@pytest.fixture
def cosine():
    return NoiseSchedule(ScheduleKind.cosine)


@pytest.fixture
def linear():
    return NoiseSchedule(ScheduleKind.linear)


@pytest.fixture
def codebook(rng):
    return LabelCodebook(3, 2, 0.01, rng)


class TestNoiseSchedule:
    def test_cosine_log_snr_clamped_at_start(self, cosine):
        assert log_snr(0.0, cosine) == pytest.approx(11.5129, abs=1e-3)

    def test_cosine_alpha_bar_is_cos_squared(self, cosine):
        t = np.array([0.1, 0.5, 0.9])
        theta = (t + COSINE_NS) / (1 + COSINE_DS) * np.pi / 2
        np.testing.assert_allclose(alpha_bar(t, cosine), np.cos(theta) ** 2, rtol=1e-9)
        assert alpha_bar(0.5, cosine) == pytest.approx(0.4999, abs=1e-3)

    def test_cosine_end_near_zero(self, cosine):
        assert 0 < alpha_bar(1.0, cosine) < 1e-8

    @pytest.mark.parametrize("kind,start", [(ScheduleKind.cosine, 0.002), (ScheduleKind.linear, 0.0)])
    def test_strictly_decreasing(self, kind, start):
        sched = NoiseSchedule(kind)
        t = np.linspace(start, 1.0, 1000)
        ab = sched.alpha_bar(t)
        assert np.all(np.diff(ab) < 0)
        assert np.all(np.diff(sched.log_snr(t)) < 0)
        assert np.all((ab > 0) & (ab < 1))

    def test_linear_endpoints(self, linear):
        assert alpha_bar(0.0, linear) == pytest.approx(1 - 1e-4)
        assert alpha_bar(1.0, linear) == pytest.approx(np.prod(1 - np.linspace(1e-4, 0.02, 1000)))

    def test_linear_floor_index(self, linear):
        cumprod = np.cumprod(1 - np.linspace(1e-4, 0.02, 1000))
        assert alpha_bar(1.0, linear) == cumprod[999]
        assert alpha_bar(0.9999, linear) == cumprod[999]
        assert alpha_bar(0.5, linear) == cumprod[500]
        assert alpha_bar(0.2345, linear) == cumprod[234]
        assert alpha_bar(0.0005, linear) == cumprod[0]

    def test_linear_log_snr_is_logit(self, linear):
        ab = alpha_bar(0.3, linear)
        assert log_snr(0.3, linear) == pytest.approx(np.log(ab / (1 - ab)))

    def test_linear_zero_beta_keeps_signal(self):
        sched = NoiseSchedule(ScheduleKind.linear, beta_start=0.0, beta_end=0.0)
        np.testing.assert_allclose(sched.alpha_bar(np.linspace(0, 1, 5)), 1.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            NoiseSchedule("quadratic")


class TestLabelCodebook:
    def test_range_and_shape(self, rng):
        book = LabelCodebook(5, 4, 0.05, rng)
        enc = encode_labels(rng.integers(0, 5, size=(6, 7)), book).numpy()
        assert enc.shape == (4, 6, 7)
        assert np.all(np.abs(enc) <= 0.05)

    def test_table_row_formula(self, codebook):
        enc = codebook.encode(np.array([[2]])).numpy()[:, 0, 0]
        row = codebook.table.numpy()[2].astype(np.float64)
        np.testing.assert_allclose(enc, (2 / (1 + np.exp(-row)) - 1) * 0.01, atol=1e-7)

    def test_classes_distinct(self, codebook):
        enc = codebook.encode(np.array([[0, 1, 2]])).numpy()[:, 0, :].T
        assert len({tuple(np.round(r, 8)) for r in enc}) == 3

    def test_ignore_encodes_as_class_zero(self, codebook):
        enc = codebook.encode(np.array([[0, 255]], dtype=np.uint8)).numpy()
        np.testing.assert_array_equal(enc[:, 0, 0], enc[:, 0, 1])

    def test_out_of_range_id(self, codebook):
        with pytest.raises(DataError):
            codebook.encode(np.array([[0, 3]]))

    def test_requires_2d_mask(self, codebook):
        with pytest.raises(ShapeError):
            codebook.encode(np.zeros((1, 2, 2), dtype=np.uint8))


class TestCorrupt:
    def test_zero_noise_scales_signal(self, cosine, rng):
        y = Tensor(rng.normal(size=(2, 3, 3)))
        out = corrupt(y, 0.5, np.zeros((2, 3, 3)), cosine).numpy()
        np.testing.assert_allclose(out, y.numpy() * np.sqrt(alpha_bar(0.5, cosine)), atol=1e-6)

    def test_near_clean_at_start(self, cosine, rng):
        y = Tensor(rng.normal(size=(2, 3, 3)))
        out = corrupt(y, 0.0, rng.normal(size=(2, 3, 3)), cosine).numpy()
        np.testing.assert_allclose(out, y.numpy(), atol=0.02)

    def test_moments(self, cosine, rng):
        ab = float(alpha_bar(0.7, cosine))
        y = Tensor(np.full((1, 200, 200), 0.5))
        out = corrupt(y, 0.7, rng.standard_normal((1, 200, 200)), cosine).numpy()
        assert out.mean() == pytest.approx(0.5 * np.sqrt(ab), abs=0.02)
        assert out.var() == pytest.approx(1 - ab, rel=0.03)

    def test_shape_mismatch(self, cosine):
        with pytest.raises(ShapeError):
            corrupt(Tensor(np.zeros((2, 3, 3))), 0.5, np.zeros((2, 3, 4)), cosine)


class TestDdimStep:
    def test_consistent_prediction_is_fixed_point(self, cosine, codebook, rng):
        mask = rng.integers(0, 3, size=(4, 4))
        with T.precision(np.float64):
            enc = codebook.encode(mask).numpy()
        eps = rng.normal(size=enc.shape)
        ab_now, ab_next = alpha_bar(0.8, cosine), alpha_bar(0.3, cosine)
        mask_t = np.sqrt(ab_now) * enc + np.sqrt(1 - ab_now) * eps
        with T.precision(np.float64):
            out = ddim_step(Tensor(mask_t), mask, 0.8, 0.3, codebook, cosine).numpy()
        np.testing.assert_allclose(out, np.sqrt(ab_next) * enc + np.sqrt(1 - ab_next) * eps, atol=1e-6)

    @pytest.mark.parametrize("t", [0.9, 0.5, 0.1])
    def test_same_time_returns_input(self, cosine, codebook, rng, t):
        mask_t = rng.normal(size=(2, 4, 4))
        with T.precision(np.float64):
            out = ddim_step(Tensor(mask_t), rng.integers(0, 3, size=(4, 4)), t, t, codebook, cosine).numpy()
        np.testing.assert_allclose(out, mask_t, atol=1e-12)

    def test_scalar_oracle(self, linear):
        book = LabelCodebook(1, 1, 1.0, np.random.default_rng(0))
        book.table.data[:] = 0.0  # 编码值 (sigmoid(0)*2-1)*s = 0
        ab_now, ab_next = alpha_bar(0.9, linear), alpha_bar(0.4, linear)
        out = ddim_step(Tensor([[[1.5]]]), np.zeros((1, 1), dtype=np.uint8), 0.9, 0.4, book, linear).item()
        assert out == pytest.approx(1.5 * np.sqrt(1 - ab_next) / np.sqrt(1 - ab_now), rel=1e-5)

    def test_reaches_prediction_at_zero(self, cosine, codebook, rng):
        mask = rng.integers(0, 3, size=(4, 4))
        out = ddim_step(Tensor(rng.normal(size=(2, 4, 4))), mask, 0.5, 0.0, codebook, cosine).numpy()
        np.testing.assert_allclose(out, codebook.encode(mask).numpy(), atol=0.02)

    def test_t_next_after_t_now(self, cosine, codebook):
        with pytest.raises(ValueError):
            ddim_step(Tensor(np.zeros((2, 2, 2))), np.zeros((2, 2), dtype=np.uint8), 0.3, 0.5, codebook, cosine)

    def test_shape_mismatch(self, cosine, codebook):
        with pytest.raises(ShapeError):
            ddim_step(Tensor(np.zeros((2, 2, 2))), np.zeros((3, 3), dtype=np.uint8), 0.5, 0.2, codebook, cosine)


class TestSamplingHelpers:
    def test_timesteps_with_offset(self):
        flat = [v for i in range(3) for v in timesteps(i, 3, 1.0)]
        assert flat == pytest.approx([1.0, 1 / 3, 2 / 3, 0.0, 1 / 3, 0.0])

    def test_timesteps_without_offset(self):
        assert timesteps(0, 4, 0.0) == pytest.approx((1.0, 0.75))
        assert timesteps(3, 4, 0.0) == pytest.approx((0.25, 0.0))

    def test_resize_labels_keeps_ids(self, rng):
        label = rng.choice([0, 3, 255], size=(16, 16)).astype(np.uint8)
        small = resize_labels(label, 4, 4)
        assert small.shape == (4, 4)
        assert set(np.unique(small)) <= {0, 3, 255}

    def test_resize_labels_block_constant(self):
        label = np.kron(np.array([[1, 2], [3, 4]], dtype=np.uint8), np.ones((4, 4), dtype=np.uint8))
        np.testing.assert_array_equal(resize_labels(label, 2, 2), [[1, 2], [3, 4]])


class TestSample:
    def test_single_step_is_one_decoder_pass(self, tiny_model):
        s = make_sample()
        cfg = SamplerConfig(steps=1, td=1.0, seed=5)
        pred = sample(tiny_model, s.rgb, s.depth, cfg, sample_id=3)

        rgb, depth = tiny_model.inputs(s.rgb, s.depth)
        cond = tiny_model.condition(rgb, depth)
        noise = np.random.default_rng([5, 3]).standard_normal((tiny_model.codebook.dim, 8, 8))
        expected = predict_mask(tiny_model.decoder(Tensor(noise), cond, 1.0))
        np.testing.assert_array_equal(pred, expected)

    def test_output_and_trajectory(self, tiny_model):
        s = make_sample()
        pred, trajectory = sample(tiny_model, s.rgb, s.depth, SamplerConfig(steps=3), return_trajectory=True)
        assert pred.shape == (32, 32) and pred.dtype == np.uint8
        assert pred.max() < tiny_model.cfg.num_classes
        assert len(trajectory) == 3
        np.testing.assert_array_equal(trajectory[-1], pred)

    def test_deterministic_for_seed(self, tiny_model):
        s = make_sample(invalid=0.3)
        cfg = SamplerConfig(steps=2, seed=11)
        np.testing.assert_array_equal(sample(tiny_model, s.rgb, s.depth, cfg), sample(tiny_model, s.rgb, s.depth, cfg))

    def test_initial_noise_per_sample(self):
        a = initial_noise((2, 4, 4), seed=7, sample_id=0)
        np.testing.assert_array_equal(a, initial_noise((2, 4, 4), seed=7, sample_id=0))
        assert not np.allclose(a, initial_noise((2, 4, 4), seed=7, sample_id=1))
        assert not np.allclose(a, initial_noise((2, 4, 4), seed=8, sample_id=0))

    def test_trace_collects_depth_points(self, tiny_model):
        s = make_sample()
        trace = []
        sample(tiny_model, s.rgb, s.depth, SamplerConfig(steps=1), trace=trace)
        assert len(trace) == 4
        assert trace[0][0].shape == (16, 2)
