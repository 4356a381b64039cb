import numpy as np
import pytest

from app.core.config import settings
from app.core.exceptions import DataError, MetricError, ShapeError, UsageError
from app.core.model_config import IGNORE_COLOR, STAGE_POINT_COLORS
from app.models.eval_report import EvalReport
from app.services.metrics import (class_ids, confusion_matrix, count_loss_spikes, invalid_fractions, invalid_subset,
                                  loss_spikes, low_light, mean_iou, small_objects_config)
from app.services.visualize import colorize, depth_to_gray, overlay_points
from tests.utils import make_sample


def brute_force_miou(pred, gt, num_classes, ignore_id=255):
    ious = []
    keep = gt != ignore_id
    for k in range(num_classes):
        p, g = (pred == k) & keep, (gt == k) & keep
        union = np.sum(p | g)
        if union:
            ious.append(np.sum(p & g) / union)
    return float(np.mean(ious))


class TestMeanIou:
    def test_perfect_prediction(self, rng):
        gt = rng.integers(0, 4, size=(8, 8))
        assert mean_iou(gt.copy(), gt, 4).mean_iou == 1.0

    def test_hand_computed(self):
        report = mean_iou(np.array([[0, 0, 1, 0]]), np.array([[0, 0, 1, 1]]), 2)
        assert report.per_class_iou == pytest.approx([2 / 3, 1 / 2])
        assert report.mean_iou == pytest.approx(0.5833, abs=1e-4)

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            gt = rng.integers(0, 5, size=(8, 8))
            gt[rng.random((8, 8)) < 0.2] = 255
            pred = rng.integers(0, 5, size=(8, 8))
            assert mean_iou(pred, gt, 5).mean_iou == pytest.approx(brute_force_miou(pred, gt, 5))

    def test_accumulates_over_dataset(self):
        preds = [np.array([[0, 0]]), np.array([[1, 1]])]
        gts = [np.array([[0, 1]]), np.array([[1, 1]])]
        report = mean_iou(preds, gts, 2)
        np.testing.assert_array_equal(report.confusion, [[1, 0], [1, 2]])
        assert report.mean_iou == pytest.approx((1 / 2 + 2 / 3) / 2)

    def test_absent_class_not_averaged(self):
        report = mean_iou(np.array([[0, 1]]), np.array([[0, 1]]), 4)
        assert report.per_class_iou == [1.0, 1.0, None, None]
        assert report.mean_iou == 1.0

    def test_ignore_classes_only_leave_mean(self):
        report = mean_iou(np.array([[0, 0, 1, 0]]), np.array([[0, 0, 1, 1]]), 2, ignore_classes=[0])
        assert report.per_class_iou[0] == pytest.approx(2 / 3)
        assert report.mean_iou == pytest.approx(0.5)

    def test_all_ignored(self):
        with pytest.raises(MetricError):
            mean_iou(np.zeros((2, 2), dtype=np.uint8), np.full((2, 2), 255, dtype=np.uint8), 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mean_iou(np.zeros((2, 2)), np.zeros((2, 3)), 3)
        with pytest.raises(ShapeError):
            mean_iou([np.zeros((2, 2))], [], 3)

    def test_out_of_range_labels(self):
        with pytest.raises(DataError):
            confusion_matrix(np.array([0, 5]), np.array([0, 1]), 3)
        with pytest.raises(DataError):
            confusion_matrix(np.array([0, 1]), np.array([0, 7]), 3)

    def test_report_frame(self):
        report = EvalReport(per_class_iou=[0.5, None, 1.0], mean_iou=0.75, confusion=np.zeros((3, 3)),
                            class_names=["a", "b", "c"])
        frame = report.to_frame()
        assert frame["class"].tolist() == ["a", "b", "c", "mean"]
        assert frame["iou"].iloc[-1] == 0.75
        assert np.isnan(frame["iou"].iloc[1])


class TestSubsets:
    @staticmethod
    def samples_with_invalid(fractions):
        out = []
        for i, frac in enumerate(fractions):
            s = make_sample(10, 10, sample_id=i)
            depth = s.depth.copy().ravel()
            depth[:int(round(frac * 100))] = 0
            out.append(s.replace(depth=depth.reshape(10, 10)))
        return out

    def test_invalid_subset_picks_worst(self):
        samples = self.samples_with_invalid([0.9, 0.1, 0.5, 0.0, 0.7])
        assert [s.sample_id for s in invalid_subset(samples, 0.2)] == [0]
        assert [s.sample_id for s in invalid_subset(samples, 0.6)] == [0, 4, 2]

    def test_invalid_subset_whole_set(self):
        samples = self.samples_with_invalid([0.9, 0.1, 0.5, 0.0, 0.7])
        assert len(invalid_subset(samples, 1.0)) == 5

    def test_invalid_subset_ties_by_id(self):
        samples = self.samples_with_invalid([0.0, 0.0, 0.0])
        assert [s.sample_id for s in invalid_subset(samples, 0.2)] == [0]

    def test_invalid_subset_errors(self):
        with pytest.raises(DataError):
            invalid_subset([])
        with pytest.raises(UsageError):
            invalid_subset(self.samples_with_invalid([0.1]), 0.0)

    def test_invalid_fractions(self):
        fractions = invalid_fractions(self.samples_with_invalid([0.3, 0.0]))
        assert fractions == {0: pytest.approx(0.3), 1: 0.0}

    def test_low_light(self):
        s = make_sample(4, 4)
        s = s.replace(rgb=np.full((4, 4, 3), 0.5, dtype=np.float32))
        dark = low_light(s, 2.0)
        np.testing.assert_allclose(dark.rgb, 0.25)
        assert dark.rgb.dtype == np.float32
        np.testing.assert_array_equal(dark.depth, s.depth)
        np.testing.assert_array_equal(dark.label, s.label)

    def test_low_light_keeps_extremes(self):
        s = make_sample(4, 4)
        rgb = np.zeros((4, 4, 3), dtype=np.float32)
        rgb[0] = 1.0
        np.testing.assert_array_equal(low_light(s.replace(rgb=rgb)).rgb, rgb)

    def test_small_objects_presets(self):
        assert len(small_objects_config("nyuv2")) == 6
        assert small_objects_config("SUNRGBD") == ["wall", "floor", "ceiling"]
        assert small_objects_config("whatever", ["box"]) == ["box"]
        assert small_objects_config("synthetic") == settings.SYNTH_SMALL_OBJECT_IGNORES
        with pytest.raises(UsageError):
            small_objects_config("cityscapes")

    def test_class_ids_skip_unknown(self):
        assert class_ids(["ball", "wall", "box"], ["background", "box", "ball"]) == [2, 1]


class TestLossSpikes:
    def test_single_spike(self):
        losses = [1.0] * 25 + [3.0] + [1.0] * 5
        assert loss_spikes(losses) == [25]
        assert count_loss_spikes(losses) == 1

    def test_first_window_never_flagged(self):
        assert loss_spikes([1.0, 10.0] + [1.0] * 5) == []

    def test_decreasing_loss_has_no_spikes(self):
        assert count_loss_spikes(np.linspace(3.0, 0.1, 200)) == 0


class TestVisualize:
    def test_colorize_ignore_is_white(self):
        img = colorize(np.array([[0, 255], [1, 2]], dtype=np.uint8))
        assert img.shape == (2, 2, 3) and img.dtype == np.uint8
        assert tuple(img[0, 1]) == IGNORE_COLOR
        assert tuple(img[0, 0]) != tuple(img[1, 0])

    def test_depth_to_gray(self):
        depth = np.array([[0, 1000], [2000, 3000]], dtype=np.uint16)
        gray = depth_to_gray(depth)
        assert gray.shape == (2, 2, 3)
        assert gray[0, 0, 0] == 0
        assert gray[1, 1, 0] == 255

    def test_overlay_marks_points(self):
        depth = np.full((8, 8), 1000, dtype=np.uint16)
        trace = [[np.array([[0.0, 0.0]])], [np.array([[-1.0, -1.0]])]]
        img = overlay_points(depth, trace, radius=0)
        assert tuple(img[4, 4]) == STAGE_POINT_COLORS[0]
        assert tuple(img[0, 0]) == STAGE_POINT_COLORS[1]
        assert np.sum(np.any(img != img[7, 7], axis=-1)) == 2
