import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from spinelabel import localizer
from spinelabel.core import AnnotationSet, BoundingBox, Volume, label_from_name
from spinelabel.errors import NoSpineDetected


def _vol(shape=(16, 12, 10), spacing=4.0):
    return Volume(np.zeros(shape, np.float32), (spacing,) * 3)


class TestLocalizerTarget:
    def test_single_vertebra_peak_one(self, ann_builder):
        v = _vol()
        ann = ann_builder({"T6": (32.0, 24.0, 20.0)})
        t = localizer.localizer_target(v, ann)
        assert t[8, 6, 5] == 1.0
        assert t.shape == v.shape

    def test_pointwise_max_of_two_gaussians(self, ann_builder):
        v = _vol()
        ann = ann_builder({"T6": (32.0, 24.0, 20.0), "T7": (42.0, 24.0, 20.0)})
        t = localizer.localizer_target(v, ann)
        # oracle: evaluate both Gaussians over the grid, take the max
        grid = np.stack(np.meshgrid(*[np.arange(s) * 4.0 for s in v.shape],
                                    indexing="ij"), axis=-1)
        expected = np.zeros(v.shape)
        for name in ("T6", "T7"):
            mu = np.asarray(ann.position(label_from_name(name)))
            d2 = ((grid - mu) ** 2).sum(-1)
            expected = np.maximum(expected, np.exp(-d2 / (2 * 15.0 ** 2)))
        np.testing.assert_allclose(t, expected, atol=1e-12)

    def test_no_vertebrae_all_zero(self):
        assert (localizer.localizer_target(_vol(), AnnotationSet({})) == 0).all()

    def test_peaks_at_annotation_voxels(self, ann_builder):
        v = _vol((20, 14, 12))
        ann = ann_builder({"L1": (24.0, 20.0, 16.0), "L2": (48.0, 20.0, 16.0)})
        t = localizer.localizer_target(v, ann)
        for lab in ann.labels():
            idx = v.physical_to_voxel(ann.position(lab))
            assert t[idx] == 1.0


class TestLocalizerNet:
    def test_shape_and_bounds(self):
        net = localizer.SpineLocalizerNet(base_channels=4).eval()
        with torch.no_grad():
            out = net(torch.rand(1, 1, 16, 12, 10))
        assert out.shape == (1, 1, 16, 12, 10)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_handles_non_multiple_dims(self):
        net = localizer.SpineLocalizerNet(base_channels=4).eval()
        with torch.no_grad():
            out = net(torch.rand(1, 1, 18, 13, 11))
        assert out.shape == (1, 1, 18, 13, 11)

    def test_parameter_memory_budget(self):
        net = localizer.SpineLocalizerNet()
        n_params = sum(p.numel() for p in net.parameters())
        assert n_params * 4 <= 1 << 30  # float32 footprint well under 1 GB

    def test_predict_heatmap_range(self):
        net = localizer.SpineLocalizerNet(base_channels=4)
        heat = localizer.predict_heatmap(net, _vol((12, 12, 12)))
        assert heat.shape == (12, 12, 12)
        assert heat.min() >= 0.0 and heat.max() <= 1.0


class TestExtractBbox:
    def test_single_voxel_with_pad(self):
        heat = np.zeros((20, 30, 40))
        heat[5, 10, 20] = 1.0
        box = localizer.extract_bbox(heat, pad_vox=2)
        assert box.lower == (0, 8, 18)
        assert box.upper == (19, 12, 22)

    def test_all_zero_raises(self):
        with pytest.raises(NoSpineDetected):
            localizer.extract_bbox(np.zeros((5, 5, 5)), 2)

    def test_uniform_one_full_volume(self):
        box = localizer.extract_bbox(np.ones((6, 7, 8)), pad_vox=99)
        assert box.lower == (0, 0, 0)
        assert box.upper == (5, 6, 7)

    def test_threshold_is_half(self):
        heat = np.full((4, 6, 6), 0.49)
        with pytest.raises(NoSpineDetected):
            localizer.extract_bbox(heat, 0)
        heat[2, 3, 3] = 0.5
        box = localizer.extract_bbox(heat, 0)
        assert box.lower == (0, 3, 3) and box.upper == (3, 3, 3)

    @given(st.integers(0, 6), st.integers(0, 6))
    def test_monotone_in_pad(self, pad_a, pad_b):
        heat = np.zeros((10, 12, 14))
        heat[3:5, 4:7, 6:9] = 0.9
        small = localizer.extract_bbox(heat, min(pad_a, pad_b))
        large = localizer.extract_bbox(heat, max(pad_a, pad_b))
        assert all(l2 <= l1 for l1, l2 in zip(small.lower, large.lower))
        assert all(u2 >= u1 for u1, u2 in zip(small.upper, large.upper))


class TestLocMetrics:
    def test_identical_boxes(self):
        box = BoundingBox((0, 0, 0), (9, 9, 9))
        iou, rate = localizer.loc_metrics([box], [box])
        assert iou == 1.0 and rate == 1.0

    def test_disjoint_boxes(self):
        a = BoundingBox((0, 0, 0), (4, 4, 4))
        b = BoundingBox((10, 10, 10), (14, 14, 14))
        iou, rate = localizer.loc_metrics([a], [b])
        assert iou == 0.0 and rate == 0.0

    def test_documented_overlap(self):
        a = BoundingBox((0, 0, 0), (9, 9, 9))      # [0, 10)^3
        b = BoundingBox((5, 5, 5), (14, 14, 14))   # [5, 15)^3
        iou = localizer.box_iou(a, b)
        assert iou == pytest.approx(125 / 1875)

    def test_symmetric_and_bounded(self, rng):
        for _ in range(50):
            lo = rng.integers(0, 10, 3)
            hi = lo + rng.integers(1, 10, 3)
            a = BoundingBox(tuple(lo), tuple(hi))
            lo2 = rng.integers(0, 10, 3)
            hi2 = lo2 + rng.integers(1, 10, 3)
            b = BoundingBox(tuple(lo2), tuple(hi2))
            iou_ab = localizer.box_iou(a, b)
            assert iou_ab == localizer.box_iou(b, a)
            assert 0.0 <= iou_ab <= 1.0

    def test_detection_uses_strict_half(self):
        a = BoundingBox((0, 0, 0), (9, 9, 9))
        c = BoundingBox((0, 0, 0), (9, 9, 4))  # IoU exactly 0.5
        iou, rate = localizer.loc_metrics([c], [a])
        assert iou == pytest.approx(0.5)
        assert rate == 0.0

    def test_mismatched_lists(self):
        with pytest.raises(ValueError):
            localizer.loc_metrics([], [BoundingBox((0, 0, 0), (1, 1, 1))])


class TestLocalizerCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = localizer.LocalizerTrainConfig(base_channels=4)
        net = localizer.SpineLocalizerNet(4)
        localizer.save_localizer(net, cfg, tmp_path / "loc.pt")
        again, cfg2 = localizer.load_localizer(tmp_path / "loc.pt")
        assert cfg2.base_channels == 4
        x = torch.rand(1, 1, 8, 8, 8)
        with torch.no_grad():
            torch.testing.assert_close(net.eval()(x), again(x))

    def test_wrong_kind_rejected(self, tmp_path):
        torch.save({"kind": "labeler"}, tmp_path / "x.pt")
        with pytest.raises(ValueError):
            localizer.load_localizer(tmp_path / "x.pt")
