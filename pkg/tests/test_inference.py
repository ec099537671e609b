import numpy as np
import pytest
import torch

from cosmoseg.core import (
    ClassId,
    ImageVolume,
    LabelVolume,
    SideSplitPlane,
    default_split_plane,
    normalize_zscore,
    split_sides,
)
from cosmoseg.dataio import AnnotationEntry, SparseAnnotationSet
from cosmoseg.errors import WindowLargerThanPaddedVolume
from cosmoseg.inference import (
    SliceDiagnosisReport,
    SlidingWindowConfig,
    diagnose_slices,
    generate_pseudo_labels,
    predict_labels,
    sliding_window_predict,
    window_starts,
    STATUS_DISEASED,
    STATUS_NO_VESSEL,
    STATUS_NORMAL,
)
from cosmoseg.labelcraft import interpolate_labels
from cosmoseg.segnet import TrainingConfig, UNet3DConfig, train, TrainingCase


def _tiny_checkpoint(patch=(8, 8, 8), epochs=0, seed=0):
    labels = np.zeros((8, 8, 8), dtype=np.uint8)
    labels[2:5, 2:5, 2:5] = 1
    image = (labels * 3.0 + np.random.default_rng(0).normal(0, 0.1, labels.shape))
    image = ((image - image.mean()) / image.std()).astype(np.float32)
    return train(
        [TrainingCase("t", image, labels)],
        UNet3DConfig(num_downsamplings=1, base_channels=2, max_channels=4),
        TrainingConfig(
            patch_size=patch, batch_size=1, epochs=epochs, iterations_per_epoch=2, seed=seed
        ),
    )


class _ConstantModel(torch.nn.Module):
    """Emits fixed class scores regardless of input (class 2 favored)."""

    def forward(self, x):
        scores = torch.zeros(x.shape[0], 4, *x.shape[2:])
        scores[:, 2] = 1.5
        scores[:, 0] = 0.5
        return scores


class TestWindowStarts:
    def test_exact_fit(self):
        assert window_starts(96, 96, 0.5) == [0]

    def test_half_overlap(self):
        assert window_starts(144, 96, 0.5) == [0, 48]

    def test_clamped_tail(self):
        assert window_starts(100, 96, 0.5) == [0, 4]

    def test_window_too_large(self):
        with pytest.raises(WindowLargerThanPaddedVolume):
            window_starts(50, 96, 0.5)

    def test_full_coverage(self):
        for extent in (96, 97, 144, 200):
            starts = window_starts(extent, 96, 0.5)
            covered = np.zeros(extent, dtype=int)
            for s in starts:
                covered[s : s + 96] += 1
            assert (covered >= 1).all()


class TestSlidingWindow:
    def test_degenerate_single_window_matches_direct_forward(self):
        checkpoint = _tiny_checkpoint()
        model = checkpoint.build()
        g = np.random.default_rng(1)
        vol = ImageVolume(g.normal(size=(8, 8, 8)).astype(np.float32), (1, 1, 1), "v")
        cfg = SlidingWindowConfig(window_size=(8, 8, 8))
        probs = sliding_window_predict(model, vol, cfg)
        with torch.no_grad():
            direct = torch.softmax(model(torch.from_numpy(vol.data)[None, None]), 1)[0].numpy()
        assert np.abs(probs - direct).max() <= 1e-5

    def test_constant_model_constant_probs(self):
        model = _ConstantModel()
        vol = ImageVolume(np.zeros((12, 12, 12), dtype=np.float32), (1, 1, 1), "v")
        cfg = SlidingWindowConfig(window_size=(8, 8, 8), overlap=0.5)
        probs = sliding_window_predict(model, vol, cfg)
        expected = np.exp([0.5, 0, 1.5, 0]) / np.exp([0.5, 0, 1.5, 0]).sum()
        for c in range(4):
            np.testing.assert_allclose(probs[c], expected[c], atol=1e-5)

    def test_probabilities_sum_to_one(self):
        model = _tiny_checkpoint().build()
        g = np.random.default_rng(2)
        vol = ImageVolume(g.normal(size=(10, 14, 18)).astype(np.float32), (1, 1, 1), "v")
        cfg = SlidingWindowConfig(window_size=(8, 8, 8), overlap=0.5)
        probs = sliding_window_predict(model, vol, cfg)
        assert probs.shape == (4, 10, 14, 18)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_blend_is_convex_combination_of_windows(self):
        # oracle: recompute every window's softmax and bound the blend
        model = _tiny_checkpoint().build()
        g = np.random.default_rng(3)
        shape = (12, 10, 14)
        vol = ImageVolume(g.normal(size=shape).astype(np.float32), (1, 1, 1), "v")
        cfg = SlidingWindowConfig(window_size=(8, 8, 8), overlap=0.5)
        probs = sliding_window_predict(model, vol, cfg)
        lo = np.full((4,) + shape, np.inf, dtype=np.float64)
        hi = np.full((4,) + shape, -np.inf, dtype=np.float64)
        starts = [window_starts(shape[a], 8, 0.5) for a in range(3)]
        with torch.no_grad():
            for z0 in starts[0]:
                for y0 in starts[1]:
                    for x0 in starts[2]:
                        sel = (slice(z0, z0 + 8), slice(y0, y0 + 8), slice(x0, x0 + 8))
                        patch = torch.from_numpy(vol.data[sel])[None, None]
                        w_probs = torch.softmax(model(patch), 1)[0].numpy()
                        region = (slice(None),) + sel
                        lo[region] = np.minimum(lo[region], w_probs)
                        hi[region] = np.maximum(hi[region], w_probs)
        assert (probs >= lo - 1e-5).all()
        assert (probs <= hi + 1e-5).all()

    def test_small_volume_padded_and_cropped(self):
        model = _tiny_checkpoint().build()
        g = np.random.default_rng(4)
        vol = ImageVolume(g.normal(size=(5, 6, 7)).astype(np.float32), (1, 1, 1), "v")
        cfg = SlidingWindowConfig(window_size=(8, 8, 8))
        probs = sliding_window_predict(model, vol, cfg)
        assert probs.shape == (4, 5, 6, 7)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_deep_supervision_model_uses_full_resolution_head(self):
        torch.manual_seed(0)
        cfg = UNet3DConfig(
            num_downsamplings=1, base_channels=2, max_channels=4, deep_supervision=True
        )
        from cosmoseg.segnet import build_model

        model = build_model(cfg)
        vol = ImageVolume(np.zeros((8, 8, 8), dtype=np.float32), (1, 1, 1), "v")
        probs = sliding_window_predict(model, vol, SlidingWindowConfig((8, 8, 8)))
        assert probs.shape == (4, 8, 8, 8)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)


class TestPredictLabels:
    def test_argmax(self):
        probs = np.array([0.1, 0.7, 0.1, 0.1]).reshape(4, 1, 1, 1)
        assert predict_labels(probs).data[0, 0, 0] == 1

    def test_tie_goes_to_lower_class(self):
        probs = np.full((4, 1, 1, 1), 0.25)
        assert predict_labels(probs).data[0, 0, 0] == 0
        probs = np.array([0.1, 0.4, 0.4, 0.1]).reshape(4, 1, 1, 1)
        assert predict_labels(probs).data[0, 0, 0] == 1

    def test_all_background(self):
        probs = np.zeros((4, 2, 2, 2))
        probs[0] = 1.0
        assert not predict_labels(probs).data.any()

    def test_rescaling_invariance(self, rng):
        probs = rng.uniform(0.01, 1, size=(4, 3, 3, 3))
        scale = rng.uniform(0.5, 2.0, size=(3, 3, 3))
        a = predict_labels(probs)
        b = predict_labels(probs * scale[None])
        np.testing.assert_array_equal(a.data, b.data)


def _square(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _full_coverage_annotations(shape):
    entries = []
    nz, ny, nx = shape
    for side, xoff in (("L", 0), ("R", nx // 2)):
        for z in range(nz):
            entries.append(
                AnnotationEntry(
                    side=side,
                    slice_index=z,
                    status="normal",
                    lumen_contour=_square(xoff + 2.0, 2.0, xoff + 4.0, 4.0),
                    wall_contour=_square(xoff + 1.0, 1.0, xoff + 5.0, 5.0),
                )
            )
    return SparseAnnotationSet("c", entries)


class TestGeneratePseudoLabels:
    shape = (8, 12, 16)

    def _volume(self):
        g = np.random.default_rng(5)
        return ImageVolume(g.normal(size=self.shape).astype(np.float32), (1, 1, 1), "c")

    def test_full_coverage_equals_interpolation(self):
        checkpoint = _tiny_checkpoint()
        vol = self._volume()
        ann = _full_coverage_annotations(self.shape)
        out = generate_pseudo_labels(checkpoint, vol, ann, SlidingWindowConfig((8, 8, 8)))
        interp = interpolate_labels(ann, self.shape)
        np.testing.assert_array_equal(out.data, interp.data)

    def test_correction_invariant_any_checkpoint(self):
        # untrained weights: inside ranges bit-equal interpolation, outside
        # bit-equal the raw argmax prediction
        checkpoint = _tiny_checkpoint(epochs=0)
        vol = self._volume()
        ann = _full_coverage_annotations(self.shape)
        ann.entries = [e for e in ann.entries if 2 <= e.slice_index <= 5]
        out = generate_pseudo_labels(checkpoint, vol, ann, SlidingWindowConfig((8, 8, 8)))
        plane = default_split_plane(self.shape[2])
        interp = interpolate_labels(ann, self.shape, plane)
        np.testing.assert_array_equal(out.data[2:6], interp.data[2:6])
        from cosmoseg.inference import predict_case_sides

        raw = predict_labels(
            predict_case_sides(checkpoint.build(), vol, SlidingWindowConfig((8, 8, 8)), plane)
        )
        outside = np.ones(self.shape, dtype=bool)
        outside[2:6] = False
        np.testing.assert_array_equal(out.data[outside], raw.data[outside])
        assert not (out.data == ClassId.IGNORE).any()

    def test_side_without_annotations_is_pure_prediction(self):
        checkpoint = _tiny_checkpoint(epochs=0)
        vol = self._volume()
        ann = _full_coverage_annotations(self.shape)
        ann.entries = [e for e in ann.entries if e.side == "L"]
        out = generate_pseudo_labels(checkpoint, vol, ann, SlidingWindowConfig((8, 8, 8)))
        from cosmoseg.inference import predict_case_sides

        plane = default_split_plane(self.shape[2])
        raw = predict_labels(
            predict_case_sides(checkpoint.build(), vol, SlidingWindowConfig((8, 8, 8)), plane)
        )
        np.testing.assert_array_equal(out.data[:, :, 8:], raw.data[:, :, 8:])


class TestDiagnoseSlices:
    def _labels(self):
        data = np.zeros((4, 6, 8), dtype=np.uint8)
        # side L (x < 4): z0 diseased (4 voxels), z1 normal wall only, z2 empty
        data[0, 0, 0:4] = 3
        data[0, 1, 0:3] = 2
        data[1, 0, 0:4] = 2
        # side R: lumen only on z3 (wall absent -> no-vessel)
        data[3, 2, 6] = 1
        return LabelVolume(data, {}, "c")

    def test_statuses_and_counts(self):
        report = diagnose_slices(self._labels(), SideSplitPlane(4), tau=1)
        rows = {(r.side, r.slice_index): r for r in report.rows}
        r = rows[("L", 0)]
        assert (r.status, r.diseased_voxels, r.wall_voxels) == (STATUS_DISEASED, 4, 7)
        assert rows[("L", 1)].status == STATUS_NORMAL
        assert rows[("L", 2)].status == STATUS_NO_VESSEL
        assert rows[("R", 0)].status == STATUS_NO_VESSEL
        assert rows[("R", 3)].status == STATUS_NO_VESSEL  # lumen without wall

    def test_tau_threshold(self):
        report = diagnose_slices(self._labels(), SideSplitPlane(4), tau=6)
        rows = {(r.side, r.slice_index): r for r in report.rows}
        assert rows[("L", 0)].status == STATUS_NORMAL  # 4 < tau

    def test_monotone_in_diseased_voxels(self):
        labels = self._labels()
        report1 = diagnose_slices(labels, SideSplitPlane(4), tau=1)
        labels.data[0, 2, 0:3] = 3
        report2 = diagnose_slices(labels, SideSplitPlane(4), tau=1)
        before = {(r.side, r.slice_index): r.status for r in report1.rows}
        after = {(r.side, r.slice_index): r.status for r in report2.rows}
        for key, status in before.items():
            if status == STATUS_DISEASED:
                assert after[key] == STATUS_DISEASED

    def test_rejects_ignore(self):
        data = np.full((2, 2, 2), int(ClassId.IGNORE), dtype=np.uint8)
        with pytest.raises(ValueError):
            diagnose_slices(LabelVolume(data), SideSplitPlane(1))

    def test_csv_roundtrip(self, tmp_path):
        report = diagnose_slices(self._labels(), SideSplitPlane(4))
        path = tmp_path / "d.csv"
        report.to_csv(path)
        back = SliceDiagnosisReport.from_csv(path)
        assert back.case_id == report.case_id
        assert back.rows == report.rows
