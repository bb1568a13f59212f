import math

import numpy as np
import pytest

from mvdet.camgeo import CameraExtrinsics, CameraIntrinsics, CameraModel, CameraRig, project_point
from mvdet.featcore import (
    FeatureError,
    FeatureLevel,
    FeaturePyramid,
    TensorFormatError,
    bilinear_grad,
    bilinear_sample,
    bilinear_sample_many,
    load_pyramid,
    read_tensor,
    sample_multiview,
    sample_multiview_many,
    save_pyramid,
    write_tensor,
)
from mvdet.synth import AnalyticField, gen_rig, render_pyramid


def level_2x2():
    return FeatureLevel(data=np.array([[[0.0, 1.0], [2.0, 3.0]]]), stride=1)


def make_ident_cam(cam_id="c0", fx=100.0, width=64, height=48):
    return CameraModel(
        intrinsics=CameraIntrinsics(fx=fx, fy=fx, cx=width / 2, cy=height / 2, width=width, height=height),
        extrinsics=CameraExtrinsics(rotation=np.eye(3), translation=np.zeros(3)),
        id=cam_id,
    )


def constant_pyramid(rig, values, strides=(2, 4)):
    """Per-camera constant pyramids; values is one scalar per camera."""
    cams = []
    for cam, value in zip(rig, values):
        levels = []
        for stride in strides:
            h = math.ceil(cam.intrinsics.height / stride)
            w = math.ceil(cam.intrinsics.width / stride)
            levels.append(FeatureLevel(data=np.full((1, h, w), value), stride=stride))
        cams.append(levels)
    return FeaturePyramid(cams)


class TestBilinearSample:
    def test_center_of_four_cells(self):
        feat, inside = bilinear_sample(level_2x2(), (0.5, 0.5))
        assert inside
        assert feat[0] == pytest.approx(1.5)

    def test_grid_point_identity(self):
        level = level_2x2()
        for (u, v), expected in [((0, 0), 0.0), ((1, 0), 1.0), ((0, 1), 2.0), ((1, 1), 3.0)]:
            feat, inside = bilinear_sample(level, (u, v))
            assert inside and feat[0] == expected

    def test_constant_field(self):
        level = FeatureLevel(data=np.full((3, 5, 7), 2.25), stride=1)
        rng = np.random.default_rng(0)
        for _ in range(20):
            pos = rng.uniform((0, 0), (6, 4))
            feat, inside = bilinear_sample(level, pos)
            assert inside
            assert np.all(feat == 2.25)

    def test_outside_is_zero_and_flagged(self):
        level = level_2x2()
        for pos in [(-0.01, 0.5), (1.01, 0.5), (0.5, -2), (0.5, 1.5), (np.nan, 0.5)]:
            feat, inside = bilinear_sample(level, pos)
            assert not inside
            assert np.all(feat == 0.0)

    def test_exact_on_bilinear_field_f32(self):
        # Random bilinear field; f32 storage bounds the error at ~1e-6 relative.
        rng = np.random.default_rng(1)
        a, b, c, d = rng.uniform(-1, 1, 4)
        h, w = 17, 23
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        level = FeatureLevel(data=(a + b * uu + c * vv + d * uu * vv)[None], stride=1)
        pos = rng.uniform((0, 0), (w - 1, h - 1), size=(500, 2))
        feats, inside = bilinear_sample_many(level, pos)
        assert inside.all()
        expected = a + b * pos[:, 0] + c * pos[:, 1] + d * pos[:, 0] * pos[:, 1]
        rel = np.abs(feats[:, 0] - expected) / np.maximum(1.0, np.abs(expected))
        assert rel.max() <= 1e-6

    def test_exact_on_dyadic_bilinear_field_f64_accumulation(self):
        # Dyadic coefficients are exactly representable in f32, so the only
        # error left is the 64-bit interpolation arithmetic.
        a, b, c, d = 0.5, 0.25, -0.125, 0.0625
        h, w = 9, 11
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        level = FeatureLevel(data=(a + b * uu + c * vv + d * uu * vv)[None], stride=1)
        rng = np.random.default_rng(2)
        pos = rng.uniform((0, 0), (w - 1, h - 1), size=(300, 2))
        feats, _ = bilinear_sample_many(level, pos)
        expected = a + b * pos[:, 0] + c * pos[:, 1] + d * pos[:, 0] * pos[:, 1]
        assert np.abs(feats[:, 0] - expected).max() <= 1e-12 * np.abs(expected).max()

    def test_sample_within_support_range(self):
        rng = np.random.default_rng(3)
        data = rng.uniform(-5, 5, size=(2, 6, 8))
        level = FeatureLevel(data=data, stride=1)
        for _ in range(100):
            pos = rng.uniform((0, 0), (7, 5))
            feat, _ = bilinear_sample(level, pos)
            x0, y0 = int(pos[0]), int(pos[1])
            x1, y1 = min(x0 + 1, 7), min(y0 + 1, 5)
            support = level.data[:, [y0, y0, y1, y1], [x0, x1, x0, x1]].astype(np.float64)
            assert np.all(feat >= support.min(axis=1) - 1e-12)
            assert np.all(feat <= support.max(axis=1) + 1e-12)


class TestBilinearGrad:
    def test_constant_zero_gradient(self):
        level = FeatureLevel(data=np.full((2, 4, 4), 3.0), stride=1)
        grad, at_kink = bilinear_grad(level, (1.5, 2.5))
        assert not at_kink
        assert np.all(grad == 0.0)

    def test_linear_ramp_slope(self):
        s = 0.75
        data = (s * np.arange(6, dtype=float))[None, None, :].repeat(5, axis=1)
        level = FeatureLevel(data=data, stride=1)
        grad, at_kink = bilinear_grad(level, (2.25, 3.5))
        assert not at_kink
        assert grad[0, 0] == pytest.approx(s, abs=1e-12)
        assert grad[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_2x2_gradient_matches_central_difference(self):
        # Oracle: central finite differences with h = 1e-5.
        level = level_2x2()
        h = 1e-5
        pos = np.array([0.5, 0.5])
        fd_u = (bilinear_sample(level, pos + [h, 0])[0] - bilinear_sample(level, pos - [h, 0])[0]) / (2 * h)
        fd_v = (bilinear_sample(level, pos + [0, h])[0] - bilinear_sample(level, pos - [0, h])[0]) / (2 * h)
        grad, at_kink = bilinear_grad(level, pos)
        assert not at_kink
        assert grad[0, 0] == pytest.approx(fd_u[0], abs=1e-9)
        assert grad[0, 1] == pytest.approx(fd_v[0], abs=1e-9)
        assert (grad[0, 0], grad[0, 1]) == (1.0, 2.0)

    def test_kink_flagged_on_integer_lines(self):
        level = FeatureLevel(data=np.arange(12, dtype=float).reshape(1, 3, 4), stride=1)
        assert bilinear_grad(level, (1.0, 0.5))[1]
        assert bilinear_grad(level, (0.5, 2.0))[1]
        assert bilinear_grad(level, (-0.5, 0.5))[1]
        assert not bilinear_grad(level, (0.5, 0.5))[1]

    def test_matches_fd_at_random_non_kink_points(self):
        rng = np.random.default_rng(4)
        data = rng.uniform(-2, 2, size=(3, 9, 9))
        level = FeatureLevel(data=data, stride=1)
        h = 1e-4
        checked = 0
        while checked < 200:
            pos = rng.uniform((0.05, 0.05), (7.95, 7.95))
            frac = np.abs(pos - np.round(pos))
            if frac.min() < 0.01:
                continue
            grad, at_kink = bilinear_grad(level, pos)
            assert not at_kink
            fd_u = (bilinear_sample(level, pos + [h, 0])[0] - bilinear_sample(level, pos - [h, 0])[0]) / (2 * h)
            fd_v = (bilinear_sample(level, pos + [0, h])[0] - bilinear_sample(level, pos - [0, h])[0]) / (2 * h)
            fd = np.stack([fd_u, fd_v], axis=-1)
            assert np.all(np.abs(grad - fd) <= 1e-6 + 1e-6 * np.abs(grad))
            checked += 1


class TestSampleMultiview:
    def test_one_camera_constant(self):
        cam = make_ident_cam()
        rig = CameraRig(cameras=(cam,))
        pyr = constant_pyramid(rig, [4.5], strides=(2, 4, 8))
        result = sample_multiview(pyr, rig, (0, 0, 10))
        assert result.valid
        assert result.visible_count == 3  # one camera, L=3 levels
        assert np.all(result.feature == 4.5)

    def test_two_camera_mean(self):
        # Two co-located cameras with constant maps a and b see everything twice.
        cams = (make_ident_cam("a"), make_ident_cam("b"))
        rig = CameraRig(cameras=cams)
        pyr = constant_pyramid(rig, [1.0, 5.0])
        result = sample_multiview(pyr, rig, (0, 0, 10))
        assert result.valid
        assert result.visible_count == 4
        assert np.all(result.feature == 3.0)  # (a + b) / 2

    def test_behind_everything_invalid(self):
        cam = make_ident_cam()
        rig = CameraRig(cameras=(cam,))
        pyr = constant_pyramid(rig, [7.0])
        result = sample_multiview(pyr, rig, (0, 0, -10))
        assert not result.valid
        assert result.visible_count == 0
        assert np.all(result.feature == 0.0)

    def test_visible_count_matches_exhaustive_mask(self):
        rig = gen_rig("nuscenes-like")
        field = AnalyticField.constant(np.ones(2))
        pyr = render_pyramid(field, rig, strides=(8, 16, 32))
        rng = np.random.default_rng(5)
        pts = rng.uniform((-30, -30, 0), (30, 30, 3), size=(200, 3))
        _, counts = sample_multiview_many(pyr, rig, pts)
        for i, p in enumerate(pts):
            expected = 0
            for ci, cam in enumerate(rig):
                pixel, depth = project_point(p, cam)
                if depth <= 0:
                    continue
                for level in pyr.levels(ci):
                    pos = pixel / level.stride
                    if 0 <= pos[0] <= level.width - 1 and 0 <= pos[1] <= level.height - 1:
                        expected += 1
            assert counts[i] == expected

    def test_output_in_componentwise_hull(self):
        rig = gen_rig("nuscenes-like")
        rng = np.random.default_rng(6)
        field = AnalyticField(
            a=rng.uniform(-1, 1, 3),
            b=rng.uniform(-1, 1, 3) * 1e-3,
            c=rng.uniform(-1, 1, 3) * 1e-3,
            d=rng.uniform(-1, 1, 3) * 1e-6,
        )
        pyr = render_pyramid(field, rig, strides=(8, 16))
        pts = rng.uniform((-30, -30, 0), (30, 30, 3), size=(100, 3))
        for p in pts:
            contributions = []
            for ci, cam in enumerate(rig):
                pixel, depth = project_point(p, cam)
                if depth <= 0:
                    continue
                for level in pyr.levels(ci):
                    feat, inside = bilinear_sample(level, pixel / level.stride)
                    if inside:
                        contributions.append(feat)
            result = sample_multiview(pyr, rig, p)
            if not contributions:
                assert not result.valid
                continue
            arr = np.array(contributions)
            assert np.all(result.feature >= arr.min(axis=0) - 1e-12)
            assert np.all(result.feature <= arr.max(axis=0) + 1e-12)

    def test_scalar_matches_batch_bitwise(self):
        rig = gen_rig("nuscenes-like")
        pyr = render_pyramid(AnalyticField.constant([1.0, 2.0]), rig, strides=(8,))
        rng = np.random.default_rng(7)
        pts = rng.uniform((-30, -30, 0), (30, 30, 3), size=(32, 3))
        feats, counts = sample_multiview_many(pyr, rig, pts)
        for i in range(len(pts)):
            single = sample_multiview(pyr, rig, pts[i])
            assert np.array_equal(single.feature, feats[i])
            assert single.visible_count == counts[i]

    def test_camera_count_mismatch_rejected(self):
        rig = gen_rig("nuscenes-like")
        cam = make_ident_cam()
        pyr = constant_pyramid(CameraRig(cameras=(cam,)), [1.0])
        with pytest.raises(FeatureError):
            sample_multiview(pyr, rig, (0, 0, 10))


class TestTensorFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        arr = rng.uniform(-3, 3, size=(4, 5, 6)).astype(np.float32)
        path = tmp_path / "t.gdt3"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.gdt3"
        write_tensor(path, np.zeros((2, 3), dtype=np.float32))
        blob = path.read_bytes()
        assert blob[:4] == b"GDT3"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:20], "little") == 2
        assert int.from_bytes(blob[20:28], "little") == 3
        assert len(blob) == 28 + 4 * 6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.gdt3"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(TensorFormatError):
            read_tensor(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "t.gdt3"
        write_tensor(path, np.zeros((4, 4), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(TensorFormatError):
            read_tensor(path)

    def test_pyramid_round_trip(self, tmp_path):
        rig = gen_rig("single")
        field = AnalyticField.constant([1.0, -2.0, 0.5])
        pyr = render_pyramid(field, rig, strides=(8, 16))
        manifest = save_pyramid(tmp_path / "pyr", pyr)
        loaded = load_pyramid(manifest)
        assert loaded.camera_count == pyr.camera_count
        assert loaded.strides == pyr.strides
        for ci in range(pyr.camera_count):
            for a, b in zip(pyr.levels(ci), loaded.levels(ci)):
                assert np.array_equal(a.data, b.data)
                assert a.stride == b.stride


class TestValidation:
    def test_bad_shape_rejected(self):
        with pytest.raises(FeatureError):
            FeatureLevel(data=np.zeros((4, 4)), stride=8)

    def test_bad_stride_rejected(self):
        with pytest.raises(FeatureError):
            FeatureLevel(data=np.zeros((1, 4, 4)), stride=0)

    def test_pyramid_shape_mismatch_rejected(self):
        a = [FeatureLevel(data=np.zeros((1, 4, 4)), stride=8)]
        b = [FeatureLevel(data=np.zeros((1, 4, 5)), stride=8)]
        with pytest.raises(FeatureError):
            FeaturePyramid([a, b])
