import math

import numpy as np
import pytest

from mvdet.camgeo import RegionLabel, classify_regions, is_visible, visible_cameras, visible_counts
from mvdet.featcore import bilinear_sample, sample_multiview
from mvdet.metrics import evaluate, match_detections
from mvdet.synth import (
    AnalyticField,
    CameraSpec,
    ConfigError,
    NoiseSpec,
    adjacent_seam_azimuths,
    gen_objects,
    gen_rig,
    make_scene,
    perturb_predictions,
    render_pyramid,
)


class TestGenRig:
    def test_single(self):
        rig = gen_rig("single")
        assert len(rig) == 1

    def test_six_camera_layout(self):
        rig = gen_rig("nuscenes-like")
        assert len(rig) == 6
        assert [c.id for c in rig] == ["front", "front_left", "front_right", "back_left", "back_right", "back"]

    def test_adjacent_overlaps_nonempty(self):
        # Oracle: exhaustive projection of seam-direction rays.
        rig = gen_rig("nuscenes-like")
        for i, j, az in adjacent_seam_azimuths():
            rad = math.radians(az)
            p = np.array([30 * math.cos(rad), 30 * math.sin(rad), 1.5])
            seen = {k for k, cam in enumerate(rig) if is_visible(p, cam)}
            assert seen == {i, j}

    def test_exclusive_regions_nonempty(self):
        rig = gen_rig("nuscenes-like")
        assert visible_cameras(np.array([20.0, 0.0, 1.5]), rig) == {0}

    def test_duplicated_custom_cameras_double_count(self):
        specs = [
            CameraSpec(id="a", yaw_deg=0.0),
            CameraSpec(id="b", yaw_deg=0.0),
        ]
        rig = gen_rig("custom", specs=specs)
        rng = np.random.default_rng(0)
        pts = rng.uniform((5, -5, 0.5), (40, 5, 2.5), size=(100, 3))
        counts = visible_counts(pts, rig)
        assert np.all((counts == 0) | (counts == 2))
        assert np.any(counts == 2)

    def test_invalid_style_rejected(self):
        with pytest.raises(ConfigError):
            gen_rig("spherical")

    def test_custom_requires_specs(self):
        with pytest.raises(ConfigError):
            gen_rig("custom")


class TestRenderPyramid:
    def test_constant_everywhere(self):
        rig = gen_rig("single")
        pyr = render_pyramid(AnalyticField.constant([2.5, -1.0]), rig, strides=(8, 32))
        for level in pyr.levels(0):
            assert np.all(level.data[0] == 2.5)
            assert np.all(level.data[1] == -1.0)

    def test_linear_field_follows_stride(self):
        rig = gen_rig("single")
        a, b = 0.5, 0.125
        pyr = render_pyramid(AnalyticField.linear([a], [b], [0.0]), rig, strides=(8, 16))
        for level in pyr.levels(0):
            u = np.arange(level.width)
            expected = a + b * u * level.stride
            assert np.allclose(level.data[0, 0, :], expected, atol=1e-5)

    def test_bilinear_sampling_matches_closed_form(self):
        rig = gen_rig("single")
        rng = np.random.default_rng(1)
        field = AnalyticField(
            a=rng.uniform(-1, 1, 3),
            b=rng.uniform(-1, 1, 3) * 1e-3,
            c=rng.uniform(-1, 1, 3) * 1e-3,
            d=rng.uniform(-1, 1, 3) * 1e-6,
        )
        pyr = render_pyramid(field, rig, strides=(8, 16, 32, 64))
        for level in pyr.levels(0):
            pos = rng.uniform((0, 0), (level.width - 1, level.height - 1), size=(500, 2))
            for p in pos[:50]:
                feat, inside = bilinear_sample(level, p)
                assert inside
                expected = field.evaluate(p[0] * level.stride, p[1] * level.stride)
                assert np.all(np.abs(feat - expected) <= 1e-5 * np.maximum(1.0, np.abs(expected)))

    def test_per_camera_fields(self):
        rig = gen_rig("nuscenes-like")
        fields = [AnalyticField.constant([float(i)]) for i in range(len(rig))]
        pyr = render_pyramid(fields, rig, strides=(16,))
        for ci in range(len(rig)):
            assert np.all(pyr.levels(ci)[0].data == float(ci))

    def test_field_count_mismatch(self):
        rig = gen_rig("nuscenes-like")
        with pytest.raises(ConfigError):
            render_pyramid([AnalyticField.constant([1.0])] * 2, rig)


class TestGenObjects:
    def test_zero_count(self):
        assert gen_objects(1, 0) == []

    def test_determinism(self):
        a = gen_objects(7, 40)
        b = gen_objects(7, 40)
        for x, y in zip(a, b):
            assert np.array_equal(x.center, y.center)
            assert np.array_equal(x.size, y.size)
            assert x.yaw == y.yaw and x.class_id == y.class_id

    def test_ranges(self):
        boxes = gen_objects(3, 200)
        for b in boxes:
            assert np.all(b.size >= 0.5) and np.all(b.size <= 5.0)
            assert -math.pi < b.yaw <= math.pi
            assert np.all(b.center >= (-40, -40, -0.5)) and np.all(b.center <= (40, 40, 3))

    def test_region_fractions_match_exhaustive_classification(self):
        # Oracle: per-point visibility counting over centroid plus corners.
        rig = gen_rig("nuscenes-like")
        boxes = gen_objects(7, 100)
        labels = classify_regions(boxes, rig)
        from mvdet.camgeo import box_corners

        for box, label in zip(boxes, labels):
            probes = np.vstack([box.center[None], box_corners(box)])
            counts = [len(visible_cameras(p, rig)) for p in probes]
            if max(counts) >= 2:
                assert label is RegionLabel.OVERLAPPING
            elif max(counts) == 1:
                assert label is RegionLabel.NON_OVERLAPPING
            else:
                assert label is RegionLabel.INVISIBLE
        assert sum(1 for l in labels if l is RegionLabel.OVERLAPPING) > 0
        assert sum(1 for l in labels if l is RegionLabel.NON_OVERLAPPING) > 0


class TestPerturbPredictions:
    def test_zero_noise_perfect_metrics(self):
        gts = gen_objects(5, 150)
        preds = perturb_predictions(gts, NoiseSpec(), seed=2)
        report = evaluate(preds, gts)
        assert report.mean_ap == 1.0
        assert report.tp.as_tuple() == (0.0, 0.0, 0.0, 0.0, 0.0)
        assert report.nds == 1.0

    def test_center_noise_matches_rayleigh_mean(self):
        # Monte-Carlo oracle: E[|2D gaussian|] = sigma * sqrt(pi / 2).
        gts = gen_objects(6, 10_000)
        sigma = 0.1
        preds = perturb_predictions(gts, NoiseSpec(center_sigma=sigma), seed=3)
        pairs = match_detections(preds, gts, 2.0)
        assert len(pairs) == len(gts)
        dists = [np.linalg.norm(preds[pi].box.center[:2] - gts[gi].center[:2]) for pi, gi in pairs]
        expected = sigma * math.sqrt(math.pi / 2)
        assert abs(float(np.mean(dists)) - expected) < 0.05 * expected

    def test_drop_rate_recall_plateau(self):
        gts = gen_objects(8, 4000)
        preds = perturb_predictions(gts, NoiseSpec(drop_rate=0.5), seed=4)
        pairs = match_detections(preds, gts, 2.0)
        assert abs(len(pairs) / len(gts) - 0.5) < 0.03

    def test_false_positive_injection(self):
        gts = gen_objects(9, 200)
        preds = perturb_predictions(gts, NoiseSpec(false_positive_rate=0.25), seed=5)
        assert len(preds) == 250
        fp_scores = [p.score for p in preds[200:]]
        assert max(fp_scores) <= 0.5

    def test_determinism(self):
        gts = gen_objects(10, 50)
        spec = NoiseSpec(center_sigma=0.2, yaw_sigma=0.1, drop_rate=0.3)
        a = perturb_predictions(gts, spec, seed=6)
        b = perturb_predictions(gts, spec, seed=6)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert np.array_equal(x.box.center, y.box.center)
            assert x.score == y.score

    def test_invalid_noise_rejected(self):
        with pytest.raises(ConfigError):
            NoiseSpec(drop_rate=1.5)
        with pytest.raises(ConfigError):
            NoiseSpec(center_sigma=-0.1)


class TestSceneDeterminism:
    def test_scene_bit_identical(self):
        a = make_scene(13, object_count=20, channels=4, strides=(16, 32))
        b = make_scene(13, object_count=20, channels=4, strides=(16, 32))
        for ca, cb in zip(a.rig, b.rig):
            assert np.array_equal(ca.extrinsics.rotation, cb.extrinsics.rotation)
        for ci in range(a.pyramid.camera_count):
            for la, lb in zip(a.pyramid.levels(ci), b.pyramid.levels(ci)):
                assert np.array_equal(la.data, lb.data)
        for oa, ob in zip(a.objects, b.objects):
            assert np.array_equal(oa.center, ob.center)

    def test_sampling_oracle_through_scene(self):
        scene = make_scene(14, object_count=0, channels=4)
        p = np.array([18.0, 2.0, 1.5])
        result = sample_multiview(scene.pyramid, scene.rig, p)
        assert result.valid
        from mvdet.camgeo import project_point

        pixel, _ = project_point(p, scene.rig[0])
        expected = scene.field.evaluate(pixel[0], pixel[1])
        assert np.all(np.abs(result.feature - expected) <= 1e-5 * np.maximum(1.0, np.abs(expected)))
