import math

import numpy as np
import pytest

from dragvid.attention import ShapeError
from dragvid.metrics import (
    DirectionCase,
    EmptyMaskError,
    IdentityMismatchError,
    TrajectorySet,
    direction_accuracy,
    direction_correct,
    estimate_part_masks,
    flow_error,
    mask_centroid,
    psnr,
    ssim,
)
from dragvid.toyworld import generate_scene
from dragvid.types import Drag, Resolution, Video


def rand_video(seed, shape=(3, 24, 24, 3)):
    rng = np.random.default_rng(seed)
    return Video(frames=rng.uniform(-1, 1, shape).astype(np.float32))


class TestPsnr:
    def test_identical_inputs_return_infinity(self):
        v = rand_video(0)
        assert psnr(v, v) == math.inf

    def test_constant_offset_closed_form(self):
        # 20 log10(1 / 0.5) = 6.0206 dB at peak range 1.
        a = np.zeros((2, 8, 8, 1), dtype=np.float32)
        b = np.full((2, 8, 8, 1), 0.5, dtype=np.float32)
        assert psnr(a, b, peak=1.0) == pytest.approx(6.0206, abs=1e-3)

    def test_symmetry(self):
        a, b = rand_video(1), rand_video(2)
        assert psnr(a, b) == pytest.approx(psnr(b, a), rel=1e-12)

    def test_default_peak_matches_pixel_range(self):
        a = np.full((1, 8, 8, 1), -1.0, dtype=np.float32)
        b = np.full((1, 8, 8, 1), 1.0, dtype=np.float32)
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-9)  # mse 4 = peak^2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((1, 8, 8, 3)), np.zeros((1, 8, 8, 1)))


class TestSsim:
    def test_identical_is_one(self):
        v = rand_video(3)
        assert ssim(v, v) == pytest.approx(1.0, abs=1e-9)

    def test_anticorrelated_is_negative(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(-1, 1, (2, 16, 16, 1)).astype(np.float32)
        a -= a.mean()
        assert ssim(a, -a) < 0

    def test_matches_reference_implementation(self):
        skimage_metrics = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = rng.uniform(-1, 1, (16, 16)).astype(np.float64)
            b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
            ours = ssim(a[None, :, :, None], b[None, :, :, None])
            theirs = skimage_metrics.structural_similarity(
                a,
                b,
                data_range=2.0,
                gaussian_weights=True,
                sigma=1.5,
                use_sample_covariance=False,
            )
            assert ours == pytest.approx(theirs, abs=1e-4)

    def test_window_must_fit(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((1, 8, 8, 1)), np.zeros((1, 8, 8, 1)))


def traj_set(points, roles=None, ids=None):
    pts = np.asarray(points, dtype=float)
    m = pts.shape[0]
    return TrajectorySet(
        ids=ids or [f"p{i}" for i in range(m)],
        roles=roles or ["foreground"] * m,
        points=pts,
    )


class TestFlowError:
    def test_identical_trajectories_zero(self):
        gt = traj_set(np.random.default_rng(6).uniform(0, 32, (4, 5, 2)))
        pred = traj_set(gt.points.copy())
        assert flow_error(pred, gt) == 0.0

    def test_uniform_offset_is_pythagorean(self):
        gt = traj_set(np.zeros((3, 4, 2)))
        pred = traj_set(np.zeros((3, 4, 2)) + np.array([3.0, 4.0]))
        assert flow_error(pred, gt) == pytest.approx(5.0)

    def test_hand_case(self):
        # 1 point, 2 frames, errors (1,0) and (0,2): sqrt((1+4)/2) = sqrt(2.5).
        gt = traj_set(np.zeros((1, 2, 2)))
        pred = traj_set(np.array([[[1.0, 0.0], [0.0, 2.0]]]))
        assert flow_error(pred, gt) == pytest.approx(math.sqrt(2.5), abs=1e-6)

    def test_origin_mode_subsets_foreground(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(0, 32, (4, 3, 2))
        roles = ["origin", "origin", "foreground", "foreground"]
        gt = traj_set(pts, roles=roles)
        pred = traj_set(pts + rng.normal(0, 1, pts.shape), roles=roles)
        fg = flow_error(pred, gt, mode="foreground")
        org = flow_error(pred, gt, mode="origin")
        all_origin_gt = traj_set(pts, roles=["origin"] * 4)
        all_origin_pred = traj_set(pred.points, roles=["origin"] * 4)
        assert flow_error(all_origin_pred, all_origin_gt, mode="origin") == pytest.approx(fg)
        assert org != fg

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(0, 10, (5, 3, 2))
        noise = rng.normal(0, 1, pts.shape)
        gt = traj_set(pts)
        pred = traj_set(pts + noise)
        perm = [3, 1, 4, 0, 2]
        gt_p = traj_set(pts[perm], ids=[f"p{i}" for i in perm])
        pred_p = traj_set(
            (pts + noise)[perm], ids=[f"p{i}" for i in perm]
        )
        assert flow_error(pred_p, gt_p) == pytest.approx(flow_error(pred, gt))

    def test_missing_id_raises(self):
        gt = traj_set(np.zeros((2, 3, 2)))
        pred = traj_set(np.zeros((1, 3, 2)), ids=["p0"])
        with pytest.raises(IdentityMismatchError):
            flow_error(pred, gt)

    def test_unknown_mode(self):
        gt = traj_set(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            flow_error(gt, gt, mode="background")

    def test_save_load_roundtrip(self, tmp_path):
        ts = traj_set(
            np.random.default_rng(9).uniform(0, 16, (3, 4, 2)),
            roles=["origin", "foreground", "foreground"],
        )
        ts.save(tmp_path / "traj.json")
        loaded = TrajectorySet.load(tmp_path / "traj.json")
        assert loaded.ids == ts.ids and loaded.roles == ts.roles
        np.testing.assert_allclose(loaded.points, ts.points)


def square_mask(h, w, size=3, shape=(16, 16)):
    m = np.zeros(shape, dtype=bool)
    m[h : h + size, w : w + size] = True
    return m


class TestDirection:
    def test_perfect_agreement_scores_one(self):
        drag = Drag.from_points([(4, 4), (4, 8), (4, 12)])
        cases = [DirectionCase(square_mask(3, 3), square_mask(3, 11), drag)]
        assert direction_accuracy(cases) == 1.0

    def test_time_reversed_scores_zero(self):
        drag = Drag.from_points([(4, 4), (4, 8), (4, 12)])
        cases = [DirectionCase(square_mask(3, 11), square_mask(3, 3), drag)]
        assert direction_accuracy(cases) == 0.0

    def test_dot_product_boundary(self):
        drag = Drag.from_points([(0, 0), (0, 10)])  # drag along +w
        angle89 = np.array([np.sin(np.deg2rad(89)), np.cos(np.deg2rad(89))])
        angle91 = np.array([np.sin(np.deg2rad(91)), np.cos(np.deg2rad(91))])
        assert direction_correct(angle89, drag) is True
        assert direction_correct(angle91, drag) is False

    def test_empty_mask_raises(self):
        drag = Drag.from_points([(0, 0), (1, 1)])
        cases = [DirectionCase(np.zeros((4, 4), bool), square_mask(0, 0, 2, (4, 4)), drag)]
        with pytest.raises(EmptyMaskError):
            direction_accuracy(cases)
        with pytest.raises(EmptyMaskError):
            mask_centroid(np.zeros((4, 4), bool))

    def test_mixed_cases_average(self):
        drag = Drag.from_points([(4, 4), (4, 12)])
        good = DirectionCase(square_mask(3, 3), square_mask(3, 11), drag)
        bad = DirectionCase(square_mask(3, 11), square_mask(3, 3), drag)
        assert direction_accuracy([good, bad]) == 0.5


class TestEstimatePartMasks:
    def test_recovers_ground_truth_on_clean_frames(self):
        data = generate_scene(4, Resolution(32, 32), 4)
        colors = {
            j: np.asarray(data.scene.parts[j].color) for j in range(len(data.scene.parts))
        }
        est = estimate_part_masks(data.video, colors, np.asarray(data.scene.background))
        assert (est == data.masks).mean() > 0.999

    def test_noisy_frames_still_close(self):
        data = generate_scene(4, Resolution(32, 32), 4)
        rng = np.random.default_rng(10)
        noisy = Video(
            frames=np.clip(
                data.video.frames + rng.normal(0, 0.1, data.video.frames.shape), -1, 1
            ).astype(np.float32)
        )
        colors = {
            j: np.asarray(data.scene.parts[j].color) for j in range(len(data.scene.parts))
        }
        est = estimate_part_masks(noisy, colors, np.asarray(data.scene.background))
        assert (est == data.masks).mean() > 0.95
