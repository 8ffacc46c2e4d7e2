import numpy as np
import pytest

from occsplat.body import JointTransforms
from occsplat.errors import InvalidState
from occsplat.rotations import axis_angle_to_matrix, matrix_to_quat, quat_multiply
from occsplat.splat import (
    Camera,
    GaussianSet,
    RasterSettings,
    inverse_sigmoid,
    pose_backward,
    pose_gaussians,
    project_gaussians,
    render,
    render_backward,
)

from conftest import random_gaussians
from oracles import naive_render


def single_gaussian(pos=(0.0, 0.0, 3.0), scale=0.2, opacity=0.7, color=(0.8, 0.3, 0.2)):
    return GaussianSet(
        positions=np.array([pos], dtype=np.float64),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.log(np.full((1, 3), scale)),
        opacity_logits=np.array([inverse_sigmoid(opacity)]),
        colors=np.array([[color]], dtype=np.float64),
    )


class TestProjection:
    def test_isotropic_on_axis_matches_monte_carlo(self, rng):
        s, z, f = 0.15, 4.0, 60.0
        cam = Camera(fx=f, fy=f, cx=16, cy=16, width=32, height=32)
        gs = single_gaussian(pos=(0, 0, z), scale=s)
        _, covs, _, _ = project_gaussians(gs, cam, RasterSettings(dilation=0.0))
        expected = (f * s / z) ** 2 * np.eye(2)
        # Monte Carlo: sample 3D points, push through the pinhole projection
        pts = np.array([0.0, 0.0, z]) + s * rng.standard_normal((100_000, 3))
        uv = np.stack([f * pts[:, 0] / pts[:, 2] + 16, f * pts[:, 1] / pts[:, 2] + 16], axis=1)
        emp = np.cov(uv.T)
        assert np.abs(covs[0] - expected).max() / expected[0, 0] < 0.02
        assert np.abs(emp - covs[0]).max() / expected[0, 0] < 0.05

    def test_behind_camera_is_culled(self):
        cam = Camera(fx=50, fy=50, cx=8, cy=8, width=16, height=16)
        gs = single_gaussian(pos=(0, 0, -1.0))
        _, _, _, in_front = project_gaussians(gs, cam)
        assert not in_front[0]

    def test_doubling_depth_halves_projected_std(self):
        cam = Camera(fx=60, fy=60, cx=16, cy=16, width=32, height=32)
        near = single_gaussian(pos=(0, 0, 2.0), scale=0.1)
        far = single_gaussian(pos=(0, 0, 4.0), scale=0.1)
        st = RasterSettings(dilation=0.0)
        _, c_near, _, _ = project_gaussians(near, cam, st)
        _, c_far, _, _ = project_gaussians(far, cam, st)
        ratio = np.sqrt(c_near[0, 0, 0] / c_far[0, 0, 0])
        assert abs(ratio - 2.0) < 0.02


class TestRenderForward:
    def test_empty_scene(self):
        cam = Camera(fx=50, fy=50, cx=8, cy=8, width=16, height=16)
        gs = GaussianSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                         np.zeros(0), np.zeros((0, 1, 3)))
        out = render(gs, cam, background=(0.1, 0.5, 0.9))
        assert np.allclose(out.rgb, [0.1, 0.5, 0.9])
        assert np.all(out.occupancy == 0)
        assert np.all(np.isinf(out.depth))

    def test_alpha_at_exact_pixel_center_equals_opacity(self):
        cam = Camera(fx=50, fy=50, cx=8, cy=8, width=16, height=16)
        o = 0.6180339887
        # place the mean exactly at the center of pixel (5, 9)
        x = (9 + 0.5 - cam.cx) * 2.0 / cam.fx
        y = (5 + 0.5 - cam.cy) * 2.0 / cam.fy
        gs = single_gaussian(pos=(x, y, 2.0), opacity=o)
        out = render(gs, cam)
        assert abs(out.occupancy[5, 9] - o) < 1e-12

    def test_matches_naive_oracle_on_8x8(self, rng):
        cam = Camera(fx=12.0, fy=12.0, cx=4.0, cy=4.0, width=8, height=8)
        gs = random_gaussians(rng, 3, center=(0, 0, 2.5), spread=0.4, scale_range=(0.1, 0.5))
        bg = (0.2, 0.1, 0.4)
        out = render(gs, cam, background=bg)
        rgb_ref, occ_ref, depth_ref = naive_render(gs, cam, bg)
        assert np.abs(out.rgb - rgb_ref).max() < 1e-5
        assert np.abs(out.occupancy - occ_ref).max() < 1e-5
        both = np.isfinite(out.depth) & np.isfinite(depth_ref)
        assert np.array_equal(np.isfinite(out.depth), np.isfinite(depth_ref))
        assert np.abs(out.depth[both] - depth_ref[both]).max() < 1e-9

    def test_zero_opacity_reproduces_background(self, rng, small_camera):
        gs = random_gaussians(rng, 10)
        gs.opacity_logits[:] = -200.0  # sigmoid underflows to exactly 0
        bg = (0.3, 0.6, 0.1)
        out = render(gs, small_camera, background=bg)
        assert np.array_equal(out.rgb, np.broadcast_to(bg, out.rgb.shape))
        assert np.all(out.occupancy == 0)

    def test_storage_order_invariance(self, rng, small_camera):
        gs = random_gaussians(rng, 12)
        out1 = render(gs, small_camera)
        perm = rng.permutation(12)
        out2 = render(gs.select(perm), small_camera)
        assert np.abs(out1.rgb - out2.rgb).max() < 1e-6
        assert np.abs(out1.occupancy - out2.occupancy).max() < 1e-6

    def test_occupancy_in_unit_interval_and_monotone_in_opacity(self, rng, small_camera):
        gs = random_gaussians(rng, 15)
        out = render(gs, small_camera)
        assert out.occupancy.min() >= 0 and out.occupancy.max() <= 1
        bumped = gs.copy()
        bumped.opacity_logits[3] += 1.0
        out2 = render(bumped, small_camera)
        assert np.all(out2.occupancy >= out.occupancy - 1e-12)

    def test_non_finite_parameter_names_index(self, rng, small_camera):
        gs = random_gaussians(rng, 4)
        gs.positions[2, 1] = np.nan
        with pytest.raises(InvalidState, match="gaussian 2"):
            render(gs, small_camera)


def fd_scalar(gs, camera, bg, field, index, h, loss):
    """Central finite difference of `loss(render(...))` wrt one raw scalar."""
    vals = []
    for sign in (+1, -1):
        g2 = gs.copy()
        getattr(g2, field)[index] += sign * h
        out = render(g2, camera, background=bg)
        vals.append(loss(out))
    return (vals[0] - vals[1]) / (2 * h)


class TestRenderBackward:
    def test_zero_upstream_gives_zero_grads(self, rng, small_camera):
        gs = random_gaussians(rng, 5)
        g = render_backward(gs, small_camera, np.zeros((32, 32, 3)), np.zeros((32, 32)))
        for arr in (g.positions, g.rotations, g.log_scales, g.opacity_logits, g.colors):
            assert np.all(arr == 0)

    def test_opacity_gradient_single_pixel(self):
        cam = Camera(fx=50, fy=50, cx=8, cy=8, width=16, height=16)
        gs = single_gaussian()
        grad_A = np.zeros((16, 16))
        grad_A[8, 8] = 1.0
        g = render_backward(gs, cam, np.zeros((16, 16, 3)), grad_A)
        fd = fd_scalar(gs, cam, (0, 0, 0), "opacity_logits", 0, 1e-4,
                       lambda out: out.occupancy[8, 8])
        assert abs(g.opacity_logits[0] - fd) < 1e-6 * max(1.0, abs(fd))

    @pytest.mark.parametrize("sh_degree", [0, 1])
    def test_finite_difference_sweep(self, rng, sh_degree):
        cam = Camera(fx=40, fy=40, cx=16, cy=16, width=32, height=32)
        gs = random_gaussians(rng, 20)
        if sh_degree == 1:
            colors = np.zeros((20, 4, 3))
            colors[:, 0] = rng.uniform(0.3, 0.7, (20, 3))
            colors[:, 1:] = rng.uniform(-0.05, 0.05, (20, 3, 3))
            gs = GaussianSet(gs.positions, gs.rotations, gs.log_scales,
                             gs.opacity_logits, colors)
        bg = (0.15, 0.25, 0.35)

        w_rgb = rng.standard_normal((32, 32, 3))
        w_occ = rng.standard_normal((32, 32))

        def loss(out):
            return float(np.sum(out.rgb * w_rgb) + np.sum(out.occupancy * w_occ))

        g = render_backward(gs, cam, w_rgb, w_occ, background=bg)
        analytic = {
            "positions": g.positions, "rotations": g.rotations,
            "log_scales": g.log_scales, "opacity_logits": g.opacity_logits,
            "colors": g.colors,
        }
        n_params = {f: getattr(gs, f).size for f in analytic}
        total, ok = 0, 0
        for _ in range(200):
            field = rng.choice(list(analytic))
            flat = rng.integers(n_params[field])
            index = np.unravel_index(flat, getattr(gs, field).shape)
            a = analytic[field][index]
            fd = fd_scalar(gs, cam, bg, field, index, 1e-4, loss)
            if abs(a) < 1e-8 and abs(fd) < 1e-8:
                continue
            total += 1
            rel = abs(a - fd) / max(abs(a), abs(fd))
            ok += rel < 1e-3
        assert total > 50
        assert ok / total >= 0.95, f"{ok}/{total} gradient samples within tolerance"

    def test_shape_mismatch_rejected(self, rng, small_camera):
        gs = random_gaussians(rng, 3)
        with pytest.raises(Exception):
            render_backward(gs, small_camera, np.zeros((8, 8, 3)), np.zeros((8, 8)))


class TestPoseGaussians:
    def test_identity_transforms_bitwise(self, rng):
        gs = random_gaussians(rng, 6)
        w = np.zeros((6, 3))
        w[:, 0] = 0.5
        w[:, 1] = 0.5
        gs.skin_weights = w
        posed = pose_gaussians(gs, JointTransforms.identity(3))
        assert np.array_equal(posed.positions, gs.positions)
        q = posed.rotations * np.sign(posed.rotations[:, :1]) if False else posed.rotations
        assert np.allclose(np.abs(np.sum(q * gs.rotations, axis=1)),
                           np.linalg.norm(q, axis=1) * np.linalg.norm(gs.rotations, axis=1),
                           atol=1e-12)
        assert np.array_equal(posed.log_scales, gs.log_scales)

    def test_global_translation_shifts_centers(self, rng):
        gs = random_gaussians(rng, 5)
        gs.skin_weights = np.ones((5, 1))
        t = np.array([0.4, -0.1, 2.0])
        tf = JointTransforms(np.eye(3)[None], t[None])
        posed = pose_gaussians(gs, tf)
        assert np.allclose(posed.positions, gs.positions + t, atol=1e-12)
        assert np.allclose(posed.rotations, gs.rotations, atol=1e-12)
        assert np.array_equal(posed.log_scales, gs.log_scales)

    def test_single_joint_rotation_matches_rigid_oracle(self, rng):
        gs = random_gaussians(rng, 4)
        gs.rotations /= np.linalg.norm(gs.rotations, axis=1, keepdims=True)
        gs.skin_weights = np.ones((4, 1))
        R = axis_angle_to_matrix(np.array([0.0, 0.0, np.pi / 2]))
        t = np.array([0.1, 0.2, 0.3])
        posed = pose_gaussians(gs, JointTransforms(R[None], t[None]))
        expect_pos = gs.positions @ R.T + t
        q_R = matrix_to_quat(R)
        expect_q = quat_multiply(np.broadcast_to(q_R, (4, 4)), gs.rotations)
        assert np.abs(posed.positions - expect_pos).max() < 1e-6
        dots = np.abs(np.sum(posed.rotations * expect_q, axis=1))
        assert np.abs(dots - 1.0).max() < 1e-6

    def test_missing_weights_rejected(self, rng):
        gs = random_gaussians(rng, 2)
        with pytest.raises(InvalidState):
            pose_gaussians(gs, JointTransforms.identity(2))

    def test_pose_backward_chains_gradients(self, rng, small_camera):
        from occsplat.body import skinning_transforms, Pose
        from occsplat.body import default_skeleton

        skel = default_skeleton(5)
        pose = Pose(rng.uniform(-0.5, 0.5, (5, 3)))
        tf = skinning_transforms(skel, pose)
        gs = random_gaussians(rng, 8, center=(0, 1.0, 3.0))
        w = rng.uniform(0, 1, (8, 5))
        w /= w.sum(axis=1, keepdims=True)
        gs.skin_weights = w

        w_rgb = rng.standard_normal((32, 32, 3))
        w_occ = rng.standard_normal((32, 32))

        def loss_of(canonical):
            posed = pose_gaussians(canonical, tf)
            out = render(posed, small_camera)
            return float(np.sum(out.rgb * w_rgb) + np.sum(out.occupancy * w_occ))

        posed, ctx = pose_gaussians(gs, tf, return_context=True)
        g_posed = render_backward(posed, small_camera, w_rgb, w_occ)
        g = pose_backward(ctx, g_posed)

        checked = 0
        for _ in range(40):
            field = rng.choice(["positions", "rotations"])
            idx = np.unravel_index(rng.integers(getattr(gs, field).size), getattr(gs, field).shape)
            h = 1e-4
            g2 = gs.copy()
            getattr(g2, field)[idx] += h
            g3 = gs.copy()
            getattr(g3, field)[idx] -= h
            fd = (loss_of(g2) - loss_of(g3)) / (2 * h)
            a = getattr(g, field)[idx]
            if abs(a) < 1e-8 and abs(fd) < 1e-8:
                continue
            checked += 1
            assert abs(a - fd) / max(abs(a), abs(fd)) < 2e-3
        assert checked > 10
