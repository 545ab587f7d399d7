import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from metavo.errors import DomainError
from metavo.geometry import (
    FlowField, Intrinsics, PoseSE3, backproject_warp, bilinear_sample, depth_from_logits, euler_to_rotation,
    pixel_grid, pose_compose, pose_inverse, rotation_to_euler, synthesize_view,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def rand_pose(rng, rot=0.3, trans=1.0):
    return PoseSE3.from_euler(*rng.uniform(-rot, rot, 3), translation=rng.uniform(-trans, trans, 3))


class TestEuler:
    def test_zero_is_identity(self):
        np.testing.assert_array_equal(euler_to_rotation(0, 0, 0), np.eye(3))

    def test_yaw_quarter_turn_maps_x_to_y(self):
        R = euler_to_rotation(0, 0, math.pi / 2)
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-9)

    def test_matches_product_of_axis_matrices(self):
        rx, ry, rz = 0.1, 0.2, 0.3
        c, s = math.cos, math.sin
        Rx = np.array([[1, 0, 0], [0, c(rx), -s(rx)], [0, s(rx), c(rx)]])
        Ry = np.array([[c(ry), 0, s(ry)], [0, 1, 0], [-s(ry), 0, c(ry)]])
        Rz = np.array([[c(rz), -s(rz), 0], [s(rz), c(rz), 0], [0, 0, 1]])
        R = euler_to_rotation(rx, ry, rz)
        np.testing.assert_allclose(R, Rz @ Ry @ Rx, atol=1e-12)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)

    def test_tensor_path_batched_and_differentiable(self):
        e = torch.tensor([[0.1, 0.2, 0.3], [-0.2, 0.0, 0.5]], dtype=torch.float64, requires_grad=True)
        R = euler_to_rotation(e[:, 0], e[:, 1], e[:, 2])
        assert R.shape == (2, 3, 3)
        np.testing.assert_allclose(R[0].detach().numpy(), euler_to_rotation(0.1, 0.2, 0.3), atol=1e-12)
        R.sum().backward()
        assert e.grad is not None

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(DomainError):
            euler_to_rotation(bad, 0, 0)
        with pytest.raises(DomainError):
            euler_to_rotation(torch.tensor([bad]), torch.zeros(1), torch.zeros(1))

    @given(angles, st.floats(-1.5, 1.5), angles)
    def test_orthonormal_and_invertible(self, rx, ry, rz):
        R = euler_to_rotation(rx, ry, rz)
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(R) - 1) < 1e-9
        np.testing.assert_allclose(euler_to_rotation(*rotation_to_euler(R)), R, atol=1e-9)


class TestPoseAlgebra:
    def test_identity_left_unit(self):
        P = PoseSE3.from_euler(0.1, -0.2, 0.3, [1, 2, 3])
        Q = pose_compose(PoseSE3.identity(), P)
        np.testing.assert_array_equal(Q.rotation, P.rotation)
        np.testing.assert_array_equal(Q.translation, P.translation)

    def test_translations_add(self):
        a = PoseSE3(np.eye(3), [1, 0, 0])
        b = PoseSE3(np.eye(3), [0, 2, 0])
        np.testing.assert_array_equal(pose_compose(a, b).translation, [1, 2, 0])

    def test_compose_applies_b_first(self):
        a = PoseSE3.from_euler(0, 0, math.pi / 2)
        b = PoseSE3(np.eye(3), [1, 0, 0])
        p = np.array([0.0, 0.0, 0.0])
        # b moves the point to (1,0,0), a then rotates it to (0,1,0)
        out = pose_compose(a, b).matrix() @ np.append(p, 1)
        np.testing.assert_allclose(out[:3], [0, 1, 0], atol=1e-12)

    def test_inverse_cases(self):
        I = pose_inverse(PoseSE3.identity())
        np.testing.assert_array_equal(I.matrix(), np.eye(4))
        t = pose_inverse(PoseSE3(np.eye(3), [1, -2, 3]))
        np.testing.assert_array_equal(t.translation, [-1, 2, -3])

    def test_invalid_rotation_rejected(self):
        with pytest.raises(DomainError):
            PoseSE3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(DomainError):
            PoseSE3(np.eye(3) * 1.01, np.zeros(3))
        with pytest.raises(DomainError):
            PoseSE3(np.eye(3), [0, np.nan, 0])

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_group_laws(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rand_pose(rng) for _ in range(3))
        left = pose_compose(pose_compose(a, b), c).matrix()
        right = pose_compose(a, pose_compose(b, c)).matrix()
        np.testing.assert_allclose(left, right, atol=1e-9)
        for P in (pose_compose(a, pose_inverse(a)), pose_compose(pose_inverse(a), a)):
            np.testing.assert_allclose(P.matrix(), np.eye(4), atol=1e-9)
        np.testing.assert_allclose(pose_inverse(pose_inverse(a)).matrix(), a.matrix(), atol=1e-9)
        np.testing.assert_allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


class TestIntrinsics:
    def test_invariants(self):
        with pytest.raises(DomainError):
            Intrinsics(0, 1, 1, 1, 4, 4)
        with pytest.raises(DomainError):
            Intrinsics(1, 1, 4, 1, 4, 4)

    def test_proportional_rescale(self):
        K = Intrinsics(718.856, 718.856, 607.1928, 185.2157, 1241, 376).scaled(416, 128)
        assert K.fx == pytest.approx(718.856 * 416 / 1241)
        assert K.fx == pytest.approx(240.98, abs=0.01)
        assert K.fy == pytest.approx(718.856 * 128 / 376)

    def test_file_round_trip(self, tmp_path):
        K = Intrinsics(240.5, 241.25, 207.5, 63.5, 416, 128)
        K.to_file(tmp_path / "k.txt")
        assert Intrinsics.from_file(tmp_path / "k.txt", 416, 128) == K


K16 = Intrinsics(20.0, 20.0, 15.5, 7.5, 32, 16)


class TestWarp:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_identity_pose_returns_grid(self, seed):
        g = torch.Generator().manual_seed(seed)
        depth = torch.rand(2, 16, 32, dtype=torch.float64, generator=g) * 50 + 0.1
        flow = backproject_warp(depth, PoseSE3.identity(), K16)
        assert float((flow.coords - pixel_grid(16, 32)).abs().max()) < 1e-9
        assert bool(flow.valid.all())

    def test_x_translation_disparity(self):
        K = Intrinsics(100.0, 100.0, 15.5, 7.5, 32, 16)
        depth = torch.full((16, 32), 10.0, dtype=torch.float64)
        flow = backproject_warp(depth, PoseSE3(np.eye(3), [1.0, 0, 0]), K)
        shift = flow.coords[..., 0] - pixel_grid(16, 32)[..., 0]
        torch.testing.assert_close(shift, torch.full_like(shift, 10.0), rtol=0, atol=1e-12)
        # oracle per pixel: u' = u + fx * tx / d
        assert not bool(flow.valid[:, -10:].any())
        assert bool(flow.valid[:, :22].all())

    def test_z_translation_fixes_principal_point(self):
        K = Intrinsics(30.0, 30.0, 16.0, 8.0, 33, 17)
        depth = torch.full((17, 33), 5.0, dtype=torch.float64)
        flow = backproject_warp(depth, PoseSE3(np.eye(3), [0, 0, 0.7]), K)
        torch.testing.assert_close(flow.coords[8, 16], torch.tensor([16.0, 8.0], dtype=torch.float64))

    def test_behind_camera_is_invalid(self):
        depth = torch.full((16, 32), 1.0, dtype=torch.float64)
        flow = backproject_warp(depth, PoseSE3(np.eye(3), [0, 0, -1.0]), K16)
        assert not bool(flow.valid.any())
        assert bool(torch.isfinite(flow.coords).all())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_validity_soundness(self, seed):
        rng = np.random.default_rng(seed)
        depth = torch.from_numpy(rng.uniform(0.5, 5, (16, 32)))
        flow = backproject_warp(depth, rand_pose(rng, 0.5, 2.0), K16)
        u, v = flow.coords[..., 0][flow.valid], flow.coords[..., 1][flow.valid]
        assert bool(((u >= 0) & (u <= 31) & (v >= 0) & (v <= 15)).all())


class TestBilinear:
    def test_identity_flow_exact(self):
        src = torch.rand(2, 3, 16, 32, dtype=torch.float64)
        coords = pixel_grid(16, 32).expand(2, 16, 32, 2)
        out, mask = bilinear_sample(src, FlowField(coords, torch.ones(2, 16, 32, dtype=torch.bool)))
        assert torch.equal(out, src)
        assert bool((mask == 1).all())

    def test_ramp_shift_by_one(self):
        W = 32
        ramp = (torch.arange(W, dtype=torch.float64) / W).expand(1, 1, 16, W).clone()
        coords = pixel_grid(16, W).clone()
        coords[..., 0] += 1
        valid = torch.ones(16, W, dtype=torch.bool)
        out, mask = bilinear_sample(ramp, FlowField(coords, valid))
        x = torch.arange(W, dtype=torch.float64)
        expect = ((x + 1) / W).expand(16, W)
        m = mask[0].bool()
        assert not bool(m[:, -1].any())
        torch.testing.assert_close(out[0, 0][m], expect[m], rtol=0, atol=1e-15)
        assert bool((out[0, 0][~m] == 0).all())

    def test_midpoint(self):
        src = torch.tensor([[[[0.0, 1.0]]]], dtype=torch.float64)
        coords = torch.tensor([[[[0.5, 0.0], [0.0, 0.0]]]], dtype=torch.float64)
        out, _ = bilinear_sample(src, FlowField(coords, torch.ones(1, 1, 2, dtype=torch.bool)))
        assert out[0, 0, 0, 0].item() == 0.5

    def test_matches_grid_sample_oracle(self):
        g = torch.Generator().manual_seed(3)
        src = torch.rand(2, 3, 16, 32, dtype=torch.float64, generator=g)
        coords = pixel_grid(16, 32) + (torch.rand(2, 16, 32, 2, dtype=torch.float64, generator=g) - 0.5) * 6
        valid = (coords[..., 0] >= 0) & (coords[..., 0] <= 31) & (coords[..., 1] >= 0) & (coords[..., 1] <= 15)
        out, mask = bilinear_sample(src, FlowField(coords, torch.ones_like(valid)))
        norm = torch.stack([coords[..., 0] / 31 * 2 - 1, coords[..., 1] / 15 * 2 - 1], dim=-1)
        ref = F.grid_sample(src, norm, mode="bilinear", align_corners=True)
        assert torch.equal(mask.bool(), valid)
        torch.testing.assert_close(out * valid[:, None], ref * valid[:, None], rtol=0, atol=1e-12)

    def test_gradients_reach_source_and_coords(self):
        src = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        coords = (pixel_grid(8, 8) + 0.3).clamp(max=7)[None].requires_grad_(True)
        out, _ = bilinear_sample(src, FlowField(coords, torch.ones(1, 8, 8, dtype=torch.bool)))
        out.sum().backward()
        assert src.grad.abs().sum() > 0 and coords.grad.abs().sum() > 0

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            bilinear_sample(torch.zeros(1, 3, 8, 8), FlowField(torch.zeros(1, 4, 4, 2), torch.ones(1, 4, 4, dtype=torch.bool)))


class TestSynthesize:
    def test_identity_pose_returns_source(self):
        src = torch.rand(1, 3, 16, 32, dtype=torch.float64)
        out, valid = synthesize_view(src, torch.ones(1, 16, 32, dtype=torch.float64) * 3, PoseSE3.identity(), K16)
        assert bool(valid.all())
        torch.testing.assert_close(out, src, rtol=0, atol=1e-12)

    def test_perturbed_depth_increases_error(self):
        from metavo.synthetic import SyntheticSceneConfig, generate_synthetic

        tx = PoseSE3(np.eye(3), [0.15, 0, 0])
        ds = generate_synthetic(SyntheticSceneConfig(texture="perlin", depth_model="plane", motion=[tx], seed=4))
        src = torch.from_numpy(ds.frame(0)).permute(2, 0, 1)[None]
        tgt = torch.from_numpy(ds.frame(1)).permute(2, 0, 1)[None]
        d = torch.from_numpy(ds.depths[1])[None]

        def err(depth):
            out, valid = synthesize_view(src, depth, tx, ds.K)
            return float(((out - tgt).abs().mean(1) * valid).sum() / valid.sum())

        assert err(d) < 1e-12
        assert err(d * 1.1) > err(d) + 1e-3

    def test_depth_parameterisation_range(self):
        x = torch.linspace(-50, 50, 1001, dtype=torch.float64)
        d = depth_from_logits(x)
        assert float(d.min()) >= 0.1 - 1e-12 and float(d.max()) <= 100 + 1e-9
        assert bool((d[1:] <= d[:-1]).all())
    assert depth_from_logits(torch.tensor(0.0)).item() == pytest.approx(1 / (9.99 * 0.5 + 0.01))
