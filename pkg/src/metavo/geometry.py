"""Pinhole camera model, rigid-body pose algebra and differentiable view synthesis.

Image tensors are channel-first and batched, ``(B, C, H, W)``. Depth maps are
``(B, H, W)``. Rotations follow the intrinsic ``Rz @ Ry @ Rx`` Euler convention.

The warp maps every pixel ``p_t`` of the target frame into the source frame:

    p_src ~ K @ T @ (D(p_t) * K^-1 @ p_t)

where ``T`` takes points from the target camera frame into the source camera
frame (the relative pose ``T^{t-1}_t``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
import torch

from .errors import DomainError

Z_EPS = 1e-6
# depth = 1 / (DEPTH_A * sigmoid(x) + DEPTH_B) spans (0.1, 100) exactly
DEPTH_A = 9.99
DEPTH_B = 0.01

_ORTHO_TOL = 1e-6
# coordinates this close outside the image still count as inside (rounding)
BORDER_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Proportional rescale to a new image size (plain resize, no letterbox)."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    @classmethod
    def from_file(cls, path: Union[str, Path], width: int, height: int) -> "Intrinsics":
        """Read a one-line ``fx fy cx cy`` file valid for images of the given size."""
        text = Path(path).read_text().split()
        if len(text) != 4:
            raise DomainError(f"{path}: expected 'fx fy cx cy', got {len(text)} fields")
        fx, fy, cx, cy = (float(v) for v in text)
        return cls(fx, fy, cx, cy, width, height)

    def to_file(self, path: Union[str, Path]) -> None:
        Path(path).write_text(f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r}\n")


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_euler(cls, rx: float, ry: float, rz: float, translation=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(euler_to_rotation(rx, ry, rz), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return pose_compose(self, other)


class FlowField(NamedTuple):
    coords: torch.Tensor  # (B, H, W, 2) source-pixel (x, y)
    valid: torch.Tensor  # (B, H, W) bool


def _rot_x(a, mod):
    c, s = mod.cos(a), mod.sin(a)
    one, zero = mod.ones_like(a), mod.zeros_like(a)
    return [[one, zero, zero], [zero, c, -s], [zero, s, c]]


def _rot_y(a, mod):
    c, s = mod.cos(a), mod.sin(a)
    one, zero = mod.ones_like(a), mod.zeros_like(a)
    return [[c, zero, s], [zero, one, zero], [-s, zero, c]]


def _rot_z(a, mod):
    c, s = mod.cos(a), mod.sin(a)
    one, zero = mod.ones_like(a), mod.zeros_like(a)
    return [[c, -s, zero], [s, c, zero], [zero, zero, one]]


def _stack_matrix(rows, mod):
    if mod is torch:
        return torch.stack([torch.stack(r, dim=-1) for r in rows], dim=-2)
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def euler_to_rotation(rx, ry, rz):
    """Rotation matrix ``Rz(rz) @ Ry(ry) @ Rx(rx)``.

    Scalars (or numpy arrays) give a float64 numpy array; tensors of any
    broadcastable shape give a tensor of shape ``(..., 3, 3)`` that keeps the
    autograd graph.
    """
    if any(isinstance(a, torch.Tensor) for a in (rx, ry, rz)):
        ref = next(a for a in (rx, ry, rz) if isinstance(a, torch.Tensor))
        rx, ry, rz = torch.broadcast_tensors(*(torch.as_tensor(a, dtype=ref.dtype, device=ref.device) for a in (rx, ry, rz)))
        if not bool(torch.isfinite(torch.stack([rx, ry, rz])).all()):
            raise DomainError("Euler angles must be finite")
        mod = torch
    else:
        rx, ry, rz = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (rx, ry, rz)))
        if not np.all(np.isfinite([rx, ry, rz])):
            raise DomainError("Euler angles must be finite")
        mod = np
    Rx = _stack_matrix(_rot_x(rx, mod), mod)
    Ry = _stack_matrix(_rot_y(ry, mod), mod)
    Rz = _stack_matrix(_rot_z(rz, mod), mod)
    return Rz @ Ry @ Rx


def rotation_to_euler(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation` away from gimbal lock."""
    R = np.asarray(R, dtype=np.float64)
    ry = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    rx = math.atan2(R[2, 1], R[2, 2])
    rz = math.atan2(R[1, 0], R[0, 0])
    return np.array([rx, ry, rz])


def pose_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(p: PoseSE3) -> PoseSE3:
    Rt = p.rotation.T
    return PoseSE3(Rt, -Rt @ p.translation)


def pose_tensors(pose, batch: int, dtype=torch.float64, device=None):
    """Normalise a pose argument to ``(R (B,3,3), t (B,3))`` tensors."""
    if isinstance(pose, PoseSE3):
        R = torch.as_tensor(pose.rotation, dtype=dtype, device=device)
        t = torch.as_tensor(pose.translation, dtype=dtype, device=device)
    else:
        R, t = pose
    if R.dim() == 2:
        R = R.unsqueeze(0)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    return R.expand(batch, 3, 3), t.expand(batch, 3)


def pixel_grid(height: int, width: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """``(H, W, 2)`` grid of integer pixel coordinates ``(x, y)``."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def _inside(u, v, W, H):
    return (u >= -BORDER_TOL) & (u <= W - 1 + BORDER_TOL) & (v >= -BORDER_TOL) & (v <= H - 1 + BORDER_TOL)


def backproject_warp(depth: torch.Tensor, pose, K: Intrinsics, z_eps: float = Z_EPS) -> FlowField:
    """Source-frame pixel coordinates for every target pixel.

    ``depth`` is ``(B, H, W)`` (or ``(H, W)``) and annotates the target frame.
    ``pose`` is a :class:`PoseSE3` or a ``(R, t)`` tensor pair mapping target
    camera coordinates to source camera coordinates.
    """
    squeeze = depth.dim() == 2
    if squeeze:
        depth = depth.unsqueeze(0)
    B, H, W = depth.shape
    R, t = pose_tensors(pose, B, dtype=depth.dtype, device=depth.device)
    grid = pixel_grid(H, W, dtype=depth.dtype, device=depth.device)
    # K^-1 p for a pinhole camera without skew
    rays = torch.stack(
        [(grid[..., 0] - K.cx) / K.fx, (grid[..., 1] - K.cy) / K.fy, torch.ones_like(grid[..., 0])],
        dim=-1,
    )
    pts = depth.unsqueeze(-1) * rays  # (B, H, W, 3)
    pts = torch.einsum("bij,bhwj->bhwi", R, pts) + t[:, None, None, :]
    z = pts[..., 2]
    front = z > z_eps
    z_safe = torch.where(front, z, torch.ones_like(z))
    u = K.fx * pts[..., 0] / z_safe + K.cx
    v = K.fy * pts[..., 1] / z_safe + K.cy
    coords = torch.stack([u, v], dim=-1)
    valid = front & _inside(u, v, W, H)
    if squeeze:
        return FlowField(coords[0], valid[0])
    return FlowField(coords, valid)


def bilinear_sample(source: torch.Tensor, flow: FlowField):
    """Bilinearly sample ``source`` (B, C, H, W) at ``flow.coords``.

    Returns the sampled image and a float validity mask ``(B, H, W)``. Invalid
    pixels are zero in both. Gradients reach both the source values and the
    coordinates.
    """
    B, C, H, W = source.shape
    coords, valid = flow
    if coords.dim() == 3:
        coords, valid = coords.unsqueeze(0), valid.unsqueeze(0)
    if coords.shape[:3] != (B, H, W):
        raise DomainError(f"flow shape {tuple(coords.shape[:3])} does not match source {(B, H, W)}")
    x, y = coords[..., 0], coords[..., 1]
    valid = valid & _inside(x, y, W, H)
    x = torch.where(valid, x, torch.zeros_like(x)).clamp(0, W - 1)
    y = torch.where(valid, y, torch.zeros_like(y)).clamp(0, H - 1)
    x0 = torch.floor(x).detach().clamp(0, W - 1)
    y0 = torch.floor(y).detach().clamp(0, H - 1)
    wx = x - x0
    wy = y - y0
    x0i, y0i = x0.long(), y0.long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)

    flat = source.reshape(B, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(B, 1, H * W).expand(B, C, H * W)
        return flat.gather(2, idx).reshape(B, C, H, W)

    wx, wy = wx.unsqueeze(1), wy.unsqueeze(1)
    out = (
        gather(y0i, x0i) * (1 - wx) * (1 - wy)
        + gather(y0i, x1i) * wx * (1 - wy)
        + gather(y1i, x0i) * (1 - wx) * wy
        + gather(y1i, x1i) * wx * wy
    )
    mask = valid.to(source.dtype)
    return out * mask.unsqueeze(1), mask


def synthesize_view(source: torch.Tensor, depth_t: torch.Tensor, pose, K: Intrinsics):
    """Reconstruct the target frame from ``source`` through ``depth_t`` and ``pose``."""
    flow = backproject_warp(depth_t, pose, K)
    return bilinear_sample(source, flow)


def depth_from_logits(x: torch.Tensor) -> torch.Tensor:
    """Bounded positive depth in (0.1, 100) from an unconstrained network output."""
    return 1.0 / (DEPTH_A * torch.sigmoid(x) + DEPTH_B)
