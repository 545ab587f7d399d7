"""Procedural scenes with exact ground truth.

A camera moves in front of a textured surface ``Z = d + a * h(X, Y)`` (a
fronto-parallel plane when ``a = 0``). Frame 0 is ray cast against the surface.
In ``warp`` mode every later frame is the previous frame warped through the
ground-truth depth and relative pose, so view synthesis with the ground truth
reproduces it exactly wherever the warp is valid; pixels that see new content
are ray cast. ``raycast`` mode renders every frame directly, which avoids the
blur that repeated resampling accumulates over long sequences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from .data_io import SequenceDataset
from .errors import DomainError
from .geometry import Intrinsics, PoseSE3, bilinear_sample, backproject_warp, pose_compose, pose_inverse

TEXTURES = ("checker", "perlin", "image-patch")
DEPTH_MODELS = ("plane", "heightfield")
MIN_GRADIENT_ENERGY = 1e-3


@dataclass
class SyntheticSceneConfig:
    texture: str = "perlin"
    depth_model: str = "heightfield"
    motion: List[PoseSE3] = field(default_factory=list)
    height: int = 32
    width: int = 96
    seed: int = 0
    plane_distance: float = 4.0
    height_amplitude: float = 0.6
    height_scale: float = 1.5
    texture_scale: float = 0.6
    mean_color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    contrast: float = 0.35
    focal_ratio: float = 0.58
    render: str = "warp"
    occluder: bool = False
    occluder_size: Tuple[int, int] = (10, 16)
    occluder_velocity: Tuple[float, float] = (2.0, 0.5)
    image: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise DomainError(f"texture must be one of {TEXTURES}")
        if self.depth_model not in DEPTH_MODELS:
            raise DomainError(f"depth model must be one of {DEPTH_MODELS}")
        if self.render not in ("warp", "raycast"):
            raise DomainError("render must be 'warp' or 'raycast'")
        if self.plane_distance <= 0:
            raise DomainError("plane distance must be positive")
        if self.depth_model == "heightfield" and self.height_amplitude >= self.plane_distance:
            raise DomainError("height field would cross the camera plane")

    def intrinsics(self) -> Intrinsics:
        f = self.focal_ratio * self.width
        return Intrinsics(f, f, self.width / 2.0, self.height / 2.0, self.width, self.height)


class _GradientNoise:
    """2-D gradient (Perlin) noise with a seeded lattice."""

    def __init__(self, rng: np.random.Generator):
        self.perm = np.concatenate([rng.permutation(256)] * 2)
        ang = rng.uniform(0, 2 * np.pi, 256)
        self.grad = np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        xi, yi = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
        xf, yf = x - xi, y - yi
        xi, yi = xi & 255, yi & 255

        def dot(ix, iy, dx, dy):
            g = self.grad[self.perm[self.perm[ix] + iy]]
            return g[..., 0] * dx + g[..., 1] * dy

        fade = lambda t: t * t * t * (t * (t * 6 - 15) + 10)
        u, v = fade(xf), fade(yf)
        n00 = dot(xi, yi, xf, yf)
        n10 = dot((xi + 1) & 255, yi, xf - 1, yf)
        n01 = dot(xi, (yi + 1) & 255, xf, yf - 1)
        n11 = dot((xi + 1) & 255, (yi + 1) & 255, xf - 1, yf - 1)
        return (n00 * (1 - u) + n10 * u) * (1 - v) + (n01 * (1 - u) + n11 * u) * v


def _fbm(noise: _GradientNoise, x, y, octaves: int = 4) -> np.ndarray:
    out = np.zeros_like(x)
    amp, freq = 1.0, 1.0
    for _ in range(octaves):
        out += amp * noise(x * freq, y * freq)
        amp *= 0.5
        freq *= 2.0
    return out


class Scene:
    """Continuous surface and texture defined by a config; pure given the seed."""

    def __init__(self, cfg: SyntheticSceneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._height_noise = _GradientNoise(rng)
        self._tex_noise = [_GradientNoise(rng) for _ in range(3)]
        self._mix = rng.normal(size=(3, 3))
        self._mix /= np.linalg.norm(self._mix, axis=1, keepdims=True)
        self._checker_colors = rng.uniform(0.15, 0.85, size=(2, 3))
        self._offset = rng.uniform(0, 100, size=2)
        if cfg.texture == "image-patch":
            img = cfg.image
            if img is None:
                from skimage import data as skdata

                img = skdata.astronaut()
            img = np.asarray(img, dtype=np.float64)
            self._image = img / 255.0 if img.max() > 1.0 else img

    def surface_z(self, X, Y):
        c = self.cfg
        if c.depth_model == "plane":
            return np.full_like(X, c.plane_distance)
        h = _fbm(self._height_noise, X / c.height_scale + 31.7, Y / c.height_scale + 17.3, octaves=2)
        return c.plane_distance + c.height_amplitude * np.tanh(1.5 * h)

    def color(self, X, Y) -> np.ndarray:
        c = self.cfg
        u = X / c.texture_scale + self._offset[0]
        v = Y / c.texture_scale + self._offset[1]
        if c.texture == "checker":
            s = np.tanh(4.0 * np.sin(np.pi * u) * np.sin(np.pi * v))
            w = (0.5 + 0.5 * s)[..., None]
            rgb = (1 - w) * self._checker_colors[0] + w * self._checker_colors[1]
            rgb = np.asarray(c.mean_color) + (rgb - self._checker_colors.mean(0)) * (c.contrast / 0.35)
        elif c.texture == "perlin":
            n = np.stack([_fbm(g, u, v) for g in self._tex_noise], axis=-1)
            rgb = np.asarray(c.mean_color) + c.contrast * (n @ self._mix.T)
        else:
            img = self._image
            scale = img.shape[0] / 8.0
            rows = np.mod(v * scale, img.shape[0] - 1)
            cols = np.mod(u * scale, img.shape[1] - 1)
            rgb = np.stack(
                [ndimage.map_coordinates(img[..., k], [rows, cols], order=1, mode="wrap") for k in range(3)],
                axis=-1,
            )
            rgb = np.asarray(c.mean_color) + (rgb - 0.5) * (c.contrast / 0.35)
        return np.clip(rgb, 0.0, 1.0)

    def raycast(self, pose: PoseSE3, K: Intrinsics, iterations: int = 60):
        """Render ``(image (H,W,3), depth (H,W))`` for a world-from-camera pose."""
        H, W = K.height, K.width
        xs, ys = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
        rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=-1)
        d = rays @ pose.rotation.T
        o = pose.translation
        if np.any(d[..., 2] <= 1e-6):
            raise DomainError("camera looks away from the scene surface")
        s = (self.cfg.plane_distance - o[2]) / d[..., 2]
        for _ in range(iterations):
            X, Y = o[0] + s * d[..., 0], o[1] + s * d[..., 1]
            s_new = (self.surface_z(X, Y) - o[2]) / d[..., 2]
            if np.max(np.abs(s_new - s)) < 1e-12:
                s = s_new
                break
            s = s_new
        if np.any(s <= 1e-6):
            raise DomainError("motion moved the camera behind the scene surface")
        X, Y = o[0] + s * d[..., 0], o[1] + s * d[..., 1]
        # ray z component in the camera frame is 1, so s is the camera depth
        return self.color(X, Y), s


def _occluder_patch(rng, size):
    h, w = size
    colors = rng.uniform(0, 1, size=(2, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    w8 = ((yy // 3 + xx // 3) % 2)[..., None]
    return (1 - w8) * colors[0] + w8 * colors[1]


def generate_synthetic(cfg: SyntheticSceneConfig, sequence_id: str = "synthetic") -> SequenceDataset:
    """Render a sequence with ground-truth depth, absolute and relative poses."""
    K = cfg.intrinsics()
    scene = Scene(cfg)
    poses = [PoseSE3.identity()]
    for rel in cfg.motion:
        poses.append(pose_compose(poses[-1], rel))
    frames, depths = [], []
    img0, d0 = scene.raycast(poses[0], K)
    if np.mean(np.abs(np.diff(img0, axis=1))) < MIN_GRADIENT_ENERGY:
        raise DomainError("texture has too little gradient energy to be informative")
    frames.append(img0)
    depths.append(d0)
    for k in range(1, len(poses)):
        img_rc, d_k = scene.raycast(poses[k], K)
        rel = cfg.motion[k - 1]
        if cfg.render == "warp" and np.array_equal(rel.matrix(), np.eye(4)):
            img = frames[-1].copy()  # exact, the warp would add rounding noise
        elif cfg.render == "warp":
            src = torch.from_numpy(frames[-1]).permute(2, 0, 1)[None]
            flow = backproject_warp(torch.from_numpy(d_k)[None], rel, K)
            warped, valid = bilinear_sample(src, flow)
            warped = warped[0].permute(1, 2, 0).numpy()
            valid = valid[0].numpy().astype(bool)
            img = np.where(valid[..., None], warped, img_rc)
        else:
            img = img_rc
        frames.append(img)
        depths.append(d_k)

    frames = np.stack(frames)
    occ_masks = None
    if cfg.occluder:
        rng = np.random.default_rng(cfg.seed + 7919)
        patch = _occluder_patch(rng, cfg.occluder_size)
        oh, ow = cfg.occluder_size
        pos = np.array([rng.uniform(0, K.height - oh), rng.uniform(0, K.width - ow)])
        vel = np.array(cfg.occluder_velocity[::-1], dtype=np.float64)
        occ_masks = np.zeros(frames.shape[:3], dtype=bool)
        frames = frames.copy()
        for k in range(len(frames)):
            r, c = int(round(pos[0])), int(round(pos[1]))
            frames[k, r : r + oh, c : c + ow] = patch
            occ_masks[k, r : r + oh, c : c + ow] = True
            pos += vel
            for j, lim in enumerate((K.height - oh, K.width - ow)):
                if pos[j] < 0 or pos[j] > lim:
                    vel[j] = -vel[j]
                    pos[j] = np.clip(pos[j], 0, lim)

    return SequenceDataset(
        frames=frames,
        K=K,
        poses=poses,
        depths=np.stack(depths),
        timestamps=np.arange(len(frames), dtype=np.float64) / 10.0,
        sequence_id=sequence_id,
        occluder_masks=occ_masks,
    )


def motion_script(kind: str, steps: int, speed: float = 0.08, rotation: float = 0.05, seed: int = 0) -> List[PoseSE3]:
    """Relative-pose scripts derived from smooth, bounded absolute camera paths.

    ``static``   identity steps
    ``lateral``  drift along +x with small y/z oscillation, yaw and pitch
    ``forward``  motion along +z toward the surface (keep ``steps * speed`` short)
    ``wander``   smooth random heading in the x/y plane, rotation about every axis

    ``rotation`` is the amplitude in radians of the orientation oscillations.
    """
    if kind == "static":
        return [PoseSE3.identity() for _ in range(steps)]
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, size=8)
    k = np.arange(steps + 1, dtype=np.float64)
    if kind == "lateral":
        pos = np.stack([speed * k, 2 * speed * np.sin(0.05 * k + phase[0]), 3 * speed * np.sin(0.04 * k + phase[1])], -1)
        ang = np.stack([0.3 * rotation * np.sin(0.07 * k + phase[2]), rotation * np.sin(0.05 * k + phase[3]), 0 * k], -1)
    elif kind == "forward":
        pos = np.stack([0.5 * speed * np.sin(0.1 * k + phase[0]), 0 * k, speed * k], -1)
        ang = np.stack([0 * k, rotation * np.sin(0.08 * k + phase[1]), 0 * k], -1)
    elif kind == "wander":
        heading = phase[0] + np.cumsum(rng.normal(scale=0.08, size=steps + 1))
        heading = ndimage.gaussian_filter1d(heading, 5.0)
        step = speed * np.stack([np.cos(heading), np.sin(heading)], -1)
        xy = np.concatenate([[[0.0, 0.0]], np.cumsum(step[1:], axis=0)])
        pos = np.stack([xy[:, 0], xy[:, 1], 4 * speed * np.sin(0.06 * k + phase[1])], -1)
        ang = np.stack([rotation * np.sin(w * k + p) for w, p in zip((0.09, 0.07, 0.05), phase[2:5])], -1)
    else:
        raise DomainError(f"unknown motion kind {kind!r}")
    pos -= pos[0]
    ang -= ang[0]
    absolute = [PoseSE3.from_euler(*a, translation=p) for a, p in zip(ang, pos)]
    return [pose_compose(pose_inverse(a), b) for a, b in zip(absolute[:-1], absolute[1:])]
