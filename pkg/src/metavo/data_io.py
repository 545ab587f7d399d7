"""Sequence containers and loaders for KITTI-style and TUM-style directories.

KITTI layout (also what :func:`export_kitti_layout` writes)::

    root/sequences/<id>/image_2/000000.png ...
    root/sequences/<id>/intrinsics.txt      fx fy cx cy at the stored image size
    root/sequences/<id>/times.txt           optional, one timestamp per frame
    root/poses/<id>.txt                     optional, 12 numbers per line

TUM layout::

    root/rgb.txt            timestamp filename
    root/intrinsics.txt     fx fy cx cy at the stored image size
    root/groundtruth.txt    optional, timestamp tx ty tz qx qy qz qw
"""
from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch
from PIL import Image

from .errors import DataError, DomainError
from .evaluation import TrajectoryEstimate, read_kitti_poses, read_tum_trajectory, write_kitti_poses
from .geometry import Intrinsics, PoseSE3, pose_compose, pose_inverse

log = logging.getLogger(__name__)

WORK_HEIGHT = 128
WORK_WIDTH = 416
TUM_TOLERANCE = 0.02


def load_image(path, size=None) -> np.ndarray:
    """RGB image as float64 ``(H, W, 3)`` in [0, 1]; bilinear plain rescale to ``size=(H, W)``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def _image_size(path):
    with Image.open(path) as im:
        return im.size[1], im.size[0]


@dataclass
class SequenceDataset:
    """An ordered image sequence with intrinsics at the working resolution.

    ``frames`` is either an array ``(N, H, W, 3)`` or a list of image paths
    that are read (and resized to ``K``'s size) on access. ``poses`` holds
    absolute world-from-camera poses; individual entries may be ``None`` when
    ground truth could not be associated with a frame.
    """

    frames: Union[np.ndarray, List[Path]]
    K: Intrinsics
    poses: Optional[List[Optional[PoseSE3]]] = None
    depths: Optional[np.ndarray] = None
    timestamps: Optional[np.ndarray] = None
    sequence_id: str = ""
    occluder_masks: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.frames)
        if n < 2:
            raise DomainError(f"a sequence needs at least 2 frames, got {n}")
        if isinstance(self.frames, np.ndarray):
            if self.frames.shape[1:] != (self.K.height, self.K.width, 3):
                raise DomainError(
                    f"frames {self.frames.shape[1:]} inconsistent with intrinsics {self.K.height}x{self.K.width}"
                )
        if self.poses is not None and len(self.poses) != n:
            raise DataError(f"{len(self.poses)} poses for {n} frames")
        if self.timestamps is None:
            self.timestamps = np.arange(n, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != n:
            raise DataError(f"{len(self.timestamps)} timestamps for {n} frames")
        if not isinstance(self.frames, np.ndarray):
            size = (self.K.height, self.K.width)
            self._read = lru_cache(maxsize=512)(lambda p: load_image(p, size))

    def __len__(self):
        return len(self.frames)

    def frame(self, i: int) -> np.ndarray:
        if isinstance(self.frames, np.ndarray):
            return self.frames[i]
        return self._read(self.frames[i])

    def tensor(self, start: int, stop: int, dtype=torch.float32) -> torch.Tensor:
        """Frames ``start..stop-1`` as a ``(n, 3, H, W)`` tensor."""
        arr = np.stack([self.frame(i) for i in range(start, stop)])
        return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)

    def relative_poses(self) -> List[PoseSE3]:
        """Ground-truth ``T^{t-1}_t`` for every consecutive pair."""
        if self.poses is None or any(p is None for p in self.poses):
            raise DataError(f"sequence {self.sequence_id!r} lacks complete ground truth")
        return [pose_compose(pose_inverse(a), b) for a, b in zip(self.poses[:-1], self.poses[1:])]

    def trajectory(self) -> TrajectoryEstimate:
        if self.poses is None or any(p is None for p in self.poses):
            raise DataError(f"sequence {self.sequence_id!r} lacks complete ground truth")
        return TrajectoryEstimate(list(self.poses), self.timestamps)


def _numbered_images(folder: Path) -> List[Path]:
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise DataError(f"no images in {folder}")
    nums = []
    for p in files:
        if not re.fullmatch(r"\d+", p.stem):
            raise DataError(f"image name {p.name!r} is not a frame number")
        nums.append(int(p.stem))
    missing = sorted(set(range(min(nums), max(nums) + 1)) - set(nums))
    if missing:
        raise DataError(f"gaps in frame numbering in {folder}: missing {missing}")
    return [p for _, p in sorted(zip(nums, files))]


def _read_intrinsics(path: Path, raw_size, size) -> Intrinsics:
    if not path.is_file():
        raise DomainError(f"missing intrinsics file {path}")
    K = Intrinsics.from_file(path, width=raw_size[1], height=raw_size[0])
    return K.scaled(size[1], size[0])


def load_kitti_layout(root, sequence_id: str, size=(WORK_HEIGHT, WORK_WIDTH)) -> SequenceDataset:
    root = Path(root)
    seq = root / "sequences" / sequence_id
    if not seq.is_dir():
        raise DataError(f"no sequence directory {seq}")
    paths = _numbered_images(seq / "image_2")
    K = _read_intrinsics(seq / "intrinsics.txt", _image_size(paths[0]), size)
    stamps = None
    tfile = seq / "times.txt"
    if tfile.is_file():
        stamps = np.loadtxt(tfile, dtype=np.float64, ndmin=1)
        if len(stamps) != len(paths):
            raise DataError(f"{tfile}: {len(stamps)} timestamps for {len(paths)} frames")
    poses = None
    pfile = root / "poses" / f"{sequence_id}.txt"
    if pfile.is_file():
        poses = read_kitti_poses(pfile).poses
        if len(poses) != len(paths):
            raise DataError(f"{pfile}: {len(poses)} poses for {len(paths)} frames")
    return SequenceDataset(paths, K, poses, timestamps=stamps, sequence_id=sequence_id)


def associate(frame_stamps, gt_stamps, tolerance: float = TUM_TOLERANCE) -> List[Optional[int]]:
    """Index of the nearest ground-truth stamp per frame, or None beyond ``tolerance``."""
    gt = np.asarray(gt_stamps, dtype=np.float64)
    order = np.argsort(gt)
    gs = gt[order]
    out = []
    for t in frame_stamps:
        j = int(np.searchsorted(gs, t))
        best = None
        for c in (j - 1, j):
            if 0 <= c < len(gs) and (best is None or abs(gs[c] - t) < abs(gs[best] - t)):
                best = c
        if best is not None and abs(gs[best] - t) <= tolerance + 1e-12:
            out.append(int(order[best]))
        else:
            out.append(None)
    return out


def load_tum_layout(root, size=(WORK_HEIGHT, WORK_WIDTH), tolerance: float = TUM_TOLERANCE) -> SequenceDataset:
    """RGB-only ingestion; depth images in the directory are ignored."""
    root = Path(root)
    index = root / "rgb.txt"
    if not index.is_file():
        raise DataError(f"missing {index}")
    stamps, paths = [], []
    for i, ln in enumerate(index.read_text().splitlines()):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != 2:
            raise DataError(f"{index}:{i + 1}: expected 'timestamp filename'")
        stamps.append(float(parts[0]))
        paths.append(root / parts[1])
    for p in paths:
        if not p.is_file():
            raise DataError(f"missing image {p}")
    if not paths:
        raise DataError(f"{index}: no frames")
    K = _read_intrinsics(root / "intrinsics.txt", _image_size(paths[0]), size)
    poses = None
    gfile = root / "groundtruth.txt"
    if gfile.is_file():
        gt = read_tum_trajectory(gfile)
        idx = associate(stamps, gt.timestamps, tolerance)
        poses = [None if j is None else gt.poses[j] for j in idx]
        unmatched = sum(j is None for j in idx)
        if unmatched:
            warnings.warn(f"{unmatched} of {len(idx)} frames have no ground truth within {tolerance} s", stacklevel=2)
    return SequenceDataset(paths, K, poses, timestamps=np.array(stamps), sequence_id=root.name)


def export_kitti_layout(ds: SequenceDataset, root, sequence_id: Optional[str] = None) -> Path:
    """Write ``ds`` as 8-bit PNGs plus intrinsics, timestamps and (if known) poses."""
    sid = sequence_id or ds.sequence_id or "00"
    root = Path(root)
    seq = root / "sequences" / sid
    (seq / "image_2").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        img = np.clip(np.rint(ds.frame(i) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(seq / "image_2" / f"{i:06d}.png")
    ds.K.to_file(seq / "intrinsics.txt")
    with open(seq / "times.txt", "w") as fh:
        for t in ds.timestamps:
            fh.write(f"{float(t)!r}\n")
    if ds.poses is not None and all(p is not None for p in ds.poses):
        (root / "poses").mkdir(exist_ok=True)
        write_kitti_poses(root / "poses" / f"{sid}.txt", TrajectoryEstimate(list(ds.poses)))
    return seq
