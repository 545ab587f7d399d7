"""Trajectory reconstruction, monocular scale alignment and odometry metrics.

Relative poses ``T^{t-1}_t`` give the pose of camera ``t`` in the frame of
camera ``t-1``, so world-from-camera poses chain as ``P_t = P_{t-1} @ T^{t-1}_t``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataError, DomainError
from .geometry import PoseSE3, pose_compose, pose_inverse

log = logging.getLogger(__name__)

KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DESK_LENGTHS = (1, 2, 3, 4, 5, 6, 7, 8)


@dataclass
class TrajectoryEstimate:
    poses: List[PoseSE3]
    timestamps: Optional[np.ndarray] = None
    scale: float = 1.0

    def __post_init__(self):
        if self.timestamps is not None and len(self.timestamps) != len(self.poses):
            raise DomainError("timestamp count differs from pose count")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


@dataclass
class MetricReport:
    t_err: float
    r_err: float
    rpe_trans: float
    ate: float

    def as_dict(self):
        return {"t_err": self.t_err, "r_err": self.r_err, "rpe_trans": self.rpe_trans, "ate": self.ate}


def accumulate(relative: Sequence[PoseSE3], timestamps=None) -> TrajectoryEstimate:
    """Chain relative poses into world-from-camera poses; the first pose is identity."""
    if len(relative) == 0:
        raise DomainError("need at least one relative pose")
    poses = [PoseSE3.identity()]
    for rel in relative:
        if not isinstance(rel, PoseSE3):
            rel = PoseSE3(*rel)
        poses.append(pose_compose(poses[-1], rel))
    return TrajectoryEstimate(poses, None if timestamps is None else np.asarray(timestamps, dtype=np.float64))


def relatives(traj: TrajectoryEstimate) -> List[PoseSE3]:
    return [pose_compose(pose_inverse(a), b) for a, b in zip(traj.poses[:-1], traj.poses[1:])]


def optimal_scale(est: TrajectoryEstimate, gt: TrajectoryEstimate) -> float:
    """Least-squares scale ``s`` minimising ``sum |s t_est - t_gt|^2``."""
    if len(est) != len(gt):
        raise DomainError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    te, tg = est.positions(), gt.positions()
    den = float(np.sum(te * te))
    if den == 0.0:
        log.warning("estimated translations are all zero; using scale 1")
        return 1.0
    return float(np.sum(te * tg)) / den


def scale_align(est: TrajectoryEstimate, gt: TrajectoryEstimate) -> TrajectoryEstimate:
    """Apply the single global least-squares scale to every estimated translation."""
    s = optimal_scale(est, gt)
    poses = [PoseSE3(p.rotation, s * p.translation) for p in est.poses]
    return TrajectoryEstimate(poses, est.timestamps, scale=est.scale * s)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle of ``R`` in radians.

    Same value as ``arccos((trace R - 1) / 2)`` but via atan2 of the skew and
    trace parts, which stays exact at the identity and accurate near it.
    """
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.atan2(float(np.linalg.norm(skew)), float(np.trace(R) - 1.0))


def _path_distances(gt: TrajectoryEstimate) -> np.ndarray:
    pos = gt.positions()
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def kitti_drift(est: TrajectoryEstimate, gt: TrajectoryEstimate, lengths=KITTI_LENGTHS, step: int = 1) -> Tuple[float, float]:
    """KITTI drift ``(t_err %, r_err deg / 100 units)`` over fixed-length sub-segments.

    For every start index (every ``step``-th frame) and segment length, the
    segment ends at the first frame whose travelled ground-truth distance
    reaches the length. Returns ``(nan, nan)`` when no segment fits.
    """
    if len(est) != len(gt):
        raise DomainError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    dist = _path_distances(gt)
    t_errs, r_errs = [], []
    tol = 1e-9 * max(1.0, dist[-1])
    for first in range(0, len(gt), step):
        for length in lengths:
            target = dist[first] + length - tol
            last = int(np.searchsorted(dist, target, side="left"))
            if last >= len(gt):
                continue
            d_gt = pose_compose(pose_inverse(gt.poses[first]), gt.poses[last])
            d_est = pose_compose(pose_inverse(est.poses[first]), est.poses[last])
            err = pose_compose(pose_inverse(d_est), d_gt)
            t_errs.append(np.linalg.norm(err.translation) / length)
            r_errs.append(rotation_angle(err.rotation) / length)
    if not t_errs:
        log.warning("trajectory shorter than the smallest segment length %s", min(lengths))
        return float("nan"), float("nan")
    return 100.0 * float(np.mean(t_errs)), 100.0 * math.degrees(float(np.mean(r_errs)))


def rpe(est: TrajectoryEstimate, gt: TrajectoryEstimate, delta: int) -> float:
    """Translational relative pose error RMSE per second over ``delta``-frame spans."""
    if len(est) != len(gt):
        raise DomainError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if delta < 1 or len(gt) < delta + 1:
        raise DomainError(f"need at least {delta + 1} poses for a {delta}-frame span")
    errs, spans = [], []
    for k in range(len(gt) - delta):
        d_gt = pose_compose(pose_inverse(gt.poses[k]), gt.poses[k + delta])
        d_est = pose_compose(pose_inverse(est.poses[k]), est.poses[k + delta])
        e = pose_compose(pose_inverse(d_gt), d_est)
        errs.append(float(np.dot(e.translation, e.translation)))
        if gt.timestamps is not None:
            spans.append(gt.timestamps[k + delta] - gt.timestamps[k])
    span = float(np.mean(spans)) if spans else 1.0
    if span <= 0:
        raise DomainError("timestamps must increase")
    return math.sqrt(float(np.mean(errs))) / span


def ate(est: TrajectoryEstimate, gt: TrajectoryEstimate) -> float:
    """Root-mean-square position error (no rotation alignment; both start at the origin)."""
    d = est.positions() - gt.positions()
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def evaluate(est: TrajectoryEstimate, gt: TrajectoryEstimate, lengths=KITTI_LENGTHS, rpe_delta: int = 10,
             align: bool = True) -> MetricReport:
    """All metrics after single-scale alignment of ``est`` to ``gt``."""
    if align:
        est = scale_align(est, gt)
    t_err, r_err = kitti_drift(est, gt, lengths)
    delta = min(rpe_delta, len(gt) - 1)
    return MetricReport(t_err, r_err, rpe(est, gt, delta), ate(est, gt))


# ---------------------------------------------------------------- file formats


def _numeric_rows(path) -> List[List[str]]:
    rows = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if ln and not ln.startswith("#"):
            rows.append(ln.split())
    return rows


def read_kitti_poses(path) -> TrajectoryEstimate:
    """Absolute poses, one row-major 3x4 matrix (12 numbers) per line."""
    poses = []
    for i, row in enumerate(_numeric_rows(path)):
        if len(row) != 12:
            raise DataError(f"{path}:{i + 1}: expected 12 numbers, got {len(row)}")
        try:
            m = np.array([float(v) for v in row]).reshape(3, 4)
            poses.append(PoseSE3(m[:, :3], m[:, 3]))
        except (ValueError, DomainError) as e:
            raise DataError(f"{path}:{i + 1}: {e}") from e
    if not poses:
        raise DataError(f"{path}: no poses")
    return TrajectoryEstimate(poses)


def write_kitti_poses(path, traj: TrajectoryEstimate) -> None:
    with open(path, "w") as fh:
        for p in traj.poses:
            m = np.hstack([p.rotation, p.translation[:, None]]).reshape(-1)
            fh.write(" ".join(repr(float(v)) for v in m) + "\n")


def read_tum_trajectory(path) -> TrajectoryEstimate:
    """``timestamp tx ty tz qx qy qz qw`` lines."""
    stamps, poses = [], []
    for i, row in enumerate(_numeric_rows(path)):
        if len(row) != 8:
            raise DataError(f"{path}:{i + 1}: expected 8 numbers, got {len(row)}")
        try:
            v = [float(x) for x in row]
        except ValueError as e:
            raise DataError(f"{path}:{i + 1}: {e}") from e
        stamps.append(v[0])
        poses.append(PoseSE3(Rotation.from_quat(v[4:8]).as_matrix(), v[1:4]))
    if not poses:
        raise DataError(f"{path}: no poses")
    return TrajectoryEstimate(poses, np.array(stamps))


def write_tum_trajectory(path, traj: TrajectoryEstimate) -> None:
    stamps = traj.timestamps if traj.timestamps is not None else np.arange(len(traj), dtype=np.float64)
    with open(path, "w") as fh:
        for t, p in zip(stamps, traj.poses):
            q = Rotation.from_matrix(p.rotation).as_quat()
            fh.write(" ".join(repr(float(v)) for v in [t, *p.translation, *q]) + "\n")


def read_pose_stream(path) -> Tuple[np.ndarray, List[PoseSE3]]:
    """Relative-pose stream: ``timestamp r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz``."""
    stamps, rel = [], []
    for i, row in enumerate(_numeric_rows(path)):
        if len(row) != 13:
            raise DataError(f"{path}:{i + 1}: expected 13 numbers, got {len(row)}")
        try:
            v = [float(x) for x in row]
            m = np.array(v[1:]).reshape(3, 4)
            rel.append(PoseSE3(m[:, :3], m[:, 3]))
        except (ValueError, DomainError) as e:
            raise DataError(f"{path}:{i + 1}: {e}") from e
        stamps.append(v[0])
    return np.array(stamps), rel


def format_pose_row(timestamp: float, pose: PoseSE3) -> str:
    m = np.hstack([pose.rotation, pose.translation[:, None]]).reshape(-1)
    return " ".join(repr(float(v)) for v in [timestamp, *m])


def read_trajectory(path, fmt: str) -> TrajectoryEstimate:
    """Read an absolute trajectory or a relative stream, detected by column count.

    13 columns is a relative-pose stream and is accumulated; otherwise ``fmt``
    (``kitti`` or ``tum``) selects the absolute-pose parser.
    """
    rows = _numeric_rows(path)
    if rows and len(rows[0]) == 13:
        stamps, rel = read_pose_stream(path)
        traj = accumulate(rel)
        if len(stamps):
            dt = stamps[1] - stamps[0] if len(stamps) > 1 else 1.0
            traj.timestamps = np.concatenate([[stamps[0] - dt], stamps])
        return traj
    if fmt == "kitti":
        return read_kitti_poses(path)
    if fmt == "tum":
        return read_tum_trajectory(path)
    raise DomainError(f"unknown trajectory format {fmt!r}")


# ---------------------------------------------------------------- plotting


def plot_trajectory(trajectories, path, size=(6, 6), dpi=100) -> Path:
    """Top-down (x, z) plot of named trajectories, written to ``path``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    items = list(trajectories.items()) if isinstance(trajectories, dict) else list(trajectories)
    if not items:
        raise DomainError("nothing to plot")
    fig, ax = plt.subplots(figsize=size, dpi=dpi)
    for name, traj in items:
        pos = traj.positions()
        ax.plot(pos[:, 0], pos[:, 2], label=name, linewidth=1.5)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    path = Path(path)
    try:
        fig.savefig(path, metadata={"Software": None})
    finally:
        plt.close(fig)
    return path
