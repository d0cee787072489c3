"""
Trajectory files and trajectory error metrics.

Trajectories hold camera-to-world poses, as in the TUM RGB-D benchmark:
one line per pose, ``timestamp tx ty tz qx qy qz qw``.
"""

import math
import os
from dataclasses import dataclass
from typing import Iterable, List, Literal, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.integrate import trapezoid
from scipy.spatial.distance import pdist

from dense_ba.config.logger import logger
from dense_ba.exceptions import (
    AssociationError,
    DegenerateInputError,
    TimestampOrderError,
    TrajectoryFormatError,
)
from dense_ba.geometry.se3_lie import PoseSE3, compose, inverse, log
from dense_ba.utils.file_utils import read_file, save_file

# Nearest-neighbour timestamp association window, seconds.
MAX_TIME_DIFF: float = 0.02
MIN_ASSOCIATIONS: int = 3


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: NDArray[np.float64]
    poses: Tuple[PoseSE3, ...]

    def __post_init__(self) -> None:
        stamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if len(stamps) != len(poses):
            raise DegenerateInputError(
                f"{len(stamps)} timestamps but {len(poses)} poses"
            )
        if np.any(np.diff(stamps) <= 0):
            raise TimestampOrderError("trajectory timestamps must be strictly increasing")
        stamps.setflags(write=False)
        object.__setattr__(self, "timestamps", stamps)
        object.__setattr__(self, "poses", poses)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, PoseSE3]]) -> "Trajectory":
        pairs = list(pairs)
        return cls(np.array([t for t, _ in pairs], dtype=np.float64), tuple(p for _, p in pairs))

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> NDArray[np.float64]:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.trans for p in self.poses])


@dataclass(frozen=True)
class AlignmentResult:
    """
    Similarity relating the two trajectories: est ≈ scale * R @ gt + t.

    ``scale`` is exactly 1 for rigid alignment.
    """

    scale: float
    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]
    rmse: float

    def to_ground_truth(self, points: ArrayLike) -> NDArray[np.float64]:
        """Map estimated positions (N, 3) into the ground-truth frame."""
        P = np.asarray(points, dtype=np.float64)
        return ((P - self.translation) @ self.rotation) / self.scale


def parse_tum(text: str) -> Trajectory:
    pairs: List[Tuple[float, PoseSE3]] = []
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise TrajectoryFormatError(
                f"expected 8 values, found {len(fields)}", line_number
            )
        try:
            values = [float(x) for x in fields]
        except ValueError as e:
            raise TrajectoryFormatError(str(e), line_number) from e
        if not all(math.isfinite(v) for v in values):
            raise TrajectoryFormatError("non-finite value", line_number)
        try:
            pose = PoseSE3(np.array(values[4:8]), np.array(values[1:4]))
        except DegenerateInputError as e:
            raise TrajectoryFormatError(str(e), line_number) from e
        if pairs and values[0] <= pairs[-1][0]:
            raise TimestampOrderError(
                f"line {line_number}: timestamp {values[0]!r} is not after {pairs[-1][0]!r}"
            )
        pairs.append((values[0], pose))
    return Trajectory.from_pairs(pairs)


def format_tum(traj: Trajectory) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, pose in zip(traj.timestamps, traj.poses):
        values = [t, *pose.trans, *pose.quat]
        lines.append(" ".join(f"{v:.17g}" for v in values))
    return "\n".join(lines) + "\n"


def load_tum(path: str) -> Trajectory:
    traj = parse_tum(read_file(path))
    logger.debug(f"Loaded {len(traj)} poses from {path}")
    return traj


def save_tum(traj: Trajectory, path: str) -> str:
    directory, filename = os.path.split(path)
    written = save_file(directory, filename, format_tum(traj))
    logger.info(f"Wrote {len(traj)} poses to {written}")
    return written


def associate(
    est: Trajectory, gt: Trajectory, max_dt: float = MAX_TIME_DIFF
) -> List[Tuple[int, int]]:
    """
    One-to-one nearest-timestamp pairs (est index, gt index) within ``max_dt``.

    Closer pairs win when two estimates compete for one ground-truth stamp.
    """
    if len(est) == 0 or len(gt) == 0:
        return []
    candidates = []
    for a, t in enumerate(est.timestamps):
        k = int(np.searchsorted(gt.timestamps, t))
        best = min(
            (b for b in (k - 1, k) if 0 <= b < len(gt)),
            key=lambda b: abs(gt.timestamps[b] - t),
        )
        dt = abs(gt.timestamps[best] - t)
        if dt <= max_dt:
            candidates.append((dt, a, best))
    used_est, used_gt = set(), set()
    pairs = []
    for _, a, b in sorted(candidates):
        if a not in used_est and b not in used_gt:
            used_est.add(a)
            used_gt.add(b)
            pairs.append((a, b))
    return sorted(pairs)


def umeyama_alignment(
    source: ArrayLike, target: ArrayLike, with_scale: bool
) -> Tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """Least-squares (s, R, t) minimizing ||target - (s R source + t)||^2."""
    A = np.asarray(target, dtype=np.float64)
    B = np.asarray(source, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise DegenerateInputError(f"point sets must be matching (N, 3), got {A.shape}, {B.shape}")
    n = A.shape[0]
    mean_a = A.mean(axis=0)
    mean_b = B.mean(axis=0)
    var_b = float(np.mean(np.sum((B - mean_b) ** 2, axis=1)))

    H = (A - mean_a).T @ (B - mean_b) / n
    U, D, VT = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U) * np.linalg.det(VT))
    S = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = U @ S @ VT

    scale = 1.0
    if with_scale:
        if var_b <= 0.0:
            raise DegenerateInputError("cannot estimate scale of a stationary trajectory")
        scale = float(np.trace(np.diag(D) @ S) / var_b)
        if not scale > 0:
            raise DegenerateInputError(f"degenerate similarity scale {scale}")
    t = mean_a - scale * R @ mean_b
    return scale, R, t


def ate(
    est: Trajectory,
    gt: Trajectory,
    mode: Literal["se3", "sim3"] = "sim3",
    max_dt: float = MAX_TIME_DIFF,
) -> Tuple[float, AlignmentResult]:
    """Absolute trajectory error (translation RMSE) after se3 or sim3 alignment."""
    if mode not in ("se3", "sim3"):
        raise ValueError(f"mode must be 'se3' or 'sim3', got {mode!r}")
    pairs = associate(est, gt, max_dt)
    if len(pairs) < MIN_ASSOCIATIONS:
        raise AssociationError(
            f"only {len(pairs)} timestamp pairs within {max_dt}s; need {MIN_ASSOCIATIONS}"
        )
    P_est = est.positions()[[a for a, _ in pairs]]
    P_gt = gt.positions()[[b for _, b in pairs]]
    s, R, t = umeyama_alignment(P_est, P_gt, with_scale=(mode == "sim3"))
    residual = P_gt - (s * P_est @ R.T + t)
    rmse = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    result = AlignmentResult(
        scale=1.0 / s,
        rotation=R.T,
        translation=-(R.T @ t) / s,
        rmse=rmse,
    )
    return rmse, result


def pose_error(est: Trajectory, gt: Trajectory, max_dt: float = MAX_TIME_DIFF) -> float:
    """Sum over frames of ||log(T_i^-1 G_i)|| for ground truth T and estimate G."""
    if len(est) != len(gt):
        raise DegenerateInputError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if np.any(np.abs(est.timestamps - gt.timestamps) > max_dt):
        raise DegenerateInputError("trajectory timestamps do not match")
    return float(
        sum(np.linalg.norm(log(compose(inverse(T), G))) for T, G in zip(gt.poses, est.poses))
    )


def trajectory_extent(traj: Trajectory) -> float:
    """Largest distance between any two camera positions."""
    if len(traj) < 2:
        return 0.0
    return float(np.max(pdist(traj.positions())))


def success_auc(errors: Sequence[float], max_error: float, n_thresholds: int = 1000) -> float:
    """
    Normalized area under the success-rate curve over thresholds [0, max_error].

    Non-finite errors (failed runs) never count as successes.
    """
    if not max_error > 0:
        raise ValueError(f"max_error must be positive, got {max_error}")
    errs = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errs.size == 0:
        return 0.0
    errs = np.where(np.isfinite(errs), errs, np.inf)
    thresholds = np.linspace(0.0, max_error, n_thresholds + 1)
    rates = np.mean(errs[None, :] <= thresholds[:, None], axis=1)
    return float(trapezoid(rates, thresholds) / max_error)
