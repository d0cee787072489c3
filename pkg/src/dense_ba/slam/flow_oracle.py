"""
Synthetic scenes and a ground-truth flow oracle.

The oracle stands in for a learned update operator: for an edge (i, j) it
returns revised correspondence targets, per-pixel confidences, a damping map
and convex upsampling masks. Targets are exact ground-truth correspondences
corrupted by configurable gaussian noise and outliers.

Scenes observe a single smooth "wall" z = f(x, y) in world coordinates, so
every ray hits the surface exactly once and ground-truth correspondence
needs no occlusion handling. Optimization happens at 1/downsample of the
nominal image size; flow thresholds are quoted at the nominal size.
"""

import dataclasses
import math
import os
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from dense_ba.config.logger import logger
from dense_ba.exceptions import DegenerateInputError, SceneConfigError
from dense_ba.geometry.camera_model import Intrinsics, pixel_grid
from dense_ba.geometry.correspondence import dense_correspondence, mean_flow_magnitude
from dense_ba.geometry.se3_lie import PoseSE3, compose, exp, inverse, twist
from dense_ba.models.config_model import (
    ConfidenceFidelity,
    NoiseModel,
    SceneConfig,
    TrajectoryKind,
)
from dense_ba.models.scene_model import SceneRecord
from dense_ba.optim.dba_solver import EdgeObservation
from dense_ba.utils.file_utils import read_file, save_file

# (frame id, camera index); camera 1 is the right camera of a stereo rig.
NodeKey = Tuple[int, int]

# Added to the variance in confidence = 1 / (sigma^2 + EPS_CONFIDENCE).
EPS_CONFIDENCE: float = 1e-2
# Valid scene inverse-depth range.
INVERSE_DEPTH_RANGE: Tuple[float, float] = (0.1, 2.0)
N_HARMONICS: int = 3
_RAYCAST_ITERS: int = 200
_RAYCAST_TOL: float = 1e-12
_STEP_ATTEMPTS: int = 30
_TARGET_TOLERANCE: float = 0.05


def rig_extrinsic(baseline: float) -> PoseSE3:
    """Right camera sits ``baseline`` to the right (+x) of the left one."""
    return PoseSE3(np.array([0.0, 0.0, 0.0, 1.0]), np.array([-baseline, 0.0, 0.0]))


@dataclass(frozen=True)
class _HarmonicWall:
    """Height field z = distance + sum_k a_k sin(u_k . (x, y) + phase_k)."""

    distance: float
    amplitudes: Tuple[float, ...]
    wavevectors: Tuple[Tuple[float, float], ...]
    phases: Tuple[float, ...]

    @classmethod
    def random(cls, rng: np.random.Generator, config: SceneConfig) -> "_HarmonicWall":
        weights = rng.uniform(0.5, 1.0, N_HARMONICS)
        amplitudes = config.surface_amplitude * weights / weights.sum()
        wavelengths = rng.uniform(3.0, 8.0, N_HARMONICS)
        angles = rng.uniform(0.0, 2.0 * math.pi, N_HARMONICS)
        phases = rng.uniform(0.0, 2.0 * math.pi, N_HARMONICS)
        wavevectors = [
            (2.0 * math.pi / lam * math.cos(a), 2.0 * math.pi / lam * math.sin(a))
            for lam, a in zip(wavelengths, angles)
        ]
        return cls(
            distance=config.wall_distance,
            amplitudes=tuple(float(a) for a in amplitudes),
            wavevectors=tuple((float(u), float(v)) for u, v in wavevectors),
            phases=tuple(float(p) for p in phases),
        )

    def height(self, x: NDArray[np.float64], y: NDArray[np.float64]) -> NDArray[np.float64]:
        z = np.full_like(x, self.distance)
        for a, (u, v), phase in zip(self.amplitudes, self.wavevectors, self.phases):
            z = z + a * np.sin(u * x + v * y + phase)
        return z

    def raycast(
        self, pose: PoseSE3, intr: Intrinsics, shape: Tuple[int, int]
    ) -> NDArray[np.float64]:
        """Inverse depth seen by a world-to-camera ``pose``, by fixed-point iteration."""
        grid = pixel_grid(*shape)
        rays = np.stack(
            [
                (grid[..., 0] - intr.cx) / intr.fx,
                (grid[..., 1] - intr.cy) / intr.fy,
                np.ones(shape),
            ],
            axis=-1,
        )
        c2w = inverse(pose)
        rays_w = rays @ c2w.rotation.T
        center = c2w.trans
        if np.any(rays_w[..., 2] < 0.05):
            raise SceneConfigError("camera rotated too far away from the scene surface")

        s = (self.distance - center[2]) / rays_w[..., 2]
        for _ in range(_RAYCAST_ITERS):
            x = center[0] + s * rays_w[..., 0]
            y = center[1] + s * rays_w[..., 1]
            s_next = (self.height(x, y) - center[2]) / rays_w[..., 2]
            converged = np.max(np.abs(s_next - s)) < _RAYCAST_TOL * max(1.0, float(np.max(s)))
            s = s_next
            if converged:
                break
        else:
            raise SceneConfigError("ray casting did not converge; surface too steep")
        if np.any(s <= 0):
            raise SceneConfigError("camera moved behind the scene surface")
        # rays have unit camera z, so the ray parameter is the depth
        return 1.0 / s


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """
    Ground truth for a synthetic sequence.

    ``poses`` are world-to-camera transforms of the left camera;
    ``depths`` are inverse-depth maps at the coarse (optimization)
    resolution; ``intrinsics`` belong to the nominal image size.
    """

    poses: Tuple[PoseSE3, ...]
    depths: NDArray[np.float64]
    intrinsics: Intrinsics
    image_size: Tuple[int, int]
    timestamps: NDArray[np.float64]
    seed: int
    downsample: int = 8
    baseline: float = 0.0
    right_depths: Optional[NDArray[np.float64]] = None
    config: Optional[SceneConfig] = None

    def __post_init__(self) -> None:
        depths = np.asarray(self.depths, dtype=np.float64)
        if depths.ndim != 3 or depths.shape[0] != len(self.poses):
            raise DegenerateInputError(
                f"need one depth map per pose, got {depths.shape} for {len(self.poses)} poses"
            )
        if np.any(~(depths > 0)):
            raise DegenerateInputError("scene inverse depths must be positive")
        if depths.shape[1:] != self.coarse_shape:
            raise DegenerateInputError(
                f"depth maps {depths.shape[1:]} do not match coarse size {self.coarse_shape}"
            )
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=np.float64))
        if self.right_depths is not None:
            object.__setattr__(
                self, "right_depths", np.asarray(self.right_depths, dtype=np.float64)
            )

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def coarse_shape(self) -> Tuple[int, int]:
        return (self.image_size[0] // self.downsample, self.image_size[1] // self.downsample)

    @property
    def coarse_intrinsics(self) -> Intrinsics:
        return self.intrinsics.scaled(1.0 / self.downsample)

    @property
    def extrinsic(self) -> PoseSE3:
        """Left-to-right camera transform: right = extrinsic ∘ left."""
        return rig_extrinsic(self.baseline)

    @property
    def has_stereo(self) -> bool:
        return self.baseline > 0 and self.right_depths is not None

    def gt_pose(self, frame: int, camera: int = 0) -> PoseSE3:
        if camera == 0:
            return self.poses[frame]
        self._require_stereo()
        return compose(self.extrinsic, self.poses[frame])

    def gt_depth(self, frame: int, camera: int = 0) -> NDArray[np.float64]:
        if camera == 0:
            return self.depths[frame]
        self._require_stereo()
        return self.right_depths[frame]

    def consecutive_flows(self) -> List[float]:
        """Mean ground-truth flow (nominal pixels) between consecutive frames."""
        intr = self.coarse_intrinsics
        return [
            self.downsample
            * mean_flow_magnitude(self.poses[k], self.poses[k + 1], self.depths[k], intr)
            for k in range(self.n_frames - 1)
        ]

    def _require_stereo(self) -> None:
        if not self.has_stereo:
            raise DegenerateInputError("scene has no right camera")


def _pose_from_position(position: ArrayLike, rotvec: ArrayLike) -> PoseSE3:
    """World-to-camera pose of a camera at ``position`` with orientation exp(rotvec)."""
    c2w = PoseSE3(exp(twist(rotation=rotvec)).quat, np.asarray(position, dtype=np.float64))
    return inverse(c2w)


def _step_flow(
    prev: PoseSE3, cand: PoseSE3, depth_prev: NDArray[np.float64], intr: Intrinsics, scale: int
) -> float:
    return scale * mean_flow_magnitude(prev, cand, depth_prev, intr)


def _random_walk(
    rng: np.random.Generator,
    config: SceneConfig,
    wall: _HarmonicWall,
    intr: Intrinsics,
    shape: Tuple[int, int],
) -> List[PoseSE3]:
    target = config.resolved_flow_target
    max_rot = math.radians(config.max_step_rotation_deg)
    position = np.zeros(3)
    rotvec = np.zeros(3)
    poses = [_pose_from_position(position, rotvec)]
    depth_prev = wall.raycast(poses[0], intr, shape)

    for k in range(1, config.frames):
        direction = rng.normal(size=3) * np.array([1.0, 0.5, 0.3])
        direction /= max(np.linalg.norm(direction), 1e-12)
        d_pos = direction * config.max_step_translation
        if abs(position[2] + d_pos[2]) > 1.0:
            d_pos[2] = -d_pos[2]
        d_rot = rng.uniform(-1.0, 1.0, 3) * max_rot

        alpha = 1.0
        for _ in range(_STEP_ATTEMPTS):
            cand_pos = position + alpha * d_pos
            cand_rot = 0.8 * rotvec + alpha * d_rot
            cand = _pose_from_position(cand_pos, cand_rot)
            flow = _step_flow(poses[-1], cand, depth_prev, intr, config.downsample)
            if target == 0.0 or abs(flow / target - 1.0) < _TARGET_TOLERANCE:
                break
            if not math.isfinite(flow):
                alpha *= 0.5
            elif flow < 1e-9:
                alpha *= 4.0
            else:
                alpha *= target / flow
        if not config.flow_min <= flow <= config.flow_max:
            raise SceneConfigError(
                f"step {k}: could not reach the flow band "
                f"[{config.flow_min}, {config.flow_max}] (last flow {flow:.2f}px)"
            )
        position, rotvec = cand_pos, cand_rot
        poses.append(cand)
        depth_prev = wall.raycast(cand, intr, shape)
    return poses


def _loop(
    rng: np.random.Generator,
    config: SceneConfig,
    wall: _HarmonicWall,
    intr: Intrinsics,
    shape: Tuple[int, int],
) -> List[PoseSE3]:
    """One lap of a circle parallel to the surface; the last frame lands next to the first."""
    n = config.frames
    target = config.resolved_flow_target
    yaw = math.radians(config.max_step_rotation_deg) * rng.uniform(0.5, 1.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)

    def lap(radius: float) -> List[PoseSE3]:
        poses = []
        for k in range(n):
            a = 2.0 * math.pi * k / n
            position = radius * np.array([math.cos(a) - 1.0, math.sin(a), 0.0])
            rotvec = np.array([0.0, yaw * math.sin(a + phase), 0.0])
            poses.append(_pose_from_position(position, rotvec))
        return poses

    radius = max(config.max_step_translation, 1e-3) / (2.0 * math.sin(math.pi / n))
    for _ in range(_STEP_ATTEMPTS):
        poses = lap(radius)
        depth0 = wall.raycast(poses[0], intr, shape)
        flow = _step_flow(poses[0], poses[1], depth0, intr, config.downsample)
        if target == 0.0 or not math.isfinite(flow) or abs(flow / target - 1.0) < _TARGET_TOLERANCE:
            break
        radius *= target / max(flow, 1e-9)
    return poses


def generate_scene(config: SceneConfig, seed: int) -> SyntheticScene:
    """
    Build a deterministic synthetic sequence for ``seed``.

    Steps are rescaled toward the configured flow target; the flow band is
    verified for every consecutive pair against ground truth.
    """
    if config.flow_min > 0 and config.max_step_translation == 0 and config.max_step_rotation_deg == 0:
        raise SceneConfigError("a zero-motion scene cannot satisfy a nonzero flow band")

    rng = np.random.default_rng(seed)
    height, width = config.height, config.width
    intr = Intrinsics(
        fx=config.focal_scale * width,
        fy=config.focal_scale * width,
        cx=0.5 * width,
        cy=0.5 * height,
    )
    coarse = intr.scaled(1.0 / config.downsample)
    shape = (height // config.downsample, width // config.downsample)
    wall = _HarmonicWall.random(rng, config)

    if config.trajectory == TrajectoryKind.LOOP:
        poses = _loop(rng, config, wall, coarse, shape)
    else:
        poses = _random_walk(rng, config, wall, coarse, shape)

    depths = np.stack([wall.raycast(p, coarse, shape) for p in poses])
    lo, hi = INVERSE_DEPTH_RANGE
    if depths.min() < lo or depths.max() > hi:
        raise SceneConfigError(
            f"inverse depth range [{depths.min():.3f}, {depths.max():.3f}] "
            f"leaves [{lo}, {hi}]; adjust wall_distance"
        )

    right_depths = None
    if config.stereo_baseline > 0:
        extrinsic = rig_extrinsic(config.stereo_baseline)
        right_depths = np.stack(
            [wall.raycast(compose(extrinsic, p), coarse, shape) for p in poses]
        )

    scene = SyntheticScene(
        poses=tuple(poses),
        depths=depths,
        intrinsics=intr,
        image_size=(height, width),
        timestamps=np.arange(config.frames) * config.frame_interval,
        seed=seed,
        downsample=config.downsample,
        baseline=config.stereo_baseline,
        right_depths=right_depths,
        config=config,
    )
    flows = scene.consecutive_flows()
    bad = [k for k, f in enumerate(flows) if not config.flow_min <= f <= config.flow_max]
    if bad:
        raise SceneConfigError(
            f"consecutive flow outside [{config.flow_min}, {config.flow_max}]px "
            f"at steps {bad}: {[round(flows[k], 2) for k in bad]}"
        )
    logger.info(
        f"Generated {config.trajectory.value} scene: {config.frames} frames, "
        f"flow {min(flows):.1f}-{max(flows):.1f}px (seed {seed})"
    )
    return scene


def oracle_revision(
    scene: SyntheticScene,
    src: NodeKey,
    dst: NodeKey,
    noise: Optional[NoiseModel] = None,
    seed: int = 0,
    edge: Tuple[int, int] = (0, 1),
) -> EdgeObservation:
    """
    Corrupted ground-truth targets for every pixel of ``src`` matched into ``dst``.

    The random stream depends only on (seed, src, dst), so any edge can be
    generated independently and in any order.
    """
    noise = noise or NoiseModel()
    (fi, ci), (fj, cj) = src, dst
    intr = scene.coarse_intrinsics
    field = dense_correspondence(
        scene.gt_pose(fi, ci), scene.gt_pose(fj, cj), scene.gt_depth(fi, ci), intr
    )
    shape = field.valid.shape
    rng = np.random.default_rng([seed, fi, ci, fj, cj])

    gaussian = rng.normal(0.0, 1.0, shape + (2,)) * noise.sigma
    outliers = rng.random(shape) < noise.outlier_fraction
    angle = rng.uniform(0.0, 2.0 * math.pi, shape)
    offset = noise.outlier_magnitude * np.stack([np.cos(angle), np.sin(angle)], axis=-1)

    target = field.targets
    if noise.sigma > 0:
        target = target + gaussian
    if noise.outlier_fraction > 0:
        target = target + np.where(outliers[..., None], offset, 0.0)
    outliers &= field.valid

    var = noise.sigma**2
    inlier_w = 1.0 / (var + EPS_CONFIDENCE)
    outlier_w = 1.0 / (var + noise.outlier_magnitude**2 + EPS_CONFIDENCE)
    if noise.confidence_fidelity == ConfidenceFidelity.ORACLE_TRUE:
        conf = np.where(outliers, outlier_w, inlier_w)
    elif noise.confidence_fidelity == ConfidenceFidelity.ADVERSARIAL:
        conf = np.where(outliers, inlier_w, outlier_w)
    else:
        conf = np.ones(shape)
    conf = np.where(field.valid, conf, 0.0)

    return EdgeObservation(
        edge=edge,
        target=np.where(field.valid[..., None], target, np.nan),
        confidence=np.repeat(conf[..., None], 2, axis=-1),
        valid=field.valid,
        outliers=outliers,
    )


def bilinear_upsample_mask(height: int, width: int, factor: int = 8) -> NDArray[np.float64]:
    """Convex weights (H, W, factor^2, 9) reproducing bilinear interpolation."""
    offsets = (np.arange(factor) + 0.5) / factor - 0.5
    w1 = np.zeros((factor, 3))
    neg = offsets < 0
    w1[neg, 0] = -offsets[neg]
    w1[neg, 1] = 1.0 + offsets[neg]
    w1[~neg, 1] = 1.0 - offsets[~neg]
    w1[~neg, 2] = offsets[~neg]
    mask = np.einsum("ai,bj->abij", w1, w1).reshape(factor * factor, 9)
    return np.broadcast_to(mask, (height, width, factor * factor, 9)).copy()


def convex_upsample(
    coarse: ArrayLike, mask: ArrayLike, factor: int = 8
) -> NDArray[np.float64]:
    """
    Upsample an (H, W) map by ``factor`` as convex combinations of 3x3 neighbourhoods.

    ``mask`` is (H, W, factor^2, 9); neighbour k sits at row offset k // 3 - 1
    and column offset k % 3 - 1. Negative weights are clipped and every
    weight set is renormalized to sum to one (all-zero sets fall back to the
    centre pixel). Borders replicate the edge values.
    """
    coarse = np.asarray(coarse, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    height, width = coarse.shape
    if mask.shape != (height, width, factor * factor, 9):
        raise DegenerateInputError(
            f"mask {mask.shape} does not match {(height, width, factor * factor, 9)}"
        )
    weights = np.clip(mask, 0.0, None)
    total = weights.sum(axis=-1, keepdims=True)
    centre = np.zeros(9)
    centre[4] = 1.0
    weights = np.where(total > 0, weights / np.where(total > 0, total, 1.0), centre)

    padded = np.pad(coarse, 1, mode="edge")
    neighbours = np.stack(
        [padded[dy : dy + height, dx : dx + width] for dy in range(3) for dx in range(3)],
        axis=-1,
    )
    fine = np.einsum("hwsk,hwk->hws", weights, neighbours)
    fine = fine.reshape(height, width, factor, factor).transpose(0, 2, 1, 3)
    return fine.reshape(height * factor, width * factor)


class FlowOracle:
    """
    Per-edge observations for a scene under a fixed noise model and seed.

    Observations are cached per (src, dst) node pair, so repeated requests
    for one edge return identical targets. The cache is shared by the
    frontend and the backend worker thread.
    """

    def __init__(self, scene: SyntheticScene, noise: Optional[NoiseModel] = None, seed: int = 0):
        self.scene = scene
        self.noise = noise or NoiseModel()
        self.seed = seed
        self._cache: Dict[Tuple[NodeKey, NodeKey], EdgeObservation] = {}
        self._cache_lock = threading.Lock()

    @property
    def intrinsics(self) -> Intrinsics:
        return self.scene.coarse_intrinsics

    @property
    def flow_scale(self) -> float:
        return float(self.scene.downsample)

    def observation(
        self, src: NodeKey, dst: NodeKey, edge: Tuple[int, int] = (0, 1)
    ) -> EdgeObservation:
        key = (src, dst)
        with self._cache_lock:
            obs = self._cache.get(key)
            if obs is None:
                obs = oracle_revision(self.scene, src, dst, self.noise, self.seed, edge)
                self._cache[key] = obs
        if obs.edge != edge:
            obs = dataclasses.replace(obs, edge=edge)
        return obs

    def motion_flow(self, src: NodeKey, dst: NodeKey) -> float:
        """
        Mean magnitude (nominal pixels) of the flow the oracle reports for an edge.

        +inf when fewer than half of the targets land inside the image.
        """
        obs = self.observation(src, dst)
        height, width = obs.valid.shape
        grid = pixel_grid(height, width)
        with np.errstate(invalid="ignore"):
            inside = (
                obs.valid
                & (obs.target[..., 0] >= 0)
                & (obs.target[..., 0] <= width - 1)
                & (obs.target[..., 1] >= 0)
                & (obs.target[..., 1] <= height - 1)
            )
        if np.mean(inside) < 0.5:
            return float("inf")
        flow = np.where(obs.valid[..., None], obs.target - grid, 0.0)
        return self.flow_scale * float(np.mean(np.linalg.norm(flow[obs.valid], axis=-1)))

    def revision(
        self,
        obs: EdgeObservation,
        G_i: PoseSE3,
        G_j: PoseSE3,
        d_i: NDArray[np.float64],
    ) -> NDArray[np.float64]:
        """Flow still to be applied on top of the current correspondence: p* - p_ij."""
        field = dense_correspondence(G_i, G_j, d_i, self.intrinsics)
        mask = (field.valid & obs.valid)[..., None]
        return np.where(mask, obs.target - field.targets, 0.0)

    def damping_map(self) -> NDArray[np.float64]:
        return np.full(self.scene.coarse_shape, self.noise.damping)

    def upsample_mask(self) -> NDArray[np.float64]:
        return bilinear_upsample_mask(*self.scene.coarse_shape, factor=self.scene.downsample)

    def sensor_depth(self, frame: int, missing_fraction: float = 0.0) -> NDArray[np.float64]:
        """Ground-truth inverse depth with ``missing_fraction`` of pixels zeroed."""
        depth = self.scene.gt_depth(frame).copy()
        if missing_fraction > 0:
            rng = np.random.default_rng([self.seed, frame, 7])
            depth[rng.random(depth.shape) < missing_fraction] = 0.0
        return depth


def scene_to_record(scene: SyntheticScene) -> SceneRecord:
    intr = scene.intrinsics
    return SceneRecord(
        seed=scene.seed,
        config=scene.config,
        image_height=scene.image_size[0],
        image_width=scene.image_size[1],
        downsample=scene.downsample,
        intrinsics=[intr.fx, intr.fy, intr.cx, intr.cy],
        timestamps=[float(t) for t in scene.timestamps],
        poses=[[float(x) for x in (*p.quat, *p.trans)] for p in scene.poses],
        depths=scene.depths.tolist(),
        baseline=scene.baseline,
        right_depths=None if scene.right_depths is None else scene.right_depths.tolist(),
    )


def scene_from_record(record: SceneRecord) -> SyntheticScene:
    return SyntheticScene(
        poses=tuple(PoseSE3(np.array(p[:4]), np.array(p[4:])) for p in record.poses),
        depths=np.array(record.depths, dtype=np.float64),
        intrinsics=Intrinsics(*record.intrinsics),
        image_size=(record.image_height, record.image_width),
        timestamps=np.array(record.timestamps, dtype=np.float64),
        seed=record.seed,
        downsample=record.downsample,
        baseline=record.baseline,
        right_depths=None
        if record.right_depths is None
        else np.array(record.right_depths, dtype=np.float64),
        config=record.config,
    )


def save_scene(scene: SyntheticScene, path: str) -> str:
    directory, filename = os.path.split(path)
    written = save_file(directory, filename, scene_to_record(scene).model_dump_json() + "\n")
    logger.info(f"Saved scene with {scene.n_frames} frames to {written}")
    return written


def load_scene(path: str) -> SyntheticScene:
    record = SceneRecord.model_validate_json(read_file(path))
    scene = scene_from_record(record)
    logger.debug(f"Loaded scene with {scene.n_frames} frames from {path}")
    return scene
