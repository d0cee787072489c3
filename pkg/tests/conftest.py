"""Shared fixtures: small synthetic scenes and bundle adjustment problems."""

import math
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pytest

from dense_ba.geometry.camera_model import Intrinsics, backproject, pixel_grid, project
from dense_ba.geometry.se3_lie import PoseSE3, act, compose, exp, inverse, twist
from dense_ba.models.config_model import ExperimentConfig, NoiseModel, SceneConfig
from dense_ba.optim.dba_solver import BAProblem, EdgeObservation
from dense_ba.slam.flow_oracle import FlowOracle, SyntheticScene, generate_scene

# 96x128 input images give 12x16 optimization grids.
SMALL_SCENE = {
    "frames": 7,
    "height": 96,
    "width": 128,
    "flow_min": 18.0,
    "flow_max": 60.0,
    "flow_target": 24.0,
}

SMALL_SYSTEM = {
    "init_frame_count": 7,
    "max_keyframes": 20,
}


def scene_config(**overrides) -> SceneConfig:
    return SceneConfig(**{**SMALL_SCENE, **overrides})


def experiment_config(
    scene: Optional[dict] = None,
    noise: Optional[dict] = None,
    seeding: Optional[dict] = None,
    system: Optional[dict] = None,
    **top,
) -> ExperimentConfig:
    return ExperimentConfig(
        scene={**SMALL_SCENE, **(scene or {})},
        noise=noise or {},
        seeding=seeding or {},
        system={**SMALL_SYSTEM, **(system or {})},
        **top,
    )


def window_edges(n: int, window: int = 3) -> list:
    return [(i, j) for i in range(n) for j in range(n) if i != j and abs(i - j) <= window]


def gt_problem(
    scene: SyntheticScene,
    frames: Sequence[int],
    noise: Optional[NoiseModel] = None,
    fixed: Iterable[int] = (0, 1),
    window: int = 3,
    seed: int = 0,
    damping: Optional[float] = None,
) -> BAProblem:
    """Problem over ``frames`` at ground truth with oracle observations on a temporal window."""
    oracle = FlowOracle(scene, noise, seed=seed)
    n = len(frames)
    observations = [
        oracle.observation((frames[a], 0), (frames[b], 0), (a, b))
        for a, b in window_edges(n, window)
    ]
    damping_maps = None
    if damping is not None:
        damping_maps = tuple(np.full(scene.coarse_shape, damping) for _ in frames)
    return BAProblem(
        poses=tuple(scene.poses[f] for f in frames),
        depths=tuple(scene.depths[f].copy() for f in frames),
        intrinsics=scene.coarse_intrinsics,
        observations=tuple(observations),
        fixed_poses=frozenset(fixed),
        damping=damping_maps,
    )


def perturb_pose(
    rng: np.random.Generator, pose: PoseSE3, max_rotation: float, max_translation: float
) -> PoseSE3:
    """Rotate by up to ``max_rotation`` radians and move the camera center by up to ``max_translation``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    c2w = inverse(pose)
    rotated = compose(exp(twist(rotation=axis * max_rotation * rng.uniform(0.5, 1.0))), c2w)
    moved = PoseSE3(rotated.quat, c2w.trans + direction * max_translation * rng.uniform(0.5, 1.0))
    return inverse(moved)


def random_problem(
    rng: np.random.Generator,
    n_frames: int,
    shape: Tuple[int, int],
    damping: float = 1.0,
    noise: float = 0.1,
) -> BAProblem:
    """Random poses near identity, random depths and slightly inconsistent targets."""
    height, width = shape
    intr = Intrinsics(0.8 * width, 0.8 * width, 0.5 * width, 0.5 * height)
    poses = [PoseSE3.identity()] + [
        exp(np.concatenate([rng.normal(0.0, 0.1, 3), rng.normal(0.0, 0.02, 3)]))
        for _ in range(n_frames - 1)
    ]
    depths = [rng.uniform(0.2, 0.5, shape) for _ in range(n_frames)]
    grid = pixel_grid(height, width)
    observations = []
    for i in range(n_frames):
        for j in range(n_frames):
            if i == j:
                continue
            X = act(compose(poses[j], inverse(poses[i])), backproject(grid, depths[i], intr))
            p, valid = project(X, intr)
            target = np.where(valid[..., None], p + rng.normal(0.0, noise, p.shape), np.nan)
            confidence = np.where(valid[..., None], rng.uniform(0.5, 2.0, p.shape), 0.0)
            observations.append(EdgeObservation((i, j), target, confidence, valid))
    # start away from the generating state
    start = [poses[0]] + [
        compose(exp(np.concatenate([rng.normal(0.0, 0.01, 3), rng.normal(0.0, 0.005, 3)])), g)
        for g in poses[1:]
    ]
    start_depths = [d * rng.uniform(0.9, 1.1, shape) for d in depths]
    return BAProblem(
        poses=tuple(start),
        depths=tuple(start_depths),
        intrinsics=intr,
        observations=tuple(observations),
        fixed_poses=frozenset({0}),
        damping=tuple(np.full(shape, damping) for _ in range(n_frames)),
    )


def rotation_angle(a: PoseSE3, b: PoseSE3) -> float:
    rel = compose(a, inverse(b))
    return 2.0 * math.atan2(np.linalg.norm(rel.quat[:3]), abs(rel.quat[3]))


@pytest.fixture(scope="session")
def small_scene() -> SyntheticScene:
    return generate_scene(scene_config(), seed=3)


@pytest.fixture(scope="session")
def two_frame_scene() -> SyntheticScene:
    return generate_scene(scene_config(frames=2), seed=11)


@pytest.fixture(scope="session")
def loop_scene() -> SyntheticScene:
    return generate_scene(scene_config(frames=12, trajectory="loop"), seed=5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
