"""Shared pieces of the run, sweep and graph-dump processors."""

import copy
import json
import math
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from dense_ba.config.logger import logger
from dense_ba.evaluation.eval_io import (
    Trajectory,
    ate,
    pose_error,
    trajectory_extent,
)
from dense_ba.geometry.se3_lie import PoseSE3, compose, exp, inverse, twist
from dense_ba.models.config_model import ExperimentConfig, Mode
from dense_ba.models.metrics_model import CostTrace, RunMetrics
from dense_ba.slam.flow_oracle import FlowOracle, SyntheticScene
from dense_ba.slam.slam_core import FrameInput, SlamSystem
from dense_ba.utils.file_utils import read_file


def parse_value(text: str) -> Any:
    """CLI value as JSON when it parses (numbers, booleans), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def with_override(config: ExperimentConfig, path: str, value: Any) -> ExperimentConfig:
    """
    Copy of ``config`` with the field at dotted ``path`` replaced, re-validated.

    Unknown paths raise KeyError.
    """
    data = config.model_dump(mode="json")
    node: Dict[str, Any] = data
    keys = path.split(".")
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise KeyError(f"unknown config section {key!r} in {path!r}")
        node = node[key]
    if keys[-1] not in node:
        raise KeyError(f"unknown config field {path!r}")
    node[keys[-1]] = value
    return ExperimentConfig.model_validate(data)


def load_experiment_config(
    path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None
) -> ExperimentConfig:
    """Read a JSON config (defaults when ``path`` is None) and apply CLI overrides."""
    data: Dict[str, Any] = {}
    if path:
        data = json.loads(read_file(path))
    config = ExperimentConfig.model_validate(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            config = with_override(config, key, value)
    return config


def ground_truth_trajectory(scene: SyntheticScene) -> Trajectory:
    return Trajectory(scene.timestamps, tuple(inverse(p) for p in scene.poses))


def seed_frames(
    scene: SyntheticScene, config: ExperimentConfig, oracle: FlowOracle
) -> List[FrameInput]:
    """
    Frame inputs with perturbed ground-truth guesses.

    All guesses live in a world scaled by ``seeding.scale``; the first two
    frames are otherwise exact, later ones get rotation, translation and
    relative inverse-depth noise.
    """
    seeding = config.seeding
    rng = np.random.default_rng(config.init_seed)
    extent = trajectory_extent(ground_truth_trajectory(scene))
    missing = config.scene.sensor_missing_fraction
    frames = []
    for k in range(scene.n_frames):
        c2w = inverse(scene.gt_pose(k))
        rotation = PoseSE3(c2w.quat, np.zeros(3))
        position = seeding.scale * c2w.trans
        depth = scene.gt_depth(k) / seeding.scale
        right_depth = scene.right_depths[k] / seeding.scale if scene.has_stereo else None
        if k >= 2:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = math.radians(seeding.rotation_deg) * rng.uniform(-1.0, 1.0)
            rotation = compose(exp(twist(rotation=axis * angle)), rotation)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            position = position + direction * (
                seeding.translation_frac * extent * seeding.scale * rng.uniform(0.0, 1.0)
            )
            depth = depth * (1.0 + seeding.depth_noise * rng.uniform(-1.0, 1.0, depth.shape))
            if right_depth is not None:
                right_depth = right_depth * (
                    1.0 + seeding.depth_noise * rng.uniform(-1.0, 1.0, right_depth.shape)
                )
        sensor = None
        if config.system.mode == Mode.RGBD:
            sensor = oracle.sensor_depth(k, missing)
        frames.append(
            FrameInput(
                frame_id=k,
                timestamp=float(scene.timestamps[k]),
                pose_guess=inverse(PoseSE3(rotation.quat, position)),
                depth_guess=depth,
                right_depth_guess=right_depth,
                sensor_depth=sensor,
            )
        )
    return frames


def build_system(scene: SyntheticScene, config: ExperimentConfig) -> Tuple[SlamSystem, FlowOracle]:
    oracle = FlowOracle(scene, config.noise, seed=config.oracle_seed)
    return SlamSystem(config.system, oracle), oracle


def run_slam(
    scene: SyntheticScene, config: ExperimentConfig
) -> Tuple[SlamSystem, Trajectory]:
    system, oracle = build_system(scene, config)
    trajectory = system.run(seed_frames(scene, config, oracle))
    return system, trajectory


def compute_metrics(
    system: SlamSystem,
    scene: SyntheticScene,
    config: ExperimentConfig,
    estimate: Trajectory,
) -> RunMetrics:
    gt = ground_truth_trajectory(scene)
    ate_se3, _ = ate(estimate, gt, "se3")
    ate_sim3, alignment = ate(estimate, gt, "sim3")
    state = system.state
    metrics = RunMetrics(
        mode=config.system.mode,
        depth_weight=config.system.depth_weight,
        frames=len(estimate),
        keyframe_count=len(state.graph),
        edge_count=len(state.graph.edges),
        backend_edge_counts=list(state.backend_edge_counts),
        ate_se3=ate_se3,
        ate_sim3=ate_sim3,
        sim3_scale=alignment.scale,
        pose_error=pose_error(estimate, gt),
        trajectory_extent=trajectory_extent(gt),
        cost_traces=[CostTrace(label=label, costs=costs) for label, costs in state.cost_traces],
        config=copy.deepcopy(config),
    )
    logger.info(
        f"ATE sim3 {metrics.ate_sim3:.3e}, se3 {metrics.ate_se3:.3e}, "
        f"{metrics.keyframe_count} keyframes"
    )
    return metrics

