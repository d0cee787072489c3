import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Mode(str, Enum):
    """Sensor configuration the SLAM system runs in."""

    MONO = "mono"
    STEREO = "stereo"
    RGBD = "rgbd"


class ConfidenceFidelity(str, Enum):
    """How the oracle's confidence maps relate to its true target errors."""

    ORACLE_TRUE = "oracle_true"
    CONSTANT = "constant"
    ADVERSARIAL = "adversarial"


class TrajectoryKind(str, Enum):
    RANDOM_WALK = "random_walk"
    LOOP = "loop"


class StrictModel(BaseModel):
    """Base for every config section: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneConfig(StrictModel):
    """
    Synthetic scene parameters.

    Image size, intrinsics and flow thresholds are at input resolution;
    the optimization runs at 1/``downsample`` of it.
    """

    frames: int = Field(12, ge=2)
    height: int = Field(192, ge=16)
    width: int = Field(256, ge=16)
    downsample: int = Field(8, ge=1)
    focal_scale: float = Field(0.8, gt=0)
    flow_min: float = Field(8.0, ge=0)
    flow_max: float = Field(96.0, gt=0)
    flow_target: Optional[float] = Field(None, gt=0)
    trajectory: TrajectoryKind = TrajectoryKind.RANDOM_WALK
    max_step_translation: float = Field(0.3, ge=0)
    max_step_rotation_deg: float = Field(1.0, ge=0)
    wall_distance: float = Field(4.0, gt=0)
    surface_amplitude: float = Field(0.3, ge=0)
    stereo_baseline: float = Field(0.2, ge=0)
    frame_interval: float = Field(0.1, gt=0)
    sensor_missing_fraction: float = Field(0.0, ge=0, le=1)

    @model_validator(mode="after")
    def check_band_and_size(self) -> "SceneConfig":
        if self.flow_min > self.flow_max:
            raise ValueError(
                f"flow_min ({self.flow_min}) must not exceed flow_max ({self.flow_max})"
            )
        if self.height % self.downsample or self.width % self.downsample:
            raise ValueError("height and width must be multiples of downsample")
        return self

    @property
    def resolved_flow_target(self) -> float:
        """Flow each step is rescaled toward: the configured target, clipped into the band."""
        if self.flow_target is not None:
            return min(max(self.flow_target, self.flow_min), self.flow_max)
        if self.flow_min > 0:
            return math.sqrt(self.flow_min * self.flow_max)
        return 0.5 * self.flow_max


class NoiseModel(StrictModel):
    """Error characteristics of the flow oracle (coarse-resolution pixels)."""

    sigma: float = Field(0.0, ge=0)
    outlier_fraction: float = Field(0.0, ge=0, le=1)
    outlier_magnitude: float = Field(4.0, ge=0)
    confidence_fidelity: ConfidenceFidelity = ConfidenceFidelity.ORACLE_TRUE
    damping: float = Field(1e-4, gt=0)


class SeedingConfig(StrictModel):
    """
    How frames kept before initialization are seeded from ground truth.

    ``scale`` applies a global similarity to every seed; the two gauge frames
    are seeded exactly up to that similarity, later frames are perturbed.
    """

    rotation_deg: float = Field(2.0, ge=0)
    translation_frac: float = Field(0.05, ge=0)
    depth_noise: float = Field(0.1, ge=0, lt=1)
    scale: float = Field(1.0, gt=0)


class SystemConfig(StrictModel):
    init_frame_count: int = Field(12, ge=2)
    init_flow_threshold: float = Field(16.0, gt=0)
    init_edge_window: int = Field(3, ge=1)
    init_iters: int = Field(10, ge=1)
    frontend_iters: int = Field(4, ge=1)
    frontend_neighbors: int = Field(3, ge=1)
    frontend_window: int = Field(8, ge=1)
    removal_threshold: float = Field(16.0, gt=0)
    max_keyframes: int = Field(20, ge=3)
    backend_iters: int = Field(8, ge=1)
    backend_interval: int = Field(10, ge=1)
    backend_enabled: bool = True
    max_edges_per_keyframe: int = Field(16, ge=1)
    final_iters: int = Field(12, ge=1)
    motion_only_iters: int = Field(10, ge=1)
    mode: Mode = Mode.MONO
    depth_weight: float = Field(10.0, ge=0)
    workers: int = Field(1, ge=1, le=2)
    divergence_factor: float = Field(10.0, gt=1)

    @model_validator(mode="after")
    def check_retention(self) -> "SystemConfig":
        if self.max_keyframes < self.init_frame_count:
            raise ValueError(
                f"max_keyframes ({self.max_keyframes}) must be at least "
                f"init_frame_count ({self.init_frame_count})"
            )
        return self


class ExperimentConfig(StrictModel):
    scene: SceneConfig = Field(default_factory=SceneConfig)
    noise: NoiseModel = Field(default_factory=NoiseModel)
    seeding: SeedingConfig = Field(default_factory=SeedingConfig)
    system: SystemConfig = Field(default_factory=SystemConfig)
    scene_seed: int = Field(0, ge=0)
    oracle_seed: int = Field(0, ge=0)
    init_seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None
