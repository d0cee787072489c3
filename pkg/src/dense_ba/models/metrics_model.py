from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field

from dense_ba.models.config_model import ExperimentConfig, Mode


class CostTrace(BaseModel):
    """Cost before every Gauss-Newton iteration of one BA call, then the final cost."""

    label: str
    costs: List[float]


class RunMetrics(BaseModel):
    """
    Result record of one SLAM run; written as metrics.json.

    Contains no wall-clock values so that identical seeds give identical files.
    """

    status: str = "ok"
    mode: Mode
    depth_weight: float
    frames: int
    keyframe_count: int
    edge_count: int
    backend_edge_counts: List[int] = []
    ate_se3: float
    ate_sim3: float
    sim3_scale: float
    pose_error: float
    trajectory_extent: float
    cost_traces: List[CostTrace] = []
    config: ExperimentConfig


class RunStatus(str, Enum):
    PENDING = "pending"
    DONE = "done"
    FAILED = "failed"


class SweepRow(BaseModel):
    """One CSV row of a sweep."""

    axis: str
    value: str
    status: RunStatus
    ate_sim3: Optional[float] = None
    ate_se3: Optional[float] = None
    pose_error: Optional[float] = None
    keyframe_count: Optional[int] = None
    trajectory_extent: Optional[float] = None
    message: str = ""


class SweepRunState(BaseModel):
    value: str
    status: RunStatus = Field(
        default=RunStatus.PENDING, description="Current progress state of the run."
    )
    row: Optional[SweepRow] = None


class SweepStateModel(BaseModel):
    """
    Progress of a sweep, persisted so an interrupted sweep can resume.

    Attributes:
        axis (str): Dotted config path being swept.
        runs (List[SweepRunState]): One entry per swept value, in axis order.
    """

    axis: str = ""
    runs: List[SweepRunState] = []

    def get_run(self, value: str) -> Optional[SweepRunState]:
        return next((run for run in self.runs if run.value == value), None)
