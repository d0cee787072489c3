from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field

from dense_ba.models.config_model import SceneConfig


class SceneRecord(BaseModel):
    """
    On-disk form of a synthetic scene.

    Poses are world-to-camera transforms of the left camera as
    [qx, qy, qz, qw, tx, ty, tz]; depths are coarse-resolution inverse depth.
    """

    model_config = ConfigDict(extra="forbid")

    format_version: int = 1
    seed: int
    config: Optional[SceneConfig] = None
    image_height: int
    image_width: int
    downsample: int
    intrinsics: List[float] = Field(min_length=4, max_length=4)
    timestamps: List[float]
    poses: List[List[float]]
    depths: List[List[List[float]]]
    baseline: float = 0.0
    right_depths: Optional[List[List[List[float]]]] = None
