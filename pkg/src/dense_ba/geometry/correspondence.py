"""Dense correspondence fields between frames and the flow they induce."""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from dense_ba.geometry.camera_model import (
    Intrinsics,
    backproject,
    in_bounds,
    pixel_grid,
    project,
)
from dense_ba.geometry.se3_lie import PoseSE3, act, compose, inverse

# Minimum fraction of pixels with a valid, in-bounds correspondence
# for two frames to count as covisible.
MIN_OVERLAP: float = 0.5


@dataclass(frozen=True)
class CorrespondenceField:
    """
    p_ij for every source pixel.

    ``valid`` marks pixels in front of the target camera; invalid targets are
    NaN. ``in_bounds`` additionally requires the target to land in the image.
    """

    targets: NDArray[np.float64]
    valid: NDArray[np.bool_]
    in_bounds: NDArray[np.bool_]

    @property
    def overlap(self) -> float:
        return float(np.mean(self.valid & self.in_bounds))


def relative_pose(G_i: PoseSE3, G_j: PoseSE3) -> PoseSE3:
    """G_ij = G_j ∘ G_i^-1, mapping frame-i coordinates into frame j."""
    return compose(G_j, inverse(G_i))


def transform_grid(
    G_ij: PoseSE3, d_i: NDArray[np.float64], intr: Intrinsics
) -> NDArray[np.float64]:
    """Back-project the pixel grid of frame i with d_i and move it into frame j."""
    grid = pixel_grid(*d_i.shape)
    return act(G_ij, backproject(grid, d_i, intr))


def dense_correspondence(
    G_i: PoseSE3, G_j: PoseSE3, d_i: NDArray[np.float64], intr: Intrinsics
) -> CorrespondenceField:
    d_i = np.asarray(d_i, dtype=np.float64)
    X = transform_grid(relative_pose(G_i, G_j), d_i, intr)
    targets, valid = project(X, intr)
    height, width = d_i.shape
    return CorrespondenceField(
        targets=targets,
        valid=valid,
        in_bounds=valid & in_bounds(targets, height, width),
    )


def induced_flow(
    field: CorrespondenceField, grid: NDArray[np.float64]
) -> NDArray[np.float64]:
    """p_ij - p_i at valid pixels, zero elsewhere."""
    if field.targets.shape != grid.shape:
        raise ValueError(
            f"field {field.targets.shape} and grid {grid.shape} do not match"
        )
    return np.where(field.valid[..., None], field.targets - grid, 0.0)


def mean_flow_of_field(
    field: CorrespondenceField, min_overlap: float = MIN_OVERLAP
) -> float:
    """Mean flow norm over valid pixels, +inf below the overlap threshold."""
    if field.overlap < min_overlap:
        return float("inf")
    grid = pixel_grid(*field.valid.shape)
    flow = induced_flow(field, grid)
    return float(np.mean(np.linalg.norm(flow[field.valid], axis=-1)))


def mean_flow_magnitude(
    G_i: PoseSE3,
    G_j: PoseSE3,
    d_i: NDArray[np.float64],
    intr: Intrinsics,
    min_overlap: float = MIN_OVERLAP,
) -> float:
    """Average flow (pixels) from frame i to j under the given estimates."""
    return mean_flow_of_field(dense_correspondence(G_i, G_j, d_i, intr), min_overlap)
