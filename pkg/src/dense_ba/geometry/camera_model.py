"""
Pinhole projection under the inverse-depth parameterization.

Points are homogeneous 4-vectors (X, Y, Z, W). Back-projecting pixel p with
inverse depth d gives ((px - cx)/fx, (py - cy)/fy, 1, d), so W carries the
inverse depth and every rigid transform leaves it untouched. All functions
broadcast over leading dimensions.
"""

from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from dense_ba.exceptions import DegenerateInputError
from dense_ba.geometry.se3_lie import PoseSE3, adjoint

# Minimum transformed Z for a projection to count as valid.
EPS_Z: float = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise DegenerateInputError(
                f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}"
            )

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resized by ``factor`` (0.125 for 1/8 resolution)."""
        return Intrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor
        )

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.fx, self.fy, self.cx, self.cy])


def project(
    X: ArrayLike, intr: Intrinsics
) -> Tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """
    Project homogeneous points to pixels.

    Returns the pixels (..., 2) and a validity mask (...). Points with
    Z <= EPS_Z are marked invalid and their pixels are NaN.

    The first component uses c_x; a printed variant of this formula with
    c_y there is a typo.
    """
    X = np.asarray(X, dtype=np.float64)
    Z = X[..., 2]
    valid = Z > EPS_Z
    Z_safe = np.where(valid, Z, 1.0)
    p = np.empty(X.shape[:-1] + (2,))
    p[..., 0] = intr.fx * X[..., 0] / Z_safe + intr.cx
    p[..., 1] = intr.fy * X[..., 1] / Z_safe + intr.cy
    p[~valid] = np.nan
    return p, valid


def backproject(p: ArrayLike, d: ArrayLike, intr: Intrinsics) -> NDArray[np.float64]:
    """Inverse projection of pixels (..., 2) with inverse depth d (...) > 0."""
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise DegenerateInputError("inverse depth must be strictly positive")
    d = np.broadcast_to(d, p.shape[:-1])
    X = np.empty(p.shape[:-1] + (4,))
    X[..., 0] = (p[..., 0] - intr.cx) / intr.fx
    X[..., 1] = (p[..., 1] - intr.cy) / intr.fy
    X[..., 2] = 1.0
    X[..., 3] = d
    return X


def jac_project(X: ArrayLike, intr: Intrinsics) -> NDArray[np.float64]:
    """d(pixel)/d(X) as (..., 2, 4); entries are zeroed where Z <= EPS_Z."""
    X = np.asarray(X, dtype=np.float64)
    Z = X[..., 2]
    valid = Z > EPS_Z
    inv_z = np.where(valid, 1.0 / np.where(valid, Z, 1.0), 0.0)
    J = np.zeros(X.shape[:-1] + (2, 4))
    J[..., 0, 0] = intr.fx * inv_z
    J[..., 0, 2] = -intr.fx * X[..., 0] * inv_z * inv_z
    J[..., 1, 1] = intr.fy * inv_z
    J[..., 1, 2] = -intr.fy * X[..., 1] * inv_z * inv_z
    return J


def point_generator(X: ArrayLike) -> NDArray[np.float64]:
    """d(exp(xi) X)/d(xi) at xi = 0, shape (..., 4, 6)."""
    X = np.asarray(X, dtype=np.float64)
    x, y, z, w = X[..., 0], X[..., 1], X[..., 2], X[..., 3]
    G = np.zeros(X.shape[:-1] + (4, 6))
    G[..., 0, 0] = w
    G[..., 1, 1] = w
    G[..., 2, 2] = w
    G[..., 0, 4] = z
    G[..., 0, 5] = -y
    G[..., 1, 3] = -z
    G[..., 1, 5] = x
    G[..., 2, 3] = y
    G[..., 2, 4] = -x
    return G


def jac_point_wrt_pose(
    X_transformed: ArrayLike, side: Literal["i", "j"], G_ij: PoseSE3
) -> NDArray[np.float64]:
    """
    d(X')/d(xi) for X' = G_j G_i^-1 X, shape (..., 4, 6).

    Side j perturbs G_j on the left; side i perturbs G_i, which reaches X'
    through G_i^-1 and is moved across G_ij with its adjoint.
    """
    G = point_generator(X_transformed)
    if side == "j":
        return G
    if side == "i":
        return -(G @ adjoint(G_ij))
    raise DegenerateInputError(f"side must be 'i' or 'j', got {side!r}")


def jac_pixel_wrt_depth(
    X_transformed: ArrayLike, G_ij: PoseSE3, intr: Intrinsics
) -> NDArray[np.float64]:
    """d(pixel)/d(d_i) as (..., 2); the point moves along (t_x, t_y, t_z, 1)."""
    dX = np.append(G_ij.trans, 1.0)
    return jac_project(X_transformed, intr) @ dX


def pixel_grid(height: int, width: int) -> NDArray[np.float64]:
    """Row-major lattice of (x, y) pixel coordinates, shape (H, W, 2)."""
    ys, xs = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    return np.stack([xs, ys], axis=-1)


def in_bounds(p: NDArray[np.float64], height: int, width: int) -> NDArray[np.bool_]:
    """Pixels inside [0, W-1] x [0, H-1]; NaN pixels are out of bounds."""
    with np.errstate(invalid="ignore"):
        return (
            (p[..., 0] >= 0.0)
            & (p[..., 0] <= width - 1)
            & (p[..., 1] >= 0.0)
            & (p[..., 1] <= height - 1)
        )
