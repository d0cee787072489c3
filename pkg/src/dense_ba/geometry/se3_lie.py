"""
SE(3) Lie-group arithmetic.

Poses keep their rotation as a unit quaternion in (x, y, z, w) order and a
translation 3-vector. Twists are plain 6-vectors ordered
(translation | rotation). Every update is applied on the left:
``retract(g, xi) = exp(xi) ∘ g``; all Jacobians in the package use the same
local parameterization.
"""

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from dense_ba.exceptions import DegenerateInputError

Twist = NDArray[np.float64]

# Below this angle the Rodrigues coefficients switch to their series forms.
SMALL_ANGLE: float = 1e-8

# log() refuses rotations this close to pi (axis sign becomes ambiguous).
LOG_ANGLE_LIMIT: float = math.pi - 1e-6


def hat(v: ArrayLike) -> NDArray[np.float64]:
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def twist(
    translation: Sequence[float] = (0.0, 0.0, 0.0),
    rotation: Sequence[float] = (0.0, 0.0, 0.0),
) -> Twist:
    """Build a twist from its translational and rotational parts."""
    xi = np.concatenate(
        [np.asarray(translation, dtype=np.float64), np.asarray(rotation, dtype=np.float64)]
    )
    if xi.shape != (6,) or not np.all(np.isfinite(xi)):
        raise DegenerateInputError(f"twist must be 6 finite values, got {xi!r}")
    return xi


def _quat_multiply(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def _quat_to_matrix(q: NDArray[np.float64]) -> NDArray[np.float64]:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def _so3_exp_quat(phi: NDArray[np.float64]) -> NDArray[np.float64]:
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        imag = phi * (0.5 - theta * theta / 48.0)
        real = 1.0 - theta * theta / 8.0
    else:
        imag = phi * (math.sin(0.5 * theta) / theta)
        real = math.cos(0.5 * theta)
    q = np.append(imag, real)
    return q / np.linalg.norm(q)


def left_jacobian(phi: ArrayLike) -> NDArray[np.float64]:
    """SO(3) left Jacobian V(phi), mapping twist translation to pose translation."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        a = 0.5 - theta * theta / 24.0
        b = 1.0 / 6.0 - theta * theta / 120.0
    else:
        s = math.sin(0.5 * theta)
        a = 2.0 * s * s / (theta * theta)
        b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


def left_jacobian_inverse(phi: ArrayLike) -> NDArray[np.float64]:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        half = 0.5 * theta
        c = (1.0 - half / math.tan(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + c * (K @ K)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid-body transform stored as unit quaternion (x, y, z, w) and translation."""

    quat: NDArray[np.float64]
    trans: NDArray[np.float64]

    def __post_init__(self) -> None:
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.trans, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(q))
        if not np.isfinite(norm) or norm < 1e-12 or not np.all(np.isfinite(t)):
            raise DegenerateInputError(f"invalid pose quat={q!r} trans={t!r}")
        q = q / norm
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, rotation: ArrayLike, translation: ArrayLike) -> "PoseSE3":
        quat = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_quat()
        return cls(quat, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "PoseSE3":
        T = np.asarray(matrix, dtype=np.float64)
        return cls.from_rotation(T[:3, :3], T[:3, 3])

    @cached_property
    def rotation(self) -> NDArray[np.float64]:
        return _quat_to_matrix(self.quat)

    def matrix(self) -> NDArray[np.float64]:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.trans
        return T

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def inverse(self) -> "PoseSE3":
        return inverse(self)

    def act(self, X: ArrayLike) -> NDArray[np.float64]:
        return act(self, X)

    def log(self) -> Twist:
        return log(self)

    def __repr__(self) -> str:
        q = np.array2string(self.quat, precision=6)
        t = np.array2string(self.trans, precision=6)
        return f"PoseSE3(quat={q}, trans={t})"


def exp(xi: ArrayLike) -> PoseSE3:
    """Closed-form SE(3) exponential of a (translation | rotation) twist."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    tau, phi = xi[:3], xi[3:]
    return PoseSE3(_so3_exp_quat(phi), left_jacobian(phi) @ tau)


def log(g: PoseSE3) -> Twist:
    """SE(3) logarithm; rejects rotations within 1e-6 rad of pi."""
    q = g.quat if g.quat[3] >= 0.0 else -g.quat
    imag, real = q[:3], q[3]
    n = float(np.linalg.norm(imag))
    theta = 2.0 * math.atan2(n, real)
    if theta >= LOG_ANGLE_LIMIT:
        raise DegenerateInputError(
            f"rotation angle {theta:.9f} rad too close to pi for a unique logarithm"
        )
    if n < SMALL_ANGLE:
        phi = imag * (2.0 / real) * (1.0 - n * n / (3.0 * real * real))
    else:
        phi = imag * (theta / n)
    tau = left_jacobian_inverse(phi) @ g.trans
    return np.concatenate([tau, phi])


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """a ∘ b; the quaternion is renormalized on construction."""
    return PoseSE3(_quat_multiply(a.quat, b.quat), a.rotation @ b.trans + a.trans)


def inverse(g: PoseSE3) -> PoseSE3:
    q_inv = np.array([-g.quat[0], -g.quat[1], -g.quat[2], g.quat[3]])
    return PoseSE3(q_inv, -(g.rotation.T @ g.trans))


def act(g: PoseSE3, X: ArrayLike) -> NDArray[np.float64]:
    """Apply g to homogeneous points of shape (..., 4); W is preserved."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty_like(X)
    out[..., :3] = X[..., :3] @ g.rotation.T + X[..., 3:4] * g.trans
    out[..., 3] = X[..., 3]
    return out


def adjoint(g: PoseSE3) -> NDArray[np.float64]:
    """6x6 adjoint for (translation | rotation) twists: exp(Adj xi) = g exp(xi) g^-1."""
    R = g.rotation
    Adj = np.zeros((6, 6))
    Adj[:3, :3] = R
    Adj[:3, 3:] = hat(g.trans) @ R
    Adj[3:, 3:] = R
    return Adj


def retract(g: PoseSE3, dxi: ArrayLike) -> PoseSE3:
    """Left retraction exp(dxi) ∘ g."""
    return compose(exp(dxi), g)


def interpolate(a: PoseSE3, b: PoseSE3, alpha: float) -> PoseSE3:
    """Geodesic interpolation; alpha=0 gives a and alpha=1 gives b."""
    return retract(a, alpha * log(compose(b, inverse(a))))
