"""
Dense bundle adjustment over a frame graph.

Each edge (i, j) carries revised correspondence targets for every pixel of
frame i. The objective sums confidence-weighted squared reprojection errors
of frame i's pixels, back-projected with frame i's inverse depth and moved
into frame j. Gauss-Newton normal equations are assembled per edge and
solved by eliminating the (diagonal) depth block with a Schur complement.
"""

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from dense_ba.config.logger import logger
from dense_ba.exceptions import DegenerateInputError, IllConditionedSystemError
from dense_ba.geometry.camera_model import (
    Intrinsics,
    jac_pixel_wrt_depth,
    jac_point_wrt_pose,
    jac_project,
    project,
)
from dense_ba.geometry.correspondence import relative_pose, transform_grid
from dense_ba.geometry.se3_lie import PoseSE3, Twist, adjoint, compose, retract

DEFAULT_DAMPING: float = 1e-4
EPS_C: float = 1e-8
DEPTH_MIN: float = 1e-4
DEPTH_MAX: float = 10.0
# Applied to both lambda and the pose diagonal when a factorization fails.
RETRY_DAMPING_SCALE: float = 10.0


@dataclass(frozen=True, eq=False)
class EdgeObservation:
    """Revised targets p*_ij and per-coordinate confidences for one edge."""

    edge: Tuple[int, int]
    target: NDArray[np.float64]
    confidence: NDArray[np.float64]
    valid: NDArray[np.bool_]
    outliers: Optional[NDArray[np.bool_]] = None

    def __post_init__(self) -> None:
        if self.edge[0] == self.edge[1]:
            raise DegenerateInputError(f"self-edge {self.edge}")
        conf = np.asarray(self.confidence, dtype=np.float64)
        if conf.shape != np.shape(self.target):
            raise DegenerateInputError(
                f"confidence {conf.shape} does not match target {np.shape(self.target)}"
            )
        if np.any(~np.isfinite(conf)) or np.any(conf < 0):
            raise DegenerateInputError("confidence must be finite and non-negative")
        target = np.asarray(self.target, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if np.any(~np.isfinite(target[valid])):
            raise DegenerateInputError("target must be finite where valid")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "valid", valid)


@dataclass(frozen=True, eq=False)
class DepthPrior:
    """Sensor inverse depth with a scalar weight; invalid pixels carry no weight."""

    depth: NDArray[np.float64]
    weight: float
    valid: NDArray[np.bool_]


@dataclass(frozen=True, eq=False)
class RigBinding:
    """Left/right frame pairs sharing one pose variable: right = extrinsic ∘ left."""

    pairs: Tuple[Tuple[int, int], ...]
    extrinsic: PoseSE3


@dataclass(frozen=True, eq=False)
class BAProblem:
    poses: Tuple[PoseSE3, ...]
    depths: Tuple[NDArray[np.float64], ...]
    intrinsics: Intrinsics
    observations: Tuple[EdgeObservation, ...]
    fixed_poses: FrozenSet[int]
    damping: Optional[Tuple[NDArray[np.float64], ...]] = None
    depth_priors: Mapping[int, DepthPrior] = field(default_factory=dict)
    rig: Optional[RigBinding] = None
    depth_bounds: Tuple[float, float] = (DEPTH_MIN, DEPTH_MAX)

    def __post_init__(self) -> None:
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(
            self, "depths", tuple(np.asarray(d, dtype=np.float64) for d in self.depths)
        )
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "fixed_poses", frozenset(self.fixed_poses))

        n = len(self.poses)
        if len(self.depths) != n or n == 0:
            raise DegenerateInputError(
                f"{n} poses but {len(self.depths)} depth maps"
            )
        shape = self.depths[0].shape
        if any(d.shape != shape for d in self.depths):
            raise DegenerateInputError("all depth maps must share one shape")
        if not self.fixed_poses:
            raise DegenerateInputError("at least one pose must be fixed (gauge)")
        if any(f < 0 or f >= n for f in self.fixed_poses):
            raise DegenerateInputError(f"fixed pose index out of range: {self.fixed_poses}")
        for obs in self.observations:
            i, j = obs.edge
            if not (0 <= i < n and 0 <= j < n):
                raise DegenerateInputError(f"edge {obs.edge} references a missing frame")
            if obs.target.shape[:2] != shape:
                raise DegenerateInputError(f"edge {obs.edge} has the wrong shape")
        if self.damping is not None:
            damping = tuple(np.asarray(lam, dtype=np.float64) for lam in self.damping)
            if len(damping) != n or any(lam.shape != shape for lam in damping):
                raise DegenerateInputError("damping needs one HxW map per frame")
            if any(np.any(~(lam > 0)) for lam in damping):
                raise DegenerateInputError("damping must be strictly positive")
            object.__setattr__(self, "damping", damping)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def depth_shape(self) -> Tuple[int, int]:
        return self.depths[0].shape

    def replace(self, **changes) -> "BAProblem":
        return dataclasses.replace(self, **changes)

    def damping_map(self, frame: int) -> NDArray[np.float64]:
        if self.damping is None:
            return np.full(self.depth_shape, DEFAULT_DAMPING)
        return self.damping[frame]


@dataclass(frozen=True, eq=False)
class LinearSystemBlocks:
    """
    Normal equations [B E; E^T diag(C)] [dxi; dd] = [v; rhs_d].

    ``pose_frames`` names the frame that owns each 6-dof pose variable and
    depth columns are ordered frame by frame in row-major pixel order.
    """

    B: NDArray[np.float64]
    E: NDArray[np.float64]
    C: NDArray[np.float64]
    v: NDArray[np.float64]
    rhs_d: NDArray[np.float64]
    pose_frames: Tuple[int, ...]
    depth_shape: Tuple[int, int, int]
    cost: float

    @property
    def n_pose_vars(self) -> int:
        return len(self.pose_frames)


@dataclass(frozen=True, eq=False)
class SolverUpdates:
    pose_updates: List[Twist]
    depth_updates: Optional[List[NDArray[np.float64]]]


@dataclass(frozen=True, eq=False)
class _PoseVariables:
    frames: Tuple[int, ...]
    frame_var: Tuple[Optional[int], ...]
    frame_map: Tuple[Optional[NDArray[np.float64]], ...]
    right_of: Dict[int, int]


def _effective_fixed(problem: BAProblem) -> FrozenSet[int]:
    fixed = set(problem.fixed_poses)
    if problem.rig is not None:
        for left, right in problem.rig.pairs:
            if left in fixed or right in fixed:
                fixed.update((left, right))
    return frozenset(fixed)


def _pose_variables(problem: BAProblem) -> _PoseVariables:
    fixed = _effective_fixed(problem)
    right_of: Dict[int, int] = {}
    rig_adj = None
    if problem.rig is not None:
        right_of = {right: left for left, right in problem.rig.pairs}
        rig_adj = adjoint(problem.rig.extrinsic)

    frames = tuple(
        f for f in range(problem.n_frames) if f not in fixed and f not in right_of
    )
    index = {f: k for k, f in enumerate(frames)}
    frame_var: List[Optional[int]] = [None] * problem.n_frames
    frame_map: List[Optional[NDArray[np.float64]]] = [None] * problem.n_frames
    for f in range(problem.n_frames):
        if f in fixed:
            continue
        if f in right_of:
            frame_var[f] = index[right_of[f]]
            frame_map[f] = rig_adj
        else:
            frame_var[f] = index[f]
    return _PoseVariables(frames, tuple(frame_var), tuple(frame_map), right_of)


@dataclass(frozen=True, eq=False)
class _EdgeTerms:
    residual: NDArray[np.float64]
    weight: NDArray[np.float64]
    cost: float
    J_i: Optional[NDArray[np.float64]] = None
    J_j: Optional[NDArray[np.float64]] = None
    J_d: Optional[NDArray[np.float64]] = None


def _edge_terms(
    problem: BAProblem, obs: EdgeObservation, with_jacobians: bool
) -> _EdgeTerms:
    i, j = obs.edge
    intr = problem.intrinsics
    G_ij = relative_pose(problem.poses[i], problem.poses[j])
    X = transform_grid(G_ij, problem.depths[i], intr)
    p, in_front = project(X, intr)
    mask = in_front & obs.valid
    r = np.where(mask[..., None], obs.target - p, 0.0)
    w = np.where(mask[..., None], obs.confidence, 0.0)
    cost = float(np.sum(w * r * r))
    if not with_jacobians:
        return _EdgeTerms(r, w, cost)

    Jp = jac_project(X, intr)
    m4 = mask[..., None, None]
    J_i = np.where(m4, Jp @ jac_point_wrt_pose(X, "i", G_ij), 0.0)
    J_j = np.where(m4, Jp @ jac_point_wrt_pose(X, "j", G_ij), 0.0)
    J_d = np.where(mask[..., None], jac_pixel_wrt_depth(X, G_ij, intr), 0.0)
    return _EdgeTerms(r, w, cost, J_i, J_j, J_d)


def _map_edges(
    problem: BAProblem, with_jacobians: bool, max_workers: int
) -> List[_EdgeTerms]:
    def work(obs: EdgeObservation) -> _EdgeTerms:
        return _edge_terms(problem, obs, with_jacobians)

    if max_workers <= 1 or len(problem.observations) < 2:
        return [work(obs) for obs in problem.observations]
    # map() preserves edge order, so accumulation below stays deterministic
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(work, problem.observations))


def _prior_terms(
    problem: BAProblem, frame: int
) -> Optional[Tuple[NDArray[np.float64], NDArray[np.float64], float]]:
    prior = problem.depth_priors.get(frame)
    if prior is None or prior.weight == 0.0:
        return None
    d = problem.depths[frame]
    valid = prior.valid
    weight = np.where(valid, prior.weight, 0.0)
    diff = np.where(valid, prior.depth - d, 0.0)
    return weight, weight * diff, float(np.sum(weight * diff * diff))


def build_residuals(
    problem: BAProblem, max_workers: int = 1
) -> Tuple[List[NDArray[np.float64]], float]:
    """Per-edge residual fields (H, W, 2) and the total weighted cost."""
    terms = _map_edges(problem, with_jacobians=False, max_workers=max_workers)
    cost = sum(t.cost for t in terms)
    for frame in range(problem.n_frames):
        prior = _prior_terms(problem, frame)
        if prior is not None:
            cost += prior[2]
    return [t.residual for t in terms], float(cost)


def linearize(
    problem: BAProblem,
    damping_scale: float = 1.0,
    pose_damping: float = 0.0,
    structure: bool = True,
    max_workers: int = 1,
) -> LinearSystemBlocks:
    """
    Assemble the Gauss-Newton normal equations at the current estimate.

    With ``structure=False`` only the pose blocks are built (motion-only BA);
    E, C and rhs_d are then empty.
    """
    variables = _pose_variables(problem)
    m = len(variables.frames)
    n_frames = problem.n_frames
    height, width = problem.depth_shape
    n_pix = height * width
    n_depth = n_frames * n_pix if structure else 0

    B = np.zeros((6 * m, 6 * m))
    E = np.zeros((6 * m, n_depth))
    C = np.zeros(n_depth)
    v = np.zeros(6 * m)
    rhs_d = np.zeros(n_depth)
    cost = 0.0

    terms = _map_edges(problem, with_jacobians=True, max_workers=max_workers)
    for obs, t in zip(problem.observations, terms):
        cost += t.cost
        i, j = obs.edge
        w = t.weight.reshape(n_pix, 2)
        r = t.residual.reshape(n_pix, 2)
        J_d = t.J_d.reshape(n_pix, 2)

        contributions: Dict[int, NDArray[np.float64]] = {}
        for frame, J in ((i, t.J_i), (j, t.J_j)):
            var = variables.frame_var[frame]
            if var is None:
                continue
            J = J.reshape(n_pix, 2, 6)
            if variables.frame_map[frame] is not None:
                J = J @ variables.frame_map[frame]
            contributions[var] = contributions[var] + J if var in contributions else J

        cols = slice(i * n_pix, (i + 1) * n_pix)
        for a, J_a in contributions.items():
            WJ_a = J_a * w[..., None]
            rows = slice(6 * a, 6 * a + 6)
            v[rows] += np.einsum("pki,pk->i", WJ_a, r)
            if structure:
                E[rows, cols] += np.einsum("pki,pk->ip", WJ_a, J_d)
            for b, J_b in contributions.items():
                B[rows, 6 * b : 6 * b + 6] += np.einsum("pki,pkj->ij", WJ_a, J_b)

        if structure:
            C[cols] += np.sum(w * J_d * J_d, axis=-1)
            rhs_d[cols] += np.sum(w * J_d * r, axis=-1)

    for frame in range(n_frames):
        prior = _prior_terms(problem, frame)
        if prior is not None:
            cost += prior[2]
        if not structure:
            continue
        cols = slice(frame * n_pix, (frame + 1) * n_pix)
        C[cols] += damping_scale * problem.damping_map(frame).ravel() + EPS_C
        if prior is not None:
            C[cols] += prior[0].ravel()
            rhs_d[cols] += prior[1].ravel()

    B = 0.5 * (B + B.T)
    if pose_damping > 0.0:
        B += pose_damping * np.eye(6 * m)

    return LinearSystemBlocks(
        B=B,
        E=E,
        C=C,
        v=v,
        rhs_d=rhs_d,
        pose_frames=variables.frames,
        depth_shape=(n_frames, height, width) if structure else (0, height, width),
        cost=float(cost),
    )


def reduced_pose_system(
    blocks: LinearSystemBlocks,
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """S = B - E C^-1 E^T and y = v - E C^-1 rhs_d."""
    if blocks.E.shape[1] == 0:
        return blocks.B, blocks.v
    EC = blocks.E / blocks.C
    S = blocks.B - EC @ blocks.E.T
    y = blocks.v - EC @ blocks.rhs_d
    return 0.5 * (S + S.T), y


def _cholesky_solve(S: NDArray[np.float64], y: NDArray[np.float64]) -> NDArray[np.float64]:
    try:
        factor = cho_factor(S, lower=False, check_finite=True)
    except (LinAlgError, ValueError) as e:
        with np.errstate(all="ignore"):
            cond = float(np.linalg.cond(S)) if np.all(np.isfinite(S)) else float("inf")
        raise IllConditionedSystemError(
            f"reduced pose system is not positive definite: {e}", cond, S.shape[0]
        ) from e
    return cho_solve(factor, y)


def schur_solve(blocks: LinearSystemBlocks) -> SolverUpdates:
    """Eliminate depths, solve the reduced pose system, back-substitute depths."""
    m = blocks.n_pose_vars
    if m == 0:
        dxi = np.zeros(0)
    else:
        S, y = reduced_pose_system(blocks)
        dxi = _cholesky_solve(S, y)

    depth_updates = None
    n_frames, height, width = blocks.depth_shape
    if n_frames > 0:
        dd = (blocks.rhs_d - blocks.E.T @ dxi) / blocks.C
        depth_updates = list(dd.reshape(n_frames, height, width))
    return SolverUpdates(
        pose_updates=[dxi[6 * k : 6 * k + 6] for k in range(m)],
        depth_updates=depth_updates,
    )


def apply_updates(problem: BAProblem, updates: SolverUpdates) -> BAProblem:
    """Retract free poses, add depth increments and clamp; fixed poses stay put."""
    variables = _pose_variables(problem)
    if len(updates.pose_updates) != len(variables.frames):
        raise DegenerateInputError(
            f"{len(updates.pose_updates)} pose updates for {len(variables.frames)} variables"
        )
    poses = list(problem.poses)
    for frame, dxi in zip(variables.frames, updates.pose_updates):
        poses[frame] = retract(poses[frame], dxi)
    if problem.rig is not None:
        for left, right in problem.rig.pairs:
            if variables.frame_var[right] is not None:
                poses[right] = compose(problem.rig.extrinsic, poses[left])

    depths = problem.depths
    if updates.depth_updates is not None:
        lo, hi = problem.depth_bounds
        depths = tuple(
            np.clip(d + dd, lo, hi) for d, dd in zip(problem.depths, updates.depth_updates)
        )
    return problem.replace(poses=tuple(poses), depths=depths)


def _solve_with_retry(
    problem: BAProblem, blocks: LinearSystemBlocks, structure: bool, max_workers: int
) -> SolverUpdates:
    try:
        return _solve(blocks, structure)
    except IllConditionedSystemError as e:
        logger.warning(f"{e}; retrying with damping x{RETRY_DAMPING_SCALE:g}")
    blocks = linearize(
        problem,
        damping_scale=RETRY_DAMPING_SCALE,
        pose_damping=RETRY_DAMPING_SCALE * DEFAULT_DAMPING,
        structure=structure,
        max_workers=max_workers,
    )
    return _solve(blocks, structure)


def _solve(blocks: LinearSystemBlocks, structure: bool) -> SolverUpdates:
    if structure:
        return schur_solve(blocks)
    if blocks.n_pose_vars == 0:
        return SolverUpdates([], None)
    dxi = _cholesky_solve(blocks.B, blocks.v)
    return SolverUpdates([dxi[6 * k : 6 * k + 6] for k in range(blocks.n_pose_vars)], None)


def dba_iterate(
    problem: BAProblem, n_iters: int = 10, max_workers: int = 1
) -> Tuple[BAProblem, List[float]]:
    """
    Run ``n_iters`` damped Gauss-Newton steps.

    Returns the updated problem and the cost trace: the cost before every
    iteration followed by the final cost.
    """
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    trace: List[float] = []
    for it in range(n_iters):
        blocks = linearize(problem, max_workers=max_workers)
        trace.append(blocks.cost)
        updates = _solve_with_retry(problem, blocks, True, max_workers)
        problem = apply_updates(problem, updates)
        logger.debug(f"DBA iteration {it + 1}/{n_iters}: cost {blocks.cost:.6e}")
    trace.append(build_residuals(problem, max_workers=max_workers)[1])
    return problem, trace


def motion_only_ba(
    problem: BAProblem, n_iters: int = 10, max_workers: int = 1
) -> Tuple[BAProblem, List[float]]:
    """Gauss-Newton on free poses only (B dxi = v); depths are constants."""
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    trace: List[float] = []
    for _ in range(n_iters):
        blocks = linearize(problem, structure=False, max_workers=max_workers)
        trace.append(blocks.cost)
        updates = _solve_with_retry(problem, blocks, False, max_workers)
        problem = apply_updates(problem, updates)
    trace.append(build_residuals(problem, max_workers=max_workers)[1])
    return problem, trace


def add_depth_prior(
    problem: BAProblem,
    frame: int,
    sensor_depth: NDArray[np.float64],
    weight: float,
) -> BAProblem:
    """
    Penalize weight * (d - d_sensor)^2 per pixel of ``frame``.

    Pixels whose sensor value is zero or non-finite are missing observations
    and get no weight.
    """
    if weight < 0:
        raise DegenerateInputError(f"prior weight must be >= 0, got {weight}")
    if not 0 <= frame < problem.n_frames:
        raise DegenerateInputError(f"frame {frame} is not in the problem")
    sensor = np.asarray(sensor_depth, dtype=np.float64)
    if sensor.shape != problem.depth_shape:
        raise DegenerateInputError(
            f"sensor depth {sensor.shape} does not match {problem.depth_shape}"
        )
    valid = np.isfinite(sensor) & (sensor > 0)
    priors = dict(problem.depth_priors)
    priors[frame] = DepthPrior(
        depth=np.where(valid, sensor, 0.0), weight=float(weight), valid=valid
    )
    return problem.replace(depth_priors=priors)


def bind_rig(
    problem: BAProblem,
    pairs: Sequence[Tuple[int, int]],
    extrinsic: PoseSE3,
) -> BAProblem:
    """Tie each right frame to its left frame through a fixed extrinsic."""
    seen: set[int] = set()
    for left, right in pairs:
        for frame in (left, right):
            if frame in seen or not 0 <= frame < problem.n_frames:
                raise DegenerateInputError(f"rig pairs overlap or are out of range: {pairs}")
            seen.add(frame)
        if left == right:
            raise DegenerateInputError(f"rig pair ({left}, {right}) is degenerate")
    poses = list(problem.poses)
    for left, right in pairs:
        poses[right] = compose(extrinsic, poses[left])
    rig = RigBinding(pairs=tuple((int(l), int(r)) for l, r in pairs), extrinsic=extrinsic)
    return problem.replace(poses=tuple(poses), rig=rig)

