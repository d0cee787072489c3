"""
SLAM orchestration on top of the dense bundle adjustment solver.

Frames are collected until enough have moved apart, then jointly
initialized. After that every new frame is tracked by a local bundle
adjustment over a window of recent keyframes, and a global bundle
adjustment over a freshly sampled frame graph runs periodically
(single-threaded profile) or continuously on a snapshot (two-worker
profile). Frames that never became keyframes get their poses back at the
end with motion-only bundle adjustment against covisible keyframes.
"""

import bisect
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from numpy.typing import NDArray

from dense_ba.config.logger import logger
from dense_ba.exceptions import (
    DegenerateInputError,
    DivergenceError,
    NoCovisibleKeyframeError,
    TimestampOrderError,
)
from dense_ba.evaluation.eval_io import Trajectory
from dense_ba.geometry.correspondence import MIN_OVERLAP, dense_correspondence
from dense_ba.geometry.se3_lie import PoseSE3, compose, interpolate, inverse
from dense_ba.models.config_model import Mode, SystemConfig
from dense_ba.optim.dba_solver import (
    BAProblem,
    add_depth_prior,
    bind_rig,
    dba_iterate,
    motion_only_ba,
)
from dense_ba.slam.flow_oracle import FlowOracle, NodeKey, convex_upsample
from dense_ba.slam.frame_graph import (
    CameraState,
    FrameGraph,
    Keyframe,
    build_distance_matrix,
    keyframe_removal,
    proximity_edges,
    sample_backend_edges,
)

# Costs below this are treated as converged when checking for divergence.
_COST_FLOOR: float = 1e-12


class Phase(str, Enum):
    COLLECTING = "collecting"
    INITIALIZED = "initialized"
    TRACKING = "tracking"


_PHASE_ORDER = (Phase.COLLECTING, Phase.INITIALIZED, Phase.TRACKING)


@dataclass
class FrameInput:
    """
    One incoming frame.

    Pose and depth guesses seed frames kept before initialization; tracked
    frames are seeded by the motion model instead. ``sensor_depth`` is only
    read in RGB-D mode (zeros mark missing pixels).
    """

    frame_id: int
    timestamp: float
    pose_guess: Optional[PoseSE3] = None
    depth_guess: Optional[NDArray[np.float64]] = None
    right_depth_guess: Optional[NDArray[np.float64]] = None
    sensor_depth: Optional[NDArray[np.float64]] = None


@dataclass
class NonKeyframe:
    frame_id: int
    timestamp: float
    pose: Optional[PoseSE3] = None


@dataclass
class SystemState:
    graph: FrameGraph
    config: SystemConfig
    phase: Phase = Phase.COLLECTING
    non_keyframes: List[NonKeyframe] = field(default_factory=list)
    # frame ids whose poses stay fixed from initialization on
    gauge: Tuple[int, ...] = ()
    cost_traces: List[Tuple[str, List[float]]] = field(default_factory=list)
    backend_edge_counts: List[int] = field(default_factory=list)
    last_timestamp: Optional[float] = None
    keyframes_since_backend: int = 0

    def advance(self, phase: Phase) -> None:
        if _PHASE_ORDER.index(phase) < _PHASE_ORDER.index(self.phase):
            raise RuntimeError(f"cannot go back from {self.phase.value} to {phase.value}")
        if phase != self.phase:
            logger.info(f"Phase: {self.phase.value} -> {phase.value}")
        self.phase = phase


def constant_velocity_seed(G_prev: PoseSE3, G_last: PoseSE3) -> PoseSE3:
    """(G_last ∘ G_prev^-1) ∘ G_last: repeat the last relative motion."""
    return compose(compose(G_last, inverse(G_prev)), G_last)


class SlamSystem:
    def __init__(
        self,
        config: SystemConfig,
        oracle: FlowOracle,
        extrinsic: Optional[PoseSE3] = None,
    ):
        self.config = config
        self.oracle = oracle
        self.stereo = config.mode == Mode.STEREO
        self.rgbd = config.mode == Mode.RGBD
        if self.stereo and extrinsic is None:
            if not oracle.scene.has_stereo:
                raise DegenerateInputError("stereo mode needs a scene with a right camera")
            extrinsic = oracle.scene.extrinsic
        self.extrinsic = extrinsic
        self.state = SystemState(
            graph=FrameGraph(oracle.intrinsics, oracle.flow_scale), config=config
        )
        self._executor: Optional[ThreadPoolExecutor] = None
        self._pending: Optional[Tuple[Future, Dict[int, int]]] = None
        self._finalized = False

    @property
    def cameras(self) -> Tuple[int, ...]:
        return (0, 1) if self.stereo else (0,)

    # ------------------------------------------------------------------ ingest

    def ingest_frame(self, frame: FrameInput) -> Phase:
        state = self.state
        if state.last_timestamp is not None and frame.timestamp <= state.last_timestamp:
            raise TimestampOrderError(
                f"frame {frame.frame_id} at t={frame.timestamp} arrives after t={state.last_timestamp}"
            )
        if self._finalized:
            raise RuntimeError("system already finalized")
        state.last_timestamp = frame.timestamp
        if state.phase == Phase.COLLECTING:
            self._collect(frame)
        else:
            self.frontend_track(frame)
        return state.phase

    def _collect(self, frame: FrameInput) -> None:
        graph = self.state.graph
        if len(graph) == 0:
            pose = frame.pose_guess if frame.pose_guess is not None else PoseSE3.identity()
            depth = frame.depth_guess
            if depth is None:
                depth = np.ones(self.oracle.scene.coarse_shape)
            self._add_keyframe(frame, pose, depth)
            return

        last = graph.keyframes[-1]
        if not self._moved_enough(last, frame):
            return
        pose = frame.pose_guess if frame.pose_guess is not None else last.pose
        depth = frame.depth_guess if frame.depth_guess is not None else last.depth.copy()
        self._add_keyframe(frame, pose, depth)
        if len(graph) >= self.config.init_frame_count:
            self.initialize()

    def _moved_enough(self, last: Keyframe, frame: FrameInput) -> bool:
        flow = self.oracle.motion_flow((last.frame_id, 0), (frame.frame_id, 0))
        if flow > self.config.init_flow_threshold:
            return True
        logger.debug(f"Frame {frame.frame_id}: flow {flow:.2f}px, not a keyframe")
        self.state.non_keyframes.append(NonKeyframe(frame.frame_id, frame.timestamp))
        return False

    def _add_keyframe(
        self, frame: FrameInput, pose: PoseSE3, depth: NDArray[np.float64]
    ) -> Keyframe:
        depth = np.array(depth, dtype=np.float64)
        right = None
        if self.stereo:
            right_depth = (
                frame.right_depth_guess if frame.right_depth_guess is not None else depth
            )
            right = CameraState(compose(self.extrinsic, pose), np.array(right_depth, dtype=np.float64))
        sensor = frame.sensor_depth if self.rgbd else None
        keyframe = Keyframe(
            frame_id=frame.frame_id,
            timestamp=frame.timestamp,
            pose=pose,
            depth=depth,
            right=right,
            sensor_depth=None if sensor is None else np.asarray(sensor, dtype=np.float64),
        )
        self.state.graph.add_keyframe(keyframe)
        logger.info(f"Keyframe {frame.frame_id} added ({len(self.state.graph)} total)")
        return keyframe

    # ------------------------------------------------------------ optimization

    def _build_problem(
        self,
        graph: FrameGraph,
        frame_ids: Sequence[int],
        edges: Iterable[Tuple[int, int]],
        fixed_ids: Set[int],
    ) -> Tuple[BAProblem, List[NodeKey]]:
        nodes: List[NodeKey] = [(fid, cam) for fid in frame_ids for cam in self.cameras]
        index = {node: k for k, node in enumerate(nodes)}
        poses, depths = [], []
        for fid, cam in nodes:
            kf = graph.get(fid)
            camera = kf.right if cam == 1 else CameraState(kf.pose, kf.depth)
            poses.append(camera.pose)
            depths.append(camera.depth)

        observations = []
        for i, j in edges:
            for cam in self.cameras:
                src, dst = (i, cam), (j, cam)
                observations.append(self.oracle.observation(src, dst, (index[src], index[dst])))
        if self.stereo:
            for fid in frame_ids:
                left, right = index[(fid, 0)], index[(fid, 1)]
                observations.append(self.oracle.observation((fid, 0), (fid, 1), (left, right)))
                observations.append(self.oracle.observation((fid, 1), (fid, 0), (right, left)))

        damping = self.oracle.damping_map()
        problem = BAProblem(
            poses=tuple(poses),
            depths=tuple(depths),
            intrinsics=self.oracle.intrinsics,
            observations=tuple(observations),
            fixed_poses=frozenset(index[(fid, 0)] for fid in fixed_ids),
            damping=tuple(damping for _ in nodes),
        )
        if self.stereo:
            pairs = [(index[(fid, 0)], index[(fid, 1)]) for fid in frame_ids]
            problem = bind_rig(problem, pairs, self.extrinsic)
        if self.rgbd:
            for fid in frame_ids:
                sensor = graph.get(fid).sensor_depth
                if sensor is not None:
                    problem = add_depth_prior(
                        problem, index[(fid, 0)], sensor, self.config.depth_weight
                    )
        return problem, nodes

    def _write_back(
        self,
        graph: FrameGraph,
        problem: BAProblem,
        nodes: Sequence[NodeKey],
        fixed_ids: Set[int],
    ) -> None:
        touched: Set[int] = set()
        for k, (fid, cam) in enumerate(nodes):
            kf = graph.get(fid)
            pose = kf.pose if cam == 0 else kf.right.pose
            if fid not in fixed_ids:
                pose = problem.poses[k]
            if cam == 0:
                kf.pose, kf.depth = pose, problem.depths[k]
            else:
                kf.right = CameraState(pose, problem.depths[k])
            touched.add(fid)
        for fid in touched:
            graph.get(fid).version += 1

    def _solve_window(
        self,
        graph: FrameGraph,
        frame_ids: Sequence[int],
        edges: Sequence[Tuple[int, int]],
        fixed_ids: Set[int],
        n_iters: int,
    ) -> List[float]:
        problem, nodes = self._build_problem(graph, frame_ids, edges, fixed_ids)
        problem, trace = dba_iterate(problem, n_iters)
        self._write_back(graph, problem, nodes, fixed_ids)
        return trace

    # ---------------------------------------------------------- initialization

    def initialize(self) -> None:
        state, cfg = self.state, self.config
        graph = state.graph
        if len(graph) < 2:
            raise DegenerateInputError("initialization needs at least two keyframes")
        ids = graph.ids
        for a in range(len(ids)):
            for b in range(a + 1, min(a + cfg.init_edge_window + 1, len(ids))):
                graph.add_bidirectional(ids[a], ids[b])
        state.gauge = tuple(ids[:1] if self.stereo else ids[:2])
        if not self.stereo:
            g0, g1 = (graph.get(f).pose for f in state.gauge)
            if np.linalg.norm(inverse(g0).trans - inverse(g1).trans) < 1e-9:
                logger.warning("Gauge frames coincide; monocular scale is unobservable")

        logger.info(f"Initializing with {len(ids)} keyframes and {len(graph.edges)} edges")
        trace = self._solve_window(graph, ids, graph.sorted_edges(), set(state.gauge), cfg.init_iters)
        state.cost_traces.append(("init", trace))
        if trace[-1] > cfg.divergence_factor * trace[0] + _COST_FLOOR:
            logger.error(f"Initialization diverged: cost {trace[0]:.3e} -> {trace[-1]:.3e}")
            raise DivergenceError(
                f"initialization cost grew from {trace[0]:.3e} to {trace[-1]:.3e}", trace
            )
        state.advance(Phase.INITIALIZED)

    # ---------------------------------------------------------------- frontend

    def frontend_track(self, frame: FrameInput) -> None:
        state, cfg = self.state, self.config
        graph = state.graph
        if state.phase == Phase.COLLECTING:
            raise RuntimeError("frontend tracking before initialization")
        self._collect_backend(wait=False)

        last = graph.keyframes[-1]
        if not self._moved_enough(last, frame):
            return
        prev = graph.keyframes[-2]
        pose = constant_velocity_seed(prev.pose, last.pose)
        depth = np.full(last.depth.shape, float(np.mean(last.depth)))
        self._add_keyframe(frame, pose, depth)
        proximity_edges(graph, frame.frame_id, k=cfg.frontend_neighbors)

        window = graph.ids[-cfg.frontend_window :]
        window_set = set(window)
        nodes_set = set(window)
        for fid in window:
            nodes_set |= graph.neighbors(fid)
        nodes = sorted(nodes_set, key=graph.index_of)
        fixed = (nodes_set - window_set) | (set(state.gauge) & nodes_set)
        need = 1 if self.stereo else 2
        for fid in nodes:
            if len(fixed) >= need:
                break
            fixed.add(fid)
        edges = [
            (i, j)
            for i, j in graph.sorted_edges()
            if i in nodes_set and j in nodes_set and (i in window_set or j in window_set)
        ]
        trace = self._solve_window(graph, nodes, edges, fixed, cfg.frontend_iters)
        state.cost_traces.append(("frontend", trace))
        state.advance(Phase.TRACKING)
        state.keyframes_since_backend += 1

        before = {kf.frame_id: kf for kf in graph.keyframes}
        victim = keyframe_removal(graph, cfg.removal_threshold, cfg.max_keyframes, state.gauge)
        if victim is not None:
            removed = before[victim]
            state.non_keyframes.append(NonKeyframe(removed.frame_id, removed.timestamp, removed.pose))
        self._schedule_backend()

    # ----------------------------------------------------------------- backend

    def _schedule_backend(self) -> None:
        cfg = self.config
        if not cfg.backend_enabled:
            return
        if cfg.workers > 1:
            self._start_backend_worker()
        elif self.state.keyframes_since_backend >= cfg.backend_interval:
            self.backend_global_ba()

    def _run_backend(
        self, graph: FrameGraph, n_iters: int
    ) -> Tuple[List[Tuple[int, int]], List[float]]:
        """Resample the edges of ``graph`` and optimize all of its keyframes."""
        dist = build_distance_matrix(graph)
        pairs = sample_backend_edges(dist, self.config.max_edges_per_keyframe * len(graph))
        ids = graph.ids
        graph.edges = set()
        for a, b in pairs:
            graph.add_bidirectional(ids[a], ids[b])
        fixed = set(self.state.gauge) & set(ids)
        trace = self._solve_window(graph, ids, graph.sorted_edges(), fixed, n_iters)
        return graph.sorted_edges(), trace

    def backend_global_ba(self, n_iters: Optional[int] = None, label: str = "backend") -> None:
        state = self.state
        if state.phase == Phase.COLLECTING:
            raise RuntimeError("global bundle adjustment before initialization")
        n_iters = n_iters or self.config.backend_iters
        edges, trace = self._run_backend(state.graph, n_iters)
        state.cost_traces.append((label, trace))
        state.backend_edge_counts.append(len(edges))
        state.keyframes_since_backend = 0
        logger.info(
            f"Global BA ({label}): {len(state.graph)} keyframes, {len(edges)} edges, "
            f"cost {trace[0]:.3e} -> {trace[-1]:.3e}"
        )

    def _backend_job(
        self, snapshot: FrameGraph, n_iters: int
    ) -> Tuple[FrameGraph, List[Tuple[int, int]], List[float]]:
        edges, trace = self._run_backend(snapshot, n_iters)
        return snapshot, edges, trace

    def _start_backend_worker(self) -> None:
        self._collect_backend(wait=False)
        if self._pending is not None or len(self.state.graph) < 2:
            return
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="backend")
        snapshot = self.state.graph.snapshot()
        versions = {kf.frame_id: kf.version for kf in snapshot.keyframes}
        future = self._executor.submit(self._backend_job, snapshot, self.config.backend_iters)
        self._pending = (future, versions)
        self.state.keyframes_since_backend = 0

    def _collect_backend(self, wait: bool) -> None:
        """
        Merge a finished backend run into the live graph.

        Keyframes the frontend changed (or removed) since the snapshot keep
        their live values; every other keyframe takes the backend result.
        """
        if self._pending is None:
            return
        future, versions = self._pending
        if not wait and not future.done():
            return
        self._pending = None
        snapshot, edges, trace = future.result()
        graph = self.state.graph
        merged, skipped = 0, 0
        for kf in snapshot.keyframes:
            if kf.frame_id not in graph:
                skipped += 1
                continue
            live = graph.get(kf.frame_id)
            if live.version != versions[kf.frame_id]:
                skipped += 1
                continue
            live.pose, live.depth, live.right = kf.pose, kf.depth, kf.right
            live.version += 1
            merged += 1
        for i, j in edges:
            if i in graph and j in graph:
                graph.edges.add((i, j))
        self.state.cost_traces.append(("backend", trace))
        self.state.backend_edge_counts.append(len(edges))
        logger.info(f"Backend merged {merged} keyframes, skipped {skipped} changed since snapshot")

    # ------------------------------------------------------------------ finish

    def finalize(self) -> None:
        """Drain the backend worker and run one last global bundle adjustment."""
        if self._finalized:
            return
        self._collect_backend(wait=True)
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
        state = self.state
        if state.phase == Phase.COLLECTING and len(state.graph) >= 2:
            logger.warning(
                f"Stream ended with {len(state.graph)} keyframes; initializing early"
            )
            self.initialize()
        if state.phase != Phase.COLLECTING and self.config.backend_enabled:
            self.backend_global_ba(n_iters=self.config.final_iters, label="final")
        self._finalized = True

    def _recover_pose(self, frame: NonKeyframe) -> PoseSE3:
        graph = self.state.graph
        keyframes = graph.keyframes
        stamps = [kf.timestamp for kf in keyframes]
        k = bisect.bisect_left(stamps, frame.timestamp)
        prev = keyframes[k - 1] if k > 0 else None
        nxt = keyframes[k] if k < len(keyframes) else None
        if prev is not None and nxt is not None:
            alpha = (frame.timestamp - prev.timestamp) / (nxt.timestamp - prev.timestamp)
            seed = interpolate(prev.pose, nxt.pose, alpha)
        else:
            seed = (prev or nxt).pose

        intr = self.oracle.intrinsics
        ranked = sorted(keyframes, key=lambda kf: (abs(kf.timestamp - frame.timestamp), kf.frame_id))
        anchors = [
            kf
            for kf in ranked
            if dense_correspondence(kf.pose, seed, kf.depth, intr).overlap >= MIN_OVERLAP
        ][:2]
        if not anchors:
            raise NoCovisibleKeyframeError(f"frame {frame.frame_id} sees no keyframe")

        observations = [
            self.oracle.observation((kf.frame_id, 0), (frame.frame_id, 0), (a, 0))
            for a, kf in enumerate(anchors, start=1)
        ]
        problem = BAProblem(
            poses=(seed, *(kf.pose for kf in anchors)),
            depths=(np.ones_like(anchors[0].depth), *(kf.depth for kf in anchors)),
            intrinsics=intr,
            observations=tuple(observations),
            fixed_poses=frozenset(range(1, len(anchors) + 1)),
        )
        problem, trace = motion_only_ba(problem, self.config.motion_only_iters)
        logger.debug(
            f"Frame {frame.frame_id}: motion-only BA against {[kf.frame_id for kf in anchors]}, "
            f"cost {trace[0]:.3e} -> {trace[-1]:.3e}"
        )
        return problem.poses[0]

    def recover_non_keyframes(self) -> Trajectory:
        """Camera-to-world poses for every ingested frame, in timestamp order."""
        graph = self.state.graph
        if len(graph) == 0:
            raise DegenerateInputError("no keyframes to recover poses from")
        for frame in self.state.non_keyframes:
            frame.pose = self._recover_pose(frame)
        entries = [(kf.timestamp, inverse(kf.pose)) for kf in graph.keyframes]
        entries += [(f.timestamp, inverse(f.pose)) for f in self.state.non_keyframes]
        entries.sort(key=lambda e: e[0])
        return Trajectory.from_pairs(entries)

    def keyframe_trajectory(self) -> Trajectory:
        return Trajectory.from_pairs(
            (kf.timestamp, inverse(kf.pose)) for kf in self.state.graph.keyframes
        )

    def run(self, frames: Iterable[FrameInput]) -> Trajectory:
        for frame in frames:
            self.ingest_frame(frame)
        self.finalize()
        return self.recover_non_keyframes()

    def dense_depth(self, frame_id: int) -> NDArray[np.float64]:
        """Keyframe inverse depth upsampled to the nominal image size."""
        keyframe = self.state.graph.get(frame_id)
        return convex_upsample(
            keyframe.depth, self.oracle.upsample_mask(), factor=self.oracle.scene.downsample
        )
