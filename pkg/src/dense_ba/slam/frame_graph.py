"""
Covisibility frame graph over keyframes.

Nodes are keyframes keyed by their frame id; an edge (i, j) means frame i's
pixels are matched into frame j. Distances between keyframes are mean
induced-flow magnitudes in input-image pixels, +inf when two frames do not
overlap enough.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from numpy.typing import NDArray

from dense_ba.config.logger import logger
from dense_ba.exceptions import DegenerateInputError
from dense_ba.geometry.camera_model import Intrinsics
from dense_ba.geometry.correspondence import mean_flow_magnitude
from dense_ba.geometry.se3_lie import PoseSE3

# Chebyshev radius (in keyframe index space) suppressed around a backend edge.
SUPPRESSION_RADIUS: int = 2


@dataclass
class CameraState:
    """Pose (world-to-camera) and inverse depth of one camera of a keyframe."""

    pose: PoseSE3
    depth: NDArray[np.float64]


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    pose: PoseSE3
    depth: NDArray[np.float64]
    right: Optional[CameraState] = None
    sensor_depth: Optional[NDArray[np.float64]] = None
    # bumped whenever pose or depth changes; used to merge snapshots
    version: int = 0


@dataclass
class FrameGraph:
    intrinsics: Intrinsics
    flow_scale: float = 1.0
    keyframes: List[Keyframe] = field(default_factory=list)
    edges: Set[Tuple[int, int]] = field(default_factory=set)

    @property
    def ids(self) -> List[int]:
        return [kf.frame_id for kf in self.keyframes]

    def __len__(self) -> int:
        return len(self.keyframes)

    def __contains__(self, frame_id: int) -> bool:
        return any(kf.frame_id == frame_id for kf in self.keyframes)

    def get(self, frame_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.frame_id == frame_id:
                return kf
        raise KeyError(f"keyframe {frame_id} is not in the graph")

    def index_of(self, frame_id: int) -> int:
        return self.ids.index(frame_id)

    def add_keyframe(self, keyframe: Keyframe) -> None:
        if keyframe.frame_id in self:
            raise DegenerateInputError(f"keyframe {keyframe.frame_id} already present")
        if self.keyframes and keyframe.timestamp <= self.keyframes[-1].timestamp:
            raise DegenerateInputError(
                f"keyframe {keyframe.frame_id} is not newer than the last keyframe"
            )
        self.keyframes.append(keyframe)

    def remove_keyframe(self, frame_id: int) -> Keyframe:
        keyframe = self.get(frame_id)
        self.keyframes.remove(keyframe)
        self.edges = {(i, j) for i, j in self.edges if frame_id not in (i, j)}
        return keyframe

    def add_edge(self, i: int, j: int) -> bool:
        """Add the directed edge (i, j); returns False when it already exists."""
        if i == j:
            raise DegenerateInputError(f"self-edge on keyframe {i}")
        if i not in self or j not in self:
            raise DegenerateInputError(f"edge ({i}, {j}) references a missing keyframe")
        if (i, j) in self.edges:
            return False
        self.edges.add((i, j))
        return True

    def add_bidirectional(self, i: int, j: int) -> List[Tuple[int, int]]:
        return [e for e in ((i, j), (j, i)) if self.add_edge(*e)]

    def neighbors(self, frame_id: int) -> Set[int]:
        out = set()
        for i, j in self.edges:
            if i == frame_id:
                out.add(j)
            elif j == frame_id:
                out.add(i)
        return out

    def sorted_edges(self) -> List[Tuple[int, int]]:
        return sorted(self.edges)

    def distance(self, i: int, j: int) -> float:
        """Mean flow (input pixels) from keyframe i to keyframe j."""
        if i == j:
            return 0.0
        a, b = self.get(i), self.get(j)
        flow = mean_flow_magnitude(a.pose, b.pose, a.depth, self.intrinsics)
        return self.flow_scale * flow

    def snapshot(self) -> "FrameGraph":
        """Independent copy of poses, depths, versions and edges."""
        return FrameGraph(
            intrinsics=self.intrinsics,
            flow_scale=self.flow_scale,
            keyframes=copy.deepcopy(self.keyframes),
            edges=set(self.edges),
        )

    def to_report(self, distances: Optional[NDArray[np.float64]] = None) -> Dict[str, Any]:
        """JSON-ready dump of nodes, edges and (optionally) the distance matrix."""
        report: Dict[str, Any] = {
            "nodes": [
                {
                    "frame_id": kf.frame_id,
                    "timestamp": kf.timestamp,
                    "pose_quat": [float(x) for x in kf.pose.quat],
                    "pose_trans": [float(x) for x in kf.pose.trans],
                    "mean_inverse_depth": float(np.mean(kf.depth)),
                    "stereo": kf.right is not None,
                }
                for kf in self.keyframes
            ],
            "edges": [list(e) for e in self.sorted_edges()],
        }
        if distances is not None:
            report["distances"] = [
                [None if not math.isfinite(x) else float(x) for x in row]
                for row in distances
            ]
        return report


def build_distance_matrix(
    graph: FrameGraph, intrinsics: Optional[Intrinsics] = None
) -> NDArray[np.float64]:
    """N x N mean-flow distances under the current estimates, +inf if not covisible."""
    if len(graph) == 0:
        raise DegenerateInputError("distance matrix needs at least one keyframe")
    intr = intrinsics or graph.intrinsics
    n = len(graph)
    dist = np.zeros((n, n))
    for a, src in enumerate(graph.keyframes):
        for b, dst in enumerate(graph.keyframes):
            if a != b:
                flow = mean_flow_magnitude(src.pose, dst.pose, src.depth, intr)
                dist[a, b] = graph.flow_scale * flow
    return dist


def select_nearest(distances: Sequence[Tuple[int, float]], k: int) -> List[int]:
    """The k candidates with smallest finite distance; ties go to the lower id."""
    finite = [(d, cid) for cid, d in distances if math.isfinite(d)]
    finite.sort()
    return [cid for _, cid in finite[:k]]


def proximity_edges(
    graph: FrameGraph,
    new_frame: int,
    k: int = 3,
    candidates: Optional[Iterable[int]] = None,
) -> List[Tuple[int, int]]:
    """
    Connect ``new_frame`` bidirectionally to its k closest keyframes.

    Distance is the mean of both flow directions (+inf if either is).
    """
    pool = [c for c in (candidates if candidates is not None else graph.ids) if c != new_frame]
    distances = []
    for cid in pool:
        d_fwd = graph.distance(new_frame, cid)
        d_bwd = graph.distance(cid, new_frame)
        distances.append((cid, 0.5 * (d_fwd + d_bwd)))
    added: List[Tuple[int, int]] = []
    for cid in select_nearest(distances, k):
        added.extend(graph.add_bidirectional(new_frame, cid))
    logger.debug(f"Keyframe {new_frame}: proximity edges {added}")
    return added


def chebyshev(a: Tuple[int, int], b: Tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def sample_backend_edges(
    dist: NDArray[np.float64],
    max_edges: int,
    radius: int = SUPPRESSION_RADIUS,
) -> List[Tuple[int, int]]:
    """
    Pick undirected index pairs (i < j) for global bundle adjustment.

    Temporally adjacent pairs come first. The remaining covisible pairs are
    visited in increasing distance (ties by lexicographic index) and each
    accepted pair suppresses every non-adjacent candidate within Chebyshev
    distance ``radius`` of it.
    """
    n = dist.shape[0]
    sym = 0.5 * (dist + dist.T)
    edges: List[Tuple[int, int]] = []
    for i in range(n - 1):
        if len(edges) >= max_edges:
            return edges
        if math.isfinite(sym[i, i + 1]):
            edges.append((i, i + 1))

    candidates = sorted(
        (float(sym[i, j]), i, j)
        for i in range(n)
        for j in range(i + 2, n)
        if math.isfinite(sym[i, j])
    )
    selected: List[Tuple[int, int]] = []
    for _, i, j in candidates:
        if len(edges) >= max_edges:
            break
        if any(chebyshev((i, j), s) <= radius for s in selected):
            continue
        selected.append((i, j))
        edges.append((i, j))
    return edges


def keyframe_removal(
    graph: FrameGraph,
    flow_threshold: float,
    max_keyframes: int,
    protected: Iterable[int] = (),
) -> Optional[int]:
    """
    Drop one keyframe once the graph exceeds ``max_keyframes``.

    Each keyframe is compared with its temporal predecessor and with every
    older keyframe it shares an edge with. The most redundant keyframe
    (smallest mean flow to such a partner, below ``flow_threshold``) goes
    first; the later frame of the pair is removed. Otherwise the oldest
    unprotected keyframe goes.
    """
    if len(graph) <= max_keyframes:
        return None
    keep = set(protected)

    best: Optional[Tuple[float, int]] = None
    for prev, cur in zip(graph.keyframes, graph.keyframes[1:]):
        if cur.frame_id in keep:
            continue
        older = {n for n in graph.neighbors(cur.frame_id) if n < cur.frame_id}
        for partner in sorted(older | {prev.frame_id}):
            d = 0.5 * (graph.distance(partner, cur.frame_id)
                       + graph.distance(cur.frame_id, partner))
            if d < flow_threshold and (best is None or d < best[0]):
                best = (d, cur.frame_id)

    if best is not None:
        victim = best[1]
        logger.info(f"Removing redundant keyframe {victim} (flow {best[0]:.2f}px)")
    else:
        removable = [fid for fid in graph.ids if fid not in keep]
        if not removable:
            return None
        victim = removable[0]
        logger.info(f"Removing oldest keyframe {victim}")
    graph.remove_keyframe(victim)
    return victim
