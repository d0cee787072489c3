import math

import numpy as np
import pytest

from dense_ba.exceptions import DegenerateInputError
from dense_ba.geometry.correspondence import mean_flow_magnitude
from dense_ba.slam.frame_graph import (
    SUPPRESSION_RADIUS,
    FrameGraph,
    Keyframe,
    build_distance_matrix,
    chebyshev,
    keyframe_removal,
    proximity_edges,
    sample_backend_edges,
    select_nearest,
)


def graph_from_scene(scene, frames=None, source=None):
    """Keyframes at ground truth; ``source`` maps a keyframe id to the frame whose state it copies."""
    source = source or {}
    graph = FrameGraph(intrinsics=scene.coarse_intrinsics, flow_scale=float(scene.downsample))
    for f in frames if frames is not None else range(scene.n_frames):
        s = source.get(f, f)
        graph.add_keyframe(
            Keyframe(frame_id=f, timestamp=float(f), pose=scene.poses[s], depth=scene.depths[s].copy())
        )
    return graph


def random_distances(rng, n, inf_fraction=0.2):
    dist = rng.uniform(1.0, 100.0, (n, n))
    dist[rng.random((n, n)) < inf_fraction] = np.inf
    np.fill_diagonal(dist, 0.0)
    return dist


class TestFrameGraph:
    def test_keyframes_must_be_unique_and_newer(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1])
        with pytest.raises(DegenerateInputError):
            graph.add_keyframe(Keyframe(1, 5.0, small_scene.poses[1], small_scene.depths[1]))
        with pytest.raises(DegenerateInputError):
            graph.add_keyframe(Keyframe(7, 0.5, small_scene.poses[1], small_scene.depths[1]))

    def test_edges(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2])
        assert graph.add_edge(0, 1)
        assert not graph.add_edge(0, 1)
        assert graph.add_bidirectional(1, 2) == [(1, 2), (2, 1)]
        assert graph.add_bidirectional(0, 1) == [(1, 0)]
        assert graph.neighbors(1) == {0, 2}
        with pytest.raises(DegenerateInputError):
            graph.add_edge(2, 2)
        with pytest.raises(DegenerateInputError):
            graph.add_edge(0, 9)

    def test_remove_drops_incident_edges(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2])
        graph.add_bidirectional(0, 1)
        graph.add_bidirectional(1, 2)
        graph.add_bidirectional(0, 2)
        removed = graph.remove_keyframe(1)
        assert removed.frame_id == 1
        assert graph.ids == [0, 2]
        assert graph.sorted_edges() == [(0, 2), (2, 0)]
        with pytest.raises(KeyError):
            graph.get(1)

    def test_distance_is_scaled_mean_flow(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1])
        expected = 8.0 * mean_flow_magnitude(
            small_scene.poses[0], small_scene.poses[1], small_scene.depths[0],
            small_scene.coarse_intrinsics,
        )
        assert graph.distance(0, 1) == pytest.approx(expected, rel=1e-12)
        assert graph.distance(1, 1) == 0.0

    def test_snapshot_is_independent(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1])
        graph.add_edge(0, 1)
        snap = graph.snapshot()
        snap.get(1).depth[:] = 9.0
        snap.get(1).version += 1
        snap.add_edge(1, 0)
        assert graph.get(1).version == 0
        assert not np.any(graph.get(1).depth == 9.0)
        assert graph.sorted_edges() == [(0, 1)]

    def test_report(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2])
        graph.add_bidirectional(0, 1)
        dist = build_distance_matrix(graph)
        dist[0, 2] = np.inf
        report = graph.to_report(dist)
        assert [n["frame_id"] for n in report["nodes"]] == [0, 1, 2]
        assert report["edges"] == [[0, 1], [1, 0]]
        assert report["distances"][0][2] is None
        assert report["distances"][1][1] == 0.0
        assert "distances" not in graph.to_report()


class TestDistanceMatrix:
    def test_matches_pairwise_distance(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2, 3])
        dist = build_distance_matrix(graph)
        assert dist.shape == (4, 4)
        np.testing.assert_array_equal(np.diag(dist), 0.0)
        for a, i in enumerate(graph.ids):
            for b, j in enumerate(graph.ids):
                assert dist[a, b] == pytest.approx(graph.distance(i, j), rel=1e-12)

    def test_consecutive_frames_within_band(self, small_scene):
        dist = build_distance_matrix(graph_from_scene(small_scene))
        for k in range(small_scene.n_frames - 1):
            assert 18.0 <= dist[k, k + 1] <= 60.0

    def test_empty_graph_rejected(self, small_scene):
        with pytest.raises(DegenerateInputError):
            build_distance_matrix(FrameGraph(intrinsics=small_scene.coarse_intrinsics))


class TestSelectNearest:
    def test_smallest_finite_first(self):
        distances = [(10, 2.0), (11, 9.0), (12, 4.0), (13, math.inf), (14, 3.0)]
        assert select_nearest(distances, 3) == [10, 14, 12]

    def test_ties_go_to_lower_id(self):
        assert select_nearest([(5, 1.0), (3, 1.0), (4, 2.0)], 1) == [3]

    def test_fewer_finite_than_k(self):
        assert select_nearest([(1, math.inf), (2, 7.0)], 3) == [2]
        assert select_nearest([], 3) == []


class TestProximityEdges:
    def test_loop_closes_to_first_frame(self, loop_scene):
        graph = graph_from_scene(loop_scene)
        added = proximity_edges(graph, 11, k=3)
        assert (11, 0) in added and (0, 11) in added
        assert (11, 10) in added
        assert len(added) == 6

    def test_candidates_restrict_the_pool(self, loop_scene):
        graph = graph_from_scene(loop_scene)
        added = proximity_edges(graph, 11, k=3, candidates=[3, 4, 5, 11])
        assert {j for i, j in added if i == 11} <= {3, 4, 5}

    def test_existing_edges_are_not_repeated(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2])
        graph.add_bidirectional(2, 1)
        assert proximity_edges(graph, 2, k=1, candidates=[1]) == []
        assert graph.sorted_edges() == [(1, 2), (2, 1)]


class TestBackendEdges:
    def test_temporal_pairs_first(self, rng):
        dist = random_distances(rng, 10, inf_fraction=0.0)
        edges = sample_backend_edges(dist, max_edges=100)
        assert edges[:9] == [(i, i + 1) for i in range(9)]

    def test_budget(self, rng):
        dist = random_distances(rng, 10, inf_fraction=0.0)
        assert sample_backend_edges(dist, max_edges=5) == [(i, i + 1) for i in range(5)]
        assert len(sample_backend_edges(dist, max_edges=12)) == 12

    def test_suppression_is_exhaustive(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            n = 30
            dist = random_distances(rng, n)
            edges = sample_backend_edges(dist, max_edges=10_000)
            sym = 0.5 * (dist + dist.T)
            long_range = [e for e in edges if e[1] - e[0] > 1]

            for e in edges:
                assert e[0] < e[1]
                assert math.isfinite(sym[e])
            for a in range(len(long_range)):
                for b in range(a + 1, len(long_range)):
                    assert chebyshev(long_range[a], long_range[b]) > SUPPRESSION_RADIUS
            # accepted in increasing distance
            values = [sym[e] for e in long_range]
            assert values == sorted(values)
            # every skipped finite candidate lies next to an accepted one
            for i in range(n):
                for j in range(i + 2, n):
                    if math.isfinite(sym[i, j]) and (i, j) not in long_range:
                        assert any(
                            chebyshev((i, j), s) <= SUPPRESSION_RADIUS for s in long_range
                        )

    def test_non_covisible_pairs_never_sampled(self):
        dist = np.full((5, 5), np.inf)
        np.fill_diagonal(dist, 0.0)
        dist[0, 4] = dist[4, 0] = 3.0
        assert sample_backend_edges(dist, max_edges=10) == [(0, 4)]


class TestKeyframeRemoval:
    def test_under_capacity_is_a_no_op(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2])
        assert keyframe_removal(graph, 16.0, max_keyframes=3) is None
        assert graph.ids == [0, 1, 2]

    def test_redundant_later_frame_goes(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2, 3, 4], source={4: 3})
        graph.add_bidirectional(3, 4)
        assert keyframe_removal(graph, 16.0, max_keyframes=4) == 4
        assert graph.ids == [0, 1, 2, 3]
        assert graph.edges == set()

    def test_redundant_covisible_frame_goes(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2, 3, 4], source={4: 2})
        unlinked = graph.snapshot()
        graph.add_bidirectional(2, 4)
        assert keyframe_removal(graph, 10.0, max_keyframes=4, protected=(0, 1)) == 4
        assert graph.ids == [0, 1, 2, 3]
        assert keyframe_removal(unlinked, 10.0, max_keyframes=4, protected=(0, 1)) == 2

    def test_oldest_unprotected_otherwise(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2, 3, 4])
        assert keyframe_removal(graph, 1.0, max_keyframes=4, protected=(0, 1)) == 2
        assert graph.ids == [0, 1, 3, 4]

    def test_protected_redundant_frame_is_kept(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2, 3, 4], source={4: 3})
        assert keyframe_removal(graph, 10.0, max_keyframes=4, protected=(0, 1, 4)) == 2

    def test_everything_protected(self, small_scene):
        graph = graph_from_scene(small_scene, frames=[0, 1, 2])
        assert keyframe_removal(graph, 16.0, max_keyframes=2, protected=(0, 1, 2)) is None
        assert len(graph) == 3
