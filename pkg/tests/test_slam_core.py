import numpy as np
import pytest

from conftest import experiment_config, scene_config
from dense_ba.evaluation.eval_io import ate, trajectory_extent
from dense_ba.exceptions import (
    DegenerateInputError,
    DivergenceError,
    NoCovisibleKeyframeError,
    TimestampOrderError,
)
from dense_ba.geometry.se3_lie import PoseSE3, compose, exp, inverse
from dense_ba.models.config_model import Mode, SystemConfig
from dense_ba.processors.experiment import (
    build_system,
    ground_truth_trajectory,
    run_slam,
    seed_frames,
)
from dense_ba.slam import slam_core
from dense_ba.slam.flow_oracle import FlowOracle, SyntheticScene, generate_scene
from dense_ba.slam.slam_core import (
    FrameInput,
    Phase,
    SlamSystem,
    SystemState,
    constant_velocity_seed,
)

TRACKING = {
    "init_frame_count": 5,
    "max_keyframes": 8,
    "backend_interval": 3,
    "frontend_window": 4,
}


def static_scene(source: SyntheticScene, n_frames: int = 4) -> SyntheticScene:
    return SyntheticScene(
        poses=(source.poses[0],) * n_frames,
        depths=np.stack([source.depths[0]] * n_frames),
        intrinsics=source.intrinsics,
        image_size=source.image_size,
        timestamps=0.1 * np.arange(n_frames),
        seed=0,
        downsample=source.downsample,
    )


def static_frames(scene: SyntheticScene):
    return [
        FrameInput(k, float(t), pose_guess=scene.poses[k], depth_guess=scene.depths[k])
        for k, t in enumerate(scene.timestamps)
    ]


def relative_ate(traj, scene, mode="sim3"):
    gt = ground_truth_trajectory(scene)
    return ate(traj, gt, mode)[0] / trajectory_extent(gt)


@pytest.fixture(scope="module")
def long_scene():
    return generate_scene(scene_config(frames=12), seed=8)


@pytest.fixture(scope="module")
def tracking_run(long_scene):
    config = experiment_config(system=TRACKING)
    system, traj = run_slam(long_scene, config)
    return system, traj, config


class TestIngest:
    def test_static_camera_keeps_first_frame(self, small_scene):
        scene = static_scene(small_scene)
        system = SlamSystem(SystemConfig(init_frame_count=7), FlowOracle(scene))
        traj = system.run(static_frames(scene))
        assert system.state.graph.ids == [0]
        assert system.state.phase == Phase.COLLECTING
        assert len(traj) == 4
        for pose in traj.poses:
            np.testing.assert_allclose(pose.matrix(), traj.poses[0].matrix(), atol=1e-8)

    def test_timestamps_must_increase(self, small_scene):
        system, oracle = build_system(small_scene, experiment_config())
        frames = seed_frames(small_scene, experiment_config(), oracle)
        system.ingest_frame(frames[0])
        with pytest.raises(TimestampOrderError):
            system.ingest_frame(FrameInput(1, frames[0].timestamp))

    def test_init_fires_on_last_collected_frame(self, long_scene):
        config = experiment_config(system={"init_frame_count": 12})
        system, oracle = build_system(long_scene, config)
        frames = seed_frames(long_scene, config, oracle)
        for frame in frames[:-1]:
            assert system.ingest_frame(frame) == Phase.COLLECTING
        assert system.ingest_frame(frames[-1]) == Phase.INITIALIZED
        assert len(system.state.graph) == 12
        assert len(system.state.graph.edges) == 60
        assert system.state.gauge == (0, 1)
        assert ate(system.keyframe_trajectory(), ground_truth_trajectory(long_scene))[0] < 1e-3

    def test_ingest_after_finalize_rejected(self, small_scene):
        scene = static_scene(small_scene)
        system = SlamSystem(SystemConfig(init_frame_count=7), FlowOracle(scene))
        system.run(static_frames(scene))
        traces = list(system.state.cost_traces)
        system.finalize()
        assert system.state.cost_traces == traces
        with pytest.raises(RuntimeError):
            system.ingest_frame(FrameInput(9, 5.0))


class TestInitialization:
    def test_noiseless_run_recovers_trajectory(self, small_scene):
        system, traj = run_slam(small_scene, experiment_config())
        assert len(traj) == 7
        np.testing.assert_array_equal(traj.timestamps, small_scene.timestamps)
        assert [label for label, _ in system.state.cost_traces] == ["init", "final"]
        assert relative_ate(traj, small_scene) < 1e-3

    def test_divergence_is_reported(self, small_scene, monkeypatch):
        monkeypatch.setattr(slam_core, "dba_iterate", lambda problem, n_iters: (problem, [1.0, 100.0]))
        system, oracle = build_system(small_scene, experiment_config())
        with pytest.raises(DivergenceError) as err:
            system.run(seed_frames(small_scene, experiment_config(), oracle))
        assert err.value.trace == [1.0, 100.0]
        assert system.state.cost_traces == [("init", [1.0, 100.0])]

    def test_stereo_needs_a_right_camera(self):
        scene = generate_scene(scene_config(frames=2, stereo_baseline=0.0), seed=1)
        with pytest.raises(DegenerateInputError):
            SlamSystem(SystemConfig(mode=Mode.STEREO, init_frame_count=2), FlowOracle(scene))

    def test_phases_only_advance(self, small_scene):
        system, _ = build_system(small_scene, experiment_config())
        state: SystemState = system.state
        state.advance(Phase.INITIALIZED)
        with pytest.raises(RuntimeError):
            state.advance(Phase.COLLECTING)

    def test_tracking_requires_initialization(self, small_scene):
        system, _ = build_system(small_scene, experiment_config())
        with pytest.raises(RuntimeError):
            system.frontend_track(FrameInput(0, 0.0))
        with pytest.raises(RuntimeError):
            system.backend_global_ba()


class TestTracking:
    def test_constant_velocity_seed(self):
        xi = np.array([0.1, -0.2, 0.05, 0.01, 0.02, -0.03])
        seed = constant_velocity_seed(PoseSE3.identity(), exp(xi))
        np.testing.assert_allclose(seed.matrix(), exp(2.0 * xi).matrix(), atol=1e-12)

    def test_every_frame_in_trajectory(self, tracking_run, long_scene):
        system, traj, _ = tracking_run
        assert len(traj) == 12
        np.testing.assert_array_equal(traj.timestamps, long_scene.timestamps)
        assert system.state.phase == Phase.TRACKING
        assert len(system.state.graph) <= TRACKING["max_keyframes"]
        assert len(system.state.non_keyframes) == 12 - len(system.state.graph)

    def test_phases_recorded(self, tracking_run):
        system, _, _ = tracking_run
        labels = [label for label, _ in system.state.cost_traces]
        assert labels[0] == "init"
        assert "frontend" in labels
        assert "backend" in labels
        assert labels[-1] == "final"
        assert len(system.state.backend_edge_counts) == labels.count("backend") + 1

    def test_gauge_frames_never_move(self, tracking_run, long_scene):
        system, _, config = tracking_run
        oracle = FlowOracle(long_scene, config.noise, seed=config.oracle_seed)
        frames = seed_frames(long_scene, config, oracle)
        for fid in (0, 1):
            np.testing.assert_array_equal(
                system.state.graph.get(fid).pose.matrix(), frames[fid].pose_guess.matrix()
            )

    def test_noiseless_accuracy(self, tracking_run, long_scene):
        _, traj, _ = tracking_run
        assert relative_ate(traj, long_scene) < 1e-3

    def test_single_threaded_runs_are_identical(self, tracking_run, long_scene):
        _, traj, config = tracking_run
        _, again = run_slam(long_scene, config)
        for a, b in zip(traj.poses, again.poses):
            np.testing.assert_array_equal(a.matrix(), b.matrix())

    def test_two_workers_match_single_threaded(self, tracking_run, long_scene):
        _, traj, _ = tracking_run
        system, threaded = run_slam(long_scene, experiment_config(system={**TRACKING, "workers": 2}))
        assert len(threaded) == 12
        single, double = relative_ate(traj, long_scene), relative_ate(threaded, long_scene)
        assert abs(single - double) <= 0.1 * max(single, double) + 1e-3
        assert set(system.state.graph.ids) >= {0, 1}

    def test_loop_closure_edge(self, loop_scene):
        config = experiment_config(system={"init_frame_count": 5})
        system, oracle = build_system(loop_scene, config)
        for frame in seed_frames(loop_scene, config, oracle):
            system.ingest_frame(frame)
        assert (11, 0) in system.state.graph.edges
        assert (0, 11) in system.state.graph.edges
        system.finalize()

    def test_dense_depth(self, tracking_run):
        system, _, _ = tracking_run
        depth = system.dense_depth(0)
        assert depth.shape == (96, 128)
        coarse = system.state.graph.get(0).depth
        assert coarse.min() - 1e-12 <= depth.min() and depth.max() <= coarse.max() + 1e-12


def center_errors(system, scene):
    graph = system.state.graph
    return np.array(
        [
            np.linalg.norm(inverse(graph.get(fid).pose).trans - inverse(scene.poses[fid]).trans)
            for fid in graph.ids
        ]
    )


class TestBackend:
    def test_fixed_point_is_stable(self, small_scene):
        system, _ = run_slam(small_scene, experiment_config())
        system.backend_global_ba(n_iters=20)
        graph = system.state.graph
        before = {
            fid: (graph.get(fid).pose.matrix(), graph.get(fid).depth.copy()) for fid in graph.ids
        }
        system.backend_global_ba()
        for fid, (pose, depth) in before.items():
            np.testing.assert_allclose(graph.get(fid).pose.matrix(), pose, atol=1e-10)
            np.testing.assert_allclose(graph.get(fid).depth, depth, atol=1e-10)

    def test_removes_injected_drift(self, loop_scene):
        system, _ = run_slam(
            loop_scene, experiment_config(system={"init_frame_count": 12, "max_keyframes": 20})
        )
        graph = system.state.graph
        drift = exp(np.array([0.02, -0.01, 0.015, 0.01, -0.02, 0.015]))
        for fid in graph.ids:
            if fid >= 6:
                graph.get(fid).pose = compose(graph.get(fid).pose, drift)
        drifted = center_errors(system, loop_scene).max()
        assert drifted > 1e-3
        system.backend_global_ba()
        assert system.state.cost_traces[-1][0] == "backend"
        assert center_errors(system, loop_scene).max() < 0.5 * drifted
        np.testing.assert_allclose(
            graph.get(0).pose.matrix(), loop_scene.poses[0].matrix(), atol=1e-12
        )


class TestNonKeyframes:
    def test_no_covisible_keyframe(self, small_scene, monkeypatch):
        monkeypatch.setattr(slam_core, "MIN_OVERLAP", 1.01)
        scene = static_scene(small_scene)
        system = SlamSystem(SystemConfig(init_frame_count=7), FlowOracle(scene))
        with pytest.raises(NoCovisibleKeyframeError):
            system.run(static_frames(scene))

    def test_recovered_pose_of_duplicate_frame(self, small_scene):
        scene = static_scene(small_scene, n_frames=2)
        system = SlamSystem(SystemConfig(init_frame_count=7), FlowOracle(scene))
        traj = system.run(static_frames(scene))
        np.testing.assert_allclose(traj.poses[1].matrix(), traj.poses[0].matrix(), atol=1e-8)
        assert system.state.non_keyframes[0].frame_id == 1
