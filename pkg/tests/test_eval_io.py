import math

import numpy as np
import pytest

from dense_ba.exceptions import (
    AssociationError,
    DegenerateInputError,
    TimestampOrderError,
    TrajectoryFormatError,
)
from dense_ba.evaluation.eval_io import (
    Trajectory,
    associate,
    ate,
    format_tum,
    load_tum,
    parse_tum,
    pose_error,
    save_tum,
    success_auc,
    trajectory_extent,
    umeyama_alignment,
)
from dense_ba.geometry.se3_lie import PoseSE3, compose, exp, twist


def random_trajectory(rng, n=20, dt=0.1):
    poses = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        poses.append(
            exp(np.concatenate([rng.uniform(-3.0, 3.0, 3), axis * rng.uniform(0.0, 2.0)]))
        )
    return Trajectory(dt * np.arange(n), tuple(poses))


def transformed(traj, g, scale=1.0):
    return Trajectory(
        traj.timestamps,
        tuple(
            compose(g, PoseSE3(p.quat, scale * p.trans)) for p in traj.poses
        ),
    )


class TestTumFiles:
    def test_identity_line(self):
        traj = parse_tum("0.0 0 0 0 0 0 0 1\n")
        assert len(traj) == 1
        assert traj.timestamps[0] == 0.0
        np.testing.assert_array_equal(traj.poses[0].matrix(), np.eye(4))

    def test_comments_and_blank_lines(self):
        traj = parse_tum("# header\n\n0.0 1 2 3 0 0 0 1\n  \n0.5 0 0 0 0 0 0 1\n")
        np.testing.assert_array_equal(traj.timestamps, [0.0, 0.5])
        np.testing.assert_array_equal(traj.poses[0].trans, [1.0, 2.0, 3.0])

    def test_round_trip(self, rng, tmp_path):
        traj = random_trajectory(rng, n=100)
        path = str(tmp_path / "traj.tum")
        assert save_tum(traj, path) == path
        loaded = load_tum(path)
        np.testing.assert_allclose(loaded.timestamps, traj.timestamps, atol=1e-12)
        errors = [
            np.max(np.abs(a.matrix() - b.matrix())) for a, b in zip(loaded.poses, traj.poses)
        ]
        assert max(errors) < 1e-9

    def test_format_has_header(self, rng):
        text = format_tum(random_trajectory(rng, n=2))
        lines = text.splitlines()
        assert lines[0].startswith("#")
        assert len(lines) == 3
        assert len(lines[1].split()) == 8

    @pytest.mark.parametrize(
        "text, line",
        [
            ("0.0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 1\n", 2),
            ("# c\n0.0 0 0 0 0 0 0 abc\n", 2),
            ("0.0 0 0 nan 0 0 0 1\n", 1),
            ("0.0 0 0 0 0 0 0 0\n", 1),
        ],
    )
    def test_malformed_lines(self, text, line):
        with pytest.raises(TrajectoryFormatError) as err:
            parse_tum(text)
        assert err.value.line_number == line
        assert f"line {line}" in str(err.value)

    def test_non_monotone_timestamps(self):
        with pytest.raises(TimestampOrderError):
            parse_tum("0.2 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1\n")
        with pytest.raises(TimestampOrderError):
            Trajectory(np.array([0.0, 0.0]), (PoseSE3.identity(), PoseSE3.identity()))


class TestAssociate:
    def test_nearest_within_window(self):
        gt = Trajectory(np.array([0.0, 0.1, 0.2]), (PoseSE3.identity(),) * 3)
        est = Trajectory(np.array([0.005, 0.11, 0.5]), (PoseSE3.identity(),) * 3)
        assert associate(est, gt) == [(0, 0), (1, 1)]

    def test_one_to_one(self):
        gt = Trajectory(np.array([0.0, 1.0]), (PoseSE3.identity(),) * 2)
        est = Trajectory(np.array([-0.01, 0.005]), (PoseSE3.identity(),) * 2)
        assert associate(est, gt) == [(1, 0)]


class TestAte:
    def test_identical_is_zero(self, rng):
        traj = random_trajectory(rng)
        for mode in ("se3", "sim3"):
            error, alignment = ate(traj, traj, mode)
            assert error < 1e-12
            assert alignment.scale == pytest.approx(1.0, abs=1e-12)

    def test_rigid_invariance(self, rng):
        traj = random_trajectory(rng)
        g = exp(twist(translation=(5.0, -2.0, 1.0), rotation=(0.3, -1.2, 0.7)))
        error, alignment = ate(transformed(traj, g), traj, "se3")
        assert error < 1e-9
        assert alignment.scale == 1.0

    def test_scaled_estimate(self, rng):
        traj = random_trajectory(rng)
        scaled = transformed(traj, PoseSE3.identity(), scale=2.0)
        error, alignment = ate(scaled, traj, "sim3")
        assert error < 1e-9
        assert alignment.scale == pytest.approx(2.0, abs=1e-9)
        assert ate(scaled, traj, "se3")[0] > 0.1

    def test_sim3_invariant_under_similarity(self, rng):
        traj = random_trajectory(rng)
        est = Trajectory(
            traj.timestamps,
            tuple(compose(exp(rng.normal(0.0, 0.05, 6)), p) for p in traj.poses),
        )
        g = exp(twist(translation=(1.0, 2.0, 3.0), rotation=(0.0, 0.5, 0.0)))
        base = ate(est, traj, "sim3")[0]
        moved = ate(transformed(est, g, scale=0.5), traj, "sim3")[0]
        assert moved == pytest.approx(base, abs=1e-9)
        rigid = ate(transformed(est, g), traj, "se3")[0]
        assert rigid == pytest.approx(ate(est, traj, "se3")[0], abs=1e-9)

    def test_se3_symmetric(self, rng):
        traj = random_trajectory(rng)
        est = Trajectory(
            traj.timestamps,
            tuple(compose(exp(rng.normal(0.0, 0.05, 6)), p) for p in traj.poses),
        )
        assert ate(est, traj, "se3")[0] == pytest.approx(ate(traj, est, "se3")[0], abs=1e-9)

    def test_alignment_maps_estimate_onto_ground_truth(self, rng):
        traj = random_trajectory(rng)
        g = exp(twist(translation=(1.0, 0.0, -1.0), rotation=(0.2, 0.1, 0.0)))
        est = transformed(traj, g, scale=3.0)
        _, alignment = ate(est, traj, "sim3")
        np.testing.assert_allclose(
            alignment.to_ground_truth(est.positions()), traj.positions(), atol=1e-9
        )

    def test_too_few_associations(self, rng):
        traj = random_trajectory(rng, n=2)
        with pytest.raises(AssociationError):
            ate(traj, traj)
        shifted = Trajectory(traj.timestamps + 10.0, traj.poses)
        with pytest.raises(AssociationError):
            ate(shifted, random_trajectory(rng, n=5))

    def test_unknown_mode(self, rng):
        traj = random_trajectory(rng)
        with pytest.raises(ValueError):
            ate(traj, traj, "affine")

    def test_stationary_sim3_rejected(self):
        points = np.zeros((4, 3))
        with pytest.raises(DegenerateInputError):
            umeyama_alignment(points, np.eye(4, 3), with_scale=True)


class TestPoseError:
    def test_identical_is_zero(self, rng):
        traj = random_trajectory(rng)
        assert pose_error(traj, traj) < 1e-12

    def test_unit_translation_offset(self, rng):
        traj = random_trajectory(rng, n=5)
        poses = list(traj.poses)
        poses[2] = compose(poses[2], PoseSE3(np.array([0.0, 0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])))
        assert pose_error(Trajectory(traj.timestamps, tuple(poses)), traj) == pytest.approx(1.0, abs=1e-12)

    def test_mismatched_lengths(self, rng):
        traj = random_trajectory(rng, n=5)
        with pytest.raises(DegenerateInputError):
            pose_error(traj, random_trajectory(rng, n=4))


class TestSummaries:
    def test_extent(self):
        positions = [np.zeros(3), np.array([3.0, 0.0, 0.0]), np.array([0.0, 4.0, 0.0])]
        traj = Trajectory(
            np.arange(3.0), tuple(PoseSE3(np.array([0.0, 0.0, 0.0, 1.0]), p) for p in positions)
        )
        assert trajectory_extent(traj) == pytest.approx(5.0)
        assert trajectory_extent(Trajectory(np.zeros(1), (PoseSE3.identity(),))) == 0.0

    def test_success_auc(self):
        assert success_auc([0.0, 0.0], 1.0) == pytest.approx(1.0)
        assert success_auc([math.inf, math.nan], 1.0) == 0.0
        assert success_auc([], 1.0) == 0.0
        assert success_auc([0.5], 1.0) == pytest.approx(0.5, abs=1e-3)
        with pytest.raises(ValueError):
            success_auc([0.1], 0.0)
