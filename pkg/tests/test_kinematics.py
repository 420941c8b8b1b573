import numpy as np
import pytest

from motion_synth import rotations
from motion_synth.skeleton import standing_pose, forward_kinematics, KinematicPose
from motion_synth.commands import (
    SingleJointMove, EndEffectorMove, SingleJointRoll, CameraRotate,
    PelvisSupported, PelvisFree, Done,
)
from motion_synth.kinematics import (
    IkConfig, CameraState, InvalidChain, solve_ik, apply_command,
)


def positions(topology, pose):
    return forward_kinematics(topology, pose).positions


def perturbed(topology, pose, chain, seed, scale=0.4):
    rng = np.random.default_rng(seed)
    indices = [topology.index(n) for n in chain[:-1]]
    quats = rotations.multiply(
        pose.local_rotations[indices], rotations.from_rotvec(rng.normal(0, scale, (len(indices), 3))))
    return pose.replace_rotations(indices, quats)


def test_target_at_tip_is_a_no_op(humanoid):
    pose = standing_pose(humanoid)
    chain = humanoid.ik_chains["left_fingers"]
    tip = positions(humanoid, pose)[humanoid.index("left_fingers")]
    result = solve_ik(humanoid, pose, chain, tip)
    assert result.iterations == 0
    assert result.residual < 1e-12
    assert result.pose is pose


def test_reachable_targets_converge(humanoid):
    ik = IkConfig()
    converged = 0
    for seed in range(100):
        chain = humanoid.ik_chains[("left_fingers", "right_toes", "left_toes", "right_fingers")[seed % 4]]
        pose = standing_pose(humanoid)
        goal = perturbed(humanoid, pose, chain, seed)
        target = positions(humanoid, goal)[humanoid.index(chain[-1])]
        result = solve_ik(humanoid, pose, chain, target, ik)
        converged += result.residual < ik.tolerance
    assert converged >= 95


def test_residual_history_is_nonincreasing(humanoid):
    pose = standing_pose(humanoid)
    chain = humanoid.ik_chains["right_fingers"]
    target = positions(humanoid, pose)[humanoid.index("right_fingers")] + [0.2, 0.3, 0.2]
    result = solve_ik(humanoid, pose, chain, target)
    assert all(b <= a for a, b in zip(result.residuals, result.residuals[1:]))


def test_unreachable_target_extends_the_chain(humanoid):
    pose = standing_pose(humanoid)
    chain = humanoid.ik_chains["left_fingers"]
    idx = [humanoid.index(n) for n in chain]
    length = sum(np.linalg.norm(humanoid.offsets[i]) for i in idx[1:])
    base = positions(humanoid, pose)[idx[0]]
    direction = np.array([1.0, 0.2, 0.5])
    direction /= np.linalg.norm(direction)
    target = base + 10.0 * direction

    result = solve_ik(humanoid, pose, chain, target, IkConfig(max_iterations=2000))
    assert result.residual == pytest.approx(10.0 - length, abs=0.02)
    tip = positions(humanoid, result.pose)[idx[-1]] - base
    assert np.linalg.norm(np.cross(tip, direction)) < 0.02
    assert tip @ direction > 0


def test_joints_outside_the_chain_are_unchanged(humanoid):
    pose = standing_pose(humanoid)
    chain = humanoid.ik_chains["left_toes"]
    target = positions(humanoid, pose)[humanoid.index("left_toes")] + [0., 0.2, 0.2]
    result = solve_ik(humanoid, pose, chain, target)
    untouched = [i for i, n in enumerate(humanoid.names) if n not in chain[:-1]]
    assert np.array_equal(
        result.pose.local_rotations[untouched], pose.local_rotations[untouched])


def test_broken_chain(humanoid):
    with pytest.raises(InvalidChain):
        solve_ik(humanoid, standing_pose(humanoid), ("left_hip", "left_ankle"), [0., 0., 0.])


def test_pelvis_free_translates_everything(humanoid):
    pose = standing_pose(humanoid)
    moved, _ = apply_command(
        humanoid, pose, CameraState(), PelvisFree(0.0, (0.0, 0.1, 0.0)))
    assert np.allclose(
        positions(humanoid, moved) - positions(humanoid, pose), [0., 0.1, 0.], atol=1e-12)


def test_pelvis_supported_keeps_support_point(humanoid):
    pose = standing_pose(humanoid)
    ik = IkConfig()
    before = positions(humanoid, pose)
    moved, _ = apply_command(
        humanoid, pose, CameraState(), PelvisSupported(0.0, (0.1, 0.0, 0.0), ("left_toes",)), ik)
    after = positions(humanoid, moved)
    toes = humanoid.index("left_toes")
    assert np.linalg.norm(after[toes] - before[toes]) < ik.tolerance
    assert np.linalg.norm(after[0] - before[0] - [0.1, 0., 0.]) < ik.tolerance


def test_roll_turns_the_child_about_the_bone(humanoid):
    pose = standing_pose(humanoid)
    pelvis, hip, knee = (humanoid.index(n) for n in ("pelvis", "right_hip", "right_knee"))
    before = positions(humanoid, pose)
    rolled, _ = apply_command(humanoid, pose, CameraState(), SingleJointRoll("right_hip", 90))
    after = positions(humanoid, rolled)

    assert np.allclose(after[hip], before[hip], atol=1e-12)
    axis = before[hip] - before[pelvis]
    axis /= np.linalg.norm(axis)

    def radial(p):
        r = p - before[hip]
        return r - (r @ axis) * axis

    a, b = radial(before[knee]), radial(after[knee])
    assert np.linalg.norm(a) == pytest.approx(np.linalg.norm(b), abs=1e-9)
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    assert cos == pytest.approx(0.0, abs=1e-9)
    # clockwise looking from the pelvis towards the hip
    assert np.cross(a, b) @ axis < 0


def test_single_joint_move_uses_the_parent_link(humanoid):
    pose = standing_pose(humanoid)
    knee = humanoid.index("left_knee")
    start = positions(humanoid, pose)[knee]
    moved, _ = apply_command(
        humanoid, pose, CameraState(), SingleJointMove("left_knee", (0.0, 0.0, 0.1)))
    after = positions(humanoid, moved)
    hip = humanoid.index("left_hip")
    assert np.allclose(after[hip], positions(humanoid, pose)[hip])
    assert np.linalg.norm(after[knee] - start) > 0.05


def test_end_effector_move(humanoid):
    pose = standing_pose(humanoid)
    ik = IkConfig()
    fingers = humanoid.index("right_fingers")
    target = positions(humanoid, pose)[fingers] + [0., 0.2, 0.2]
    moved, _ = apply_command(
        humanoid, pose, CameraState(), EndEffectorMove("right_fingers", (0., 0.2, 0.2)), ik)
    assert np.linalg.norm(positions(humanoid, moved)[fingers] - target) < ik.tolerance


def test_camera_rotation_is_periodic(humanoid):
    pose = standing_pose(humanoid)
    camera = CameraState(azimuth_deg=20.0)
    same_pose, turned = apply_command(humanoid, pose, camera, CameraRotate(360.0))
    assert same_pose is pose
    assert turned.azimuth_deg == pytest.approx(camera.azimuth_deg, abs=1e-9)
    _, quarter = apply_command(humanoid, pose, camera, CameraRotate(90.0))
    assert quarter.azimuth_deg == pytest.approx(110.0)


def test_done_is_not_applicable(humanoid):
    with pytest.raises(ValueError):
        apply_command(humanoid, standing_pose(humanoid), CameraState(), Done())


def test_commands_keep_poses_canonical(humanoid):
    pose = standing_pose(humanoid)
    for cmd in (
        PelvisFree(170.0, (0., 0., 0.)),
        SingleJointRoll("head", 200.0),
        EndEffectorMove("left_toes", (0., 0.1, 0.3)),
    ):
        pose, _ = apply_command(humanoid, pose, CameraState(), cmd)
        assert isinstance(pose, KinematicPose)
        assert rotations.is_canonical(pose.local_rotations)


def test_straight_arm_folds_toward_the_shoulder(humanoid):
    # the error points along the limb, so the first solve has no gradient
    pose = standing_pose(humanoid)
    chain = humanoid.ik_chains["left_fingers"]
    target = positions(humanoid, pose)[humanoid.index("left_fingers")] + [0.0, 0.2, 0.0]
    result = solve_ik(humanoid, pose, chain, target)
    assert result.residual < IkConfig().tolerance
    assert result.iterations <= IkConfig().max_iterations
    assert all(b <= a for a, b in zip(result.residuals, result.residuals[1:]))


@pytest.mark.parametrize("support", ["head", "left_hip", "pelvis"])
def test_pelvis_supported_by_a_single_joint_part(humanoid, support, caplog):
    pose = standing_pose(humanoid)
    ik = IkConfig()
    j = humanoid.index(support)
    before = positions(humanoid, pose)[j]
    moved, _ = apply_command(
        humanoid, pose, CameraState(), PelvisSupported(30.0, (0.1, 0.0, 0.0), (support,)), ik)
    assert np.linalg.norm(positions(humanoid, moved)[j] - before) < ik.tolerance
    assert "support point" not in caplog.text


def test_conflicting_support_points_are_logged(humanoid, caplog):
    pose = standing_pose(humanoid)
    moved, _ = apply_command(
        humanoid, pose, CameraState(),
        PelvisSupported(0.0, (0.0, 0.5, 0.0), ("left_toes", "right_toes")))
    assert isinstance(moved, KinematicPose)
    assert "support point" in caplog.text


def test_fuzzed_commands_keep_poses_canonical(humanoid):
    rng = np.random.default_rng(11)
    pose = standing_pose(humanoid)
    camera = CameraState()
    limbs = sorted(humanoid.ik_chains)
    for _ in range(200):
        kind = rng.integers(4)
        delta = tuple(rng.uniform(-0.3, 0.3, 3))
        if kind == 0:
            cmd = EndEffectorMove(limbs[rng.integers(len(limbs))], delta)
        elif kind == 1:
            cmd = SingleJointRoll(humanoid.names[rng.integers(1, len(humanoid))], rng.uniform(-360, 360))
        elif kind == 2:
            cmd = PelvisFree(rng.uniform(-180, 180), delta)
        else:
            cmd = SingleJointMove(humanoid.names[rng.integers(1, len(humanoid))], delta)
        pose, camera = apply_command(humanoid, pose, camera, cmd, IkConfig(max_iterations=50))
        assert rotations.is_canonical(pose.local_rotations)
        assert np.all(np.isfinite(pose.root_translation))
