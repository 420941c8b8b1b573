import logging
from typing import NamedTuple, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import rotations
from .skeleton import (
    SkeletonTopology, KinematicPose, forward_kinematics, END_EFFECTORS
)
from .commands import (
    Command, SingleJointMove, EndEffectorMove, SingleJointRoll, CameraRotate,
    PelvisSupported, PelvisFree, Done,
)

logger = logging.getLogger(__name__)

_MAX_RETRIES = 12
_DAMPING_FACTOR = 4.0
_MIN_DAMPING = 1e-6
_BEND_RAD = 0.3


class IkConfig(NamedTuple):
    max_iterations: int = 500
    tolerance: float = 0.01
    step_size: float = 1.0
    damping: float = 1e-3

    def validate(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be > 0, got {self.tolerance}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.damping < 0:
            raise ValueError(f"damping must be >= 0, got {self.damping}")
        return self


class IkResult(NamedTuple):
    pose: KinematicPose
    residual: float
    iterations: int
    residuals: Tuple[float, ...]


class CameraState(NamedTuple):
    """
    Camera on a horizontal circle around the pelvis.

    `azimuth_deg` is measured clockwise, seen from above, from the
    character's facing direction (+z); 315 places the viewer in front and
    to the character's left.
    """
    azimuth_deg: float = 315.0
    radius: float = 3.0
    height_offset: float = 0.3

    def validate(self):
        if not self.radius > 0:
            raise ValueError(f"camera radius must be > 0, got {self.radius}")
        return self

    def position(self, target):
        angle = -np.deg2rad(self.azimuth_deg % 360.0)
        offset = np.array([np.sin(angle), 0., np.cos(angle)]) * self.radius
        return np.asarray(target, float) + offset + [0., self.height_offset, 0.]


class InvalidChain(ValueError):
    pass


def _chain_indices(topology, chain):
    if len(chain) < 2:
        raise InvalidChain(f"chain needs at least two joints, got {list(chain)}")
    try:
        indices = [topology.index(name) for name in chain]
    except KeyError as err:
        raise InvalidChain(str(err)) from None
    for base, child in zip(indices, indices[1:]):
        if topology.parents[child] != base:
            raise InvalidChain(
                f"{topology.names[child]!r} is not a child of {topology.names[base]!r}")
    return indices


class _ChainModel:
    """Tip position of a chain as a function of its joints' local rotations"""
    def __init__(self, topology, pose, indices):
        world = forward_kinematics(topology, pose)
        base = indices[0]
        parent = topology.parents[base]
        self.base_matrix = world.matrices[parent] if parent >= 0 else np.eye(3)
        self.base_position = world.positions[base]
        self.offsets = topology.offsets[indices[1:]]

    def evaluate(self, local):
        """Returns joint positions (n+1, 3) and world matrices (n, 3, 3)"""
        positions = [self.base_position]
        matrices = []
        current = self.base_matrix
        for k, m in enumerate(local):
            current = current @ m
            matrices.append(current)
            positions.append(positions[-1] + current @ self.offsets[k])
        return np.array(positions), np.array(matrices)


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0]])


def _jacobian(positions, matrices):
    """d tip / d w_k for the right-multiplied perturbation exp(w_k) of every joint"""
    levers = positions[-1] - positions[:-1]
    return np.concatenate([-_skew(l) @ m for l, m in zip(levers, matrices)], axis=1)


def _descend(model, local, target, config, budget):
    """Levenberg-Marquardt steps until converged, stalled or out of budget"""
    positions, matrices = model.evaluate(local)
    residual = float(np.linalg.norm(positions[-1] - target))
    history = [residual]
    damping = max(config.damping, _MIN_DAMPING)
    while residual >= config.tolerance and len(history) <= budget:
        jac = _jacobian(positions, matrices)
        error = target - positions[-1]
        accepted = False
        for _ in range(_MAX_RETRIES):
            step = config.step_size * jac.T @ np.linalg.solve(
                jac @ jac.T + damping * np.eye(3), error)
            trial = local @ Rotation.from_rotvec(step.reshape(-1, 3)).as_matrix()
            trial_positions, trial_matrices = model.evaluate(trial)
            trial_residual = float(np.linalg.norm(trial_positions[-1] - target))
            if trial_residual < residual:
                accepted = True
                damping = max(damping / _DAMPING_FACTOR, _MIN_DAMPING)
                break
            damping *= _DAMPING_FACTOR
        if not accepted:
            break
        local, positions, matrices = trial, trial_positions, trial_matrices
        residual = trial_residual
        history.append(residual)
    return local, history


def _bent(local, sign):
    bend = Rotation.from_rotvec([sign * _BEND_RAD, 0.0, 0.0]).as_matrix()
    local = local.copy()
    local[1:] = local[1:] @ bend
    return local


def solve_ik(
        topology: SkeletonTopology,
        pose: KinematicPose,
        chain: Sequence[str],
        target,
        config: IkConfig = IkConfig(),
) -> IkResult:
    """
    Damped least squares on the rotation vectors of every chain joint
    except the tip, dw = J^T (J J^T + lambda I)^-1 e. Joint k's local
    rotation is perturbed by exp(w_k) on the right. A step is accepted only
    if the residual decreases, otherwise lambda grows and the step is
    retried, so the residual history is nonincreasing.

    A chain that stalls short of its target (a straight limb with the
    target along it has no useful gradient) is restarted from both small
    knee-like bends of its inner joints; a restart is kept only if it ends
    closer than the straight solution.
    """
    config.validate()
    indices = _chain_indices(topology, chain)
    target = np.asarray(target, dtype=float)
    if target.shape != (3,) or not np.all(np.isfinite(target)):
        raise ValueError(f"target must be a finite 3-vector, got {target!r}")

    model = _ChainModel(topology, pose, indices)
    start = rotations.to_matrix(pose.local_rotations[indices[:-1]])
    local, history = _descend(model, start, target, config, config.max_iterations)

    if history[-1] >= config.tolerance and len(indices) > 2:
        for sign in (1.0, -1.0):
            budget = config.max_iterations - (len(history) - 1)
            if budget < 1:
                break
            bent_local, bent_history = _descend(
                model, _bent(local, sign), target, config, budget)
            if bent_history[-1] < history[-1]:
                logger.debug(
                    "ik on %s restarted from a bend: %.4g -> %.4g",
                    chain[-1], history[-1], bent_history[-1])
                local = bent_local
                history += [r for r in bent_history if r < history[-1]]
            if history[-1] < config.tolerance:
                break

    if history[-1] >= config.tolerance:
        logger.debug("ik stalled on %s at residual %.4g", chain[-1], history[-1])
    iterations = len(history) - 1
    if iterations:
        pose = pose.replace_rotations(indices[:-1], rotations.from_matrix(local))
    return IkResult(pose, history[-1], iterations, tuple(history))


def _root_transform(pose, rotation_deg, translation):
    rots = pose.local_rotations.copy()
    rots[0] = rotations.multiply(rotations.yaw(rotation_deg), rots[0])
    return KinematicPose.create(
        pose.root_translation + np.asarray(translation, dtype=float), rots)


def _roll(topology, pose, joint, degrees):
    j = topology.index(joint)
    world = forward_kinematics(topology, pose)
    p = topology.parents[j]
    if p < 0:
        axis = rotations.UP
    else:
        axis = world.positions[j] - world.positions[p]
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ValueError(f"{joint!r} has a zero-length bone, roll axis undefined")
        axis = axis / norm

    turn = rotations.about_axis(axis, -degrees)
    rolled = rotations.multiply(turn, rotations.from_matrix(world.matrices[j]))
    if p < 0:
        local = rolled
    else:
        parent = rotations.from_matrix(world.matrices[p])
        local = rotations.multiply(rotations.inverse(parent), rolled)
    return pose.replace_rotations([j], local[None])


def apply_command(
        topology: SkeletonTopology,
        pose: KinematicPose,
        camera: CameraState,
        cmd: Command,
        ik: IkConfig = IkConfig(),
) -> Tuple[KinematicPose, CameraState]:
    if isinstance(cmd, Done):
        raise ValueError("Done is a terminator, not an applicable command")

    if isinstance(cmd, CameraRotate):
        azimuth = (camera.azimuth_deg + cmd.degrees) % 360.0
        return pose, camera._replace(azimuth_deg=azimuth)

    if isinstance(cmd, SingleJointMove):
        j = topology.index(cmd.joint)
        p = topology.parents[j]
        if p < 0:
            raise ValueError(f"{cmd.joint!r} has no parent to move around")
        position = forward_kinematics(topology, pose).positions[j]
        result = solve_ik(
            topology, pose, (topology.names[p], cmd.joint),
            position + np.asarray(cmd.delta), ik)
        _log_residual(cmd, cmd.joint, result, ik)
        return result.pose, camera

    if isinstance(cmd, EndEffectorMove):
        if cmd.end_effector not in END_EFFECTORS:
            raise ValueError(f"{cmd.end_effector!r} is not an end effector")
        j = topology.index(cmd.end_effector)
        position = forward_kinematics(topology, pose).positions[j]
        result = solve_ik(
            topology, pose, topology.ik_chains[cmd.end_effector],
            position + np.asarray(cmd.delta), ik)
        _log_residual(cmd, cmd.end_effector, result, ik)
        return result.pose, camera

    if isinstance(cmd, SingleJointRoll):
        return _roll(topology, pose, cmd.joint, cmd.degrees), camera

    if isinstance(cmd, PelvisFree):
        return _root_transform(pose, cmd.rotation_deg, cmd.translation), camera

    if isinstance(cmd, PelvisSupported):
        if not cmd.support_points:
            raise ValueError("PelvisSupported needs at least one support point")
        before = forward_kinematics(topology, pose).positions
        anchors = {
            name: before[topology.index(name)] for name in cmd.support_points}
        pose = _root_transform(pose, cmd.rotation_deg, cmd.translation)
        for name, anchor in anchors.items():
            chain = topology.chain_to(name)
            if len(chain) < 2:
                # nothing below the part to bend, so the whole body moves back
                current = forward_kinematics(topology, pose).positions[topology.index(name)]
                pose = KinematicPose.create(
                    pose.root_translation + (anchor - current), pose.local_rotations)
                continue
            result = solve_ik(topology, pose, chain, anchor, ik)
            pose = result.pose
        after = forward_kinematics(topology, pose).positions
        for name, anchor in anchors.items():
            residual = float(np.linalg.norm(after[topology.index(name)] - anchor))
            if residual >= ik.tolerance:
                logger.warning(
                    "%s: support point %s left %.3f m from where it was",
                    type(cmd).__name__, name, residual)
        return pose, camera

    raise TypeError(f"not a command: {cmd!r}")


def _log_residual(cmd, joint, result, ik):
    if result.residual >= ik.tolerance:
        logger.warning(
            "%s: %s left %.3f m from its target after %d iterations",
            type(cmd).__name__, joint, result.residual, result.iterations)
