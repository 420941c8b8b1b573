"""
Simplified articulated rigid-body stepper.

Each joint owns one capsule body whose mass sits at the joint. Per
substep the stepper applies gravity, then implicit PD impulses child
to parent, predicts positions, and then solves the ball-joint, ground
contact and static friction constraints together as a compliant
position-level system (one dense Newton solve per iteration). Velocities
are recovered from the position change, after which contact normal
damping is applied.
"""
import logging
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from . import rotations
from .skeleton import (
    SkeletonTopology, KinematicPose, SimState, standing_pose, pose_to_sim_state
)
from .terrain import HeightField

logger = logging.getLogger(__name__)

_UP = rotations.UP
_TANGENTS = (rotations.LEFT, rotations.FORWARD)
_REGULARISATION = 1e-12


class NonFiniteState(ValueError):
    pass


class SimConfig(NamedTuple):
    dt: float = 0.05
    substeps: int = 6
    gravity: float = 9.81
    kp: float = 2000.0
    kd: float = 100.0
    torque_limit: float = 200.0
    contact_stiffness: float = 1e5
    contact_damping: float = 2e3
    friction: float = 0.8
    joint_compliance: float = 1e-6
    iterations: int = 4
    armature: float = 0.01
    pin_root: bool = False

    @property
    def substep(self):
        return self.dt / self.substeps

    def validate(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.substeps < 1 or self.iterations < 1:
            raise ValueError("substeps and iterations must be >= 1")
        for name in ('kp', 'kd', 'torque_limit', 'contact_damping', 'friction',
                     'joint_compliance', 'armature'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.contact_stiffness > 0:
            raise ValueError(f"contact_stiffness must be > 0, got {self.contact_stiffness}")
        return self


class Action(NamedTuple):
    """PD target local rotations for every non-root joint, (J - 1, 4)"""
    targets: np.ndarray

    @classmethod
    def create(cls, targets):
        targets = rotations.canonical(np.array(targets, dtype=float))
        if targets.ndim != 2 or targets.shape[1] != 4:
            raise ValueError(f"action targets must be (J - 1, 4), got {targets.shape}")
        if not np.all(np.isfinite(targets)):
            raise ValueError("action targets must be finite")
        return cls(targets)

    @classmethod
    def from_pose(cls, pose: KinematicPose):
        return cls.create(pose.local_rotations[1:])

    @classmethod
    def from_rotvecs(cls, rotvecs):
        return cls.create(rotations.from_rotvec(np.asarray(rotvecs, float).reshape(-1, 3)))

    def rotvecs(self):
        return rotations.to_rotvec(self.targets)


def body_inertia(topology: SkeletonTopology, armature: float = 0.0) -> np.ndarray:
    """Body-frame inertia tensors (B, 3, 3) about each joint"""
    r = topology.radii
    m = topology.masses
    # solid cylinder over the core and half of each cap
    length = 2 * topology.half_lengths + r
    axial = 0.5 * m * r ** 2
    transverse = m * (3 * r ** 2 + length ** 2) / 12
    a = topology.capsule_axes
    outer = a[:, :, None] * a[:, None, :]
    eye = np.eye(3)
    return (
        transverse[:, None, None] * (eye - outer)
        + axial[:, None, None] * outer
        + armature * eye
    )


def _world_inertia(R, inertia):
    return R @ inertia @ np.transpose(R, (0, 2, 1))


def _skew(v):
    x, y, z = v
    return np.array([[0., -z, y], [z, 0., -x], [-y, x, 0.]])


def _contact_offsets(topology, R):
    """World offsets (B, 2, 3) from each body to the lowest points of its end spheres"""
    axis = np.einsum('bij,bj->bi', R, topology.capsule_axes)
    ends = np.stack([axis, -axis], axis=1) * topology.half_lengths[:, None, None]
    return ends - topology.radii[:, None, None] * _UP


def _check_finite(x, R):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(R))):
        raise NonFiniteState("simulation diverged to non-finite values")


def _check(topology, state, action=None):
    if len(state.x) != len(topology):
        raise ValueError(f"state has {len(state.x)} bodies, topology has {len(topology)}")
    if not state.is_finite():
        raise NonFiniteState("simulation state contains non-finite values")
    if action is not None and action.targets.shape != (len(topology) - 1, 4):
        raise ValueError(
            f"action needs {len(topology) - 1} targets, got {action.targets.shape[0]}")


def _joint_errors(topology, R, target_matrices):
    """World-frame rotation vectors taking each child to its PD target"""
    if len(topology) < 2:
        return np.zeros((0, 3))
    parents = topology.parents[1:]
    desired = R[parents] @ target_matrices
    return Rotation.from_matrix(desired @ np.transpose(R[1:], (0, 2, 1))).as_rotvec()


def pd_torque(
        topology: SkeletonTopology, state: SimState, action: Action,
        config: SimConfig = SimConfig(),
) -> np.ndarray:
    """kp * orientation error - kd * relative angular velocity, clamped per axis"""
    _check(topology, state, action)
    R = rotations.to_matrix(state.q)
    error = _joint_errors(topology, R, rotations.to_matrix(action.targets))
    relative = state.w[1:] - state.w[topology.parents[1:]]
    torque = config.kp * error - config.kd * relative
    return np.clip(torque, -config.torque_limit, config.torque_limit)


def _apply_pd(topology, w, error, inv_inertia, config, h):
    """
    Stable PD as an implicit two-body impulse per joint, children before
    parents. The impulse P solves
    P = h * kp * (e - h * w_rel') - h * kd * w_rel',  w_rel' = w_rel + (I_j^-1 + I_p^-1) P
    so a light parent is never kicked harder than its own inertia allows.
    """
    gain = h * (config.kd + h * config.kp)
    limit = h * config.torque_limit
    eye = np.eye(3)
    for j in range(len(topology) - 1, 0, -1):
        p = topology.parents[j]
        relative = w[j] - w[p]
        impulse = np.linalg.solve(
            eye + gain * (inv_inertia[j] + inv_inertia[p]),
            h * config.kp * error[j - 1] - gain * relative)
        impulse = np.clip(impulse, -limit, limit)
        w[j] = w[j] + inv_inertia[j] @ impulse
        w[p] = w[p] - inv_inertia[p] @ impulse


class _Contact(NamedTuple):
    body: int
    local: np.ndarray
    previous: np.ndarray


def _find_contacts(topology, field, x, R, x_prev, R_prev):
    offsets = _contact_offsets(topology, R)
    points = x[:, None, :] + offsets
    heights = field.height(points[..., 0], points[..., 2])
    contacts = []
    for b, k in zip(*np.nonzero(points[..., 1] < heights)):
        local = R[b].T @ offsets[b, k]
        contacts.append(_Contact(int(b), local, x_prev[b] + R_prev[b] @ local))
    return contacts


def _assemble(topology, field, contacts, x, R, lam_rows):
    """Constraint values and Jacobian over (x_b, theta_b) for every body"""
    n = len(topology)
    rows = 3 * (n - 1) + 3 * len(contacts)
    C = np.zeros(rows)
    J = np.zeros((rows, 6 * n))
    for j in range(1, n):
        p = topology.parents[j]
        r = R[p] @ topology.offsets[j]
        i = 3 * (j - 1)
        C[i:i + 3] = x[j] - x[p] - r
        J[i:i + 3, 6 * j:6 * j + 3] = np.eye(3)
        J[i:i + 3, 6 * p:6 * p + 3] = -np.eye(3)
        J[i:i + 3, 6 * p + 3:6 * p + 6] = _skew(r)

    for c, contact in enumerate(contacts):
        b = contact.body
        rho = R[b] @ contact.local
        point = x[b] + rho
        i = lam_rows + 3 * c
        C[i] = point[1] - field.height(point[0], point[2])
        J[i, 6 * b:6 * b + 3] = _UP
        J[i, 6 * b + 3:6 * b + 6] = np.cross(rho, _UP)
        for k, t in enumerate(_TANGENTS, start=1):
            C[i + k] = t @ (point - contact.previous)
            J[i + k, 6 * b:6 * b + 3] = t
            J[i + k, 6 * b + 3:6 * b + 6] = np.cross(rho, t)
    return C, J


def _inverse_mass_matrix(inv_mass, inv_inertia):
    n = len(inv_mass)
    M = np.zeros((6 * n, 6 * n))
    for b in range(n):
        M[6 * b:6 * b + 3, 6 * b:6 * b + 3] = inv_mass[b] * np.eye(3)
        M[6 * b + 3:6 * b + 6, 6 * b + 3:6 * b + 6] = inv_inertia[b]
    return M


def _solve_positions(topology, field, contacts, x, R, inv_mass, inv_inertia, config, h):
    n = len(topology)
    joint_rows = 3 * (n - 1)
    Minv = _inverse_mass_matrix(inv_mass, inv_inertia)
    rows = joint_rows + 3 * len(contacts)
    if rows == 0:
        return x, R, np.zeros(0)
    alpha = np.full(rows, config.joint_compliance / h ** 2)
    alpha[joint_rows::3] = 1.0 / (config.contact_stiffness * h ** 2)
    alpha[joint_rows + 1::3] = 0.0
    alpha[joint_rows + 2::3] = 0.0
    lam = np.zeros(rows)

    for _ in range(config.iterations):
        C, J = _assemble(topology, field, contacts, x, R, joint_rows)
        JM = J @ Minv
        A = JM @ J.T + np.diag(alpha)
        A[np.diag_indices(rows)] += _REGULARISATION * (1 + np.diag(A))
        try:
            delta = np.linalg.solve(A, -C - alpha * lam)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(A, -C - alpha * lam, rcond=None)[0]

        updated = lam + delta
        for c in range(len(contacts)):
            i = joint_rows + 3 * c
            normal = max(updated[i], 0.0)
            tangent = updated[i + 1:i + 3]
            limit = config.friction * normal
            size = np.linalg.norm(tangent)
            if size > limit:
                tangent = tangent * (limit / size) if size > 0 else tangent
            updated[i] = normal
            updated[i + 1:i + 3] = tangent
        delta = updated - lam
        lam = updated

        correction = (JM.T @ delta).reshape(n, 6)
        x = x + correction[:, :3]
        R = Rotation.from_rotvec(correction[:, 3:]).as_matrix() @ R

    return x, R, lam[joint_rows::3]


def _damp_contacts(contacts, normal_lam, x, R, v, w, inv_mass, inv_inertia, config, h):
    for contact, lam in zip(contacts, normal_lam):
        if lam <= 0:
            continue
        b = contact.body
        rho = R[b] @ contact.local
        arm = np.cross(rho, _UP)
        vn = (v[b] + np.cross(w[b], rho)) @ _UP
        weight = inv_mass[b] + arm @ inv_inertia[b] @ arm
        if weight <= 0:
            continue
        impulse = -min(h * config.contact_damping * weight, 1.0) * vn / weight
        v[b] = v[b] + impulse * inv_mass[b] * _UP
        w[b] = w[b] + impulse * inv_inertia[b] @ arm


def step(
        topology: SkeletonTopology,
        state: SimState,
        action: Action,
        field: Optional[HeightField] = None,
        config: SimConfig = SimConfig(),
) -> SimState:
    """
    Advances `state` by one control step `config.dt`. `field=None`
    disables contact. Pure and deterministic.
    """
    config.validate()
    _check(topology, state, action)
    h = config.substep
    targets = rotations.to_matrix(action.targets)
    inertia_body = body_inertia(topology, config.armature)
    inv_mass = 1.0 / topology.masses
    if config.pin_root:
        inv_mass[0] = 0.0

    x = np.array(state.x)
    R = rotations.to_matrix(state.q)
    v = np.array(state.v)
    w = np.array(state.w)
    if config.pin_root:
        v[0] = 0.0

    for _ in range(config.substeps):
        inertia = _world_inertia(R, inertia_body)
        inv_inertia = np.linalg.inv(inertia)

        v[:, 1] -= config.gravity * h * (inv_mass > 0)
        _apply_pd(topology, w, _joint_errors(topology, R, targets), inv_inertia, config, h)

        x_prev, R_prev = x, R
        x = x + h * v
        R = Rotation.from_rotvec(h * w).as_matrix() @ R
        _check_finite(x, R)

        contacts = [] if field is None else _find_contacts(topology, field, x, R, x_prev, R_prev)
        x, R, normal_lam = _solve_positions(
            topology, field, contacts, x, R, inv_mass, inv_inertia, config, h)
        _check_finite(x, R)

        q = rotations.from_matrix(R)
        R = rotations.to_matrix(q)
        v = (x - x_prev) / h
        w = Rotation.from_matrix(R @ np.transpose(R_prev, (0, 2, 1))).as_rotvec() / h
        if contacts:
            _damp_contacts(contacts, normal_lam, x, R, v, w, inv_mass, inv_inertia, config, h)

    result = SimState.create(x, rotations.from_matrix(R), v, w)
    if not result.is_finite():
        raise NonFiniteState("simulation diverged to non-finite values")
    return result


def linear_momentum(state: SimState, topology: SkeletonTopology) -> np.ndarray:
    return (topology.masses[:, None] * state.v).sum(axis=0)


def contact_penetration(state: SimState, topology: SkeletonTopology, field: HeightField):
    """Depth below the terrain of every capsule's end spheres, (B, 2), zero when clear"""
    R = rotations.to_matrix(state.q)
    points = state.x[:, None, :] + _contact_offsets(topology, R)
    heights = field.height(points[..., 0], points[..., 2])
    return np.maximum(heights - points[..., 1], 0.0)


def mechanical_energy(
        state: SimState, topology: SkeletonTopology,
        config: SimConfig = SimConfig(), field: Optional[HeightField] = None,
) -> float:
    """Kinetic, gravitational and contact-spring energy in joules"""
    m = topology.masses
    R = rotations.to_matrix(state.q)
    inertia = _world_inertia(R, body_inertia(topology, config.armature))
    kinetic = 0.5 * np.sum(m * np.sum(state.v ** 2, axis=1))
    kinetic += 0.5 * np.einsum('bi,bij,bj->', state.w, inertia, state.w)
    potential = config.gravity * np.sum(m * state.x[:, 1])
    if field is not None:
        depth = contact_penetration(state, topology, field)
        potential += 0.5 * config.contact_stiffness * np.sum(depth ** 2)
    return float(kinetic + potential)


def standing_state(topology: SkeletonTopology) -> SimState:
    return pose_to_sim_state(topology, standing_pose(topology))
