"""
Quaternion helpers on top of `scipy.spatial.transform.Rotation`.

Quaternions are stored scalar-last, (x, y, z, w), as scipy does, and are
kept in the canonical hemisphere w >= 0. All functions broadcast over
leading dimensions.
"""
import numpy as np
from scipy.spatial.transform import Rotation

UP = np.array([0., 1., 0.])
FORWARD = np.array([0., 0., 1.])
LEFT = np.array([1., 0., 0.])

IDENTITY = np.array([0., 0., 0., 1.])


def canonical(q):
    """Unit norm with w >= 0; idempotent on already canonical input"""
    q = np.asarray(q, dtype=float)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(np.abs(norms - 1) > 1e-12, q / norms, q)
    return np.where(q[..., 3:] < 0, -q, q)


def is_canonical(q, tol=1e-9):
    q = np.asarray(q, dtype=float)
    norms = np.linalg.norm(q, axis=-1)
    return bool(np.all(np.abs(norms - 1) <= tol) and np.all(q[..., 3] >= 0))


def _rot(q):
    q = np.asarray(q, dtype=float)
    return Rotation.from_quat(q.reshape(-1, 4))


def _shaped(values, lead, tail):
    return np.asarray(values).reshape(lead + tail)


def to_matrix(q):
    q = np.asarray(q, dtype=float)
    return _shaped(_rot(q).as_matrix(), q.shape[:-1], (3, 3))


def from_matrix(m):
    m = np.asarray(m, dtype=float)
    q = Rotation.from_matrix(m.reshape(-1, 3, 3)).as_quat()
    return canonical(_shaped(q, m.shape[:-2], (4,)))


def multiply(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    q = (_rot(a) * _rot(b)).as_quat()
    return canonical(_shaped(q, a.shape[:-1], (4,)))


def inverse(q):
    q = np.asarray(q, dtype=float)
    return canonical(q * np.array([-1., -1., -1., 1.]))


def rotate(q, v):
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    lead = np.broadcast_shapes(q.shape[:-1], v.shape[:-1])
    q = np.broadcast_to(q, lead + (4,))
    v = np.broadcast_to(v, lead + (3,))
    out = _rot(q).apply(v.reshape(-1, 3))
    return _shaped(out, lead, (3,))


def to_rotvec(q):
    q = np.asarray(q, dtype=float)
    return _shaped(_rot(q).as_rotvec(), q.shape[:-1], (3,))


def from_rotvec(rotvec):
    rotvec = np.asarray(rotvec, dtype=float)
    q = Rotation.from_rotvec(rotvec.reshape(-1, 3)).as_quat()
    return canonical(_shaped(q, rotvec.shape[:-1], (4,)))


def about_axis(axis, degrees):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    return from_rotvec(axis * np.deg2rad(np.asarray(degrees, float))[..., None])


def yaw(degrees):
    return about_axis(UP, degrees)


def heading_deg(q):
    """Yaw of the forward (+z) axis after rotation, degrees about +y"""
    forward = rotate(q, FORWARD)
    return np.rad2deg(np.arctan2(forward[..., 0], forward[..., 2]))


def relative_rotvec(q_from, q_to):
    """Rotation vector of q_to * q_from^-1, expressed in the world frame"""
    rel = _rot(q_to) * _rot(q_from).inv()
    q_from = np.asarray(q_from, dtype=float)
    return _shaped(rel.as_rotvec(), q_from.shape[:-1], (3,))


def slerp(q0, q1, s):
    """
    Shortest-arc spherical interpolation, q0 * exp(s * log(q0^-1 q1)).

    `q0`, `q1` have shape (..., 4) and `s` is an array of fractions; the
    result has shape s.shape + q0.shape.
    """
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    s = np.asarray(s, dtype=float)
    r0 = _rot(q0)
    rel = (r0.inv() * _rot(q1)).as_rotvec()
    frames = []
    for frac in s.reshape(-1):
        step = Rotation.from_rotvec(rel * frac)
        frames.append((r0 * step).as_quat())
    out = np.stack(frames).reshape(s.shape + q0.shape)
    return canonical(out)
