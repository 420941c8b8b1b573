import logging
from pathlib import Path
from functools import lru_cache
from typing import NamedTuple, Optional, Tuple, Dict, Sequence, List

import numpy as np
import pandas as pd

from . import rotations, utils, files

logger = logging.getLogger(__name__)

ROOT = "pelvis"

BODY_PARTS = (
    "pelvis", "left_leg", "right_leg", "torso", "head", "left_arm", "right_arm"
)
END_EFFECTORS = ("left_fingers", "right_fingers", "left_toes", "right_toes")
CHAIN_BASES = {
    "left_fingers": "left_shoulder",
    "right_fingers": "right_shoulder",
    "left_toes": "left_hip",
    "right_toes": "right_hip",
}


class Capsule(NamedTuple):
    radius: float
    half_length: float
    mass: float


class JointSpec(NamedTuple):
    name: str
    parent: Optional[int]
    local_offset: Tuple[float, float, float]
    body: Capsule


class SkeletonTopology:
    """
    Joint hierarchy plus the body-part partition and IK chains.

    Joints are topologically sorted, each joint owns the rigid body whose
    mass sits at the joint position.
    """
    def __init__(
        self,
        joints: Sequence[JointSpec],
        body_parts: Dict[str, Sequence[str]],
        ik_chains: Dict[str, Sequence[str]],
    ):
        self.joints = tuple(joints)
        self.body_parts = {k: tuple(v) for k, v in body_parts.items()}
        self.ik_chains = {k: tuple(v) for k, v in ik_chains.items()}
        self.names = tuple(j.name for j in self.joints)
        self._index = {name: i for i, name in enumerate(self.names)}
        self._validate()

        self.parents = np.array(
            [-1 if j.parent is None else j.parent for j in self.joints])
        self.offsets = np.array([j.local_offset for j in self.joints], float)
        self.masses = np.array([j.body.mass for j in self.joints], float)
        self.radii = np.array([j.body.radius for j in self.joints], float)
        self.half_lengths = np.array(
            [j.body.half_length for j in self.joints], float)
        self.children = {i: [] for i in range(len(self.joints))}
        for i, p in enumerate(self.parents):
            if p >= 0:
                self.children[p].append(i)
        self.capsule_axes = self._capsule_axes()
        self._part_of = {
            name: part for part, names in self.body_parts.items()
            for name in names
        }

    def _validate(self):
        if len(self.names) != len(self._index):
            raise ValueError("joint names must be unique")
        roots = [j for j in self.joints if j.parent is None]
        if len(roots) != 1 or self.joints[0].name != ROOT:
            raise ValueError(f"exactly one root joint named {ROOT!r} must come first")
        for i, joint in enumerate(self.joints):
            if joint.parent is not None and not 0 <= joint.parent < i:
                raise ValueError(
                    f"joint {joint.name!r} has parent index {joint.parent}, "
                    "joints must be topologically sorted")
            if joint.body.mass <= 0 or joint.body.radius <= 0:
                raise ValueError(f"joint {joint.name!r} needs mass > 0 and radius > 0")
            if joint.body.half_length < 0:
                raise ValueError(f"joint {joint.name!r} has negative half_length")

        covered = [name for names in self.body_parts.values() for name in names]
        if sorted(covered) != sorted(self.names):
            raise ValueError("body parts must cover every joint exactly once")

        for tip, chain in self.ik_chains.items():
            if chain[-1] != tip:
                raise ValueError(f"ik chain for {tip!r} must end at {tip!r}")
            for base, child in zip(chain, chain[1:]):
                if self.joints[self.index(child)].parent != self.index(base):
                    raise ValueError(
                        f"ik chain for {tip!r} is not contiguous at {base!r}->{child!r}")

    def __len__(self):
        return len(self.joints)

    def __eq__(self, other):
        return (
            isinstance(other, SkeletonTopology)
            and self.joints == other.joints
            and self.body_parts == other.body_parts
            and self.ik_chains == other.ik_chains
        )

    def __repr__(self):
        return f"SkeletonTopology({len(self)} joints, {len(self.body_parts)} parts)"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown joint {name!r}") from None

    def part_of(self, name: str) -> str:
        return self._part_of[name]

    def chain_to(self, name: str) -> Tuple[str, ...]:
        """Joints from the first joint of `name`'s body part down to `name`"""
        part = self.body_parts[self.part_of(name)]
        chain = [name]
        i = self.index(name)
        while self.names[i] != part[0]:
            i = self.parents[i]
            if i < 0:
                break
            chain.append(self.names[i])
        return tuple(reversed(chain))

    def _capsule_axes(self):
        axes = np.tile(rotations.UP, (len(self.joints), 1))
        for i in range(len(self.joints)):
            if self.children[i]:
                direction = self.offsets[self.children[i][0]]
            else:
                direction = self.offsets[i]
            norm = np.linalg.norm(direction)
            if norm > 0:
                axes[i] = direction / norm
        return axes

    def fingerprint(self) -> str:
        return utils.fingerprint({
            'joints': [
                (j.name, j.parent, list(j.local_offset), list(j.body))
                for j in self.joints
            ],
            'parts': self.body_parts,
            'chains': self.ik_chains,
        })


def validate_humanoid(topology: SkeletonTopology):
    """Checks the seven-part partition and the four limb chains"""
    if tuple(topology.body_parts) != BODY_PARTS:
        raise ValueError(
            f"body parts must be {BODY_PARTS}, got {tuple(topology.body_parts)}")
    if set(topology.ik_chains) != set(END_EFFECTORS):
        raise ValueError(f"ik chains must end at {END_EFFECTORS}")
    for tip, base in CHAIN_BASES.items():
        if topology.ik_chains[tip][0] != base:
            raise ValueError(f"ik chain for {tip!r} must start at {base!r}")


class KinematicPose(NamedTuple):
    root_translation: np.ndarray
    local_rotations: np.ndarray

    @classmethod
    def create(cls, root_translation, local_rotations):
        root = np.array(root_translation, dtype=float).reshape(3)
        rots = rotations.canonical(np.array(local_rotations, dtype=float))
        if rots.ndim != 2 or rots.shape[1] != 4:
            raise ValueError(f"local rotations must be (J, 4), got {rots.shape}")
        if not (np.all(np.isfinite(root)) and np.all(np.isfinite(rots))):
            raise ValueError("pose must be finite")
        root.flags.writeable = False
        rots.flags.writeable = False
        return cls(root, rots)

    def replace_rotations(self, indices, quats):
        rots = self.local_rotations.copy()
        rots[list(indices)] = quats
        return KinematicPose.create(self.root_translation, rots)

    def allclose(self, other, atol=1e-12):
        return (
            np.allclose(self.root_translation, other.root_translation, atol=atol)
            and np.allclose(self.local_rotations, other.local_rotations, atol=atol)
        )


def standing_pose(topology: SkeletonTopology) -> KinematicPose:
    rots = np.tile(rotations.IDENTITY, (len(topology), 1))
    return KinematicPose.create(topology.offsets[0], rots)


def _check_pose(topology, pose):
    if len(pose.local_rotations) != len(topology):
        raise ValueError(
            f"pose has {len(pose.local_rotations)} joints, "
            f"topology has {len(topology)}")


class WorldTransforms(NamedTuple):
    positions: np.ndarray
    matrices: np.ndarray

    @property
    def rotations(self):
        return rotations.from_matrix(self.matrices)


def forward_kinematics(topology: SkeletonTopology, pose: KinematicPose) -> WorldTransforms:
    _check_pose(topology, pose)
    local = rotations.to_matrix(pose.local_rotations)
    n = len(topology)
    positions = np.empty((n, 3))
    matrices = np.empty((n, 3, 3))
    positions[0] = pose.root_translation
    matrices[0] = local[0]
    for j in range(1, n):
        p = topology.parents[j]
        positions[j] = positions[p] + matrices[p] @ topology.offsets[j]
        matrices[j] = matrices[p] @ local[j]
    return WorldTransforms(positions, matrices)


def joint_coordinates(topology, pose) -> Dict[str, np.ndarray]:
    positions = forward_kinematics(topology, pose).positions
    return dict(zip(topology.names, positions))


class RigidBodyState(NamedTuple):
    x: np.ndarray
    q: np.ndarray
    v: np.ndarray
    w: np.ndarray


class SimState(NamedTuple):
    """Per-body arrays: x, v, w are (B, 3), q is (B, 4)"""
    x: np.ndarray
    q: np.ndarray
    v: np.ndarray
    w: np.ndarray

    @classmethod
    def create(cls, x, q, v, w):
        x, q, v, w = (np.array(a, dtype=float) for a in (x, q, v, w))
        n = len(x)
        if q.shape != (n, 4) or x.shape != v.shape or v.shape != w.shape or x.shape != (n, 3):
            raise ValueError("inconsistent body state shapes")
        for a in (x, q, v, w):
            a.flags.writeable = False
        return cls(x, q, v, w)

    @property
    def bodies(self) -> List[RigidBodyState]:
        return [RigidBodyState(*arrs) for arrs in zip(self.x, self.q, self.v, self.w)]

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self)

    def translated(self, offset):
        return SimState.create(self.x + np.asarray(offset), self.q, self.v, self.w)


def pose_to_sim_state(topology, pose, v=None, w=None) -> SimState:
    world = forward_kinematics(topology, pose)
    zeros = np.zeros((len(topology), 3))
    return SimState.create(
        world.positions, world.rotations,
        zeros if v is None else v,
        zeros if w is None else w,
    )


def pose_pair_to_sim_state(
        topology: SkeletonTopology,
        pose_a: KinematicPose,
        pose_b: KinematicPose,
        dt: float,
) -> SimState:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    world_a = forward_kinematics(topology, pose_a)
    world_b = forward_kinematics(topology, pose_b)
    v = (world_b.positions - world_a.positions) / dt
    w = rotations.relative_rotvec(world_a.rotations, world_b.rotations) / dt
    return SimState.create(world_b.positions, world_b.rotations, v, w)


def sim_state_to_pose(topology: SkeletonTopology, state: SimState) -> KinematicPose:
    """Root translation and local rotations recovered from world body orientations"""
    parents = np.array([0] + list(topology.parents[1:]))
    local = rotations.multiply(rotations.inverse(state.q[parents]), state.q)
    local[0] = state.q[0]
    return KinematicPose.create(state.x[0], local)


SKELETON_FORMAT = "motion_synth-skeleton-v1"
_DATA_PATH = Path(__file__).parent / "data"
_NONE = "-"
_SKELETON_COLUMNS = [
    'name', 'parent', 'offset_x', 'offset_y', 'offset_z',
    'radius', 'half_length', 'mass', 'part', 'chain'
]


def skeleton_to_frame(topology: SkeletonTopology) -> pd.DataFrame:
    chain_of = {
        name: tip for tip, chain in topology.ik_chains.items() for name in chain}
    return pd.DataFrame.from_records(
        (
            {
                'name': joint.name,
                'parent': _NONE if joint.parent is None else topology.names[joint.parent],
                'offset_x': float(joint.local_offset[0]),
                'offset_y': float(joint.local_offset[1]),
                'offset_z': float(joint.local_offset[2]),
                'radius': float(joint.body.radius),
                'half_length': float(joint.body.half_length),
                'mass': float(joint.body.mass),
                'part': topology.part_of(joint.name),
                'chain': chain_of.get(joint.name, _NONE),
            }
            for joint in topology.joints
        ),
        columns=_SKELETON_COLUMNS,
    )


def write_skeleton(path, topology: SkeletonTopology):
    return files.write_table(
        path, SKELETON_FORMAT, skeleton_to_frame(topology), joints=len(topology))


def read_skeleton(path) -> SkeletonTopology:
    _, frame = files.read_table(path, SKELETON_FORMAT, required=['joints'])
    files.require_columns(path, frame, _SKELETON_COLUMNS[2:8])
    files.require_columns(path, frame, ['name', 'parent', 'part', 'chain'], numeric=False)

    names = list(frame.name)
    joints = []
    for row, rec in enumerate(frame.itertuples(index=False)):
        if rec.parent == _NONE:
            parent = None
        elif rec.parent in names[:row]:
            parent = names.index(rec.parent)
        else:
            raise files.FileFormatError(
                path, row + 3, 2, f"parent {rec.parent!r} must be listed before {rec.name!r}")
        joints.append(JointSpec(
            rec.name, parent,
            (rec.offset_x, rec.offset_y, rec.offset_z),
            Capsule(rec.radius, rec.half_length, rec.mass),
        ))

    parts = {}
    for name, part in zip(frame.name, frame.part):
        parts.setdefault(part, []).append(name)
    if set(parts) == set(BODY_PARTS):
        parts = {part: parts[part] for part in BODY_PARTS}

    chains = {}
    for name, chain in zip(frame.name, frame.chain):
        if chain != _NONE:
            chains.setdefault(chain, []).append(name)

    try:
        return SkeletonTopology(joints, parts, chains)
    except ValueError as err:
        raise files.FileFormatError(path, 2, 1, str(err)) from None


@lru_cache
def load_default_skeleton() -> SkeletonTopology:
    topology = read_skeleton(_DATA_PATH / "skeleton.tsv")
    validate_humanoid(topology)
    return topology
