from pathlib import Path

import numpy as np
import pytest

from motion_synth import rotations, physics
from motion_synth.skeleton import (
    SkeletonTopology, JointSpec, Capsule, KinematicPose, load_default_skeleton,
    sim_state_to_pose, pose_pair_to_sim_state,
)
from motion_synth.tracking import TrainConfig

DATA = Path(__file__).resolve().parents[1] / "motion_synth" / "data"


@pytest.fixture(scope="session")
def humanoid():
    return load_default_skeleton()


def make_pendulum():
    """Root plus two hanging links, all in one body part"""
    joints = [
        JointSpec("pelvis", None, (0.0, 2.0, 0.0), Capsule(0.1, 0.05, 5.0)),
        JointSpec("link1", 0, (0.0, -0.5, 0.0), Capsule(0.05, 0.2, 2.0)),
        JointSpec("link2", 1, (0.0, -0.5, 0.0), Capsule(0.05, 0.2, 1.0)),
    ]
    return SkeletonTopology(joints, {"pelvis": ["pelvis", "link1", "link2"]}, {})


@pytest.fixture
def pendulum():
    return make_pendulum()


def swing_pose(topology, degrees):
    """Pendulum pose with the first link swung about +z"""
    rots = np.tile(rotations.IDENTITY, (len(topology), 1))
    rots[1] = rotations.about_axis([0., 0., 1.], degrees)
    return KinematicPose.create(topology.offsets[0], rots)


def passthrough_simulator(topology, dt=0.05):
    """Next state takes the action's targets exactly, keeping the root where it is"""
    def simulate(state, action):
        pose = sim_state_to_pose(topology, state)
        rots = np.concatenate([pose.local_rotations[:1], action.targets])
        target = KinematicPose.create(pose.root_translation, rots)
        return pose_pair_to_sim_state(topology, pose, target, dt)
    return simulate


def tiny_config(**kwargs):
    values = dict(
        batch_size=16, window=3, latent_dim=4,
        encoder_hidden=(16,), decoder_hidden=(16,), world_hidden=(32, 32),
        gate_hidden=(8,), world_lr=2e-3, encoder_lr=1e-3, decoder_lr=1e-3,
        world_iterations=50, policy_iterations=50,
    )
    values.update(kwargs)
    return TrainConfig(**values)


@pytest.fixture
def pinned():
    return physics.SimConfig(pin_root=True)
