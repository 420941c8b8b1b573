import numpy as np
import pandas as pd
import pytest
import torch
from torch import nn

from motion_synth import rotations, nets, physics
from motion_synth.interp import MotionClip, ClipDataset, FPS
from motion_synth.skeleton import KinematicPose, SimState, pose_to_sim_state, standing_pose
from motion_synth.terrain import HeightField
from motion_synth.tracking import (
    TrainConfig, TrackingStack, Trajectory, FeatureNormalizer, FingerprintMismatch,
    feature_dim, action_dim, featurize, clip_states, collect_episodes,
    train_world_model, one_step_mse, rollout_loss, train_policy, rollout_inference,
    tracking_error, write_trajectory, read_trajectory, write_curve, read_curve,
    save_bundle, load_bundle, encode, decode, world_step,
)

from conftest import make_pendulum, passthrough_simulator, tiny_config

Z_AXIS = [0.0, 0.0, 1.0]


def moving_state(topology, seed=0):
    rng = np.random.default_rng(seed)
    rots = rotations.from_rotvec(rng.normal(0, 0.3, (len(topology), 3)))
    rots[0] = rotations.multiply(rotations.yaw(30), rotations.about_axis(rotations.LEFT, 10))
    pose = KinematicPose.create([0.2, 0.9, -0.4], rots)
    n = len(topology)
    return pose_to_sim_state(topology, pose, rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))


def yawed(state, degrees):
    q = rotations.yaw(degrees)
    return SimState.create(
        rotations.rotate(q, state.x), rotations.multiply(q, state.q),
        rotations.rotate(q, state.v), rotations.rotate(q, state.w))


def test_feature_size(humanoid):
    features = featurize(moving_state(humanoid), humanoid)
    assert features.shape == (feature_dim(humanoid),) == (4 + 15 * 20,)
    assert action_dim(humanoid) == 57


def test_features_ignore_horizontal_translation(humanoid):
    state = moving_state(humanoid)
    moved = state.translated([5.0, 0.0, -3.0])
    assert np.allclose(featurize(moved, humanoid), featurize(state, humanoid), atol=1e-9)


def test_features_ignore_heading(humanoid):
    state = moving_state(humanoid)
    assert np.allclose(featurize(yawed(state, 90), humanoid), featurize(state, humanoid), atol=1e-9)


def test_height_only_changes_the_first_feature(humanoid):
    state = moving_state(humanoid)
    diff = featurize(state.translated([0.0, 0.1, 0.0]), humanoid) - featurize(state, humanoid)
    assert diff[0] == pytest.approx(0.1)
    assert np.allclose(diff[1:], 0.0, atol=1e-12)


def test_non_finite_state_is_rejected(humanoid):
    state = moving_state(humanoid)
    v = np.array(state.v)
    v[3, 1] = np.inf
    with pytest.raises(physics.NonFiniteState):
        featurize(SimState.create(state.x, state.q, v, state.w), humanoid)


def test_static_clip_states_are_at_rest(humanoid):
    clip = MotionClip(FPS, (standing_pose(humanoid),) * 4)
    states = clip_states(humanoid, clip)
    assert len(states) == 4
    assert all(np.allclose(s.v, 0.0) and np.allclose(s.w, 0.0) for s in states)


def test_still_clip_over_flat_ground_runs_to_the_end(humanoid):
    clip = MotionClip(FPS, (standing_pose(humanoid),) * 6)
    episodes = collect_episodes(
        humanoid, [clip], HeightField.flat(0.0), noise=0.0, show_progress=False)
    assert len(episodes) == 1
    assert len(episodes[0].actions) == 5
    assert np.all(np.isfinite(episodes[0].features))
    assert np.all(np.isfinite(episodes[0].observations))


def test_normalizer_floors_constant_features():
    norm = FeatureNormalizer.fit(np.array([[1.0, 2.0], [1.0, 4.0]]))
    assert np.allclose(norm.std, [1e-2, 1.0])
    assert np.allclose(norm.normalize([1.0, 4.0]), [0.0, 1.0])


def test_default_architecture(humanoid):
    cfg = TrainConfig()
    stack = TrackingStack.build(humanoid, cfg)
    assert cfg.batch_size == 512
    assert (cfg.encoder_lr, cfg.decoder_lr, cfg.world_lr) == (1e-5, 1e-5, 2e-3)
    assert stack.encoder.spec.hidden == (1024, 1024)
    assert stack.encoder.spec.head == "gaussian"
    assert stack.decoder.spec.hidden == (512, 512, 512)
    assert stack.decoder.spec.head == "moe"
    assert len(stack.decoder.experts) == 6
    assert stack.world_model.spec.hidden == (512, 512, 512, 512)
    assert stack.world_model.spec.output_dim == feature_dim(humanoid)
    elus = [m for m in stack.encoder.modules() if isinstance(m, nn.ELU)]
    assert len(elus) == 2


def test_network_shapes(pendulum):
    stack = TrackingStack.build(pendulum, tiny_config())
    features = np.zeros((5, feature_dim(pendulum)))
    observation = np.zeros((5, stack.grid.size))
    latent = encode(stack.encoder, features, features, observation)
    assert latent.mean.shape == (5, 4)
    assert latent.log_std.shape == (5, 4)
    action = decode(stack.decoder, features, latent.mean)
    assert action.mean.shape == (5, action_dim(pendulum))
    nxt = world_step(stack.world_model, features, action.mean, observation)
    assert nxt.mean.shape == features.shape


def test_world_step_predicts_a_change(pendulum):
    stack = TrackingStack.build(pendulum, tiny_config())
    with torch.no_grad():
        for p in stack.world_model.parameters():
            p.zero_()
    rng = np.random.default_rng(3)
    features = rng.normal(size=(2, feature_dim(pendulum)))
    out = world_step(
        stack.world_model, features, np.ones((2, action_dim(pendulum))),
        np.zeros((2, stack.grid.size)))
    assert np.allclose(out.mean.detach().numpy(), features)


def test_window_must_cover_a_transition(humanoid):
    with pytest.raises(ValueError):
        TrackingStack.build(humanoid, TrainConfig(window=1))


def swing_clip(topology, frames, amplitude, freq, phase, source_id=""):
    poses = []
    for k in range(frames):
        angle = 2 * np.pi * freq * k / FPS + phase
        rots = np.tile(rotations.IDENTITY, (len(topology), 1))
        rots[1] = rotations.about_axis(Z_AXIS, amplitude * np.sin(angle))
        rots[2] = rotations.about_axis(Z_AXIS, 0.5 * amplitude * np.sin(angle + 1.0))
        poses.append(KinematicPose.create(topology.offsets[0], rots))
    return MotionClip(FPS, tuple(poses), source_id)


def swing_clips(topology, count, seed):
    rng = np.random.default_rng(seed)
    return [
        swing_clip(topology, 41, rng.uniform(20, 60), rng.uniform(0.5, 1.5),
                   rng.uniform(0, 2 * np.pi), f"swing{i}")
        for i in range(count)
    ]


@pytest.fixture(scope="module")
def swing_episodes():
    topology = make_pendulum()
    config = physics.SimConfig(pin_root=True)
    train = collect_episodes(
        topology, swing_clips(topology, 30, 0), config=config, seed=0, show_progress=False)
    held_out = collect_episodes(
        topology, swing_clips(topology, 8, 1), config=config, seed=1, show_progress=False)
    return topology, train, held_out


def test_episodes_have_one_more_state_than_actions(swing_episodes):
    topology, train, _ = swing_episodes
    episode = train[0]
    assert len(episode.actions) == 40
    assert episode.features.shape == (41, feature_dim(topology))
    assert episode.actions.shape == (40, action_dim(topology))


def test_world_model_learns_the_pendulum(swing_episodes):
    topology, train, held_out = swing_episodes
    cfg = tiny_config(world_iterations=2000)
    stack = TrackingStack.build(topology, cfg)
    stack.fit_normalizer(train)
    initial = one_step_mse(stack, held_out)
    curve = train_world_model(stack, train, cfg, refit_normalizer=False, show_progress=False)
    assert len(curve) == 2000
    assert stack.world_trained
    assert one_step_mse(stack, held_out) <= 0.1 * initial


def test_world_model_training_is_seeded(swing_episodes):
    topology, train, _ = swing_episodes
    cfg = tiny_config(world_iterations=20)
    curves = [
        train_world_model(TrackingStack.build(topology, cfg), train, cfg, show_progress=False)
        for _ in range(2)
    ]
    pd.testing.assert_frame_equal(curves[0], curves[1])


def test_world_model_needs_long_enough_episodes(swing_episodes):
    topology, train, _ = swing_episodes
    cfg = tiny_config(window=60)
    with pytest.raises(ValueError):
        train_world_model(TrackingStack.build(topology, cfg), train, cfg, show_progress=False)


def static_dataset(topology, frames=3):
    return ClipDataset.from_clips([MotionClip(FPS, (standing_pose(topology),) * frames, "rest")])


def test_policy_needs_a_trained_world_model(pendulum):
    stack = TrackingStack.build(pendulum, tiny_config())
    with pytest.raises(ValueError, match="world model"):
        train_policy(stack, static_dataset(pendulum), pendulum, tiny_config(), show_progress=False)


def test_policy_needs_long_enough_clips(pendulum):
    cfg = tiny_config(window=5)
    stack = TrackingStack.build(pendulum, cfg)
    stack.world_trained = True
    with pytest.raises(ValueError, match="rest"):
        train_policy(stack, static_dataset(pendulum, 3), pendulum, cfg, show_progress=False)


def test_policy_loss_decreases(pendulum):
    clip = swing_clip(pendulum, 3, 30.0, 1.0, 0.0)
    dataset = ClipDataset.from_clips([clip])
    cfg = tiny_config(window=3, batch_size=4, sample_latent=False, policy_iterations=100)
    stack = TrackingStack.build(pendulum, cfg)
    stack.world_trained = True
    curve = train_policy(stack, dataset, pendulum, cfg, show_progress=False)
    assert len(curve) == 100
    assert curve['loss'].iloc[-1] < curve['loss'].iloc[0]
    # the world model stays frozen but trainable afterwards
    assert all(p.requires_grad for p in stack.world_model.parameters())


def test_kl_vanishes_for_a_standard_posterior(pendulum):
    stack = TrackingStack.build(pendulum, tiny_config())
    with torch.no_grad():
        stack.encoder.body[-1].weight.zero_()
        stack.encoder.body[-1].bias.zero_()
    targets = np.random.default_rng(0).normal(size=(2, 3, feature_dim(pendulum)))
    observations = np.zeros((2, 3, stack.grid.size))
    _, _, kl = rollout_loss(stack, targets, observations, kl_weight=1.0)
    assert float(kl) == 0.0


def test_rollout_loss_gradient_matches_finite_differences(pendulum):
    stack = TrackingStack.build(pendulum, tiny_config(decoder_head_scale=1.0))
    rng = np.random.default_rng(3)
    targets = rng.normal(size=(2, 3, feature_dim(pendulum)))
    observations = rng.normal(size=(2, 3, stack.grid.size))

    loss, _, _ = rollout_loss(stack, targets, observations, kl_weight=0.5)
    grads = torch.autograd.grad(loss, list(stack.decoder.parameters()))
    analytic = torch.cat([g.reshape(-1) for g in grads]).numpy()

    theta = nets.flatten_params(stack.decoder).numpy()
    h = 1e-5
    for i in rng.choice(len(theta), size=20, replace=False):
        values = []
        for sign in (1, -1):
            probe = theta.copy()
            probe[i] += sign * h
            nets.load_params(stack.decoder, probe)
            with torch.no_grad():
                values.append(float(rollout_loss(stack, targets, observations, 0.5)[0]))
        numeric = (values[0] - values[1]) / (2 * h)
        assert numeric == pytest.approx(analytic[i], rel=1e-4, abs=1e-7)


def test_rollout_needs_two_frames(pendulum):
    stack = TrackingStack.build(pendulum, tiny_config())
    with pytest.raises(ValueError):
        rollout_loss(stack, np.zeros((1, 1, feature_dim(pendulum))), np.zeros((1, 1, 256)), 0.0)


def standing_rollout(topology, frames=20):
    clip = MotionClip(FPS, (standing_pose(topology),) * frames, "stand")
    stack = TrackingStack.build(topology, tiny_config(decoder_head_scale=0.0))
    return stack, clip, rollout_inference(stack, topology, clip, passthrough_simulator(topology))


def test_passthrough_rollout_tracks_a_static_clip(humanoid):
    _, clip, trajectory = standing_rollout(humanoid)
    assert len(trajectory.states) == 20
    _, error = tracking_error(trajectory, clip, humanoid)
    assert error < 0.05


def test_tracking_error_of_an_offset_trajectory(humanoid):
    _, clip, trajectory = standing_rollout(humanoid, 5)
    shifted = Trajectory(
        tuple(s.translated([0.1, 0.0, 0.0]) for s in trajectory.states),
        trajectory.actions, trajectory.observations)
    per_frame, error = tracking_error(shifted, clip, humanoid)
    assert np.allclose(per_frame, 0.1)
    assert error == pytest.approx(0.1)


def test_tracking_error_rejects_long_trajectories(humanoid):
    _, clip, trajectory = standing_rollout(humanoid, 5)
    with pytest.raises(ValueError):
        tracking_error(trajectory, clip._replace(frames=clip.frames[:3]), humanoid)


def test_rollout_checks_the_skeleton(humanoid, pendulum):
    stack = TrackingStack.build(pendulum, tiny_config())
    clip = MotionClip(FPS, (standing_pose(humanoid),) * 3)
    with pytest.raises(FingerprintMismatch):
        rollout_inference(stack, humanoid, clip, passthrough_simulator(humanoid))


def test_trajectory_file_round_trip(humanoid, tmp_path):
    _, _, trajectory = standing_rollout(humanoid, 4)
    first = write_trajectory(tmp_path / "a.tsv", humanoid, trajectory)
    loaded = read_trajectory(first, humanoid)
    assert len(loaded.states) == 4
    assert len(loaded.actions) == 3
    second = write_trajectory(tmp_path / "b.tsv", humanoid, loaded)
    assert first.read_bytes() == second.read_bytes()


def test_trajectory_for_another_skeleton(humanoid, pendulum, tmp_path):
    _, _, trajectory = standing_rollout(humanoid, 2)
    path = write_trajectory(tmp_path / "a.tsv", humanoid, trajectory)
    with pytest.raises(FingerprintMismatch):
        read_trajectory(path, pendulum)


def test_curve_round_trip(tmp_path):
    curve = pd.DataFrame({'iteration': [0, 1], 'loss': [0.5, 0.25], 'mse': [0.4, 0.2]})
    path = write_curve(tmp_path / "curve.tsv", curve, seed=0)
    pd.testing.assert_frame_equal(read_curve(path), curve)


def test_bundle_round_trip(pendulum, tmp_path):
    cfg = tiny_config()
    stack = TrackingStack.build(pendulum, cfg)
    stack.normalizer = FeatureNormalizer(
        np.arange(feature_dim(pendulum), dtype=float), np.full(feature_dim(pendulum), 2.0))
    path = save_bundle(tmp_path / "bundle.pt", stack, cfg, "abc")
    bundle = load_bundle(path, pendulum)
    assert bundle.config == cfg
    assert bundle.dataset_fingerprint == "abc"
    assert np.array_equal(bundle.stack.normalizer.mean, stack.normalizer.mean)
    assert torch.equal(
        nets.flatten_params(bundle.stack.decoder), nets.flatten_params(stack.decoder))


def test_bundle_for_another_skeleton(humanoid, pendulum, tmp_path):
    cfg = tiny_config()
    path = save_bundle(tmp_path / "bundle.pt", TrackingStack.build(pendulum, cfg), cfg)
    with pytest.raises(FingerprintMismatch):
        load_bundle(path, humanoid)
