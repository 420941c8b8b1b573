"""
Latent-variable tracking controller.

An encoder embeds (state, next target, terrain observation) into a
Gaussian latent, a mixture-of-experts decoder maps (state, latent) to
PD targets and a learned world model predicts the next state features.
The policy is trained through rollouts of the world model; at inference
the decoder drives a simulator.
"""
import logging
from typing import NamedTuple, Tuple, Sequence, Optional, Callable, List

import numpy as np
import pandas as pd
import torch
from tqdm.auto import trange

from . import rotations, files, utils, nets, physics, terrain
from .skeleton import (
    SkeletonTopology, SimState, forward_kinematics, pose_to_sim_state,
    pose_pair_to_sim_state,
)
from .interp import MotionClip, ClipDataset, FPS, sample_rollout_windows
from .terrain import HeightField, ObservationGrid

logger = logging.getLogger(__name__)

TRAJECTORY_FORMAT = "motion_synth-trajectory-v1"
CURVE_FORMAT = "motion_synth-curve-v1"
BUNDLE_FORMAT = "motion_synth-bundle-v1"

STD_FLOOR = 1e-2

_ROOT_FEATURES = 4
_BODY_FEATURES = 15


class FingerprintMismatch(ValueError):
    def __init__(self, what, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(
            f"{what} fingerprint mismatch: expected {expected}, found {found}")


class TrainConfig(NamedTuple):
    batch_size: int = 512
    window: int = 24
    kl_weight: float = 0.01
    nll_weight: float = 0.1
    encoder_lr: float = 1e-5
    decoder_lr: float = 1e-5
    world_lr: float = 2e-3
    world_iterations: int = 2000
    policy_iterations: int = 2000
    seed: int = 0
    latent_dim: int = 64
    encoder_hidden: Tuple[int, ...] = (1024, 1024)
    decoder_hidden: Tuple[int, ...] = (512, 512, 512)
    world_hidden: Tuple[int, ...] = (512, 512, 512, 512)
    num_experts: int = 6
    gate_hidden: Tuple[int, ...] = (64,)
    decoder_head_scale: float = 0.01
    action_noise: float = 0.05
    sample_latent: bool = True

    def validate(self):
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        for name in ('batch_size', 'latent_dim', 'world_iterations', 'policy_iterations'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ('kl_weight', 'nll_weight', 'encoder_lr', 'decoder_lr', 'world_lr',
                     'action_noise'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        return self


def feature_dim(topology: SkeletonTopology) -> int:
    return _ROOT_FEATURES + _BODY_FEATURES * len(topology)


def action_dim(topology: SkeletonTopology) -> int:
    return 3 * (len(topology) - 1)


def featurize(state: SimState, topology: SkeletonTopology) -> np.ndarray:
    """
    Root height and up axis, then per body: position relative to the root,
    the first two columns of its rotation matrix, linear and angular
    velocity. Everything but the root height is in the root heading frame.
    """
    if len(state.x) != len(topology):
        raise ValueError(f"state has {len(state.x)} bodies, topology has {len(topology)}")
    if not state.is_finite():
        raise physics.NonFiniteState("cannot featurize a non-finite state")
    root = state.x[0]
    to_local = rotations.to_matrix(rotations.yaw(-rotations.heading_deg(state.q[0])))
    up = to_local @ rotations.rotate(state.q[0], rotations.UP)
    matrices = to_local @ rotations.to_matrix(state.q)
    per_body = np.concatenate([
        (state.x - root) @ to_local.T,
        matrices[:, :, :2].transpose(0, 2, 1).reshape(-1, 6),
        state.v @ to_local.T,
        state.w @ to_local.T,
    ], axis=1)
    return np.concatenate([[root[1]], up, per_body.ravel()])


def observe(state: SimState, field: Optional[HeightField], grid: ObservationGrid) -> np.ndarray:
    """Height-map observation around the root; no field reads as flat ground at 0"""
    if field is None:
        return np.full(grid.size, -state.x[0, 1])
    obs = terrain.sample_height_observation(
        field, state.x[0], float(rotations.heading_deg(state.q[0])), grid)
    return obs.values


def clip_states(topology: SkeletonTopology, clip: MotionClip) -> List[SimState]:
    """
    Target states of a clip; velocities are backward differences and the
    first frame reuses the forward difference to the second.
    """
    frames = clip.frames
    if len(frames) == 1:
        return [pose_to_sim_state(topology, frames[0])]
    dt = 1.0 / clip.fps
    states = [pose_pair_to_sim_state(topology, a, b, dt) for a, b in zip(frames, frames[1:])]
    first = forward_kinematics(topology, frames[0])
    states.insert(0, SimState.create(first.positions, first.rotations, states[0].v, states[0].w))
    return states


class FeatureNormalizer(NamedTuple):
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, features, floor=STD_FLOOR):
        features = np.asarray(features, dtype=float)
        features = features.reshape(-1, features.shape[-1])
        return cls(features.mean(axis=0), np.maximum(features.std(axis=0), floor))

    def normalize(self, features):
        return (np.asarray(features, dtype=float) - self.mean) / self.std


class Episode(NamedTuple):
    """Raw features (T + 1, F), action rotation vectors (T, A) and observations (T, O)"""
    features: np.ndarray
    actions: np.ndarray
    observations: np.ndarray


class Trajectory(NamedTuple):
    states: Tuple[SimState, ...]
    actions: Tuple[physics.Action, ...]
    observations: np.ndarray

    def validate(self):
        if not self.states:
            raise ValueError("trajectory has no states")
        if not len(self.actions) == len(self.observations) == len(self.states) - 1:
            raise ValueError(
                f"trajectory with {len(self.states)} states needs {len(self.states) - 1} "
                f"actions and observations, got {len(self.actions)} and {len(self.observations)}")
        return self

    @property
    def positions(self) -> np.ndarray:
        return np.stack([s.x for s in self.states])


class TrackingStack:
    """Encoder, decoder and world model plus the feature normalizer they share"""
    def __init__(
        self,
        encoder: nets.Network,
        decoder: nets.Network,
        world_model: nets.Network,
        normalizer: FeatureNormalizer,
        grid: ObservationGrid,
        skeleton_fingerprint: str,
        world_trained: bool = False,
    ):
        self.encoder = encoder
        self.decoder = decoder
        self.world_model = world_model
        self.normalizer = normalizer
        self.grid = grid
        self.skeleton_fingerprint = skeleton_fingerprint
        self.world_trained = world_trained

    @classmethod
    def build(cls, topology: SkeletonTopology, cfg: TrainConfig = TrainConfig(),
              grid: ObservationGrid = ObservationGrid()):
        cfg.validate()
        features = feature_dim(topology)
        actions = action_dim(topology)
        encoder = nets.Network(nets.NetSpec(
            2 * features + grid.size, cfg.encoder_hidden, cfg.latent_dim, "gaussian"),
            seed=cfg.seed)
        decoder = nets.Network(nets.NetSpec(
            features + cfg.latent_dim, cfg.decoder_hidden, actions, "moe",
            cfg.num_experts, cfg.gate_hidden, cfg.decoder_head_scale),
            seed=cfg.seed + 1)
        world_model = nets.Network(nets.NetSpec(
            features + actions + grid.size, cfg.world_hidden, features, "gaussian"),
            seed=cfg.seed + 2)
        return cls(
            encoder, decoder, world_model, FeatureNormalizer.identity(features),
            grid, topology.fingerprint())

    def check_topology(self, topology: SkeletonTopology):
        if topology.fingerprint() != self.skeleton_fingerprint:
            raise FingerprintMismatch("skeleton", self.skeleton_fingerprint, topology.fingerprint())

    def fit_normalizer(self, episodes: Sequence[Episode]):
        self.normalizer = FeatureNormalizer.fit(np.concatenate([e.features for e in episodes]))
        return self.normalizer


def encode(encoder: nets.Network, features, target_features, observation) -> nets.GaussianOut:
    x = torch.cat([nets.as_tensor(a) for a in (features, target_features, observation)], dim=-1)
    return nets.forward(encoder, x)


def decode(decoder: nets.Network, features, latent) -> nets.GaussianOut:
    x = torch.cat([nets.as_tensor(features), nets.as_tensor(latent)], dim=-1)
    return nets.forward(decoder, x)


def world_step(world_model: nets.Network, features, action, observation) -> nets.GaussianOut:
    """Next-feature distribution; the network predicts the change from `features`"""
    features = nets.as_tensor(features)
    x = torch.cat([features, nets.as_tensor(action), nets.as_tensor(observation)], dim=-1)
    delta = nets.forward(world_model, x)
    return nets.GaussianOut(features + delta.mean, delta.log_std)


def simulate_episode(
        topology: SkeletonTopology,
        state: SimState,
        actions: Sequence[physics.Action],
        field: Optional[HeightField] = None,
        config: physics.SimConfig = physics.SimConfig(),
        grid: ObservationGrid = ObservationGrid(),
) -> Episode:
    features = [featurize(state, topology)]
    rotvecs, observations = [], []
    for t, action in enumerate(actions):
        obs = observe(state, field, grid)
        try:
            state = physics.step(topology, state, action, field, config)
        except physics.NonFiniteState as err:
            logger.warning("episode truncated after %d of %d steps: %s", t, len(actions), err)
            break
        features.append(featurize(state, topology))
        rotvecs.append(action.rotvecs().ravel())
        observations.append(obs)
    n = len(rotvecs)
    return Episode(
        np.stack(features),
        np.reshape(rotvecs, (n, action_dim(topology))),
        np.reshape(observations, (n, grid.size)),
    )


def collect_episodes(
        topology: SkeletonTopology,
        clips: Sequence[MotionClip],
        field: Optional[HeightField] = None,
        config: physics.SimConfig = physics.SimConfig(),
        noise: float = 0.05,
        seed: int = 0,
        grid: ObservationGrid = ObservationGrid(),
        show_progress: bool = True,
) -> List[Episode]:
    """
    Simulates each clip from its first state, targeting the next frame's
    local rotations perturbed by seeded rotation-vector noise.
    """
    rng = np.random.default_rng(seed)
    inputs = {}
    for i, clip in enumerate(clips):
        targets = rotations.to_rotvec(clip.local_rotations[1:, 1:])
        targets = targets + rng.normal(0.0, noise, targets.shape)
        actions = [physics.Action.from_rotvecs(r) for r in targets]
        inputs[i] = (topology, clip_states(topology, clip)[0], actions, field, config, grid)

    output, _ = utils.map_concurrent(
        simulate_episode, inputs, show_progress=show_progress, raise_on_err=True)
    episodes = [e for e in output.values() if len(e.actions)]
    logger.info(
        "collected %d episodes, %d transitions", len(episodes), sum(len(e.actions) for e in episodes))
    return episodes


class _Flat(NamedTuple):
    features: np.ndarray
    actions: np.ndarray
    observations: np.ndarray
    feature_base: np.ndarray
    action_base: np.ndarray
    lengths: np.ndarray


def _flatten(episodes, normalizer):
    lengths = np.array([len(e.actions) for e in episodes])
    action_base = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return _Flat(
        normalizer.normalize(np.concatenate([e.features for e in episodes])),
        np.concatenate([e.actions for e in episodes]),
        np.concatenate([e.observations for e in episodes]),
        action_base + np.arange(len(episodes)),
        action_base,
        lengths,
    )


def _world_loss(stack, features, actions, observations, nll_weight):
    """Multi-step unroll from features[:, 0]; returns (loss, mse, nll)"""
    steps = actions.shape[1]
    predicted = features[:, 0]
    mse = 0.0
    for t in range(steps):
        g = world_step(stack.world_model, predicted, actions[:, t], observations[:, t])
        mse = mse + ((g.mean - features[:, t + 1]) ** 2).mean()
        predicted = g.mean
    mse = mse / steps
    nll = nets.gaussian_nll(g, features[:, -1]).mean() / features.shape[-1]
    return mse + nll_weight * nll, mse, nll


def train_world_model(
        stack: TrackingStack,
        episodes: Sequence[Episode],
        cfg: TrainConfig = TrainConfig(),
        iterations: Optional[int] = None,
        refit_normalizer: bool = True,
        show_progress: bool = True,
) -> pd.DataFrame:
    """
    Fits the world model to simulated episodes by unrolling it over
    `cfg.window - 1` transitions from sampled starts. Returns the loss
    curve with columns iteration, loss, mse, nll.
    """
    cfg.validate()
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes to train the world model on")
    steps = cfg.window - 1
    short = [i for i, e in enumerate(episodes) if len(e.actions) < steps]
    if short:
        raise ValueError(
            f"episodes {short} have fewer than {steps} transitions for a window of {cfg.window}")
    if refit_normalizer:
        stack.fit_normalizer(episodes)

    flat = _flatten(episodes, stack.normalizer)
    features = torch.as_tensor(flat.features, dtype=nets.DTYPE)
    actions = torch.as_tensor(flat.actions, dtype=nets.DTYPE)
    observations = torch.as_tensor(flat.observations, dtype=nets.DTYPE)

    rng = np.random.default_rng(cfg.seed)
    optimizer = nets.make_optimizer(stack.world_model.parameters(), cfg.world_lr)
    iterations = cfg.world_iterations if iterations is None else iterations
    rows = []
    for it in trange(iterations, desc="world model", disable=not show_progress):
        ids = rng.integers(len(episodes), size=cfg.batch_size)
        starts = np.floor(rng.random(cfg.batch_size) * (flat.lengths[ids] - steps + 1)).astype(int)
        offsets = np.arange(steps + 1)
        f_idx = torch.as_tensor((flat.feature_base[ids] + starts)[:, None] + offsets)
        a_idx = torch.as_tensor((flat.action_base[ids] + starts)[:, None] + offsets[:-1])

        loss, mse, nll = _world_loss(
            stack, features[f_idx], actions[a_idx], observations[a_idx], cfg.nll_weight)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        rows.append((it, loss.item(), mse.item(), nll.item()))
        logger.debug("world model iteration %d: loss %.6g", it, rows[-1][1])

    stack.world_trained = True
    curve = pd.DataFrame(rows, columns=['iteration', 'loss', 'mse', 'nll'])
    if rows:
        logger.info("world model trained, final mse %.4g", rows[-1][2])
    return curve


def one_step_mse(stack: TrackingStack, episodes: Sequence[Episode]) -> float:
    """Mean squared single-step prediction error in normalized feature units"""
    flat = _flatten(list(episodes), stack.normalizer)
    current = np.concatenate([
        flat.features[b:b + n] for b, n in zip(flat.feature_base, flat.lengths)])
    target = np.concatenate([
        flat.features[b + 1:b + 1 + n] for b, n in zip(flat.feature_base, flat.lengths)])
    with torch.no_grad():
        g = world_step(stack.world_model, current, flat.actions, flat.observations)
        return float(((g.mean - nets.as_tensor(target)) ** 2).mean())


def rollout_loss(stack: TrackingStack, targets, observations, kl_weight: float, noise=None):
    """
    Synthetic rollout through the world model starting at targets[:, 0].

    `targets` are normalized features (B, W, F), `observations` (B, W, O)
    and `noise` (B, W - 1, latent) or None to decode posterior means.
    Returns (loss, tracking, kl), each averaged over the W - 1 steps.
    """
    targets = nets.as_tensor(targets)
    observations = nets.as_tensor(observations)
    steps = targets.shape[1] - 1
    if steps < 1:
        raise ValueError("a rollout needs at least two target frames")
    features = targets[:, 0]
    tracking = 0.0
    kl = 0.0
    for t in range(steps):
        posterior = encode(stack.encoder, features, targets[:, t + 1], observations[:, t])
        latent = posterior.mean if noise is None else nets.reparam_sample(posterior, noise[:, t])
        action = decode(stack.decoder, features, latent).mean
        features = world_step(stack.world_model, features, action, observations[:, t]).mean
        tracking = tracking + ((features - targets[:, t + 1]) ** 2).sum(-1).mean()
        kl = kl + nets.kl_diag(posterior, nets.standard_normal(posterior)).mean()
    tracking = tracking / steps
    kl = kl / steps
    return tracking + kl_weight * kl, tracking, kl


def _targets(stack, topology, dataset, field):
    features, observations = [], []
    for clip in dataset.clips:
        states = clip_states(topology, clip)
        features.append(stack.normalizer.normalize([featurize(s, topology) for s in states]))
        observations.extend(observe(s, field, stack.grid) for s in states)
    return np.concatenate(features), np.stack(observations)


def train_policy(
        stack: TrackingStack,
        dataset: ClipDataset,
        topology: SkeletonTopology,
        cfg: TrainConfig = TrainConfig(),
        field: Optional[HeightField] = None,
        iterations: Optional[int] = None,
        show_progress: bool = True,
) -> pd.DataFrame:
    """
    Trains encoder and decoder through differentiable world-model rollouts
    over sampled clip windows, with the world model frozen. Returns the
    loss curve with columns iteration, loss, tracking, kl.
    """
    cfg.validate()
    stack.check_topology(topology)
    if not stack.world_trained:
        raise ValueError("the world model must be trained before the policy")
    short = [c.source_id or str(i) for i, c in enumerate(dataset.clips) if len(c.frames) < cfg.window]
    if short:
        raise ValueError(f"clips {short} are shorter than the {cfg.window}-frame window, pad them")

    features, observations = _targets(stack, topology, dataset, field)
    features = torch.as_tensor(features, dtype=nets.DTYPE)
    observations = torch.as_tensor(observations, dtype=nets.DTYPE)
    base = np.array([start for start, _ in dataset.boundaries])

    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = nets.make_optimizer([
        {'params': stack.encoder.parameters(), 'lr': cfg.encoder_lr},
        {'params': stack.decoder.parameters(), 'lr': cfg.decoder_lr},
    ], cfg.decoder_lr)

    iterations = cfg.policy_iterations if iterations is None else iterations
    rows = []
    stack.world_model.requires_grad_(False)
    try:
        for it in trange(iterations, desc="policy", disable=not show_progress):
            clip_ids, starts = sample_rollout_windows(dataset, cfg.window, cfg.batch_size, rng)
            index = torch.as_tensor((base[clip_ids] + starts)[:, None] + np.arange(cfg.window))
            noise = None
            if cfg.sample_latent:
                noise = torch.randn(
                    (cfg.batch_size, cfg.window - 1, cfg.latent_dim),
                    generator=generator, dtype=nets.DTYPE)
            loss, tracking, kl = rollout_loss(
                stack, features[index], observations[index], cfg.kl_weight, noise)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            rows.append((it, loss.item(), tracking.item(), kl.item()))
            logger.debug("policy iteration %d: loss %.6g", it, rows[-1][1])
    finally:
        stack.world_model.requires_grad_(True)

    if rows:
        logger.info("policy trained, final tracking loss %.4g", rows[-1][2])
    return pd.DataFrame(rows, columns=['iteration', 'loss', 'tracking', 'kl'])


Simulator = Callable[[SimState, physics.Action], SimState]


def physics_simulator(
        topology: SkeletonTopology,
        field: Optional[HeightField] = None,
        config: physics.SimConfig = physics.SimConfig(),
) -> Simulator:
    def simulate(state, action):
        return physics.step(topology, state, action, field, config)
    return simulate


def rollout_inference(
        stack: TrackingStack,
        topology: SkeletonTopology,
        clip: MotionClip,
        simulator: Simulator,
        field: Optional[HeightField] = None,
        seed: Optional[int] = None,
) -> Trajectory:
    """
    Tracks `clip` from its first state, decoding posterior means (or
    seeded latent samples when `seed` is given). Stops early if the
    simulator diverges.
    """
    stack.check_topology(topology)
    targets = clip_states(topology, clip)
    generator = None if seed is None else torch.Generator().manual_seed(seed)
    state = targets[0]
    states, actions, observations = [state], [], []
    with torch.no_grad():
        for t, target in enumerate(targets[1:]):
            obs = observe(state, field, stack.grid)
            features = stack.normalizer.normalize(featurize(state, topology))
            target_features = stack.normalizer.normalize(featurize(target, topology))
            posterior = encode(stack.encoder, features, target_features, obs)
            latent = posterior.mean
            if generator is not None:
                eps = torch.randn(latent.shape, generator=generator, dtype=nets.DTYPE)
                latent = nets.reparam_sample(posterior, eps)
            mean = decode(stack.decoder, features, latent).mean.numpy()
            action = physics.Action.from_rotvecs(mean.reshape(-1, 3))
            try:
                state = simulator(state, action)
                if not state.is_finite():
                    raise physics.NonFiniteState("simulator returned a non-finite state")
            except physics.NonFiniteState as err:
                logger.warning(
                    "rollout of %r truncated at frame %d of %d: %s",
                    clip.source_id, t + 1, len(clip.frames), err)
                break
            states.append(state)
            actions.append(action)
            observations.append(obs)

    return Trajectory(
        tuple(states), tuple(actions),
        np.reshape(observations, (len(actions), stack.grid.size)),
    ).validate()


def tracking_error(trajectory: Trajectory, clip: MotionClip, topology: SkeletonTopology):
    """Per-frame mean body position error (m) against the clip, and its mean over frames"""
    positions = trajectory.positions
    if len(positions) > len(clip.frames):
        raise ValueError(
            f"trajectory has {len(positions)} frames, longer than the {len(clip.frames)}-frame clip")
    if len(positions) < len(clip.frames):
        logger.info("comparing a truncated trajectory: %d of %d frames", len(positions), len(clip.frames))
    reference = np.stack([
        forward_kinematics(topology, frame).positions for frame in clip.frames[:len(positions)]])
    per_frame = np.linalg.norm(positions - reference, axis=-1).mean(axis=1)
    return per_frame, float(per_frame.mean())


def stepping_stone_runner(
        stack: TrackingStack,
        topology: SkeletonTopology,
        clip: MotionClip,
        config: physics.SimConfig = physics.SimConfig(),
) -> terrain.PolicyRunner:
    """Policy runner for `terrain.eval_stepping_stones` tracking `clip` over each course"""
    def run(params: terrain.SteppingStoneParams, seed: int) -> bool:
        stones = terrain.generate_stepping_stones(params, seed)
        field = terrain.course_to_heightfield(stones, params.stone_radius)
        trajectory = rollout_inference(
            stack, topology, clip, physics_simulator(topology, field, config), field)
        return terrain.course_success(trajectory.positions[:, 0], stones, params)
    return run


def _state_columns(topology):
    return [
        f"{name}.{c}" for name in topology.names
        for c in ("x", "y", "z", "qx", "qy", "qz", "qw", "vx", "vy", "vz", "wx", "wy", "wz")
    ]


def _action_columns(topology):
    return [f"{name}.{c}" for name in topology.names[1:] for c in ("tx", "ty", "tz", "tw")]


def write_trajectory(path, topology: SkeletonTopology, trajectory: Trajectory):
    trajectory.validate()
    n = len(trajectory.states)
    states = np.stack([
        np.concatenate([s.x, s.q, s.v, s.w], axis=1).ravel() for s in trajectory.states])
    tail = np.full((n, len(_action_columns(topology)) + trajectory.observations.shape[1]), np.nan)
    if len(trajectory.actions):
        tail[:-1] = np.concatenate([
            np.stack([a.targets.ravel() for a in trajectory.actions]),
            trajectory.observations,
        ], axis=1)
    obs_columns = [f"o{i}" for i in range(trajectory.observations.shape[1])]
    frame = pd.DataFrame(
        np.concatenate([states, tail], axis=1),
        columns=_state_columns(topology) + _action_columns(topology) + obs_columns)
    frame.insert(0, 'frame', np.arange(n))
    return files.write_table(
        path, TRAJECTORY_FORMAT, frame,
        frames=n, observations=len(obs_columns), skeleton=topology.fingerprint())


def read_trajectory(path, topology: SkeletonTopology) -> Trajectory:
    meta, frame = files.read_table(
        path, TRAJECTORY_FORMAT, required=['frames', 'observations', 'skeleton'])
    if meta['skeleton'] != topology.fingerprint():
        raise FingerprintMismatch("skeleton", topology.fingerprint(), meta['skeleton'])
    count = files.meta_value(path, meta, 'frames', int)
    if len(frame) != count or count < 1:
        raise files.FileFormatError(
            path, 1, 1, f"header declares {count} frames, table has {len(frame)}")
    obs_columns = [f"o{i}" for i in range(files.meta_value(path, meta, 'observations', int))]
    columns = _state_columns(topology) + _action_columns(topology) + obs_columns
    files.require_columns(path, frame, columns)

    bodies = len(topology)
    values = frame[_state_columns(topology)].to_numpy(dtype=float).reshape(count, bodies, 13)
    states = []
    for row, rec in enumerate(values):
        try:
            states.append(SimState.create(rec[:, :3], rec[:, 3:7], rec[:, 7:10], rec[:, 10:]))
        except ValueError as err:
            raise files.FileFormatError(path, row + 3, 2, str(err)) from None
    targets = frame[_action_columns(topology)].to_numpy(dtype=float)[:-1]
    actions = tuple(physics.Action.create(t.reshape(-1, 4)) for t in targets)
    observations = frame[obs_columns].to_numpy(dtype=float)[:-1]
    return Trajectory(tuple(states), actions, observations).validate()


def write_curve(path, curve: pd.DataFrame, **meta):
    return files.write_table(path, CURVE_FORMAT, curve, **meta)


def read_curve(path) -> pd.DataFrame:
    _, frame = files.read_table(path, CURVE_FORMAT)
    files.require_columns(path, frame, ['iteration', 'loss'])
    return frame


class Bundle(NamedTuple):
    stack: TrackingStack
    config: TrainConfig
    dataset_fingerprint: str


def save_bundle(path, stack: TrackingStack, cfg: TrainConfig, dataset_fingerprint: str = ""):
    torch.save({
        'format': BUNDLE_FORMAT,
        'encoder': nets.checkpoint(stack.encoder),
        'decoder': nets.checkpoint(stack.decoder),
        'world_model': nets.checkpoint(stack.world_model),
        'world_trained': stack.world_trained,
        'normalizer': {'mean': stack.normalizer.mean, 'std': stack.normalizer.std},
        'grid': stack.grid._asdict(),
        'train_config': cfg._asdict(),
        'skeleton': stack.skeleton_fingerprint,
        'dataset': dataset_fingerprint,
    }, path)
    logger.info("saved tracking bundle to %s", path)
    return path


def load_bundle(path, topology: SkeletonTopology) -> Bundle:
    data = torch.load(path, weights_only=False)
    if not isinstance(data, dict) or data.get('format') != BUNDLE_FORMAT:
        raise ValueError(f"{path} is not a {BUNDLE_FORMAT!r} checkpoint")
    if data['skeleton'] != topology.fingerprint():
        raise FingerprintMismatch("skeleton", topology.fingerprint(), data['skeleton'])
    stack = TrackingStack(
        nets.from_checkpoint(data['encoder']),
        nets.from_checkpoint(data['decoder']),
        nets.from_checkpoint(data['world_model']),
        FeatureNormalizer(np.asarray(data['normalizer']['mean']),
                          np.asarray(data['normalizer']['std'])),
        ObservationGrid(**data['grid']),
        data['skeleton'],
        data['world_trained'],
    )
    return Bundle(stack, TrainConfig(**data['train_config']), data['dataset'])
