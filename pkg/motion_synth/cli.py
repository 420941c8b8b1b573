"""
Command line entry points: synth, interp, track, rollout, eval, render.
"""
import sys
import logging
import argparse
from pathlib import Path

import numpy as np

from . import agents, interp, render, terrain, tracking, files, utils
from .backends import RemoteBackend
from .kinematics import CameraState
from .config import load_config, RunConfig
from .skeleton import read_skeleton, load_default_skeleton, sim_state_to_pose

logger = logging.getLogger(__name__)

RUN_TRANSCRIPT_FORMAT = "motion_synth-run-transcript-v1"


def _output_dir(config: RunConfig) -> Path:
    out = config.output
    out.mkdir(parents=True, exist_ok=True)
    return out


def _topology(path=None):
    return read_skeleton(path) if path else load_default_skeleton()


def _write_report(path, lines):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write("\n".join(lines) + "\n")
    return path


def cmd_synth(config: RunConfig):
    out = _output_dir(config)
    topology = config.load_topology()
    backend = config.make_backend()
    seq = agents.run_pipeline(
        backend, config.motion_instruction(), topology,
        config.budget, config.ik, config.camera, config.image)

    written = {
        'keyframes': interp.write_keyframes(out / "keyframes.tsv", topology, seq),
        'transcript': files.write_json(out / "transcript.json", {
            'format': RUN_TRANSCRIPT_FORMAT,
            'instruction': config.instruction.text,
            'transitions': list(seq.transcripts),
        }),
        'images': [
            render.write_image(
                out / f"keyframe_{i:03d}.png",
                render.render_view(topology, pose, config.camera, config.image))
            for i, pose in enumerate(seq.poses)
        ],
    }
    if isinstance(backend, RemoteBackend):
        written['requests'] = files.write_json(out / "requests.json", backend.transcript)
    logger.info("synthesised %d keyframes into %s", len(seq.poses), out)
    return written


def cmd_interp(keyframes, output, skeleton=None):
    topology = _topology(skeleton)
    seq = interp.read_keyframes(keyframes, topology)
    clip = interp.interpolate(seq, source_id=Path(keyframes).stem)
    logger.info("interpolated %d keyframes into %d frames", len(seq.poses), len(clip.frames))
    return interp.write_clip(output, topology, clip)


def cmd_track(config: RunConfig, clip_paths):
    if not clip_paths:
        raise ValueError("no clip files given")
    out = _output_dir(config)
    topology = config.load_topology()
    cfg = config.train._replace(seed=config.seed)
    progress = config.run.show_progress

    report = [f"seed: {cfg.seed}"]
    clips = []
    for path in clip_paths:
        clip = interp.read_clip(path, topology)
        if len(clip.frames) < cfg.window:
            report.append(f"padded {Path(path).name} from {len(clip.frames)} to {cfg.window} frames")
        clips.append(interp.pad_clip(clip, cfg.window))
    dataset = interp.ClipDataset.from_clips(clips)

    field = config.height_field()
    grid = config.observation_grid()
    stack = tracking.TrackingStack.build(topology, cfg, grid)
    episodes = tracking.collect_episodes(
        topology, dataset.clips, field, config.sim, cfg.action_noise, cfg.seed, grid,
        show_progress=progress)
    world_curve = tracking.train_world_model(stack, episodes, cfg, show_progress=progress)
    policy_curve = tracking.train_policy(
        stack, dataset, topology, cfg, field, show_progress=progress)

    written = {
        'world_curve': tracking.write_curve(
            out / "world_curve.tsv", world_curve, seed=cfg.seed, model="world"),
        'policy_curve': tracking.write_curve(
            out / "policy_curve.tsv", policy_curve, seed=cfg.seed, model="policy"),
        'bundle': tracking.save_bundle(out / "bundle.pt", stack, cfg, dataset.fingerprint()),
    }
    report += [
        f"clips: {len(dataset.clips)}, frames: {dataset.total_frames}",
        f"episodes: {len(episodes)}",
        f"world_model_final_mse: {world_curve.mse.iloc[-1]:.6g}",
        f"policy_final_tracking: {policy_curve.tracking.iloc[-1]:.6g}",
    ]
    written['report'] = _write_report(out / "track_report.txt", report)
    return written


def cmd_rollout(config: RunConfig, checkpoint, clip_path):
    out = _output_dir(config)
    topology = config.load_topology()
    bundle = tracking.load_bundle(checkpoint, topology)
    clip = interp.read_clip(clip_path, topology)
    field = config.height_field()
    trajectory = tracking.rollout_inference(
        bundle.stack, topology, clip,
        tracking.physics_simulator(topology, field, config.sim), field)
    per_frame, mean = tracking.tracking_error(trajectory, clip, topology)

    report = [
        f"frames: {len(trajectory.states)}/{len(clip.frames)}",
        f"mean_tracking_error: {mean:.4f}",
        f"max_frame_error: {per_frame.max():.4f}",
    ]
    if len(trajectory.states) < len(clip.frames):
        report.append(f"truncated: simulation diverged after {len(trajectory.states)} frames")
    return {
        'trajectory': tracking.write_trajectory(out / "trajectory.tsv", topology, trajectory),
        'report': _write_report(out / "rollout_report.txt", report),
    }


def cmd_eval(config: RunConfig, mode, trajectories=(), checkpoint=None, clip_path=None):
    out = _output_dir(config)
    topology = config.load_topology()
    if mode == "hsi":
        if not trajectories:
            raise ValueError("no trajectory files given")
        pair = config.contact_pair().validate(topology)
        lines, errors, successes = [], [], []
        for path in trajectories:
            trajectory = tracking.read_trajectory(path, topology)
            success, error = terrain.eval_contact(trajectory, pair, topology)
            successes.append(success)
            errors.append(error)
            lines.append(
                f"{Path(path).name}: success: {str(success).lower()}, contact_error: {error:.3f}")
        lines.append(
            f"success_rate: {100 * np.mean(successes):.0f}, "
            f"mean_contact_error: {np.mean(errors):.3f}")
    elif mode == "stepping":
        if checkpoint is None or clip_path is None:
            raise ValueError("stepping-stones evaluation needs --checkpoint and --clip")
        bundle = tracking.load_bundle(checkpoint, topology)
        clip = interp.read_clip(clip_path, topology)
        params = config.stepping_params().validate()
        runner = tracking.stepping_stone_runner(bundle.stack, topology, clip, config.sim)
        d_all, d_any = terrain.eval_stepping_stones(
            runner, params, config.terrain.d_grid, config.terrain.runs,
            show_progress=config.run.show_progress)
        lines = [terrain.format_stepping_row(params, d_all, d_any)]
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    for line in lines:
        logger.info(line)
    return _write_report(out / "metrics.txt", lines)


def _poses_of(path, topology):
    kind = files.peek_tag(path)
    if kind == interp.KEYFRAMES_FORMAT:
        return interp.read_keyframes(path, topology).poses
    if kind == interp.CLIP_FORMAT:
        return interp.read_clip(path, topology).frames
    if kind == tracking.TRAJECTORY_FORMAT:
        states = tracking.read_trajectory(path, topology).states
        return [sim_state_to_pose(topology, s) for s in states]
    raise files.FileFormatError(path, 1, 3, f"cannot render a {kind!r} file")


def cmd_render(path, output, config: RunConfig = None, skeleton=None):
    topology = config.load_topology() if config else _topology(skeleton)
    camera = config.camera if config else CameraState()
    image_config = config.image if config else render.ImageConfig()
    output = Path(output)
    output.mkdir(parents=True, exist_ok=True)
    return [
        render.write_image(
            output / f"frame_{i:04d}.png",
            render.render_view(topology, pose, camera, image_config))
        for i, pose in enumerate(_poses_of(path, topology))
    ]


def get_parser():
    parser = argparse.ArgumentParser(
        prog='motion-synth',
        description='Keyframe motion synthesis with language-model agents and physics tracking')
    utils.add_logging_argument(parser)
    commands = parser.add_subparsers(dest='command', required=True)

    def add_config(sub, required=True):
        sub.add_argument(
            '-c', '--config', required=required,
            help='path to the yaml run configuration')
        sub.add_argument(
            '--set', action='append', default=[], dest='overrides',
            metavar='SECTION.KEY=VALUE', help='override a configuration value, repeatable')
        sub.add_argument(
            '-o', '--output', help='output directory, overrides run.output')

    synth = commands.add_parser('synth', help='run the designer and animator to make keyframes')
    add_config(synth)

    interp_ = commands.add_parser('interp', help='interpolate a keyframe file to a 20 fps clip')
    interp_.add_argument('keyframes', help='keyframe file')
    interp_.add_argument('clip', help='path of the output clip file')
    interp_.add_argument('--skeleton', help='skeleton file, defaults to the packaged humanoid')

    track = commands.add_parser('track', help='train the world model and tracking policy')
    add_config(track)
    track.add_argument('clips', nargs='+', help='clip files to track')

    rollout = commands.add_parser('rollout', help='track a clip in simulation')
    add_config(rollout)
    rollout.add_argument('--checkpoint', required=True, help='bundle written by track')
    rollout.add_argument('clip', help='clip file to track')

    evaluate = commands.add_parser('eval', help='score trajectories or a stepping-stones policy')
    add_config(evaluate)
    evaluate.add_argument('--mode', choices=['hsi', 'stepping'], default='hsi')
    evaluate.add_argument('trajectories', nargs='*', help='trajectory files (hsi mode)')
    evaluate.add_argument('--checkpoint', help='bundle written by track (stepping mode)')
    evaluate.add_argument('--clip', help='clip to track over each course (stepping mode)')

    render_ = commands.add_parser('render', help='render every frame of a pose file')
    add_config(render_, required=False)
    render_.add_argument('path', help='keyframe, clip or trajectory file')
    render_.add_argument('--skeleton', help='skeleton file, defaults to the packaged humanoid')
    return parser


def parse_args(args):
    return get_parser().parse_args(args)


def _load(options):
    config = load_config(options.config, options.overrides)
    if options.output:
        config = config._replace(run=config.run._replace(output=options.output))
    return config


def run(args=None):
    options = parse_args(args)
    utils.set_logging(options)

    if options.command == 'synth':
        return cmd_synth(_load(options))
    if options.command == 'interp':
        return cmd_interp(options.keyframes, options.clip, options.skeleton)
    if options.command == 'track':
        return cmd_track(_load(options), options.clips)
    if options.command == 'rollout':
        return cmd_rollout(_load(options), options.checkpoint, options.clip)
    if options.command == 'eval':
        return cmd_eval(
            _load(options), options.mode, options.trajectories,
            options.checkpoint, options.clip)
    if options.command == 'render':
        config = _load(options) if options.config else None
        output = options.output or (config.output if config else "frames")
        return cmd_render(options.path, output, config, options.skeleton)


def main():
    try:
        run(sys.argv[1:])
    except Exception as err:
        logging.error(err)
        sys.exit(1)


if __name__ == "__main__":
    main()
