"""
Keyframe interpolation onto the 20 fps clip grid, padding and the
clip dataset used for training windows.
"""
import logging
from typing import NamedTuple, Tuple, Sequence, Union

import numpy as np
import pandas as pd

from . import rotations, files, utils
from .skeleton import SkeletonTopology, KinematicPose
from .agents import KeyframeSequence

logger = logging.getLogger(__name__)

FPS = 20
KEYFRAMES_FORMAT = "motion_synth-keyframes-v1"
CLIP_FORMAT = "motion_synth-clip-v1"

_QUAT = ("qx", "qy", "qz", "qw")
_ROOT = ["root_x", "root_y", "root_z"]


class MotionClip(NamedTuple):
    fps: int
    frames: Tuple[KinematicPose, ...]
    source_id: str = ""

    def validate(self):
        if self.fps != FPS:
            raise ValueError(f"clips are sampled at {FPS} fps, got {self.fps}")
        if not self.frames:
            raise ValueError("clip has no frames")
        return self

    @property
    def root_translations(self) -> np.ndarray:
        return np.stack([f.root_translation for f in self.frames])

    @property
    def local_rotations(self) -> np.ndarray:
        return np.stack([f.local_rotations for f in self.frames])

    def fingerprint(self):
        return utils.fingerprint(
            np.concatenate([self.root_translations.ravel(), self.local_rotations.ravel()]))


class ClipDataset(NamedTuple):
    clips: Tuple[MotionClip, ...]
    boundaries: Tuple[Tuple[int, int], ...]

    @classmethod
    def from_clips(cls, clips: Sequence[MotionClip]):
        if not clips:
            raise ValueError("dataset needs at least one clip")
        boundaries = []
        start = 0
        for clip in clips:
            clip.validate()
            boundaries.append((start, start + len(clip.frames)))
            start += len(clip.frames)
        return cls(tuple(clips), tuple(boundaries))

    @property
    def total_frames(self):
        return self.boundaries[-1][1]

    def fingerprint(self):
        return utils.fingerprint([clip.fingerprint() for clip in self.clips])


def frame_count(interval_s: float) -> int:
    """Frames advanced over one keyframe interval, ties to even"""
    if not interval_s > 0:
        raise ValueError(f"keyframe interval must be positive, got {interval_s}")
    n = round(FPS * interval_s)
    if n < 1:
        raise ValueError(
            f"interval {interval_s} s is shorter than half a frame at {FPS} fps")
    return n


def interpolate(seq: KeyframeSequence, source_id: str = "") -> MotionClip:
    """
    Lerps the root translation and slerps every joint rotation along the
    shortest arc. Interval i contributes round(20 * t_i) frames after its
    start keyframe; keyframes themselves are copied exactly.
    """
    if not seq.poses:
        raise ValueError("keyframe sequence is empty")
    if len(seq.intervals) != len(seq.poses) - 1:
        raise ValueError(
            f"{len(seq.poses)} keyframes need {len(seq.poses) - 1} intervals, "
            f"got {len(seq.intervals)}")

    frames = [seq.poses[0]]
    for a, b, interval in zip(seq.poses, seq.poses[1:], seq.intervals):
        n = frame_count(interval)
        s = np.arange(1, n) / n
        roots = a.root_translation + s[:, None] * (b.root_translation - a.root_translation)
        rots = rotations.slerp(a.local_rotations, b.local_rotations, s)
        frames.extend(KinematicPose.create(r, q) for r, q in zip(roots, rots))
        frames.append(b)

    return MotionClip(FPS, tuple(frames), source_id)


def pad_clip(clip: MotionClip, min_frames: int) -> MotionClip:
    if min_frames < 1:
        raise ValueError(f"min_frames must be >= 1, got {min_frames}")
    if len(clip.frames) >= min_frames:
        return clip
    logger.warning(
        "padding clip %r from %d to %d frames with its last frame",
        clip.source_id, len(clip.frames), min_frames)
    frames = clip.frames + (clip.frames[-1],) * (min_frames - len(clip.frames))
    return MotionClip(clip.fps, frames, clip.source_id)


def _generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_window(dataset, window):
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    short = [c.source_id or str(i) for i, c in enumerate(dataset.clips) if len(c.frames) < window]
    if short:
        raise ValueError(
            f"window of {window} frames is longer than clips {short}, pad them first")


def sample_rollout_window(
        dataset: ClipDataset, window: int,
        seed: Union[int, np.random.Generator]) -> Tuple[int, int]:
    """Picks a clip uniformly, then a start so the window stays inside it"""
    _check_window(dataset, window)
    rng = _generator(seed)
    clip_id = int(rng.integers(len(dataset.clips)))
    start = int(rng.integers(len(dataset.clips[clip_id].frames) - window + 1))
    return clip_id, start


def sample_rollout_windows(dataset: ClipDataset, window: int, count: int, rng):
    _check_window(dataset, window)
    rng = _generator(rng)
    clip_ids = rng.integers(len(dataset.clips), size=count)
    highs = np.array([len(c.frames) - window + 1 for c in dataset.clips])[clip_ids]
    starts = np.floor(rng.random(count) * highs).astype(int)
    return clip_ids, starts


def _pose_columns(topology: SkeletonTopology):
    return _ROOT + [f"{name}.{c}" for name in topology.names for c in _QUAT]


def _poses_to_frame(topology, poses):
    data = np.stack([
        np.concatenate([p.root_translation, p.local_rotations.ravel()])
        for p in poses])
    return pd.DataFrame(data, columns=_pose_columns(topology))


def _frame_to_poses(path, topology, frame):
    columns = _pose_columns(topology)
    files.require_columns(path, frame, columns)
    values = frame[columns].to_numpy(dtype=float)
    poses = []
    for row, rec in enumerate(values):
        try:
            poses.append(KinematicPose.create(rec[:3], rec[3:].reshape(-1, 4)))
        except ValueError as err:
            raise files.FileFormatError(path, row + 3, 1, str(err)) from None
    return poses


def write_keyframes(path, topology: SkeletonTopology, seq: KeyframeSequence):
    frame = _poses_to_frame(topology, seq.poses)
    frame.insert(0, 'interval', list(seq.intervals) + [np.nan])
    frame.insert(0, 'keyframe', np.arange(len(seq.poses)))
    return files.write_table(
        path, KEYFRAMES_FORMAT, frame,
        keyframes=len(seq.poses), skeleton=topology.fingerprint())


def read_keyframes(path, topology: SkeletonTopology) -> KeyframeSequence:
    meta, frame = files.read_table(path, KEYFRAMES_FORMAT, required=['keyframes'])
    count = files.meta_value(path, meta, 'keyframes', int)
    if len(frame) != count:
        raise files.FileFormatError(
            path, 1, 1, f"header declares {count} keyframes, table has {len(frame)}")
    files.require_columns(path, frame, ['interval'])
    poses = _frame_to_poses(path, topology, frame)
    intervals = frame['interval'].to_numpy(dtype=float)
    for row, value in enumerate(intervals[:-1]):
        if not value > 0:
            raise files.FileFormatError(
                path, row + 3, 2, f"interval must be positive, got {value}")
    return KeyframeSequence(tuple(poses), tuple(float(t) for t in intervals[:-1]))


def write_clip(path, topology: SkeletonTopology, clip: MotionClip):
    frame = _poses_to_frame(topology, clip.frames)
    frame.insert(0, 'frame', np.arange(len(clip.frames)))
    return files.write_table(
        path, CLIP_FORMAT, frame,
        fps=clip.fps, frames=len(clip.frames), source=clip.source_id or "-",
        skeleton=topology.fingerprint())


def read_clip(path, topology: SkeletonTopology) -> MotionClip:
    meta, frame = files.read_table(path, CLIP_FORMAT, required=['fps', 'frames'])
    fps = files.meta_value(path, meta, 'fps', int)
    count = files.meta_value(path, meta, 'frames', int)
    if len(frame) != count:
        raise files.FileFormatError(
            path, 1, 1, f"header declares {count} frames, table has {len(frame)}")
    source = meta.get('source', "-")
    clip = MotionClip(fps, tuple(_frame_to_poses(path, topology, frame)),
                      "" if source == "-" else source)
    try:
        return clip.validate()
    except ValueError as err:
        raise files.FileFormatError(path, 1, 1, str(err)) from None
