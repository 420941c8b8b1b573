"""
Keyframe designer and keyframe animator loops.

The designer turns the motion instruction into a structured description of
the next keyframe; the animator then adjusts each body part in turn with
commands until it answers "Done" or runs out of budget.
"""
import re
import string
import logging
from pathlib import Path
from functools import lru_cache
from typing import NamedTuple, Optional, Dict, Tuple, List

import numpy as np

from . import rotations, utils
from .skeleton import (
    SkeletonTopology, KinematicPose, BODY_PARTS, END_EFFECTORS,
    standing_pose, joint_coordinates, forward_kinematics,
)
from .commands import (
    SingleJointMove, EndEffectorMove, SingleJointRoll, CameraRotate,
    PelvisSupported, PelvisFree, Done, CommandParseError, COMMAND_FORMATS,
    COMMAND_NAMES, parse_agent_command, format_command,
)
from .kinematics import IkConfig, CameraState, apply_command
from .render import ImageConfig, render_view
from .backends import AgentBackend

logger = logging.getLogger(__name__)

_PROMPT_PATH = Path(__file__).parent / "data" / "prompts"

INITIAL_DESCRIPTION = "The humanoid is standing on the ground."
TASK_KINDS = ("free_motion", "scene_interaction", "stepping_stones")

DESIGNER_PREFIX = "I want you to be a human motion animation designer."


def animator_prefix(part: str) -> str:
    return (
        "I want you to be a humanoid motion animator. "
        f"You need to adjust the humanoid's {part_label(part)} pose"
    )


def part_label(part: str) -> str:
    return part.replace("_", " ")


class MotionInstruction(NamedTuple):
    text: str
    task_kind: str = "free_motion"
    contact_pair: Optional[Tuple[str, Tuple[float, float, float]]] = None
    terrain_ref: Optional[str] = None

    def validate(self):
        if not self.text.strip():
            raise ValueError("motion instruction is empty")
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if (self.contact_pair is not None) != (self.task_kind == "scene_interaction"):
            raise ValueError("contact_pair is required for, and only for, scene_interaction")
        return self


class KeyframeRepresentation(NamedTuple):
    full_body: str = ""
    pelvis_rotation: Optional[float] = None
    pelvis_movement: Optional[Tuple[float, float, float]] = None
    parts: Tuple[Tuple[str, str], ...] = ()
    interval_s: Optional[float] = None
    done: bool = False

    @property
    def part_descriptions(self) -> Dict[str, str]:
        return dict(self.parts)


class PipelineBudget(NamedTuple):
    max_keyframes: int = 16
    max_adjust_per_part: int = 5
    max_total_adjust_per_transition: int = 10

    def validate(self):
        for name, value in self._asdict().items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        return self


class KeyframeSequence(NamedTuple):
    poses: Tuple[KinematicPose, ...]
    intervals: Tuple[float, ...]
    transcripts: Tuple[dict, ...] = ()

    @property
    def truncated(self):
        return any(t.get('truncated') for t in self.transcripts)


class PartAdjustment(NamedTuple):
    pose: KinematicPose
    camera: CameraState
    commands_used: int


class DesignerParseError(ValueError):
    pass


class MissingDescriptionBlock(DesignerParseError):
    pass


class MissingPart(DesignerParseError):
    def __init__(self, part):
        self.part = part
        super().__init__(f"designer reply is missing the {part} field")


class NonpositiveInterval(DesignerParseError):
    pass


class CommandNotAllowed(ValueError):
    pass


@lru_cache
def load_template(name) -> string.Template:
    with open(_PROMPT_PATH / f"{name}.txt", 'r', encoding='utf-8') as f:
        return string.Template(f.read())


def format_coordinates(coords: Dict[str, np.ndarray]) -> str:
    return "\n".join(f"{name}: {utils.format_vector(pos)}" for name, pos in coords.items())


def build_designer_prompt(instruction: MotionInstruction, description, coords) -> str:
    constraint = ""
    if instruction.contact_pair is not None:
        joint, target = instruction.contact_pair
        constraint = (
            f"Contact constraint: by the end of the motion the {part_label(joint)} "
            f"should reach {utils.format_vector(target)}.")
    return load_template("designer").substitute(
        instruction=instruction.text.strip(),
        constraint=constraint,
        description=description,
        coordinates=format_coordinates(coords),
    )


def allowed_commands(topology: SkeletonTopology, part: str) -> Dict[type, Tuple[str, ...]]:
    """Command types usable on `part`, each with its selectable joints"""
    joints = topology.body_parts[part]
    if part == BODY_PARTS[0]:
        return {
            PelvisSupported: tuple(n for n in topology.names if n not in joints),
            PelvisFree: (),
            CameraRotate: (),
        }
    movable = joints[1:] if len(joints) > 1 else joints
    allowed = {SingleJointMove: movable}
    effectors = tuple(n for n in joints if n in END_EFFECTORS)
    if effectors:
        allowed[EndEffectorMove] = effectors
    allowed[SingleJointRoll] = joints
    allowed[CameraRotate] = ()
    return allowed


def _command_joint(cmd):
    if isinstance(cmd, SingleJointMove) or isinstance(cmd, SingleJointRoll):
        return (cmd.joint,)
    if isinstance(cmd, EndEffectorMove):
        return (cmd.end_effector,)
    if isinstance(cmd, PelvisSupported):
        return cmd.support_points
    return ()


def check_allowed(topology, part, cmd):
    allowed = allowed_commands(topology, part)
    if type(cmd) not in allowed:
        raise CommandNotAllowed(
            f"{COMMAND_NAMES[type(cmd)]} is not available for the {part_label(part)}")
    choices = allowed[type(cmd)]
    for joint in _command_joint(cmd):
        if joint not in choices:
            raise CommandNotAllowed(
                f"{joint!r} cannot be selected for the {part_label(part)}, "
                f"choose from {', '.join(choices)}")


def _describe_commands(topology, part):
    lines = []
    for kind, choices in allowed_commands(topology, part).items():
        choice = "{CHOICE: " + ", ".join(choices) + "}"
        text = COMMAND_FORMATS[kind].format(
            joint=choice, end_effector=choice, degrees="[NUM]")
        lines.append(f"- {COMMAND_NAMES[kind]}: {text}")
    return "\n".join(lines)


def resolve_pelvis_directive(rep: KeyframeRepresentation, pose: KinematicPose):
    """
    Returns (rotation_deg, world translation) for the representation's
    pelvis directive; movement is (left, up, forward) in the character's
    heading frame.
    """
    rotation = rep.pelvis_rotation or 0.0
    if rep.pelvis_movement is None:
        return rotation, np.zeros(3)
    heading = float(rotations.heading_deg(pose.local_rotations[0]))
    world = rotations.rotate(rotations.yaw(heading), np.asarray(rep.pelvis_movement, float))
    return rotation, world


def build_animator_prompt(topology, part, rep, pose, coords, feedback="") -> str:
    pelvis_target = ""
    if part == BODY_PARTS[0] and (rep.pelvis_rotation or rep.pelvis_movement):
        rotation, translation = resolve_pelvis_directive(rep, pose)
        pelvis_target = (
            f"Target pelvis change in world coordinates: rotate_degree {rotation:.1f}, "
            f"movement {utils.format_vector(translation)}.")
    return load_template("animator").substitute(
        part=part_label(part),
        commands=_describe_commands(topology, part),
        full_body=rep.full_body,
        part_description=rep.part_descriptions.get(part, ""),
        pelvis_target=pelvis_target,
        coordinates=format_coordinates(coords),
        feedback=feedback,
    )


_DESCRIPTION_BLOCK = re.compile(
    r"\[start of description\](.*?)\[end of description\]", re.IGNORECASE | re.DOTALL)
_DONE = re.compile(r"^\W*done\W*$", re.IGNORECASE)
_NUMBERING = re.compile(r"^\s*(?:\d+\s*[.)]\s*)?(?:\[optional\]\s*)?")
_LABEL = re.compile(r"^([A-Za-z][A-Za-z \-]*?)\s*:\s*(.*)$")
_NUM = r"([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)"
_INTERVAL = re.compile(r"time interval\b.*?\bis\s+" + _NUM + r"\s*seconds?", re.IGNORECASE | re.DOTALL)
_ROTATION = re.compile(_NUM + r"\s*degrees?\s+to\s+the\s+(left|right)", re.IGNORECASE)
_VERTICAL = re.compile(_NUM + r"\s*meters?\s+(upward|downward|up|down)", re.IGNORECASE)
_FORWARD = re.compile(_NUM + r"\s*meters?\s+(forward|backward)", re.IGNORECASE)
_LATERAL = re.compile(_NUM + r"\s*meters?\s+to\s+the\s+(left|right)", re.IGNORECASE)

_PART_LABELS = {
    "left leg next-keyframe posture": "left_leg",
    "right leg next-keyframe posture": "right_leg",
    "torso next-keyframe posture": "torso",
    "head next-keyframe posture": "head",
    "left arm next-keyframe posture": "left_arm",
    "right arm next-keyframe posture": "right_arm",
}
_GENERAL_LABEL = "general next-keyframe description"
_ROTATION_LABEL = "pelvis next-keyframe rotation"
_MOVEMENT_LABEL = "pelvis next-keyframe movement"


def _signed(match, negative):
    value = float(match.group(1))
    return -value if match.group(2).lower() in negative else value


def _parse_movement(text):
    movement = [0.0, 0.0, 0.0]
    found = False
    for index, pattern, negative in (
            (0, _LATERAL, ("right",)),
            (1, _VERTICAL, ("downward", "down")),
            (2, _FORWARD, ("backward",))):
        match = pattern.search(text)
        if match:
            movement[index] = _signed(match, negative)
            found = True
    return tuple(movement) if found else None


def parse_designer_reply(text: str) -> KeyframeRepresentation:
    match = _DESCRIPTION_BLOCK.search(text)
    if match is None:
        if _DONE.match(text.strip()):
            return KeyframeRepresentation(done=True)
        raise MissingDescriptionBlock(
            "reply has no [start of description] ... [end of description] block")
    body = match.group(1)
    if _DONE.match(body.strip()):
        return KeyframeRepresentation(done=True)

    fields: Dict[str, str] = {}
    current = None
    for line in body.splitlines():
        line = _NUMBERING.sub("", line).strip()
        if not line:
            continue
        label = _LABEL.match(line)
        if label and label.group(1).strip().lower() in (
                {_GENERAL_LABEL, _ROTATION_LABEL, _MOVEMENT_LABEL} | set(_PART_LABELS)):
            current = label.group(1).strip().lower()
            fields[current] = label.group(2).strip()
        elif _INTERVAL.search(line):
            current = None
        elif current is not None:
            fields[current] += " " + line

    if _GENERAL_LABEL not in fields:
        raise MissingPart("general")
    parts = {}
    for label, part in _PART_LABELS.items():
        if label not in fields:
            raise MissingPart(part_label(part))
        parts[part] = fields[label]

    rotation = None
    if _ROTATION_LABEL in fields:
        rot = _ROTATION.search(fields[_ROTATION_LABEL])
        if rot:
            rotation = _signed(rot, ("right",))
    movement = None
    if _MOVEMENT_LABEL in fields:
        movement = _parse_movement(fields[_MOVEMENT_LABEL])

    pelvis_text = " ".join(
        fields[k] for k in (_ROTATION_LABEL, _MOVEMENT_LABEL) if k in fields)
    parts[BODY_PARTS[0]] = pelvis_text or "The pelvis keeps its current rotation and position."

    interval = _INTERVAL.search(body)
    if interval is None:
        raise MissingPart("time interval")
    interval_s = float(interval.group(1))
    if not interval_s > 0:
        raise NonpositiveInterval(f"time interval must be positive, got {interval_s}")

    return KeyframeRepresentation(
        full_body=fields[_GENERAL_LABEL],
        pelvis_rotation=rotation,
        pelvis_movement=movement,
        parts=tuple((part, parts[part]) for part in BODY_PARTS),
        interval_s=interval_s,
    )


def designer_step(
        backend: AgentBackend,
        instruction: MotionInstruction,
        current_full_body: str,
        pose: KinematicPose,
        joint_coords: Dict[str, np.ndarray],
        image=None,
        log: Optional[dict] = None,
) -> KeyframeRepresentation:
    prompt = build_designer_prompt(instruction, current_full_body, joint_coords)
    reply = backend.complete(prompt, image)
    if log is not None:
        log.update(prompt=prompt, reply=reply)
    return parse_designer_reply(reply)


def animator_adjust_part(
        backend: AgentBackend,
        topology: SkeletonTopology,
        part: str,
        representation: KeyframeRepresentation,
        pose: KinematicPose,
        camera: CameraState,
        budget: PipelineBudget,
        ik: IkConfig = IkConfig(),
        image_config: ImageConfig = ImageConfig(),
        limit: Optional[int] = None,
        log: Optional[List[dict]] = None,
) -> PartAdjustment:
    """
    Runs the animator loop for one body part. Every reply that is not
    "Done" consumes one iteration, including camera rotations, malformed
    replies and disallowed commands.
    """
    if part not in topology.body_parts:
        raise ValueError(f"unknown body part {part!r}")
    if representation.done:
        raise ValueError("cannot animate towards a finished representation")
    limit = budget.max_adjust_per_part if limit is None else min(
        limit, budget.max_adjust_per_part)

    used = 0
    feedback = ""
    while used < limit:
        coords = joint_coordinates(topology, pose)
        prompt = build_animator_prompt(topology, part, representation, pose, coords, feedback)
        image = render_view(topology, pose, camera, image_config)
        reply = backend.complete(prompt, image)
        entry = {'part': part, 'prompt': prompt, 'reply': reply}
        if log is not None:
            log.append(entry)

        try:
            cmd = parse_agent_command(reply, topology.names)
        except CommandParseError as err:
            logger.warning("%s: unusable animator reply (%s): %r", part, err, err.fragment)
            entry['status'] = f"rejected: {err}"
            feedback = f"Your last reply could not be used: {err}. Reply with one command or \"Done\"."
            used += 1
            continue

        if isinstance(cmd, Done):
            entry['status'] = "done"
            break

        used += 1
        try:
            check_allowed(topology, part, cmd)
            pose, camera = apply_command(topology, pose, camera, cmd, ik)
        except (CommandNotAllowed, ValueError) as err:
            logger.warning("%s: command rejected: %s", part, err)
            entry['status'] = f"rejected: {err}"
            feedback = f"Your last command was rejected: {err}."
            continue

        entry['status'] = "applied"
        entry['command'] = format_command(cmd)
        feedback = f"The command {format_command(cmd)} was executed. The joint coordinates above are updated."

    return PartAdjustment(pose, camera, used)


def run_pipeline(
        backend: AgentBackend,
        instruction: MotionInstruction,
        topology: SkeletonTopology,
        budget: PipelineBudget = PipelineBudget(),
        ik: IkConfig = IkConfig(),
        camera: CameraState = CameraState(),
        image_config: ImageConfig = ImageConfig(),
) -> KeyframeSequence:
    instruction.validate()
    budget.validate()
    ik.validate()

    pose = standing_pose(topology)
    description = INITIAL_DESCRIPTION
    poses = [pose]
    intervals = []
    transcripts = []

    while True:
        if len(poses) >= budget.max_keyframes:
            logger.warning(
                "stopping after %d keyframes without a 'Done' from the designer",
                len(poses))
            transcripts.append({'keyframe': len(poses), 'truncated': True})
            break

        record = {'keyframe': len(poses), 'designer': {}, 'animator': []}
        transcripts.append(record)
        coords = joint_coordinates(topology, pose)
        image = render_view(topology, pose, camera, image_config)
        rep = designer_step(
            backend, instruction, description, pose, coords, image, log=record['designer'])
        if rep.done:
            logger.info("designer finished after %d keyframes", len(poses))
            break

        remaining = budget.max_total_adjust_per_transition
        for part in BODY_PARTS:
            if remaining <= 0:
                logger.info("transition budget spent before the %s", part_label(part))
                break
            result = animator_adjust_part(
                backend, topology, part, rep, pose, camera, budget, ik,
                image_config, limit=remaining, log=record['animator'])
            pose, camera = result.pose, result.camera
            remaining -= result.commands_used

        record['commands_used'] = budget.max_total_adjust_per_transition - remaining
        record['interval_s'] = rep.interval_s
        poses.append(pose)
        intervals.append(rep.interval_s)
        description = rep.full_body
        logger.info(
            "keyframe %d: %d commands, interval %.2f s",
            len(poses) - 1, record['commands_used'], rep.interval_s)

    return KeyframeSequence(tuple(poses), tuple(intervals), tuple(transcripts))
