"""
Pose-adjustment commands emitted by the animator agent.

Grammar (one command per block)::

    [start of command] command1, selected joint J, movement [dx, dy, dz] [end of command]
    [start of command] command2, selected end effector E, movement [dx, dy, dz] [end of command]
    [start of command] command3, selected joint J, roll_degree A [end of command]
    [start of command] command4, rotate_degree A [end of command]
    [start of command] command5, rotate_degree A, movement [dx, dy, dz], support points [J, ...] [end of command]
    [start of command] command6, rotate_degree A, movement [dx, dy, dz] [end of command]
    Done
"""
import re
import math
import logging
from typing import NamedTuple, Tuple, Optional, Iterable, Union

from .skeleton import END_EFFECTORS

logger = logging.getLogger(__name__)

START_MARKER = "[start of command]"
END_MARKER = "[end of command]"

MAX_MOVEMENT = 5.0
MAX_DEGREES = 360.0

Vector = Tuple[float, float, float]


class SingleJointMove(NamedTuple):
    joint: str
    delta: Vector


class EndEffectorMove(NamedTuple):
    end_effector: str
    delta: Vector


class SingleJointRoll(NamedTuple):
    joint: str
    degrees: float


class CameraRotate(NamedTuple):
    degrees: float


class PelvisSupported(NamedTuple):
    rotation_deg: float
    translation: Vector
    support_points: Tuple[str, ...]


class PelvisFree(NamedTuple):
    rotation_deg: float
    translation: Vector


class Done(NamedTuple):
    pass


Command = Union[
    SingleJointMove, EndEffectorMove, SingleJointRoll, CameraRotate,
    PelvisSupported, PelvisFree, Done,
]

COMMAND_IDS = {
    SingleJointMove: 1,
    EndEffectorMove: 2,
    SingleJointRoll: 3,
    CameraRotate: 4,
    PelvisSupported: 5,
    PelvisFree: 6,
}

COMMAND_NAMES = {
    SingleJointMove: "single joint movement",
    EndEffectorMove: "end effector movement",
    SingleJointRoll: "single joint roll",
    CameraRotate: "camera rotation",
    PelvisSupported: "pelvis rotation and movement with support points",
    PelvisFree: "pelvis rotation and movement without support points",
}

COMMAND_FORMATS = {
    SingleJointMove: "command1, selected joint {joint}, movement [dx, dy, dz]",
    EndEffectorMove: "command2, selected end effector {end_effector}, movement [dx, dy, dz]",
    SingleJointRoll: "command3, selected joint {joint}, roll_degree {degrees}",
    CameraRotate: "command4, rotate_degree {degrees}",
    PelvisSupported: (
        "command5, rotate_degree {degrees}, movement [dx, dy, dz], "
        "support points [{joint}, ...]"),
    PelvisFree: "command6, rotate_degree {degrees}, movement [dx, dy, dz]",
}


class CommandParseError(ValueError):
    def __init__(self, message, text="", span=(0, 0)):
        self.text = text
        self.span = tuple(span)
        super().__init__(message)

    @property
    def fragment(self):
        return self.text[self.span[0]:self.span[1]]


class MissingBlock(CommandParseError):
    pass


class UnknownCommandId(CommandParseError):
    pass


class UnknownJointName(CommandParseError):
    pass


class MalformedVector(CommandParseError):
    pass


class OutOfRangeNumber(CommandParseError):
    pass


_BLOCK = re.compile(
    re.escape(START_MARKER) + r"(.*?)" + re.escape(END_MARKER),
    re.IGNORECASE | re.DOTALL,
)
_COMMAND_ID = re.compile(r"\s*command\s*(\d+)\s*", re.IGNORECASE)
_FIELDS = {
    'joint': re.compile(r"\s*selected joint\s+(\S+)\s*$", re.IGNORECASE),
    'end_effector': re.compile(r"\s*selected end effector\s+(\S+)\s*$", re.IGNORECASE),
    'movement': re.compile(r"\s*movement\s*(\[.*\])\s*$", re.IGNORECASE),
    'roll': re.compile(r"\s*roll_degree\s+(\S+)\s*$", re.IGNORECASE),
    'rotate': re.compile(r"\s*rotate_degree\s+(\S+)\s*$", re.IGNORECASE),
    'support': re.compile(r"\s*support points\s*(\[.*\])\s*$", re.IGNORECASE),
}
_LAYOUTS = {
    1: ('joint', 'movement'),
    2: ('end_effector', 'movement'),
    3: ('joint', 'roll'),
    4: ('rotate',),
    5: ('rotate', 'movement', 'support'),
    6: ('rotate', 'movement'),
}
_DONE = re.compile(r"^\W*done\W*$", re.IGNORECASE)


def _split_fields(body, offset):
    """Splits on commas outside square brackets, keeping absolute spans"""
    fields, depth, start = [], 0, 0
    for i, char in enumerate(body):
        if char == '[':
            depth += 1
        elif char == ']':
            depth -= 1
        elif char == ',' and depth == 0:
            fields.append((body[start:i], (offset + start, offset + i)))
            start = i + 1
    fields.append((body[start:], (offset + start, offset + len(body))))
    return fields


def _number(token, text, span, limit):
    try:
        value = float(token)
    except ValueError:
        raise MalformedVector(f"not a number: {token!r}", text, span) from None
    if not math.isfinite(value) or abs(value) > limit:
        raise OutOfRangeNumber(
            f"{token!r} outside [-{limit}, {limit}]", text, span)
    return value


def _vector(token, text, span):
    inner = token.strip()[1:-1]
    parts = [p for p in inner.split(",")]
    if len(parts) != 3 or any(not p.strip() for p in parts):
        raise MalformedVector(
            f"expected a 3-vector, got {token.strip()!r}", text, span)
    return tuple(_number(p.strip(), text, span, MAX_MOVEMENT) for p in parts)


def _joint(name, text, span, joint_names, allowed=None):
    if allowed is not None and name not in allowed:
        raise UnknownJointName(
            f"{name!r} is not one of {', '.join(allowed)}", text, span)
    if joint_names is not None and name not in joint_names:
        raise UnknownJointName(f"unknown joint {name!r}", text, span)
    return name


def parse_agent_command(text: str, joint_names: Optional[Iterable[str]] = None) -> Command:
    """
    Parses an animator reply into a Command.

    `joint_names` restricts joint references to a topology; when omitted
    the default skeleton's joints are used.
    """
    if joint_names is None:
        from .skeleton import load_default_skeleton
        joint_names = load_default_skeleton().names
    joint_names = frozenset(joint_names)

    text = text.replace("\\_", "_")
    match = _BLOCK.search(text)
    if match is None:
        if _DONE.match(text.strip()):
            return Done()
        raise MissingBlock(
            f"reply has no {START_MARKER} ... {END_MARKER} block and is not 'Done'",
            text, (0, len(text)))

    body = match.group(1)
    offset = match.start(1)
    if _DONE.match(body.strip()):
        return Done()

    fields = _split_fields(body, offset)
    head, head_span = fields[0]
    id_match = _COMMAND_ID.fullmatch(head)
    if id_match is None or int(id_match.group(1)) not in _LAYOUTS:
        raise UnknownCommandId(
            f"unknown command {head.strip()!r}", text, head_span)
    command_id = int(id_match.group(1))

    layout = _LAYOUTS[command_id]
    args = fields[1:]
    if len(args) != len(layout):
        raise UnknownCommandId(
            f"command{command_id} expects fields {layout}, got {len(args)}",
            text, (head_span[0], offset + len(body)))

    values = {}
    for key, (field, span) in zip(layout, args):
        field_match = _FIELDS[key].match(field)
        if field_match is None:
            error = MalformedVector if key in ('movement', 'support') else UnknownCommandId
            raise error(f"expected {key} field, got {field.strip()!r}", text, span)
        token = field_match.group(1)
        if key == 'joint':
            values[key] = _joint(token, text, span, joint_names)
        elif key == 'end_effector':
            values[key] = _joint(token, text, span, joint_names, END_EFFECTORS)
        elif key == 'movement':
            values[key] = _vector(token, text, span)
        elif key in ('roll', 'rotate'):
            values[key] = _number(token, text, span, MAX_DEGREES)
        elif key == 'support':
            names = tuple(n.strip() for n in token.strip()[1:-1].split(","))
            if not names or not all(names):
                raise MalformedVector(
                    f"expected a nonempty joint list, got {token!r}", text, span)
            values[key] = tuple(_joint(n, text, span, joint_names) for n in names)

    if command_id == 1:
        return SingleJointMove(values['joint'], values['movement'])
    if command_id == 2:
        return EndEffectorMove(values['end_effector'], values['movement'])
    if command_id == 3:
        return SingleJointRoll(values['joint'], values['roll'])
    if command_id == 4:
        return CameraRotate(values['rotate'])
    if command_id == 5:
        return PelvisSupported(values['rotate'], values['movement'], values['support'])
    return PelvisFree(values['rotate'], values['movement'])


def _fmt_vector(values):
    return "[" + ", ".join(repr(float(v)) for v in values) + "]"


def format_command(cmd: Command) -> str:
    if isinstance(cmd, Done):
        return "Done"
    if isinstance(cmd, SingleJointMove):
        body = f"command1, selected joint {cmd.joint}, movement {_fmt_vector(cmd.delta)}"
    elif isinstance(cmd, EndEffectorMove):
        body = (f"command2, selected end effector {cmd.end_effector}, "
                f"movement {_fmt_vector(cmd.delta)}")
    elif isinstance(cmd, SingleJointRoll):
        body = f"command3, selected joint {cmd.joint}, roll_degree {float(cmd.degrees)!r}"
    elif isinstance(cmd, CameraRotate):
        body = f"command4, rotate_degree {float(cmd.degrees)!r}"
    elif isinstance(cmd, PelvisSupported):
        body = (f"command5, rotate_degree {float(cmd.rotation_deg)!r}, "
                f"movement {_fmt_vector(cmd.translation)}, "
                f"support points [{', '.join(cmd.support_points)}]")
    elif isinstance(cmd, PelvisFree):
        body = (f"command6, rotate_degree {float(cmd.rotation_deg)!r}, "
                f"movement {_fmt_vector(cmd.translation)}")
    else:
        raise TypeError(f"not a command: {cmd!r}")
    return f"{START_MARKER} {body} {END_MARKER}"
