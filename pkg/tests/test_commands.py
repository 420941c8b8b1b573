import numpy as np
import pytest

from motion_synth.skeleton import END_EFFECTORS, load_default_skeleton
from motion_synth.commands import (
    parse_agent_command, format_command, SingleJointMove, EndEffectorMove,
    SingleJointRoll, CameraRotate, PelvisSupported, PelvisFree, Done,
    UnknownCommandId, UnknownJointName, MalformedVector, OutOfRangeNumber, MissingBlock,
    MAX_MOVEMENT, MAX_DEGREES,
)


def test_end_effector_move_inside_prose():
    reply = (
        "The right foot should lift a little.\n"
        "[start of command] command2, selected end effector right_toes, "
        "movement [0, 0.1, 0.1] [end of command]\nThat should do it."
    )
    assert parse_agent_command(reply) == EndEffectorMove("right_toes", (0.0, 0.1, 0.1))


def test_done():
    assert parse_agent_command("Done") == Done()
    assert parse_agent_command("  done. ") == Done()


def test_roll():
    reply = "[start of command] command3, selected joint right_hip, roll_degree 90 [end of command]"
    assert parse_agent_command(reply) == SingleJointRoll("right_hip", 90.0)


def test_pelvis_commands():
    supported = parse_agent_command(
        "[start of command] command5, rotate_degree -15, movement [0.1, 0, 0], "
        "support points [left_toes, right_toes] [end of command]")
    assert supported == PelvisSupported(-15.0, (0.1, 0.0, 0.0), ("left_toes", "right_toes"))
    free = parse_agent_command(
        "[start of command]command6, rotate_degree 0, movement [0, 0, 0.15][end of command]")
    assert free == PelvisFree(0.0, (0.0, 0.0, 0.15))


def test_markdown_escaped_underscores():
    reply = "[start of command] command1, selected joint left\\_knee, movement [0, 0, 0.1] [end of command]"
    assert parse_agent_command(reply) == SingleJointMove("left_knee", (0.0, 0.0, 0.1))


def test_unknown_command_id():
    with pytest.raises(UnknownCommandId) as err:
        parse_agent_command("[start of command] command9, foo [end of command]")
    assert err.value.fragment.strip() == "command9"


def test_unknown_joint():
    with pytest.raises(UnknownJointName):
        parse_agent_command(
            "[start of command] command1, selected joint tail, movement [0, 0, 0] [end of command]")


def test_end_effector_must_be_an_end_effector():
    with pytest.raises(UnknownJointName):
        parse_agent_command(
            "[start of command] command2, selected end effector left_knee, "
            "movement [0, 0, 0] [end of command]")


def test_malformed_vector():
    with pytest.raises(MalformedVector):
        parse_agent_command(
            "[start of command] command1, selected joint head, movement [0, 0.1] [end of command]")


def test_out_of_range_numbers():
    with pytest.raises(OutOfRangeNumber):
        parse_agent_command(
            "[start of command] command1, selected joint head, movement [0, 6, 0] [end of command]")
    with pytest.raises(OutOfRangeNumber):
        parse_agent_command("[start of command] command4, rotate_degree 400 [end of command]")


def test_missing_block():
    with pytest.raises(MissingBlock):
        parse_agent_command("I would move the knee forward a bit.")


def test_joint_names_restrict_to_topology():
    reply = "[start of command] command3, selected joint link1, roll_degree 5 [end of command]"
    assert parse_agent_command(reply, ["pelvis", "link1"]) == SingleJointRoll("link1", 5.0)
    with pytest.raises(UnknownJointName):
        parse_agent_command(reply)


@pytest.mark.parametrize("cmd", [
    SingleJointMove("left_knee", (0.0, 0.05, -0.1)),
    EndEffectorMove("left_fingers", (0.25, 0.0, 0.0)),
    SingleJointRoll("head", -30.0),
    CameraRotate(90.0),
    PelvisSupported(10.0, (0.0, -0.1, 0.0), ("left_toes",)),
    PelvisFree(45.0, (0.0, 0.0, 0.3)),
    Done(),
])
def test_formatted_commands_parse_back(cmd):
    assert parse_agent_command(format_command(cmd)) == cmd


def random_command(rng, names, effectors):
    def vector():
        return tuple(float(v) for v in rng.uniform(-MAX_MOVEMENT, MAX_MOVEMENT, 3))

    def degrees():
        return float(rng.uniform(-MAX_DEGREES, MAX_DEGREES))

    kind = rng.integers(7)
    if kind == 0:
        return SingleJointMove(names[rng.integers(len(names))], vector())
    if kind == 1:
        return EndEffectorMove(effectors[rng.integers(len(effectors))], vector())
    if kind == 2:
        return SingleJointRoll(names[rng.integers(len(names))], degrees())
    if kind == 3:
        return CameraRotate(degrees())
    if kind == 4:
        support = rng.choice(names, size=rng.integers(1, 4), replace=False)
        return PelvisSupported(degrees(), vector(), tuple(str(n) for n in support))
    if kind == 5:
        return PelvisFree(degrees(), vector())
    return Done()


def test_random_commands_parse_back():
    rng = np.random.default_rng(0)
    names = list(load_default_skeleton().names)
    effectors = sorted(END_EFFECTORS)
    for _ in range(10_000):
        cmd = random_command(rng, names, effectors)
        assert parse_agent_command(format_command(cmd), names) == cmd
