import numpy as np
import pytest

from motion_synth import files, rotations
from motion_synth.terrain import (
    HeightField, ObservationGrid, SteppingStoneParams, ContactPair, GAP_DEPTH, NonFiniteQuery,
    sample_height_observation, generate_stepping_stones, course_to_heightfield,
    eval_contact, course_success, eval_stepping_stones, format_stepping_row,
    write_heightfield, read_heightfield,
)


def step_field():
    """0.2 m step up for z >= 0 on a 0.05 m grid"""
    heights = np.zeros((201, 201))
    heights[100:] = 0.2
    return HeightField.create((-5.0, -5.0), 0.05, heights)


@pytest.mark.parametrize("height, expected", [(0.0, -0.9), (0.3, -0.6)])
def test_flat_field_observation(height, expected):
    obs = sample_height_observation(HeightField.flat(height), [1.0, 0.9, -2.0], 30.0)
    assert obs.values.shape == (256,)
    assert np.allclose(obs.values, expected)
    assert obs.clamped == 0


def test_step_is_seen_ahead():
    grid = ObservationGrid()
    obs = sample_height_observation(step_field(), [0.0, 0.9, 0.0], 0.0, grid)
    values = obs.values.reshape(grid.rows, grid.cols)
    rear, front = values[:grid.rows // 2], values[grid.rows // 2:]
    assert np.allclose(front - rear, 0.2)

    turned = sample_height_observation(step_field(), [0.0, 0.9, 0.0], 180.0, grid)
    turned = turned.values.reshape(grid.rows, grid.cols)
    assert np.allclose(turned[:grid.rows // 2], front)
    assert np.allclose(turned[grid.rows // 2:], rear)


def bumpy(x, z):
    return 0.3 * np.sin(2.0 * x) + 0.1 * z * z - 0.05 * x * z


def yawed_field(degrees):
    """bumpy() on a grid centred on the origin, turned by `degrees` of yaw"""
    coords = np.linspace(-2.0, 2.0, 41)
    zz, xx = np.meshgrid(coords, coords, indexing='ij')
    points = np.stack([xx, np.zeros_like(xx), zz], axis=-1)
    back = rotations.rotate(rotations.yaw(-degrees), points)
    return HeightField.create((-2.0, -2.0), 0.1, bumpy(back[..., 0], back[..., 2]))


@pytest.mark.parametrize("heading", [0.0, 25.0, 140.0])
def test_observation_turns_with_the_terrain(heading):
    pelvis = [0.0, 0.9, 0.0]
    obs = sample_height_observation(yawed_field(0.0), pelvis, heading)
    turned = sample_height_observation(yawed_field(90.0), pelvis, heading + 90.0)
    assert obs.clamped == turned.clamped == 0
    assert np.allclose(turned.values, obs.values, atol=1e-9)


def test_non_finite_height_query():
    field = HeightField.flat(0.0)
    with pytest.raises(NonFiniteQuery):
        field.height(np.nan, 0.0)
    with pytest.raises(NonFiniteQuery):
        field.sample([0.0, 1.0], [np.inf, 0.0])


def test_samples_off_the_field_are_clamped():
    field = HeightField.create((0.0, 0.0), 1.0, np.ones((2, 2)))
    obs = sample_height_observation(field, [10.0, 0.0, 10.0], 0.0, ObservationGrid(2, 2))
    assert np.allclose(obs.values, 1.0)
    assert obs.clamped == 4


def test_flat_course():
    stones = generate_stepping_stones(SteppingStoneParams(0.0, 0.0, 1.0, count=5))
    assert np.allclose(stones, [[k, 0., 0.] for k in range(5)], atol=1e-12)


def test_pitched_course():
    stones = generate_stepping_stones(SteppingStoneParams(50.0, 0.0, 0.8))
    assert np.allclose(np.diff(stones[:, 1]), 0.61284, atol=1e-5)
    assert np.allclose(np.diff(stones[:, 1]), 0.8 * np.sin(np.deg2rad(50)), atol=1e-9)


def test_spiral_course():
    stones = generate_stepping_stones(SteppingStoneParams(30.0, 20.0, 1.0, count=18))
    steps = np.diff(stones, axis=0)
    assert np.allclose(np.linalg.norm(steps, axis=1), 1.0, atol=1e-9)
    headings = np.rad2deg(np.arctan2(-steps[:, 2], steps[:, 0])) % 360
    assert np.allclose(headings, (20.0 * np.arange(1, 18)) % 360, atol=1e-9)
    assert headings[-1] == pytest.approx(340.0)


def test_jittered_course_is_seeded():
    params = SteppingStoneParams(0.0, 10.0, 1.0, yaw_jitter_deg=15.0)
    a = generate_stepping_stones(params, seed=3)
    b = generate_stepping_stones(params, seed=3)
    c = generate_stepping_stones(params, seed=4)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_course_heights():
    stones = np.array([[0.0, 0.4, 0.0], [3.0, 0.1, 0.0]])
    field = course_to_heightfield(stones, 0.25)
    assert field.height(0.0, 0.0) == pytest.approx(0.4)
    assert field.height(3.0, 0.0) == pytest.approx(0.1)
    assert field.height(1.5, 0.0) == pytest.approx(GAP_DEPTH)


def test_overlapping_stones_keep_the_lower_index():
    stones = np.array([[0.0, 0.5, 0.0], [0.0, 0.2, 0.0]])
    field = course_to_heightfield(stones, 0.25)
    assert field.height(0.05, 0.05) == pytest.approx(0.5)


def test_invalid_course_params():
    with pytest.raises(ValueError):
        SteppingStoneParams(spacing=0.0).validate()
    with pytest.raises(ValueError):
        SteppingStoneParams(count=1).validate()


def approach(topology, target, closest):
    """Positions whose right fingers pass `closest` metres from `target`"""
    n = 21
    positions = np.zeros((n, len(topology), 3))
    j = topology.index("right_fingers")
    track = np.linspace(-1.0, 1.0, n)
    positions[:, j] = np.asarray(target) + np.stack(
        [track, np.full(n, closest), np.zeros(n)], axis=1)
    return positions


@pytest.mark.parametrize("closest, success", [(0.15, True), (0.25, False), (0.0, True)])
def test_contact(humanoid, closest, success):
    target = (0.5, 1.0, 0.3)
    pair = ContactPair("right_fingers", target)
    ok, error = eval_contact(approach(humanoid, target, closest), pair, humanoid)
    assert ok is success
    assert error == pytest.approx(closest, abs=1e-12)


def test_contact_at_exactly_the_threshold(humanoid):
    positions = np.zeros((3, len(humanoid), 3))
    at = eval_contact(positions, ContactPair("right_fingers", (0.2, 0.0, 0.0)), humanoid)
    inside = eval_contact(positions, ContactPair("right_fingers", (0.0, -0.199, 0.0)), humanoid)
    assert at == (False, 0.2)
    assert inside[0] is True


def test_contact_needs_frames(humanoid):
    with pytest.raises(ValueError):
        eval_contact(np.zeros((0, len(humanoid), 3)), ContactPair("head", (0., 0., 0.)), humanoid)


def test_course_success():
    params = SteppingStoneParams(count=3)
    stones = generate_stepping_stones(params)
    path = np.array([[0., 0.9, 0.], [1., 0.9, 0.], [2., 0.9, 0.]])
    assert course_success(path, stones, params)
    fallen = np.array([[0., 0.9, 0.], [1., -0.8, 0.], [2., 0.9, 0.]])
    assert not course_success(fallen, stones, params)
    short = np.array([[0., 0.9, 0.], [1., 0.9, 0.]])
    assert not course_success(short, stones, params)


GRID = [0.6, 0.7, 0.8, 0.9, 1.0]


def test_stepping_stones_deterministic_stub():
    d_all, d_any = eval_stepping_stones(lambda p, seed: p.spacing <= 0.8, SteppingStoneParams(), GRID)
    assert (d_all, d_any) == (0.8, 0.8)


def test_stepping_stones_seed_dependent_stub():
    def runner(p, seed):
        return p.spacing <= (0.9 if seed == 4 else 0.8)
    assert eval_stepping_stones(runner, SteppingStoneParams(), GRID) == (0.8, 0.9)


def test_stepping_stones_always_failing():
    assert eval_stepping_stones(lambda p, seed: False, SteppingStoneParams(), GRID) == (None, None)


def test_stepping_stones_grid_must_ascend():
    with pytest.raises(ValueError):
        eval_stepping_stones(lambda p, seed: True, SteppingStoneParams(), [1.0, 0.8])


def test_stepping_row():
    params = SteppingStoneParams(pitch_deg=30.0, yaw_deg=20.0)
    assert format_stepping_row(params, 0.8, 0.9) == "pitch=30 yaw=20: 0.80, 0.90"
    assert format_stepping_row(params, None, None) == "pitch=30 yaw=20: -, -"


def test_heightfield_round_trip(tmp_path):
    stones = generate_stepping_stones(SteppingStoneParams(10.0, 15.0, 0.7, count=4))
    field = course_to_heightfield(stones, 0.2, cell=0.1)
    first = write_heightfield(tmp_path / "a.tsv", field)
    loaded = read_heightfield(first)
    assert np.array_equal(loaded.heights, field.heights)
    assert loaded.origin == field.origin
    second = write_heightfield(tmp_path / "b.tsv", loaded)
    assert first.read_bytes() == second.read_bytes()


def test_heightfield_missing_metadata(tmp_path):
    path = write_heightfield(tmp_path / "a.tsv", HeightField.flat(0.0, 1.0))
    text = path.read_text().replace("\tcell=1.0", "", 1)
    path.write_text(text)
    with pytest.raises(files.FileFormatError, match="cell"):
        read_heightfield(path)
