"""
Height-field terrain, pelvis-centred height-map observations, stepping
stone courses and the contact / stepping-stones evaluation metrics.
"""
import logging
from typing import NamedTuple, Tuple, Sequence, Optional, Callable

import numpy as np
import pandas as pd

from . import rotations, files, utils

logger = logging.getLogger(__name__)

HEIGHTFIELD_FORMAT = "motion_synth-heightfield-v1"

CONTACT_THRESHOLD = 0.20
GAP_DEPTH = -1.0
FALL_MARGIN = 0.5
EVAL_RUNS = 5

CONTACT_JOINTS = {
    "sit": "pelvis",
    "lie": "head",
    "reach": "right_fingers",
}


class NonFiniteQuery(ValueError):
    pass


class HeightField(NamedTuple):
    """
    Heights on grid vertices: heights[r, c] is the terrain height at
    x = origin[0] + c * cell, z = origin[1] + r * cell.
    """
    origin: Tuple[float, float]
    cell: float
    heights: np.ndarray

    @classmethod
    def create(cls, origin, cell, heights):
        heights = np.array(heights, dtype=float)
        if heights.ndim != 2 or min(heights.shape) < 1:
            raise ValueError(f"heights must be a non-empty grid, got shape {heights.shape}")
        if not cell > 0:
            raise ValueError(f"cell must be > 0, got {cell}")
        if not np.all(np.isfinite(heights)):
            raise ValueError("heights must be finite")
        heights.flags.writeable = False
        return cls((float(origin[0]), float(origin[1])), float(cell), heights)

    @classmethod
    def flat(cls, height=0.0, half_extent=50.0, cell=1.0):
        n = int(np.ceil(2 * half_extent / cell)) + 1
        return cls.create((-half_extent, -half_extent), cell, np.full((n, n), height))

    @property
    def shape(self):
        return self.heights.shape

    def extent(self):
        rows, cols = self.shape
        x0, z0 = self.origin
        return (x0, x0 + (cols - 1) * self.cell), (z0, z0 + (rows - 1) * self.cell)

    def sample(self, x, z):
        """Bilinear heights at (x, z), clamped to the border; also returns the out-of-extent mask"""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise NonFiniteQuery("height queried at non-finite coordinates")
        rows, cols = self.shape
        u = (x - self.origin[0]) / self.cell
        v = (z - self.origin[1]) / self.cell
        outside = (u < 0) | (u > cols - 1) | (v < 0) | (v > rows - 1)
        u = np.clip(u, 0, cols - 1)
        v = np.clip(v, 0, rows - 1)
        c0 = np.minimum(np.floor(u).astype(int), max(cols - 2, 0))
        r0 = np.minimum(np.floor(v).astype(int), max(rows - 2, 0))
        c1 = np.minimum(c0 + 1, cols - 1)
        r1 = np.minimum(r0 + 1, rows - 1)
        fu = u - c0
        fv = v - r0
        h = self.heights
        heights = (
            (1 - fv) * ((1 - fu) * h[r0, c0] + fu * h[r0, c1])
            + fv * ((1 - fu) * h[r1, c0] + fu * h[r1, c1])
        )
        return heights, outside

    def height(self, x, z):
        return self.sample(x, z)[0]


class ObservationGrid(NamedTuple):
    rows: int = 16
    cols: int = 16
    length: float = 2.0
    width: float = 2.0

    @property
    def size(self):
        return self.rows * self.cols

    def local_points(self):
        """(rows * cols, 2) sample offsets (left, forward), row-major with rows running forward"""
        lz = ((np.arange(self.rows) + 0.5) / self.rows - 0.5) * self.length
        lx = ((np.arange(self.cols) + 0.5) / self.cols - 0.5) * self.width
        zz, xx = np.meshgrid(lz, lx, indexing='ij')
        return np.stack([xx.ravel(), zz.ravel()], axis=1)


class ObservationVector(NamedTuple):
    values: np.ndarray
    clamped: int = 0


def sample_height_observation(
        field: HeightField, pelvis_pos, heading_deg: float,
        grid: ObservationGrid = ObservationGrid(),
) -> ObservationVector:
    """Terrain height minus pelvis height on a yaw-aligned grid centred on the pelvis"""
    pelvis_pos = np.asarray(pelvis_pos, dtype=float)
    q = rotations.yaw(heading_deg)
    left = rotations.rotate(q, rotations.LEFT)
    forward = rotations.rotate(q, rotations.FORWARD)
    local = grid.local_points()
    world = pelvis_pos + local[:, :1] * left + local[:, 1:] * forward
    heights, outside = field.sample(world[:, 0], world[:, 2])
    clamped = int(outside.sum())
    if clamped:
        logger.debug("%d height samples clamped to the field border", clamped)
    return ObservationVector(heights - pelvis_pos[1], clamped)


class SteppingStoneParams(NamedTuple):
    pitch_deg: float = 0.0
    yaw_deg: float = 0.0
    spacing: float = 1.0
    stone_radius: float = 0.25
    count: int = 10
    yaw_jitter_deg: float = 0.0

    def validate(self):
        if not self.spacing > 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        if self.count < 2:
            raise ValueError(f"a course needs >= 2 stones, got {self.count}")
        if not self.stone_radius > 0:
            raise ValueError(f"stone_radius must be > 0, got {self.stone_radius}")
        return self


class ContactPair(NamedTuple):
    joint: str
    target: Tuple[float, float, float]

    def validate(self, topology):
        topology.index(self.joint)
        return self


def generate_stepping_stones(p: SteppingStoneParams, seed: Optional[int] = None) -> np.ndarray:
    """
    Stone centres, the first at the origin. Step k (k = 1, 2, ...) leaves
    the previous stone at heading k * yaw from +x, climbing at `pitch_deg`.
    """
    p.validate()
    rng = np.random.default_rng(seed)
    pitch = np.deg2rad(p.pitch_deg)
    stones = np.zeros((p.count, 3))
    for k in range(1, p.count):
        heading = k * p.yaw_deg
        if p.yaw_jitter_deg:
            heading += rng.uniform(-p.yaw_jitter_deg, p.yaw_jitter_deg)
        direction = rotations.rotate(rotations.yaw(heading), rotations.LEFT)
        step = p.spacing * (np.cos(pitch) * direction + np.sin(pitch) * rotations.UP)
        stones[k] = stones[k - 1] + step
    return stones


def course_to_heightfield(
        stones, stone_radius: float, gap_depth: float = GAP_DEPTH,
        cell: float = 0.05, margin: float = 1.0,
) -> HeightField:
    stones = np.asarray(stones, dtype=float)
    if len(stones) == 0:
        raise ValueError("course has no stones")
    lo = np.floor((stones[:, [0, 2]].min(axis=0) - margin) / cell) * cell
    hi = stones[:, [0, 2]].max(axis=0) + margin
    cols = int(np.ceil((hi[0] - lo[0]) / cell)) + 1
    rows = int(np.ceil((hi[1] - lo[1]) / cell)) + 1
    xs = lo[0] + np.arange(cols) * cell
    zs = lo[1] + np.arange(rows) * cell

    dx = xs[None, None, :] - stones[:, 0, None, None]
    dz = zs[None, :, None] - stones[:, 2, None, None]
    distance = np.hypot(dx, dz)
    # argmin returns the first, i.e. lowest-index, stone on exact ties
    nearest = distance.argmin(axis=0)
    inside = distance.min(axis=0) <= stone_radius
    heights = np.where(inside, stones[nearest, 1], gap_depth)
    return HeightField.create(lo, cell, heights)


def _positions(trajectory):
    """(T, B, 3) world body positions of a trajectory or position array"""
    if hasattr(trajectory, 'states'):
        return np.stack([s.x for s in trajectory.states])
    return np.asarray(trajectory, dtype=float)


def eval_contact(trajectory, pair: ContactPair, topology=None, threshold=CONTACT_THRESHOLD):
    """Returns (success, closest-approach distance) of the pair's joint to its target"""
    if topology is None:
        from .skeleton import load_default_skeleton
        topology = load_default_skeleton()
    positions = _positions(trajectory)
    if len(positions) == 0:
        raise ValueError("trajectory is empty")
    j = topology.index(pair.joint)
    distance = np.linalg.norm(positions[:, j] - np.asarray(pair.target, float), axis=-1)
    error = float(distance.min())
    return error < threshold, error


def course_success(pelvis_path, stones, params: SteppingStoneParams, gap_depth=GAP_DEPTH):
    """
    The pelvis must pass within half a stone spacing (horizontally) of the
    last stone without first dropping below `gap_depth + 0.5`.
    """
    path = np.asarray(pelvis_path, dtype=float)
    final = np.asarray(stones, dtype=float)[-1]
    reach = np.hypot(path[:, 0] - final[0], path[:, 2] - final[2]) <= 0.5 * params.spacing
    fallen = path[:, 1] < gap_depth + FALL_MARGIN
    if not reach.any():
        return False
    arrival = int(reach.argmax())
    return not fallen[:arrival + 1].any()


PolicyRunner = Callable[[SteppingStoneParams, int], bool]


def eval_stepping_stones(
        policy_runner: PolicyRunner,
        p_base: SteppingStoneParams,
        d_grid: Sequence[float],
        runs: int = EVAL_RUNS,
        max_workers: int = EVAL_RUNS,
        show_progress: bool = False,
):
    """
    Runs `policy_runner(params, seed)` for seeds 0..runs-1 at every spacing
    in `d_grid`. Returns the largest spacing at which all runs succeed and
    the largest at which any run succeeds, None where there is none.
    """
    d_grid = [float(d) for d in d_grid]
    if not d_grid:
        raise ValueError("spacing grid is empty")
    if any(b <= a for a, b in zip(d_grid, d_grid[1:])):
        raise ValueError(f"spacing grid must be ascending, got {d_grid}")

    inputs = {
        (d, seed): (p_base._replace(spacing=d), seed)
        for d in d_grid for seed in range(runs)
    }
    output, _ = utils.map_concurrent(
        policy_runner, inputs, max_workers=max_workers,
        show_progress=show_progress, raise_on_err=True)

    d_all, d_any = None, None
    for d in d_grid:
        results = [bool(output[d, seed]) for seed in range(runs)]
        if all(results):
            d_all = d
        if any(results):
            d_any = d
        logger.info("spacing %.2f: %d/%d runs succeeded", d, sum(results), runs)
    return d_all, d_any


def format_stepping_row(params: SteppingStoneParams, d_all5, d_any) -> str:
    def fmt(value):
        return "-" if value is None else f"{value:.2f}"
    return f"pitch={params.pitch_deg:g} yaw={params.yaw_deg:g}: {fmt(d_all5)}, {fmt(d_any)}"


def write_heightfield(path, field: HeightField):
    rows, cols = field.shape
    frame = pd.DataFrame(field.heights, columns=[f"c{i}" for i in range(cols)])
    return files.write_table(
        path, HEIGHTFIELD_FORMAT, frame,
        origin_x=repr(field.origin[0]), origin_z=repr(field.origin[1]),
        cell=repr(field.cell), rows=rows, cols=cols)


def read_heightfield(path) -> HeightField:
    required = ['origin_x', 'origin_z', 'cell', 'rows', 'cols']
    meta, frame = files.read_table(path, HEIGHTFIELD_FORMAT, required=required)
    rows = files.meta_value(path, meta, 'rows', int)
    cols = files.meta_value(path, meta, 'cols', int)
    columns = [f"c{i}" for i in range(cols)]
    files.require_columns(path, frame, columns)
    if len(frame) != rows:
        raise files.FileFormatError(
            path, 1, 1, f"header declares {rows} rows, table has {len(frame)}")
    try:
        return HeightField.create(
            (files.meta_value(path, meta, 'origin_x'), files.meta_value(path, meta, 'origin_z')),
            files.meta_value(path, meta, 'cell'),
            frame[columns].to_numpy(dtype=float),
        )
    except ValueError as err:
        raise files.FileFormatError(path, 2, 1, str(err)) from None
