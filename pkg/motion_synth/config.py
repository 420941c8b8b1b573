"""
Run configuration: a YAML file of sections, each coerced onto a
NamedTuple, with `section.key=value` command-line overrides.
"""
import logging
import typing
from pathlib import Path
from typing import NamedTuple, Tuple, Sequence, Dict, Any

import yaml

from .agents import MotionInstruction, PipelineBudget
from .kinematics import IkConfig, CameraState
from .render import ImageConfig
from .physics import SimConfig
from .tracking import TrainConfig
from .terrain import SteppingStoneParams, ObservationGrid, GAP_DEPTH, EVAL_RUNS
from . import backends, skeleton, terrain

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class RunSection(NamedTuple):
    seed: int
    output: str = "out"
    show_progress: bool = False


class SkeletonSection(NamedTuple):
    path: str = ""


class BackendSection(NamedTuple):
    kind: str = "scripted"
    fixture: str = ""
    endpoint: str = ""
    model: str = ""
    max_retries: int = 2
    timeout: float = 120.0


class InstructionSection(NamedTuple):
    text: str = ""
    task_kind: str = "free_motion"
    contact_joint: str = ""
    contact_target: Tuple[float, ...] = ()
    terrain_ref: str = ""


class TerrainSection(NamedTuple):
    path: str = ""
    floor_height: float = 0.0
    pitch_deg: float = 0.0
    yaw_deg: float = 0.0
    spacing: float = 1.0
    stone_radius: float = 0.25
    count: int = 10
    yaw_jitter_deg: float = 0.0
    gap_depth: float = GAP_DEPTH
    d_grid: Tuple[float, ...] = (0.6, 0.8, 1.0, 1.2, 1.4)
    runs: int = EVAL_RUNS
    grid_rows: int = 16
    grid_cols: int = 16
    grid_length: float = 2.0
    grid_width: float = 2.0


SECTIONS = {
    'run': RunSection,
    'skeleton': SkeletonSection,
    'backend': BackendSection,
    'instruction': InstructionSection,
    'budget': PipelineBudget,
    'ik': IkConfig,
    'sim': SimConfig,
    'train': TrainConfig,
    'terrain': TerrainSection,
    'camera': CameraState,
    'image': ImageConfig,
}

# keys holding paths relative to the config file
_PATHS = {('run', 'output'), ('skeleton', 'path'), ('backend', 'fixture'), ('terrain', 'path')}
_BOOLEANS = {
    'true': True, 'yes': True, 'on': True, '1': True,
    'false': False, 'no': False, 'off': False, '0': False,
}


class RunConfig(NamedTuple):
    run: RunSection
    skeleton: SkeletonSection
    backend: BackendSection
    instruction: InstructionSection
    budget: PipelineBudget
    ik: IkConfig
    sim: SimConfig
    train: TrainConfig
    terrain: TerrainSection
    camera: CameraState
    image: ImageConfig

    @property
    def seed(self):
        return self.run.seed

    @property
    def output(self) -> Path:
        return Path(self.run.output)

    def load_topology(self) -> skeleton.SkeletonTopology:
        if self.skeleton.path:
            return skeleton.read_skeleton(self.skeleton.path)
        return skeleton.load_default_skeleton()

    def motion_instruction(self) -> MotionInstruction:
        pair = None
        if self.instruction.contact_joint:
            pair = (self.instruction.contact_joint, tuple(self.instruction.contact_target))
        return MotionInstruction(
            self.instruction.text, self.instruction.task_kind, pair,
            self.instruction.terrain_ref or None)

    def contact_pair(self) -> terrain.ContactPair:
        if not self.instruction.contact_joint:
            raise ConfigError("instruction.contact_joint", "no contact pair configured")
        return terrain.ContactPair(
            self.instruction.contact_joint, tuple(self.instruction.contact_target))

    def make_backend(self) -> backends.AgentBackend:
        if self.backend.kind == "scripted":
            return backends.ScriptedBackend.from_file(self.backend.fixture)
        return backends.RemoteBackend(
            self.backend.endpoint, self.backend.model,
            max_retries=self.backend.max_retries, timeout=self.backend.timeout)

    def stepping_params(self) -> SteppingStoneParams:
        t = self.terrain
        return SteppingStoneParams(
            t.pitch_deg, t.yaw_deg, t.spacing, t.stone_radius, t.count, t.yaw_jitter_deg)

    def observation_grid(self) -> ObservationGrid:
        t = self.terrain
        return ObservationGrid(t.grid_rows, t.grid_cols, t.grid_length, t.grid_width)

    def height_field(self) -> terrain.HeightField:
        """The configured terrain file, otherwise flat ground at terrain.floor_height"""
        if self.terrain.path:
            return terrain.read_heightfield(self.terrain.path)
        return terrain.HeightField.flat(self.terrain.floor_height)


def _coerce(field, kind, value):
    origin = typing.get_origin(kind)
    if origin in (tuple, Tuple):
        item = typing.get_args(kind)[0]
        if isinstance(value, str):
            value = [v for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
        elif not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(_coerce(field, item, v) for v in value)
    if kind is bool:
        if isinstance(value, bool):
            return value
        flag = _BOOLEANS.get(str(value).strip().lower())
        if flag is None:
            raise ConfigError(field, f"expected a boolean, got {value!r}")
        return flag
    if kind is str:
        return "" if value is None else str(value)
    try:
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value.strip() if isinstance(value, str) else value)
    except (TypeError, ValueError):
        raise ConfigError(field, f"expected {kind.__name__}, got {value!r}") from None


def _section(name, kind, given: Dict[str, Any], base: Path):
    hints = typing.get_type_hints(kind)
    values = {}
    for key, value in given.items():
        field = f"{name}.{key}"
        if key not in kind._fields:
            raise ConfigError(field, "unknown key")
        value = _coerce(field, hints[key], value)
        if (name, key) in _PATHS and value:
            value = str((base / value) if not Path(value).is_absolute() else Path(value))
        values[key] = value
    missing = [k for k in kind._fields if k not in kind._field_defaults and k not in values]
    if missing:
        raise ConfigError(f"{name}.{missing[0]}", "a value is required")
    section = kind(**values)
    if hasattr(section, 'validate'):
        try:
            section.validate()
        except ValueError as err:
            raise ConfigError(name, str(err)) from None
    return section


def apply_override(data: Dict[str, Dict[str, Any]], override: str):
    key, sep, text = override.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(key or override, "overrides take the form section.key=value")
    data.setdefault(section, {})[name] = yaml.safe_load(text) if text.strip() else ""
    return data


def _check_paths(config: RunConfig):
    required = [('skeleton.path', config.skeleton.path), ('terrain.path', config.terrain.path)]
    if config.backend.kind == "scripted":
        if not config.backend.fixture:
            raise ConfigError("backend.fixture", "the scripted backend needs a fixture")
        required.append(('backend.fixture', config.backend.fixture))
    elif config.backend.kind == "remote":
        if not config.backend.endpoint:
            raise ConfigError("backend.endpoint", "the remote backend needs an endpoint")
    else:
        raise ConfigError("backend.kind", f"expected scripted or remote, got {config.backend.kind!r}")
    for field, path in required:
        if path and not Path(path).exists():
            raise ConfigError(field, f"no such file {path}")


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"no such file {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as err:
            raise ConfigError("config", f"{path} is not valid YAML: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must map section names to settings")
    for name, given in data.items():
        if name not in SECTIONS:
            raise ConfigError(str(name), "unknown section")
        if given is not None and not isinstance(given, dict):
            raise ConfigError(name, "a section must map keys to values")
    data = {k: dict(v or {}) for k, v in data.items()}
    for override in overrides:
        apply_override(data, override)
    unknown = [name for name in data if name not in SECTIONS]
    if unknown:
        raise ConfigError(unknown[0], "unknown section")

    base = path.resolve().parent
    config = RunConfig(**{
        name: _section(name, kind, data.get(name, {}), base)
        for name, kind in SECTIONS.items()
    })
    _check_paths(config)
    logger.info("loaded run config %s (seed %d)", path, config.seed)
    return config
