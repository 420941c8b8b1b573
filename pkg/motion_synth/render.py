import io
import base64
import logging
from typing import NamedTuple

import numpy as np
import matplotlib.image
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.lines import Line2D
from matplotlib.patches import Circle

from .skeleton import SkeletonTopology, KinematicPose, forward_kinematics
from .kinematics import CameraState

logger = logging.getLogger(__name__)

_BACKGROUND = (255, 255, 255)
_BONE = (40, 40, 40)
_JOINT = (30, 90, 200)
_X_ARROW = (0, 170, 0)
_Z_ARROW = (220, 0, 0)
_ARROW_LENGTH = 0.5
# a power of two keeps width / dpi * dpi exact
_DPI = 64


class ImageConfig(NamedTuple):
    width: int = 512
    height: int = 512
    fov_deg: float = 50.0
    joint_radius_px: int = 4
    line_width_px: int = 2

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image must be non-empty, got {self.width}x{self.height}")
        if not 0 < self.fov_deg < 180:
            raise ValueError(f"fov must be in (0, 180), got {self.fov_deg}")
        return self


class _Projector:
    def __init__(self, eye, target, config):
        forward = target - eye
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, [0., 1., 0.])
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("camera looks straight down the vertical axis")
        right = right / np.linalg.norm(right)
        up = np.cross(right, forward)
        self.eye = eye
        self.basis = np.stack([right, up, forward])
        self.focal = 0.5 * config.height / np.tan(np.deg2rad(config.fov_deg) / 2)
        self.centre = np.array([config.width / 2, config.height / 2])

    def __call__(self, points):
        """Pixel (col, row) per point plus a mask of points in front of the eye"""
        local = (np.atleast_2d(points) - self.eye) @ self.basis.T
        depth = local[:, 2]
        visible = depth > 1e-6
        safe = np.where(visible, depth, 1.0)
        cols = self.centre[0] + self.focal * local[:, 0] / safe
        rows = self.centre[1] - self.focal * local[:, 1] / safe
        return np.stack([cols, rows], axis=1), visible


def _canvas(config):
    """Agg canvas whose data coordinates are pixel (col, row), rows running down"""
    figure = Figure(figsize=(config.width / _DPI, config.height / _DPI), dpi=_DPI)
    figure.patch.set_facecolor(_rgb(_BACKGROUND))
    canvas = FigureCanvasAgg(figure)
    ax = figure.add_axes([0.0, 0.0, 1.0, 1.0])
    ax.set_axis_off()
    ax.set_xlim(0, config.width)
    ax.set_ylim(config.height, 0)
    return canvas, ax


def _rgb(colour):
    return tuple(c / 255.0 for c in colour)


def _segment(ax, a, b, config, colour, zorder):
    ax.add_line(Line2D(
        [a[0], b[0]], [a[1], b[1]], color=_rgb(colour),
        linewidth=config.line_width_px * 72.0 / _DPI,
        solid_capstyle='round', zorder=zorder))


def render_view(
        topology: SkeletonTopology,
        pose: KinematicPose,
        camera: CameraState,
        config: ImageConfig = ImageConfig(),
) -> np.ndarray:
    """
    Renders bones as lines and joints as discs, plus a green +x arrow and
    a red +z arrow at the world origin. Returns an (H, W, 3) uint8 array.
    """
    config.validate()
    camera.validate()
    positions = forward_kinematics(topology, pose).positions
    target = positions[0]
    project = _Projector(camera.position(target), target, config)
    canvas, ax = _canvas(config)

    origin = np.zeros(3)
    for axis, colour in (([1., 0., 0.], _X_ARROW), ([0., 0., 1.], _Z_ARROW)):
        axis = np.array(axis)
        tip = origin + _ARROW_LENGTH * axis
        side = np.cross(axis, [0., 1., 0.]) * 0.05
        head = [tip - 0.1 * axis + side, tip - 0.1 * axis - side]
        pts, visible = project(np.array([origin, tip] + head))
        if visible.all():
            for a, b in ((0, 1), (1, 2), (1, 3)):
                _segment(ax, pts[a], pts[b], config, colour, 1)

    pixels, visible = project(positions)
    for j, p in enumerate(topology.parents):
        if p >= 0 and visible[j] and visible[p]:
            _segment(ax, pixels[p], pixels[j], config, _BONE, 2)
    for j in range(len(topology)):
        if visible[j]:
            ax.add_patch(Circle(
                pixels[j], config.joint_radius_px, facecolor=_rgb(_JOINT),
                edgecolor='none', zorder=3))

    canvas.draw()
    image = np.asarray(canvas.buffer_rgba())[..., :3].copy()
    if image.shape[:2] != (config.height, config.width):
        raise RuntimeError(
            f"canvas rendered {image.shape[1]}x{image.shape[0]}, "
            f"expected {config.width}x{config.height}")
    return image


def project_joints(topology, pose, camera, config: ImageConfig = ImageConfig()):
    positions = forward_kinematics(topology, pose).positions
    project = _Projector(camera.position(positions[0]), positions[0], config)
    return project(positions)


def write_image(path, image):
    """Writes an (H, W, 3) uint8 view as a PNG"""
    matplotlib.image.imsave(path, np.ascontiguousarray(image, np.uint8), format='png')
    return path


def read_image(path) -> np.ndarray:
    image = matplotlib.image.imread(path, format='png')
    if image.ndim != 3 or image.shape[2] < 3:
        raise ValueError(f"{path} is not an RGB image")
    if image.dtype != np.uint8:
        image = np.round(image * 255.0).astype(np.uint8)
    return image[..., :3]


def to_png_base64(image: np.ndarray) -> str:
    buffer = io.BytesIO()
    write_image(buffer, image)
    return base64.b64encode(buffer.getvalue()).decode('ascii')
