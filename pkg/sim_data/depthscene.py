"""
Cap-on-bottle scenes and analytic depth rendering.

Scenes are built from analytic primitives (capped cylinders, boxes, the
table plane) and rendered by casting one ray per pixel. Depth is the
z-depth along the optical axis in meters; 0 marks a missing pixel.

The same renderer feeds both domains: the source ("simulation") domain and
a perturbed target domain standing in for a real depth sensor. The
difference between them lives entirely in DomainModel / apply_domain.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
from scipy import ndimage

from utils.errors import SceneSamplingError

logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
DEPTH_FLOOR = 1e-3  # 1 mm, so 0 always means "missing"
RAY_EPS = 1e-9


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def offset(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "Vec3":
        return Vec3(float(self.x + dx), float(self.y + dy), float(self.z + dz))


def _check_finite(name, *values):
    if not np.all(np.isfinite(np.asarray(values, dtype=np.float64))):
        raise ValueError(f"{name} must have finite components")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def intersect_vertical_cylinder(origin, dirs, base, radius, height):
    # Ray parameter of the nearest hit with a closed vertical cylinder (inf = miss)
    ox, oy, oz = origin[0] - base[0], origin[1] - base[1], origin[2]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    z_lo, z_hi = base[2], base[2] + height
    hits = np.full(len(dirs), np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        # Side wall
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - radius * radius
        disc = b * b - 4.0 * a * c
        ok = (a > 0) & (disc >= 0)
        t_side = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2.0 * np.where(ok, a, 1.0)), np.inf)
        z_side = oz + t_side * dz
        side_ok = ok & (t_side > RAY_EPS) & (z_side >= z_lo) & (z_side <= z_hi)
        hits = np.where(side_ok, t_side, hits)

        # Top and bottom faces
        for z_face in (z_hi, z_lo):
            t_face = (z_face - oz) / dz
            px = ox + t_face * dx
            py = oy + t_face * dy
            face_ok = (dz != 0) & (t_face > RAY_EPS) & (px * px + py * py <= radius * radius)
            hits = np.where(face_ok & (t_face < hits), t_face, hits)
    return hits


@dataclass(frozen=True)
class Cylinder:
    """
    Vertical cylinder resting on its bottom face.

    `center` is the center of the bottom face. A positive cap_height adds a
    coaxial cap of cap_radius on top (distractor bottles with caps).
    """
    center: Vec3
    radius: float
    height: float
    cap_radius: float = 0.0
    cap_height: float = 0.0

    def __post_init__(self):
        _check_finite("Cylinder.center", *self.center)
        if not self.radius > 0:
            raise ValueError(f"Cylinder radius must be > 0, got {self.radius}")
        if not self.height > 0:
            raise ValueError(f"Cylinder height must be > 0, got {self.height}")
        if self.cap_height < 0 or self.cap_radius < 0:
            raise ValueError("Cylinder cap dimensions must be >= 0")

    @property
    def top(self) -> float:
        return self.center.z + self.height + self.cap_height

    def top_center(self) -> Vec3:
        return self.center.offset(dz=self.height)

    def intersect(self, origin, dirs) -> np.ndarray:
        base = self.center.as_array()
        hits = intersect_vertical_cylinder(origin, dirs, base, self.radius, self.height)
        if self.cap_height > 0 and self.cap_radius > 0:
            cap_base = base + np.array([0.0, 0.0, self.height])
            hits = np.minimum(hits, intersect_vertical_cylinder(origin, dirs, cap_base, self.cap_radius, self.cap_height))
        return hits


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its geometric center and half extents."""
    center: Vec3
    half_extents: Vec3

    def __post_init__(self):
        _check_finite("Box.center", *self.center)
        if min(self.half_extents) <= 0:
            raise ValueError(f"Box half-extents must be > 0, got {self.half_extents}")

    @property
    def top(self) -> float:
        return self.center.z + self.half_extents.z

    def intersect(self, origin, dirs) -> np.ndarray:
        lo = self.center.as_array() - self.half_extents.as_array()
        hi = self.center.as_array() + self.half_extents.as_array()
        safe = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
        t1 = (lo - origin) / safe
        t2 = (hi - origin) / safe
        t_near = np.max(np.minimum(t1, t2), axis=1)
        t_far = np.min(np.maximum(t1, t2), axis=1)
        # An origin inside the box sees its inner faces
        t_hit = np.where(t_near > RAY_EPS, t_near, t_far)
        ok = (t_far >= t_near) & (t_hit > RAY_EPS)
        return np.where(ok, t_hit, np.inf)


@dataclass(frozen=True)
class Plane:
    """Horizontal plane z = height (the table)."""
    height: float = 0.0

    def __post_init__(self):
        _check_finite("Plane.height", self.height)

    def intersect(self, origin, dirs) -> np.ndarray:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.height - origin[2]) / dz
        return np.where((dz != 0) & (t > RAY_EPS), t, np.inf)


Primitive = Union[Cylinder, Box, Plane]


def footprints_intersect(a, b, margin: float = 0.0) -> bool:
    # Table footprint test: circles for cylinders, rectangles for boxes
    if isinstance(a, Box) and isinstance(b, Cylinder):
        a, b = b, a
    if isinstance(a, Cylinder) and isinstance(b, Cylinder):
        gap = np.hypot(a.center.x - b.center.x, a.center.y - b.center.y)
        return bool(gap < a.radius + b.radius + margin)
    if isinstance(a, Cylinder) and isinstance(b, Box):
        qx = np.clip(a.center.x, b.center.x - b.half_extents.x, b.center.x + b.half_extents.x)
        qy = np.clip(a.center.y, b.center.y - b.half_extents.y, b.center.y + b.half_extents.y)
        return bool(np.hypot(a.center.x - qx, a.center.y - qy) < a.radius + margin)
    if isinstance(a, Box) and isinstance(b, Box):
        overlap_x = abs(a.center.x - b.center.x) < a.half_extents.x + b.half_extents.x + margin
        overlap_y = abs(a.center.y - b.center.y) < a.half_extents.y + b.half_extents.y + margin
        return bool(overlap_x and overlap_y)
    raise TypeError(f"no footprint test for {type(a).__name__} / {type(b).__name__}")


# ---------------------------------------------------------------------------
# Scene, robot state, camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scene:
    bottle: Cylinder
    opening_position: Vec3
    clutter: tuple = ()
    table: Plane = field(default_factory=Plane)
    with_clutter: bool = True
    category: float = 0.0  # bottle radius class in meters, 0 when drawn from a range

    def primitives(self) -> tuple:
        return (self.bottle, *self.clutter)

    def without_clutter(self) -> "Scene":
        return replace(self, clutter=(), with_clutter=False)


@dataclass(frozen=True)
class RobotState:
    hand_position: Vec3  # center of the cap held by the gripper
    cap_radius: float = 0.02

    def moved(self, dx: float, dy: float, dz: float = 0.0) -> "RobotState":
        return replace(self, hand_position=self.hand_position.offset(dx, dy, dz))


@dataclass(frozen=True)
class Camera:
    """
    Pinhole depth camera.

    With mount="wrist" the pose is relative to the hand (sensor mounted on
    the wrist); with mount="world" offset is an absolute position. pitch
    tilts the optical axis from straight down toward +y.
    """
    offset: Vec3 = Vec3(0.0, -0.08, 0.14)
    pitch: float = 0.5
    fov: float = 1.0
    resolution: int = IMAGE_SIZE
    mount: str = "wrist"

    def __post_init__(self):
        if self.resolution != IMAGE_SIZE:
            raise ValueError(f"camera resolution is fixed at {IMAGE_SIZE}, got {self.resolution}")
        if not 0 < self.fov < np.pi:
            raise ValueError(f"camera fov must be in (0, pi), got {self.fov}")
        if self.mount not in ("wrist", "world"):
            raise ValueError(f"camera mount must be 'wrist' or 'world', got {self.mount!r}")

    def rotation(self) -> np.ndarray:
        # Columns: image x (right), image y (down), optical axis, in world frame
        s, c = np.sin(self.pitch), np.cos(self.pitch)
        return np.array([
            [1.0, 0.0, 0.0],
            [0.0, -c, s],
            [0.0, -s, -c],
        ])

    def origin(self, state: RobotState) -> np.ndarray:
        if self.mount == "world":
            return self.offset.as_array()
        return state.hand_position.as_array() + self.offset.as_array()

    def ray_directions(self) -> np.ndarray:
        # Unnormalized: camera-frame z component is 1, so ray parameter == z-depth
        n = self.resolution
        focal = (n / 2.0) / np.tan(self.fov / 2.0)
        coords = (np.arange(n) + 0.5 - n / 2.0) / focal
        v, u = np.meshgrid(coords, coords, indexing="ij")
        cam = np.stack([u.ravel(), v.ravel(), np.ones(n * n)], axis=1)
        return cam @ self.rotation().T


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    table_height: float = 0.0
    workspace_half_width: float = 0.10
    bottle_radius_range: tuple[float, ...] = (0.02, 0.05)
    bottle_height_range: tuple[float, ...] = (0.10, 0.25)
    bottle_classes: tuple[float, ...] = ()
    holdout_classes: tuple[float, ...] = ()
    class_jitter: float = 0.002
    clutter_count_range: tuple[int, ...] = (3, 6)
    clutter_radius: float = 0.15
    clutter_size_range: tuple[float, ...] = (0.015, 0.04)
    clutter_height_range: tuple[float, ...] = (0.05, 0.25)
    clutter_box_prob: float = 0.4
    distractor_cap_prob: float = 0.8
    clutter_margin: float = 0.005
    init_half_width: float = 0.05
    init_height_min: float = 0.01
    init_height: float = 0.05
    cap_radius: float = 0.02
    max_attempts: int = 100

    def __post_init__(self):
        for name in ("bottle_radius_range", "bottle_height_range", "clutter_count_range",
                     "clutter_size_range", "clutter_height_range"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1]:
                raise ValueError(f"{name} must be 'min, max' with min <= max, got {lo_hi}")
        if self.bottle_radius_range[0] <= 0 or self.clutter_size_range[0] <= 0:
            raise ValueError("bottle radius and clutter size must be > 0")
        if self.clutter_count_range[0] < 0:
            raise ValueError("clutter count must be >= 0")
        if self.init_height_min > self.init_height:
            raise ValueError("init_height_min must be <= init_height")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def for_classes(self, classes) -> "SceneConfig":
        return replace(self, bottle_classes=tuple(classes))


def _sample_bottle(config: SceneConfig, rng: np.random.Generator):
    if config.bottle_classes:
        category = float(config.bottle_classes[rng.integers(len(config.bottle_classes))])
        radius = category + rng.uniform(-config.class_jitter, config.class_jitter)
        radius = max(radius, 1e-3)
    else:
        category = 0.0
        radius = rng.uniform(*config.bottle_radius_range)
    height = rng.uniform(*config.bottle_height_range)
    w = config.workspace_half_width
    base = Vec3(float(rng.uniform(-w, w)), float(rng.uniform(-w, w)), float(config.table_height))
    return Cylinder(base, float(radius), float(height)), category


def _sample_clutter_object(config: SceneConfig, bottle: Cylinder, rng: np.random.Generator):
    angle = rng.uniform(0.0, 2.0 * np.pi)
    dist = rng.uniform(0.0, config.clutter_radius)
    cx = bottle.center.x + dist * np.cos(angle)
    cy = bottle.center.y + dist * np.sin(angle)
    size = rng.uniform(*config.clutter_size_range)
    height = rng.uniform(*config.clutter_height_range)

    if rng.random() < config.clutter_box_prob:
        aspect = rng.uniform(0.6, 1.4)
        half = Vec3(float(size), float(size * aspect), float(height / 2.0))
        return Box(Vec3(float(cx), float(cy), float(config.table_height + height / 2.0)), half)

    base = Vec3(float(cx), float(cy), float(config.table_height))
    if rng.random() < config.distractor_cap_prob:
        return Cylinder(base, float(size), float(height), cap_radius=float(0.6 * size), cap_height=0.015)
    return Cylinder(base, float(size), float(height))


def sample_scene(config: SceneConfig, rng: np.random.Generator):
    """
    Draw one scene and an initial robot state.

    The hand starts uniformly offset in xy within +/- init_half_width of the
    bottle opening, between init_height_min and init_height above it.

    Returns:
        (Scene, RobotState)
    """
    bottle, category = _sample_bottle(config, rng)
    opening = bottle.top_center()

    lo, hi = config.clutter_count_range
    count = int(rng.integers(lo, hi + 1))
    clutter = []
    for i in range(count):
        for attempt in range(config.max_attempts):
            candidate = _sample_clutter_object(config, bottle, rng)
            blocked = footprints_intersect(candidate, bottle, config.clutter_margin) or any(
                footprints_intersect(candidate, other, config.clutter_margin) for other in clutter
            )
            if not blocked:
                clutter.append(candidate)
                break
            logger.debug("clutter object %d rejected (attempt %d)", i, attempt + 1)
        else:
            raise SceneSamplingError(
                f"could not place clutter object {i + 1} of {count}: footprint intersects the bottle "
                f"or other clutter after {config.max_attempts} attempts (clutter_radius={config.clutter_radius})"
            )

    scene = Scene(
        bottle=bottle,
        opening_position=opening,
        clutter=tuple(clutter),
        table=Plane(config.table_height),
        with_clutter=count > 0,
        category=category,
    )

    w = config.init_half_width
    hand = opening.offset(
        float(rng.uniform(-w, w)),
        float(rng.uniform(-w, w)),
        float(rng.uniform(config.init_height_min, config.init_height)),
    )
    return scene, RobotState(hand, config.cap_radius)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_depth(scene: Scene, state: RobotState, camera: Camera) -> np.ndarray:
    """
    Render a 64x64 z-depth image by casting one ray per pixel.

    Pure function of its inputs. Rays that hit nothing (above the horizon)
    come back as missing pixels.
    """
    origin = camera.origin(state)
    dirs = camera.ray_directions()
    depth = scene.table.intersect(origin, dirs)
    for primitive in scene.primitives():
        depth = np.minimum(depth, primitive.intersect(origin, dirs))
    depth = np.where(np.isfinite(depth), depth, 0.0)
    return depth.reshape(camera.resolution, camera.resolution)


# ---------------------------------------------------------------------------
# Domain perturbation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainModel:
    missing_pixel_prob: float = 0.10
    noise_std: float = 0.0
    depth_bias: float = 0.0
    lateral_shift: int = 0
    quantization: float = 0.0
    edge_dropout: int = 0
    edge_threshold: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.missing_pixel_prob <= 1.0:
            raise ValueError(f"missing_pixel_prob must be in [0, 1], got {self.missing_pixel_prob}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.quantization < 0:
            raise ValueError(f"quantization must be >= 0, got {self.quantization}")
        if self.edge_dropout < 0:
            raise ValueError(f"edge_dropout must be >= 0, got {self.edge_dropout}")

    @classmethod
    def identity(cls) -> "DomainModel":
        return cls(missing_pixel_prob=0.0)

    @classmethod
    def default_target(cls) -> "DomainModel":
        return cls(missing_pixel_prob=0.12, noise_std=0.002, depth_bias=0.004,
                   lateral_shift=1, quantization=0.001, edge_dropout=1)


def shift_columns(image: np.ndarray, shift: int) -> np.ndarray:
    # Lateral shift with edge replication
    if shift == 0:
        return image.copy()
    out = np.empty_like(image)
    if shift > 0:
        out[:, shift:] = image[:, :-shift]
        out[:, :shift] = image[:, :1]
    else:
        out[:, :shift] = image[:, -shift:]
        out[:, shift:] = image[:, -1:]
    return out


def depth_edges(image: np.ndarray, threshold: float, width: int) -> np.ndarray:
    edges = np.zeros(image.shape, dtype=bool)
    jump_x = np.abs(np.diff(image, axis=1)) > threshold
    jump_y = np.abs(np.diff(image, axis=0)) > threshold
    edges[:, :-1] |= jump_x
    edges[:, 1:] |= jump_x
    edges[:-1, :] |= jump_y
    edges[1:, :] |= jump_y
    if width > 1:
        edges = ndimage.binary_dilation(edges, iterations=width - 1)
    return edges


def apply_domain(image: np.ndarray, model: DomainModel, rng: np.random.Generator) -> np.ndarray:
    """
    Perturb a rendered image through a sensor model.

    Stages, in order: lateral shift, depth bias, additive Gaussian noise,
    quantization, edge dropout, floor clamp, i.i.d. missing pixels.
    Stages with a zero parameter are skipped and draw no random numbers,
    so the identity model returns the input unchanged.
    """
    out = np.array(image, dtype=np.float64, copy=True)
    if model.lateral_shift:
        out = shift_columns(out, int(model.lateral_shift))
    valid = out > 0

    if model.depth_bias:
        out = np.where(valid, out + model.depth_bias, out)
    if model.noise_std:
        out = np.where(valid, out + rng.normal(0.0, model.noise_std, size=out.shape), out)
    if model.quantization:
        out = np.where(valid, np.round(out / model.quantization) * model.quantization, out)
    if model.edge_dropout:
        edges = depth_edges(out, model.edge_threshold, int(model.edge_dropout))
        out = np.where(edges, 0.0, out)
        valid &= ~edges

    out = np.where(valid & (out < DEPTH_FLOOR), DEPTH_FLOOR, out)
    if model.missing_pixel_prob:
        dropped = rng.random(out.shape) < model.missing_pixel_prob
        out = np.where(dropped, 0.0, out)
    return out


def missing_fraction(images) -> float:
    images = np.asarray(images)
    return float(np.mean(images == 0.0))


def save_pgm(image: np.ndarray, path):
    """Dump a depth image as 16-bit binary PGM in millimeters (debug only)."""
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape
    millimeters = np.clip(np.round(image * 1000.0), 0, 65535).astype(">u2")
    header = f"P5\n{width} {height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + millimeters.tobytes())
