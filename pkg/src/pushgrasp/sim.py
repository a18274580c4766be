"""Layered 2D tabletop world.

Objects are rigid polygons resting on a square grid. Occlusion is encoded by
``stack_order``: an object later in the list lies on top of every earlier
object whose footprint it overlaps. All operations are pure: they return a new
:class:`Scene` and never mutate their input.

Coordinates: ``x`` is the column axis, ``y`` the row axis, and rasters are
indexed ``[y, x]``. Cell ``(i, j)`` has its center at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

N_ROTATIONS = 16
ROTATION_STEP = 2 * math.pi / N_ROTATIONS

PUSH_LENGTH = 10.0
PUSH_WIDTH = 4.0
FINGER_OFFSET = 4.0
FINGER_THICKNESS = 2.0
FINGER_LENGTH = 6.0
MAX_GRASP_COVERAGE = 0.1
MAX_PLACEMENT_TRIES = 1000
N_COLORS = 8


class SceneFullError(RuntimeError):
    """Raised when an object cannot be placed inside the workspace."""


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    vertices: tuple[tuple[float, float], ...]
    color_id: int = 0

    def __post_init__(self) -> None:
        if not 3 <= len(self.vertices) <= 12:
            raise ValueError(f"object {self.id}: needs 3..12 vertices, got {len(self.vertices)}")
        if abs(polygon_area(self.vertices)) < 4.0:
            raise ValueError(f"object {self.id}: polygon area below 4 cells")


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0


@dataclass(frozen=True)
class MotionPrimitive:
    kind: str
    x: int
    y: int
    rot_index: int

    def __post_init__(self) -> None:
        if self.kind not in ("push", "grasp"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not 0 <= self.rot_index < N_ROTATIONS:
            raise ValueError(f"rot_index {self.rot_index} outside [0, {N_ROTATIONS})")

    @property
    def angle(self) -> float:
        return self.rot_index * ROTATION_STEP

    @property
    def center(self) -> tuple[float, float]:
        return self.x + 0.5, self.y + 0.5


@dataclass(frozen=True)
class PushOutcome:
    moved: frozenset[int]


@dataclass(frozen=True)
class GraspOutcome:
    grasped_id: int | None
    success: bool
    target_was_grasped: bool


@dataclass(frozen=True)
class Scene:
    width: int = 64
    height: int = 64
    objects: tuple[tuple[ObjectSpec, Pose], ...] = ()
    stack_order: tuple[int, ...] = ()
    seed: int = 0
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def ids(self) -> list[int]:
        return [spec.id for spec, _ in self.objects]

    def __len__(self) -> int:
        return len(self.objects)

    def __contains__(self, obj_id: int) -> bool:
        return any(spec.id == obj_id for spec, _ in self.objects)

    def get(self, obj_id: int) -> tuple[ObjectSpec, Pose]:
        for spec, pose in self.objects:
            if spec.id == obj_id:
                return spec, pose
        raise KeyError(f"object {obj_id} is not in the scene")

    def next_id(self) -> int:
        return max(self.ids, default=-1) + 1

    def footprint(self, obj_id: int) -> np.ndarray:
        """Boolean ``(height, width)`` raster of one object's full footprint."""
        key = ("fp", obj_id)
        if key not in self._cache:
            spec, pose = self.get(obj_id)
            mask = rasterize_polygon(posed_vertices(spec, pose), self.width, self.height)
            mask.setflags(write=False)
            self._cache[key] = mask
        return self._cache[key]

    def footprints(self) -> dict[int, np.ndarray]:
        return {obj_id: self.footprint(obj_id) for obj_id in self.stack_order}

    def layer_index(self) -> np.ndarray:
        """Per-cell stack position of the topmost object, -1 where empty."""
        key = ("layer",)
        if key not in self._cache:
            top = np.full((self.height, self.width), -1, dtype=np.int32)
            for level, obj_id in enumerate(self.stack_order):
                top[self.footprint(obj_id)] = level
            top.setflags(write=False)
            self._cache[key] = top
        return self._cache[key]

    def topmost_id(self) -> np.ndarray:
        """Per-cell id of the topmost object, -1 where empty."""
        order = np.asarray(self.stack_order + (-1,), dtype=np.int64)
        return order[self.layer_index()]

    def covered_above(self, obj_id: int) -> np.ndarray:
        """Cells covered by at least one object stacked above ``obj_id``."""
        level = self.stack_order.index(obj_id)
        above = np.zeros((self.height, self.width), dtype=bool)
        for other in self.stack_order[level + 1 :]:
            above |= self.footprint(other)
        return above

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "workspace": [self.width, self.height],
            "objects": [
                {
                    "id": spec.id,
                    "color_id": spec.color_id,
                    "vertices": [list(v) for v in spec.vertices],
                    "pose": [pose.x, pose.y, pose.theta],
                }
                for spec, pose in self.objects
            ],
            "stack_order": list(self.stack_order),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Scene:
        width, height = data["workspace"]
        objects = []
        for item in data["objects"]:
            spec = ObjectSpec(
                id=int(item["id"]),
                vertices=tuple((float(x), float(y)) for x, y in item["vertices"]),
                color_id=int(item.get("color_id", 0)),
            )
            x, y, theta = item["pose"]
            objects.append((spec, Pose(float(x), float(y), float(theta))))
        scene = cls(
            width=int(width),
            height=int(height),
            objects=tuple(objects),
            stack_order=tuple(int(i) for i in data["stack_order"]),
            seed=int(data.get("seed", 0)),
        )
        validate_scene(scene)
        return scene

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> Scene:
        return cls.from_dict(json.loads(text))


def validate_scene(scene: Scene) -> None:
    ids = scene.ids
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate object ids")
    if sorted(ids) != sorted(scene.stack_order):
        raise ValueError("stack_order is not a permutation of the live object ids")
    for obj_id in ids:
        if not scene.footprint(obj_id).any():
            raise ValueError(f"object {obj_id} has an empty in-bounds footprint")


# -- geometry ----------------------------------------------------------


def polygon_area(vertices: Sequence[Sequence[float]]) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def posed_vertices(spec: ObjectSpec, pose: Pose) -> np.ndarray:
    v = np.asarray(spec.vertices, dtype=np.float64)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return np.stack([pose.x + c * v[:, 0] - s * v[:, 1], pose.y + s * v[:, 0] + c * v[:, 1]], axis=1)


def rasterize_polygon(vertices: np.ndarray, width: int, height: int) -> np.ndarray:
    """Cells whose centers fall inside the polygon (even-odd rule, half-open edges)."""
    mask = np.zeros((height, width), dtype=bool)
    x0 = max(int(math.floor(vertices[:, 0].min())), 0)
    x1 = min(int(math.ceil(vertices[:, 0].max())), width)
    y0 = max(int(math.floor(vertices[:, 1].min())), 0)
    y1 = min(int(math.ceil(vertices[:, 1].max())), height)
    if x0 >= x1 or y0 >= y1:
        return mask
    px = np.arange(x0, x1, dtype=np.float64)[None, :] + 0.5
    py = np.arange(y0, y1, dtype=np.float64)[:, None] + 0.5
    inside = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    n = len(vertices)
    for i in range(n):
        xi, yi = vertices[i]
        xj, yj = vertices[(i + 1) % n]
        if yi == yj:
            continue
        straddles = (yi > py) != (yj > py)
        x_cross = xi + (py - yi) * (xj - xi) / (yj - yi)
        inside ^= straddles & (px < x_cross)
    mask[y0:y1, x0:x1] = inside
    return mask


def rasterize_strip(
    origin: tuple[float, float],
    angle: float,
    along: tuple[float, float],
    across: tuple[float, float],
    width: int,
    height: int,
) -> np.ndarray:
    """Oriented rectangle in its local frame: ``along[0] <= s < along[1]``, ``across[0] <= t < across[1]``.

    ``s`` runs along ``(cos angle, sin angle)`` and ``t`` along the left normal.
    """
    c, s = math.cos(angle), math.sin(angle)
    px = np.arange(width, dtype=np.float64)[None, :] + 0.5 - origin[0]
    py = np.arange(height, dtype=np.float64)[:, None] + 0.5 - origin[1]
    u = c * px + s * py
    v = -s * px + c * py
    return (u >= along[0]) & (u < along[1]) & (v >= across[0]) & (v < across[1])


def push_corridor(primitive: MotionPrimitive, width: int, height: int) -> np.ndarray:
    half = PUSH_WIDTH / 2
    return rasterize_strip(primitive.center, primitive.angle, (0.0, PUSH_LENGTH), (-half, half), width, height)


def finger_masks(primitive: MotionPrimitive, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    half_len = FINGER_LENGTH / 2
    lo = FINGER_OFFSET - FINGER_THICKNESS / 2
    hi = FINGER_OFFSET + FINGER_THICKNESS / 2
    left = rasterize_strip(primitive.center, primitive.angle, (-half_len, half_len), (lo, hi), width, height)
    right = rasterize_strip(primitive.center, primitive.angle, (-half_len, half_len), (-hi, -lo), width, height)
    return left, right


def clamp_pose(spec: ObjectSpec, pose: Pose, width: int, height: int) -> Pose:
    """Shift ``pose`` so every vertex lies within ``[0, width] x [0, height]``."""
    v = posed_vertices(spec, pose)
    dx = dy = 0.0
    if v[:, 0].min() < 0:
        dx = -v[:, 0].min()
    elif v[:, 0].max() > width:
        dx = width - v[:, 0].max()
    if v[:, 1].min() < 0:
        dy = -v[:, 1].min()
    elif v[:, 1].max() > height:
        dy = height - v[:, 1].max()
    if dx == 0.0 and dy == 0.0:
        return pose
    return Pose(pose.x + dx, pose.y + dy, pose.theta)


def in_bounds(spec: ObjectSpec, pose: Pose, width: int, height: int) -> bool:
    v = posed_vertices(spec, pose)
    return bool(v[:, 0].min() >= 0 and v[:, 1].min() >= 0 and v[:, 0].max() <= width and v[:, 1].max() <= height)


# -- shape pool --------------------------------------------------------


def _rect(w: float, h: float) -> tuple[tuple[float, float], ...]:
    return ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2))


def _regular(n: int, radius: float) -> tuple[tuple[float, float], ...]:
    return tuple(
        (radius * math.cos(2 * math.pi * k / n), radius * math.sin(2 * math.pi * k / n)) for k in range(n)
    )


# Every shape is at most 5 cells wide in some orientation, so it fits between
# the gripper fingers (inner gap 6 cells).
DEFAULT_SHAPES: tuple[tuple[tuple[float, float], ...], ...] = (
    _rect(4, 4),
    _rect(3, 6),
    _rect(4, 8),
    _rect(2.5, 7),
    ((-2.5, -2.0), (2.5, -2.0), (0.0, 3.0)),
    _regular(6, 2.6),
    _regular(8, 2.3),
)


# -- operations --------------------------------------------------------


def empty_scene(width: int = 64, height: int | None = None, seed: int = 0) -> Scene:
    return Scene(width=width, height=width if height is None else height, seed=seed)


def add_object(scene: Scene, vertices, pose: Pose, color_id: int = 0, obj_id: int | None = None) -> Scene:
    """Place one object on top of the stack."""
    obj_id = scene.next_id() if obj_id is None else obj_id
    spec = ObjectSpec(id=obj_id, vertices=tuple(tuple(map(float, v)) for v in vertices), color_id=color_id)
    return replace(
        scene,
        objects=scene.objects + ((spec, pose),),
        stack_order=scene.stack_order + (obj_id,),
        _cache={},
    )


def spawn_random(
    scene: Scene,
    n_objects: int,
    rng: np.random.Generator,
    shape_pool: Sequence = DEFAULT_SHAPES,
) -> Scene:
    """Drop ``n_objects`` at uniformly random in-bounds poses, each on top of the stack."""
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if not shape_pool:
        raise ValueError("shape pool is empty")
    for _ in range(n_objects):
        shape = shape_pool[int(rng.integers(len(shape_pool)))]
        color = int(rng.integers(N_COLORS))
        obj_id = scene.next_id()
        spec = ObjectSpec(id=obj_id, vertices=tuple(shape), color_id=color)
        for _ in range(MAX_PLACEMENT_TRIES):
            pose = Pose(
                float(rng.uniform(0, scene.width)),
                float(rng.uniform(0, scene.height)),
                float(rng.uniform(0, 2 * math.pi)),
            )
            if in_bounds(spec, pose, scene.width, scene.height):
                break
        else:
            raise SceneFullError(f"could not place object {obj_id} after {MAX_PLACEMENT_TRIES} samples")
        scene = replace(
            scene,
            objects=scene.objects + ((spec, pose),),
            stack_order=scene.stack_order + (obj_id,),
            _cache={},
        )
    return scene


def apply_push(scene: Scene, primitive: MotionPrimitive) -> tuple[Scene, PushOutcome]:
    """Translate every object touching the push corridor by the full stroke."""
    if primitive.kind != "push":
        raise ValueError("apply_push needs a push primitive")
    corridor = push_corridor(primitive, scene.width, scene.height)
    dx = PUSH_LENGTH * math.cos(primitive.angle)
    dy = PUSH_LENGTH * math.sin(primitive.angle)
    moved = []
    objects = []
    for spec, pose in scene.objects:
        if (scene.footprint(spec.id) & corridor).any():
            pose = clamp_pose(spec, Pose(pose.x + dx, pose.y + dy, pose.theta), scene.width, scene.height)
            moved.append(spec.id)
        objects.append((spec, pose))
    if not moved:
        return scene, PushOutcome(frozenset())
    # Footprints of unmoved objects stay valid.
    cache = {k: v for k, v in scene._cache.items() if k[0] == "fp" and k[1] not in moved}
    return replace(scene, objects=tuple(objects), _cache=cache), PushOutcome(frozenset(moved))


def grasp_candidate(scene: Scene, primitive: MotionPrimitive) -> int | None:
    """Topmost object whose footprint contains the grasp cell."""
    if not (0 <= primitive.x < scene.width and 0 <= primitive.y < scene.height):
        return None
    obj_id = int(scene.topmost_id()[primitive.y, primitive.x])
    return None if obj_id < 0 else obj_id


def apply_grasp(scene: Scene, primitive: MotionPrimitive, target_id: int) -> tuple[Scene, GraspOutcome]:
    """Close a parallel-jaw gripper at the primitive; remove the object on success."""
    if primitive.kind != "grasp":
        raise ValueError("apply_grasp needs a grasp primitive")
    if target_id not in scene:
        raise KeyError(f"target {target_id} is not in the scene")
    failed = GraspOutcome(grasped_id=None, success=False, target_was_grasped=False)
    obj_id = grasp_candidate(scene, primitive)
    if obj_id is None:
        return scene, failed
    occupied = scene.layer_index() >= 0
    for finger in finger_masks(primitive, scene.width, scene.height):
        if (finger & occupied).any():
            return scene, failed
    footprint = scene.footprint(obj_id)
    coverage = (footprint & scene.covered_above(obj_id)).sum() / footprint.sum()
    if coverage > MAX_GRASP_COVERAGE:
        return scene, failed
    return remove_object(scene, obj_id), GraspOutcome(obj_id, True, obj_id == target_id)


def remove_object(scene: Scene, obj_id: int) -> Scene:
    cache = {k: v for k, v in scene._cache.items() if k[0] == "fp" and k[1] != obj_id}
    return replace(
        scene,
        objects=tuple(item for item in scene.objects if item[0].id != obj_id),
        stack_order=tuple(i for i in scene.stack_order if i != obj_id),
        _cache=cache,
    )


def rotate_scene_90(scene: Scene) -> Scene:
    """Rotate the whole scene by +90 degrees about the workspace center (square workspaces only)."""
    if scene.width != scene.height:
        raise ValueError("90-degree rotation needs a square workspace")
    c = scene.width / 2
    objects = []
    for spec, pose in scene.objects:
        u, v = pose.x - c, pose.y - c
        theta = (pose.theta + math.pi / 2) % (2 * math.pi)
        objects.append((spec, Pose(c - v, c + u, theta)))
    return replace(scene, objects=tuple(objects), _cache={})


def rot90_raster(raster: np.ndarray, k: int = 1) -> np.ndarray:
    """Raster counterpart of :func:`rotate_scene_90` (``[y, x]`` indexing, extra trailing axes kept)."""
    return np.rot90(raster, -k, axes=(0, 1))
