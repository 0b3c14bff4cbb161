"""Deterministic gridworld oracle: dynamics, column-raycast renderer, events.

The arena is a 32x32 cell grid in the ground (x, z) plane with a boundary
wall ring and seeded colored pillars. Rendering is a classic 2.5D column
caster over unit-height wall cells, cheap enough to label every frame of a
synthetic clip. All randomness flows from the world seed; identical
(world, pose) pairs render identical images.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np

from lbw.geometry import CameraPose, InvalidPoseError, yaw_pitch_from_quat

ARENA_CELLS = 32
MOVE_SPEED = 2.0  # units / second
MAX_YAW_STEP = math.pi / 4  # radians / frame
MAX_PITCH_STEP = math.pi / 8
PITCH_LIMIT = math.pi / 3
CLEARANCE = 0.3
EYE_HEIGHT = 0.5
WALL_HEIGHT = 1.0

PILLAR_COLORS = {
    "red": (204, 49, 49),
    "green": (52, 168, 83),
    "blue": (66, 103, 210),
    "yellow": (240, 200, 40),
    "magenta": (190, 70, 180),
    "cyan": (60, 190, 200),
    "orange": (235, 130, 32),
    "white": (230, 230, 230),
}

FLOOR_PALETTES = [
    ((96, 96, 104), (72, 72, 80)),
    ((110, 92, 70), (86, 70, 52)),
    ((70, 96, 76), (52, 74, 58)),
]

SKY_DAY = (140, 180, 235)
SKY_NIGHT = (18, 22, 48)
NIGHT_FACTOR = 0.35

# hit-test class ids
HIT_SKY = 0
HIT_FLOOR = 1
HIT_WALL = 2  # boundary ring
HIT_PILLAR = 3
HIT_OBJECT = 4  # spawned cells


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class ActionState:
    """One frame of control input on the W/A/S/D + look alphabet.

    yaw_delta and pitch_delta are per-frame increments in radians, capped at
    pi/4 and pi/8 respectively; pitch integrates with a hard clamp at
    +/- pi/3.
    """

    keys: frozenset = frozenset()
    yaw_delta: float = 0.0
    pitch_delta: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        bad = set(self.keys) - {"W", "A", "S", "D"}
        if bad:
            raise ValueError(f"unknown keys {sorted(bad)}")
        if abs(self.yaw_delta) > MAX_YAW_STEP + 1e-9:
            raise ValueError(f"|yaw_delta| exceeds {MAX_YAW_STEP}")
        if abs(self.pitch_delta) > MAX_PITCH_STEP + 1e-9:
            raise ValueError(f"|pitch_delta| exceeds {MAX_PITCH_STEP}")

    @property
    def bitmask(self) -> int:
        m = 0
        for bit, key in enumerate("WASD"):
            if key in self.keys:
                m |= 1 << bit
        return m

    @classmethod
    def from_bitmask(cls, mask: int, yaw_delta=0.0, pitch_delta=0.0, timestamp=0.0):
        if mask & ~0x0F:
            raise ValueError(f"reserved bits set in key mask {mask:#04x}")
        keys = frozenset(key for bit, key in enumerate("WASD") if mask & (1 << bit))
        return cls(keys=keys, yaw_delta=yaw_delta, pitch_delta=pitch_delta, timestamp=timestamp)


@dataclass(frozen=True)
class EventSpec:
    """World mutation: set_time_of_day('day'|'night'), set_tint((r,g,b)), or
    spawn_object(cell=(i,j), color=<pillar color name>)."""

    kind: str
    value: object

    def __post_init__(self):
        if self.kind not in ("set_time_of_day", "set_tint", "spawn_object"):
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class WorldSpec:
    """Immutable world description; events produce a new spec via apply_event."""

    seed: int
    pillars: tuple  # ((i, j, color_name), ...)
    floor_palette: int = 0
    time_of_day: str = "day"
    tint: tuple = (1.0, 1.0, 1.0)
    spawned: tuple = ()  # ((i, j, color_name), ...)

    def occupied(self):
        """dict cell -> (class_id, color_name) including the boundary ring."""
        cells = {}
        for i in range(-1, ARENA_CELLS + 1):
            for j in (-1, ARENA_CELLS):
                cells[(i, j)] = (HIT_WALL, "white")
                cells[(j, i)] = (HIT_WALL, "white")
        for i, j, color in self.pillars:
            cells[(i, j)] = (HIT_PILLAR, color)
        for i, j, color in self.spawned:
            cells[(i, j)] = (HIT_OBJECT, color)
        return cells


def build_world(seed: int) -> WorldSpec:
    """Seeded arena with 8-14 colored pillars away from the boundary."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 15))
    names = list(PILLAR_COLORS)
    cells = set()
    pillars = []
    while len(pillars) < n:
        i, j = int(rng.integers(3, ARENA_CELLS - 3)), int(rng.integers(3, ARENA_CELLS - 3))
        if (i, j) in cells:
            continue
        # keep pillars pairwise separated so corridors stay navigable
        if any(abs(i - a) + abs(j - b) < 3 for a, b in cells):
            continue
        cells.add((i, j))
        pillars.append((i, j, names[int(rng.integers(len(names)))]))
    return WorldSpec(seed=seed, pillars=tuple(pillars), floor_palette=int(rng.integers(len(FLOOR_PALETTES))))


def empty_world(seed: int = 0) -> WorldSpec:
    return WorldSpec(seed=seed, pillars=())


def apply_event(world: WorldSpec, event: EventSpec) -> WorldSpec:
    if event.kind == "set_time_of_day":
        if event.value not in ("day", "night"):
            raise ValueError(f"time_of_day must be 'day' or 'night', got {event.value!r}")
        return replace(world, time_of_day=event.value)
    if event.kind == "set_tint":
        tint = tuple(float(v) for v in event.value)
        if len(tint) != 3 or any(v < 0 or v > 2 for v in tint):
            raise ValueError(f"tint must be 3 channel gains in [0, 2], got {tint}")
        return replace(world, tint=tint)
    cell, color = event.value
    i, j = int(cell[0]), int(cell[1])
    if not (0 <= i < ARENA_CELLS and 0 <= j < ARENA_CELLS):
        raise ValueError(f"spawn cell {cell} outside the arena")
    if color not in PILLAR_COLORS:
        raise ValueError(f"unknown color {color!r}")
    occ = world.occupied()
    if (i, j) in occ:
        raise ValueError(f"cell {cell} already occupied")
    return replace(world, spawned=world.spawned + ((i, j, color),))


# ---------------------------------------------------------------------------
# dynamics


@functools.lru_cache(maxsize=64)
def _occupied_cells(world: WorldSpec):
    return np.array(sorted(world.occupied()), dtype=np.float64)


def clearance_distance(world: WorldSpec, point) -> float:
    """Euclidean ground-plane distance from a point to the nearest occupied cell."""
    cells = _occupied_cells(world)
    p = np.array([float(point[0]), float(point[1])])
    gap = np.maximum(np.maximum(cells - p, p - (cells + 1.0)), 0.0)
    return float(np.min(np.hypot(gap[:, 0], gap[:, 1])))


def step_dynamics(pose: CameraPose, action: ActionState, dt: float, world: WorldSpec) -> CameraPose:
    """Advance one frame: integrate look deltas, then translate at MOVE_SPEED.

    Movement is blocked entirely (position held) if the candidate position
    would violate the clearance radius around occupied cells. W/S and A/D
    pairs cancel; diagonals are not renormalized.
    """
    yaw = pose.yaw + action.yaw_delta
    pitch = float(np.clip(pose.pitch + action.pitch_delta, -PITCH_LIMIT, PITCH_LIMIT))

    fwd = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
    right = np.array([math.cos(yaw), 0.0, -math.sin(yaw)])
    k = action.keys
    move = (("W" in k) - ("S" in k)) * fwd + (("D" in k) - ("A" in k)) * right
    candidate = pose.position + MOVE_SPEED * dt * move
    if np.any(move != 0.0) and clearance_distance(world, (candidate[0], candidate[2])) <= CLEARANCE:
        candidate = pose.position  # blocked, no sliding

    return CameraPose.from_yaw_pitch(candidate, yaw, pitch, pose.intrinsics)


def rollout(pose: CameraPose, actions, dt: float, world: WorldSpec):
    """Fold step_dynamics over an action sequence; returns the pose list."""
    out = []
    for a in actions:
        pose = step_dynamics(pose, a, dt, world)
        out.append(pose)
    return out


# ---------------------------------------------------------------------------
# renderer


_COLOR_NAMES = list(PILLAR_COLORS)
_COLOR_TABLE = np.array([PILLAR_COLORS[n] for n in _COLOR_NAMES], dtype=np.float64)


@functools.lru_cache(maxsize=64)
def _grids(world: WorldSpec):
    """Occupancy rasters padded by the boundary ring: class ids and color indices."""
    n = ARENA_CELLS + 2
    cls = np.zeros((n, n), dtype=np.int64)
    color = np.zeros((n, n), dtype=np.int64)
    for (i, j), (cid, cname) in world.occupied().items():
        cls[i + 1, j + 1] = cid
        color[i + 1, j + 1] = _COLOR_NAMES.index(cname)
    return cls, color


_GRID_LINES = np.arange(-1.0, ARENA_CELLS + 2.0)


def _cast_columns(world: WorldSpec, pose: CameraPose, width: int):
    """First occupied cell along every image column's ground ray.

    Instead of stepping cell by cell, all grid-line crossings are computed
    at once, sorted per column, and the earliest occupied entry wins (the
    boundary ring guarantees one exists). Returns (perp_dist, class_id,
    color_idx, ray_angles); perp_dist is fisheye-corrected.
    """
    grid_cls, grid_color = _grids(world)
    n = grid_cls.shape[0]
    k = pose.intrinsics
    yaw = pose.yaw
    x0, z0 = float(pose.position[0]), float(pose.position[2])

    u = (np.arange(width) + 0.5 - k.cx) / k.fx
    angles = yaw + np.arctan(u)
    dx, dz = np.sin(angles)[:, None], np.cos(angles)[:, None]

    with np.errstate(divide="ignore", invalid="ignore"):
        tx = (_GRID_LINES[None, :] - x0) / dx
        tz = (_GRID_LINES[None, :] - z0) / dz
    t_all = np.concatenate([tx, tz], axis=1)
    t_all[~(t_all > 1e-9)] = np.inf  # behind the camera, parallel, or NaN
    t_all.sort(axis=1)

    # cell entered just after each crossing
    px = np.nan_to_num(x0 + dx * t_all + dx * 1e-7, posinf=1e6, neginf=-1e6)
    pz = np.nan_to_num(z0 + dz * t_all + dz * 1e-7, posinf=1e6, neginf=-1e6)
    gi = np.clip(np.floor(px).astype(np.int64) + 1, 0, n - 1)
    gj = np.clip(np.floor(pz).astype(np.int64) + 1, 0, n - 1)
    occ = grid_cls[gi, gj] != 0

    first = occ.argmax(axis=1)
    rows = np.arange(width)
    t_hit = t_all[rows, first]
    cls = grid_cls[gi[rows, first], gj[rows, first]]
    color = grid_color[gi[rows, first], gj[rows, first]]
    dist = t_hit * np.cos(angles - yaw)  # perpendicular distance
    return dist, cls, color, angles


def _shade(world: WorldSpec, img: np.ndarray) -> np.ndarray:
    out = img.astype(np.float64)
    if world.time_of_day == "night":
        out *= NIGHT_FACTOR
    out *= np.asarray(world.tint, dtype=np.float64)
    return np.clip(out, 0.0, 255.0).astype(np.uint8)


def _project(world: WorldSpec, pose: CameraPose, height: int, width: int):
    """Shared column projection; returns raw RGB float image and class map."""
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    x, z = float(pose.position[0]), float(pose.position[2])
    if not (-1.0 <= x <= ARENA_CELLS + 1.0 and -1.0 <= z <= ARENA_CELLS + 1.0):
        raise OutOfBoundsError(f"camera at ({x:.2f}, {z:.2f}) outside the arena")
    k = pose.intrinsics
    pitch = pose.pitch
    dist, cls, color, angles = _cast_columns(world, pose, width)
    rgb = _COLOR_TABLE[color]

    v = np.arange(height) + 0.5  # pixel-center rows
    horizon = k.cy + k.fy * math.tan(pitch)

    img = np.zeros((height, width, 3), dtype=np.float64)
    cmap = np.full((height, width), HIT_SKY, dtype=np.int64)

    sky = SKY_NIGHT if world.time_of_day == "night" else SKY_DAY
    img[:] = sky

    # floor: rows below the horizon, distance from the flat-ground intersection
    rows_below = v > horizon + 1e-9
    if np.any(rows_below):
        vb = v[rows_below]
        d_axis = k.fy * (EYE_HEIGHT - 0.0) / (vb - horizon)  # along the view axis
        along = d_axis[:, None] / np.cos(angles[None, :] - pose.yaw)
        fx_ = x + np.sin(angles)[None, :] * along
        fz_ = z + np.cos(angles)[None, :] * along
        pal = FLOOR_PALETTES[world.floor_palette % len(FLOOR_PALETTES)]
        parity = (np.floor(fx_).astype(np.int64) + np.floor(fz_).astype(np.int64)) & 1
        floor_rgb = np.where(parity[..., None] == 0, pal[0], pal[1]).astype(np.float64)
        # distance haze on the floor keeps far cells from aliasing harshly
        fade = (1.0 / (1.0 + 0.04 * along))[..., None]
        floor_rgb = floor_rgb * fade + np.asarray(sky, dtype=np.float64) * (1.0 - fade)
        img[rows_below] = floor_rgb
        cmap[rows_below] = HIT_FLOOR

    # walls overwrite floor/sky where a column hit is tall enough
    hit_cols = np.isfinite(dist)
    d = np.where(hit_cols, dist, 1.0)
    top = horizon - k.fy * (WALL_HEIGHT - EYE_HEIGHT) / d
    bot = horizon + k.fy * EYE_HEIGHT / d
    rows = (v[:, None] >= top[None, :]) & (v[:, None] <= bot[None, :]) & hit_cols[None, :]
    bright = np.clip(1.0 / (1.0 + 0.12 * d), 0.25, 1.0)
    wall_rgb = rgb * bright[:, None]
    img = np.where(rows[..., None], wall_rgb[None, :, :], img)
    cmap = np.where(rows, cls[None, :], cmap)

    return img, cmap


def render(world: WorldSpec, pose: CameraPose, height: int = 64, width: int = 64) -> np.ndarray:
    """Rasterize the camera view; deterministic uint8 (H, W, 3)."""
    img, _ = _project(world, pose, height, width)
    return _shade(world, img)


def hit_test(world: WorldSpec, pose: CameraPose, height: int = 64, width: int = 64) -> np.ndarray:
    """Per-pixel class map (HIT_* ids); invariant to lighting and tint."""
    _, cmap = _project(world, pose, height, width)
    return cmap


def hit_label(world: WorldSpec, pose: CameraPose, u: int, v: int, height: int = 64, width: int = 64) -> str:
    """Human-readable label ('pillar-red', 'floor', ...) for one pixel."""
    cmap = hit_test(world, pose, height, width)
    cid = int(cmap[v, u])
    if cid in (HIT_SKY, HIT_FLOOR):
        return "sky" if cid == HIT_SKY else "floor"
    _, _, color, _ = _cast_columns(world, pose, width)
    kind = {HIT_WALL: "wall", HIT_PILLAR: "pillar", HIT_OBJECT: "object"}[cid]
    return f"{kind}-{_COLOR_NAMES[color[u]]}"


def luminance(frame: np.ndarray) -> float:
    """Mean (R+G+B)/(3*255) over a uint8 frame."""
    return float(np.asarray(frame, dtype=np.float64).mean() / 255.0)
