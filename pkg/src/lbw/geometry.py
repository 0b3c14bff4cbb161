"""Camera poses, Plücker ray maps, and synthetic trajectory generation.

Trajectories produced here carry per-frame actions quantized to the world
dynamics alphabet (see :mod:`lbw.world`), so that replaying the actions
through ``step_dynamics`` reproduces the stored poses exactly. Convention:
``poses[i]`` is the state *after* applying ``actions[i]``; the state before
``actions[0]`` is kept in ``Trajectory.start_pose``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class InvalidPoseError(ValueError):
    pass


class PoseLogError(ValueError):
    """Malformed pose-log file; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SamplingExhaustedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z), world->camera rotation


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0 or not np.isfinite(n):
        raise InvalidPoseError("zero or non-finite quaternion")
    return q / n


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q):
    """3x3 rotation matrix for unit quaternion q = (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_yaw_pitch(yaw: float, pitch: float):
    """World->camera quaternion for a roll-free camera.

    Camera frame is x-right, y-down, z-forward. yaw rotates the forward axis
    in the ground (x, z) plane (yaw 0 faces world +z, positive yaw turns
    toward +x); positive pitch tilts the view upward.
    """
    # world->camera = R_pitch(about camera x) . R_yaw(about world y)
    cy, sy = math.cos(-yaw / 2), math.sin(-yaw / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    q_yaw = np.array([cy, 0.0, sy, 0.0])
    q_pitch = np.array([cp, sp, 0.0, 0.0])
    return quat_multiply(q_pitch, q_yaw)


def yaw_pitch_from_quat(q):
    """Inverse of :func:`quat_from_yaw_pitch` (roll assumed zero)."""
    r = quat_to_matrix(q)
    # camera forward in world coordinates is the third row of R^T == R[2]
    fwd = r[2]
    yaw = math.atan2(fwd[0], fwd[2])
    pitch = math.asin(np.clip(fwd[1], -1.0, 1.0))
    return yaw, pitch


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidPoseError(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidPoseError(f"fx, fy must be positive, got {self.fx}, {self.fy}")


@dataclass(frozen=True)
class CameraPose:
    """Position + world->camera unit quaternion + pinhole intrinsics."""

    position: np.ndarray
    orientation: np.ndarray  # (w, x, y, z), |q| = 1
    intrinsics: Intrinsics

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        q = np.asarray(self.orientation, dtype=np.float64)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise InvalidPoseError(f"bad position {pos}")
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise InvalidPoseError("orientation must be a unit quaternion (|q|-1 <= 1e-6)")
        self.intrinsics.validate()
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def from_yaw_pitch(cls, position, yaw, pitch, intrinsics):
        return cls(np.asarray(position, dtype=np.float64), quat_from_yaw_pitch(yaw, pitch), intrinsics)

    @property
    def yaw(self) -> float:
        return yaw_pitch_from_quat(self.orientation)[0]

    @property
    def pitch(self) -> float:
        return yaw_pitch_from_quat(self.orientation)[1]

    def rotation(self):
        return quat_to_matrix(self.orientation)


def default_intrinsics(height: int, width: int) -> Intrinsics:
    """90-degree horizontal FOV pinhole centered on the image."""
    return Intrinsics(fx=width / 2.0, fy=width / 2.0, cx=width / 2.0, cy=height / 2.0)


@dataclass(frozen=True)
class Leg:
    """Semantic trajectory segment: frames [start, end) with a motion label."""

    start: int
    end: int
    label: str  # 'side' | 'rotate' | 'advance' | 'lookback' | 'imported' | ...
    detail: str = ""


@dataclass
class Trajectory:
    poses: list  # CameraPose, one per frame, state after actions[i]
    timestamps: np.ndarray  # seconds, strictly increasing
    actions: list  # lbw.world.ActionState, same length as poses
    kind: str  # rect | rotation | waypoint | imported | gameplay
    start_pose: CameraPose  # state before actions[0]
    legs: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.poses)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if not (len(self.actions) == n == len(self.timestamps)):
            raise ValueError("poses, actions and timestamps must have equal length")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return np.stack([p.position for p in self.poses])


# ---------------------------------------------------------------------------
# Plücker embedding


def plucker_embed(pose: CameraPose, height: int, width: int) -> np.ndarray:
    """Per-pixel Plücker ray map of shape (H, W, 6).

    Channels 0-2 hold the unit ray direction d through each pixel center,
    channels 3-5 the moment m = o x d where o is the camera center. For every
    pixel |d| = 1 and d.m = 0.
    """
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    k = pose.intrinsics
    k.validate()
    u = (np.arange(width, dtype=np.float64) + 0.5 - k.cx) / k.fx
    # image v grows downward; camera y points up
    v = (k.cy - (np.arange(height, dtype=np.float64) + 0.5)) / k.fy
    uu, vv = np.meshgrid(u, v)  # (H, W)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    d_world = d_cam @ pose.rotation()  # R^T applied row-wise
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    m = np.cross(np.broadcast_to(pose.position, d_world.shape), d_world)
    return np.concatenate([d_world, m], axis=-1)


# ---------------------------------------------------------------------------
# trajectory generators

DEFAULT_FPS = 8.0


def _world_mod():
    from lbw import world as _w  # deferred; world imports CameraPose from here

    return _w


def _simulate(start_pose, actions, world, fps):
    """Fold actions through the oracle dynamics; returns per-frame poses."""
    w = _world_mod()
    dt = 1.0 / fps
    pose = start_pose
    poses = []
    for a in actions:
        pose = w.step_dynamics(pose, a, dt, world)
        poses.append(pose)
    return poses


def _spread_presses(n_frames: int, n_presses: int):
    """Bresenham-style spread of n_presses over n_frames; frame 0 stays idle
    whenever n_presses < n_frames."""
    flags = np.zeros(n_frames, dtype=bool)
    acc = 0.0
    for i in range(n_frames):
        acc += n_presses / n_frames
        if acc >= 1.0 - 1e-12:
            flags[i] = True
            acc -= 1.0
    return flags


def gen_rect_path(scale: float, speed: float, frame_rate: float = DEFAULT_FPS, seed: int = 0) -> Trajectory:
    """Closed rectangular loop with heading tangent to the sides.

    The loop is randomized by seed (center, orientation, aspect, winding);
    the perimeter is 4 * scale so the frame count is perimeter / speed *
    frame_rate. Corners turn in place over two frames, which requires
    speed to sit strictly below the world move speed.
    """
    if scale <= 0 or speed <= 0:
        raise ValueError("scale and speed must be positive")
    w = _world_mod()
    rng = np.random.default_rng(seed)
    dt = 1.0 / frame_rate
    step = w.MOVE_SPEED * dt

    half = 2.0 * scale  # a + b
    a = round(scale * rng.uniform(0.7, 1.3) / step) * step
    a = min(max(a, step), half - step)
    b = half - a
    sides = [a, b, a, b]

    center = rng.uniform(10.0, 22.0, size=2)
    yaw0 = rng.uniform(0.0, 2.0 * math.pi)
    winding = 1.0 if rng.random() < 0.5 else -1.0

    actions = []
    legs = []
    intr = default_intrinsics(64, 64)
    yaw = yaw0
    t = 0.0
    for k, side in enumerate(sides):
        n_steps = int(round(side / step))
        n_frames = int(round(side * frame_rate / speed))
        if n_frames - 2 <= n_steps:
            raise ValueError(
                f"speed {speed} too close to world move speed {w.MOVE_SPEED}; no room for corner turns"
            )
        start_frame = len(actions)
        presses = _spread_presses(n_frames - 2, n_steps)
        for pressed in presses:
            t += dt
            actions.append(w.ActionState(keys=frozenset("W") if pressed else frozenset(), timestamp=t))
        for _ in range(2):  # 90-degree corner split across two frames
            t += dt
            actions.append(w.ActionState(yaw_delta=winding * math.pi / 4.0, timestamp=t))
        legs.append(Leg(start_frame, len(actions), "side", f"side {k} of the loop"))

    # start at a corner such that the loop stays near `center`
    fwd0 = np.array([math.sin(yaw0), math.cos(yaw0)])
    right0 = np.array([math.cos(yaw0), -math.sin(yaw0)]) * winding
    corner = center - fwd0 * (sides[0] / 2.0) - right0 * (sides[1] / 2.0)
    start = CameraPose.from_yaw_pitch((corner[0], w.EYE_HEIGHT, corner[1]), yaw0, 0.0, intr)

    poses = _simulate(start, actions, w.empty_world(), frame_rate)
    ts = np.array([a.timestamp for a in actions])
    return Trajectory(poses, ts, actions, "rect", start, legs)


def gen_rotation_path(
    turns: int, angular_speed: float, frame_rate: float = DEFAULT_FPS, seed: int = 0
) -> Trajectory:
    """Stationary multi-turn 360-degree rotation at a fixed angular speed."""
    if turns < 1:
        raise ValueError("turns must be >= 1")
    if angular_speed <= 0:
        raise ValueError("angular_speed must be positive")
    w = _world_mod()
    dt = 1.0 / frame_rate
    delta = angular_speed * dt
    if delta > w.MAX_YAW_STEP + 1e-12:
        raise ValueError(f"angular_speed exceeds the per-frame yaw limit ({w.MAX_YAW_STEP}/frame)")
    rng = np.random.default_rng(seed)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    total = 2.0 * math.pi * turns
    n_full = int(math.ceil(total / delta - 1e-9))
    deltas = np.full(n_full, delta)
    deltas[-1] = total - delta * (n_full - 1)

    pos = np.array([rng.uniform(10.0, 22.0), w.EYE_HEIGHT, rng.uniform(10.0, 22.0)])
    yaw0 = rng.uniform(0.0, 2.0 * math.pi)
    start = CameraPose.from_yaw_pitch(pos, yaw0, 0.0, default_intrinsics(64, 64))

    actions = [
        w.ActionState(yaw_delta=direction * d, timestamp=(i + 1) * dt) for i, d in enumerate(deltas)
    ]
    poses = _simulate(start, actions, w.empty_world(), frame_rate)

    legs = []
    per_turn = n_full / turns
    for k in range(turns):
        lo, hi = int(round(k * per_turn)), int(round((k + 1) * per_turn))
        legs.append(Leg(lo, hi, "rotate", f"full turn {k + 1} of {turns}"))
    ts = np.array([a.timestamp for a in actions])
    return Trajectory(poses, ts, actions, "rotation", start, legs)


def sample_rotation_speed(rng) -> float:
    # angular-speed distribution is unspecified upstream; log-uniform keeps
    # slow and fast turns equally represented
    return math.exp(rng.uniform(math.log(math.pi / 8.0), math.log(math.pi)))


def _turn_actions(w, yaw_from, yaw_to, rate, t0, dt):
    """In-place turn split into per-frame deltas no larger than `rate`."""
    diff = (yaw_to - yaw_from + math.pi) % (2.0 * math.pi) - math.pi
    n = max(1, int(math.ceil(abs(diff) / rate - 1e-9)))
    out = []
    for i in range(n):
        out.append(w.ActionState(yaw_delta=diff / n, timestamp=t0 + (i + 1) * dt))
    return out


def gen_waypoint_path(
    n_waypoints: int,
    lookback_prob: float,
    world,
    seed: int = 0,
    frame_rate: float = DEFAULT_FPS,
) -> Trajectory:
    """Piecewise path through random free-space waypoints.

    After each leg a look-back turn (re-facing the previous waypoint) is
    inserted with probability ``lookback_prob``. Waypoint-to-waypoint legs
    are straight marches at the world move speed; every pose clears the
    world's occupied cells.
    """
    if n_waypoints < 2:
        raise ValueError("n_waypoints must be >= 2")
    w = _world_mod()
    rng = np.random.default_rng(seed)
    dt = 1.0 / frame_rate
    step = w.MOVE_SPEED * dt
    margin = w.CLEARANCE + 0.15
    max_attempts = 10 * n_waypoints

    def free(p):
        return w.clearance_distance(world, p) > margin

    def segment_clear(p0, p1):
        n = int(np.linalg.norm(p1 - p0) / 0.1) + 2
        pts = p0[None, :] + np.linspace(0.0, 1.0, n)[:, None] * (p1 - p0)[None, :]
        return all(w.clearance_distance(world, p) > margin for p in pts)

    attempts = 0

    def sample_free():
        nonlocal attempts
        while attempts < max_attempts:
            attempts += 1
            p = rng.uniform(1.0, w.ARENA_CELLS - 1.0, size=2)
            if free(p):
                return p
        raise SamplingExhaustedError(f"no free waypoint found in {max_attempts} attempts")

    waypoints = [sample_free()]
    while len(waypoints) < n_waypoints:
        p = sample_free()
        if np.linalg.norm(p - waypoints[-1]) < 2.0:
            continue
        if segment_clear(waypoints[-1], p):
            waypoints.append(p)

    actions = []
    legs = []
    pos = waypoints[0]
    yaw = math.atan2(*(waypoints[1] - pos))  # atan2(dx, dz): spawn facing the first target
    start = CameraPose.from_yaw_pitch((pos[0], w.EYE_HEIGHT, pos[1]), yaw, 0.0, default_intrinsics(64, 64))

    t = 0.0
    for k in range(n_waypoints - 1):
        target = waypoints[k + 1]
        start_frame = len(actions)
        heading = math.atan2(target[0] - pos[0], target[1] - pos[1])
        turn = _turn_actions(w, yaw, heading, w.MAX_YAW_STEP, t, dt)
        actions.extend(turn)
        t += dt * len(turn)
        yaw = heading
        n_steps = int(round(np.linalg.norm(target - pos) / step))
        fwd = np.array([math.sin(yaw), math.cos(yaw)])
        for _ in range(n_steps):
            t += dt
            actions.append(w.ActionState(keys=frozenset("W"), timestamp=t))
        pos = pos + fwd * (n_steps * step)
        legs.append(Leg(start_frame, len(actions), "advance", f"to waypoint {k + 1}"))

        if rng.random() < lookback_prob:
            back = math.atan2(waypoints[k][0] - pos[0], waypoints[k][1] - pos[1])
            start_frame = len(actions)
            turn = _turn_actions(w, yaw, back, math.pi / 8.0, t, dt)
            actions.extend(turn)
            t += dt * len(turn)
            yaw = back
            legs.append(Leg(start_frame, len(actions), "lookback", f"look back toward waypoint {k}"))

    poses = _simulate(start, actions, world, frame_rate)
    ts = np.array([a.timestamp for a in actions])
    traj = Trajectory(poses, ts, actions, "waypoint", start, legs)
    report = check_collision(traj, world, w.CLEARANCE)
    if report.colliding_frames:
        raise SamplingExhaustedError(f"generated path collides at frames {report.colliding_frames[:4]}")
    return traj


# ---------------------------------------------------------------------------
# pose-log import/export


def export_trajectory(traj: Trajectory, path) -> None:
    """Write the line-oriented pose log: `t px py pz qw qx qy qz` per frame."""
    with open(path, "w") as fh:
        fh.write("# pose log: t px py pz qw qx qy qz\n")
        for t, p in zip(traj.timestamps, traj.poses):
            vals = [t, *p.position, *p.orientation]
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def import_trajectory(path, intrinsics: Intrinsics | None = None) -> Trajectory:
    """Parse a pose log; timestamps and jitter are preserved exactly.

    Actions are reconstructed by inverse dynamics: pose deltas are quantized
    onto the key/step alphabet, so replay matches the log only up to one
    movement step per frame.
    """
    w = _world_mod()
    intr = intrinsics or default_intrinsics(64, 64)
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise PoseLogError(f"expected 8 fields, got {len(parts)}", lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise PoseLogError(str(e), lineno) from None
            if rows and vals[0] <= rows[-1][0][0]:
                raise PoseLogError(f"non-monotone timestamp {vals[0]}", lineno)
            rows.append((vals[:1], vals[1:4], vals[4:8]))
    if len(rows) < 2:
        raise PoseLogError("need at least 2 frames", len(rows))

    poses = [CameraPose(np.array(p), quat_normalize(q), intr) for (_, p, q) in rows]
    ts = np.array([r[0][0] for r in rows])

    actions = [w.ActionState(timestamp=ts[0])]
    step = w.MOVE_SPEED * float(np.median(np.diff(ts)))
    prev_yaw, prev_pitch = yaw_pitch_from_quat(poses[0].orientation)
    for i in range(1, len(poses)):
        yaw, pitch = yaw_pitch_from_quat(poses[i].orientation)
        dyaw = (yaw - prev_yaw + math.pi) % (2.0 * math.pi) - math.pi
        dpitch = pitch - prev_pitch
        dp = poses[i].position - poses[i - 1].position
        fwd = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
        right = np.array([math.cos(yaw), 0.0, -math.sin(yaw)])
        f_comp, r_comp = float(dp @ fwd), float(dp @ right)
        keys = set()
        if f_comp >= step / 2:
            keys.add("W")
        elif f_comp <= -step / 2:
            keys.add("S")
        if r_comp >= step / 2:
            keys.add("D")
        elif r_comp <= -step / 2:
            keys.add("A")
        actions.append(
            w.ActionState(
                keys=frozenset(keys),
                yaw_delta=float(np.clip(dyaw, -w.MAX_YAW_STEP, w.MAX_YAW_STEP)),
                pitch_delta=float(np.clip(dpitch, -w.MAX_PITCH_STEP, w.MAX_PITCH_STEP)),
                timestamp=ts[i],
            )
        )
        prev_yaw, prev_pitch = yaw, pitch

    legs = [Leg(0, len(poses), "imported", "imported pose log")]
    return Trajectory(poses, ts, actions, "imported", poses[0], legs)


# ---------------------------------------------------------------------------
# collision checking and replay validation


@dataclass
class CollisionReport:
    colliding_frames: list
    clearance: float
    min_distance: float

    @property
    def ok(self) -> bool:
        return not self.colliding_frames


def check_collision(traj: Trajectory, world, clearance: float) -> CollisionReport:
    """List every frame whose position sits within `clearance` of an occupied cell."""
    if clearance < 0:
        raise ValueError("clearance must be >= 0")
    w = _world_mod()
    frames = []
    dmin = math.inf
    for i, pose in enumerate(traj.poses):
        d = w.clearance_distance(world, (pose.position[0], pose.position[2]))
        dmin = min(dmin, d)
        if d <= clearance:
            frames.append(i)
    return CollisionReport(frames, clearance, dmin)


def replay_error(traj: Trajectory, world=None, frame_rate: float | None = None) -> float:
    """Max per-frame position+yaw deviation when refolding actions through the dynamics."""
    w = _world_mod()
    if world is None:
        world = w.empty_world()
    if frame_rate is None:
        dts = np.diff(traj.timestamps)
        frame_rate = 1.0 / float(np.median(dts)) if len(dts) else DEFAULT_FPS
    replayed = _simulate(traj.start_pose, traj.actions, world, frame_rate)
    err = 0.0
    for got, want in zip(replayed, traj.poses):
        err = max(err, float(np.max(np.abs(got.position - want.position))))
        dyaw = abs((got.yaw - want.yaw + math.pi) % (2.0 * math.pi) - math.pi)
        err = max(err, dyaw)
    return err
