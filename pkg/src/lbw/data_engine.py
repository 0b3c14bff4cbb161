"""Clip construction, slicing, filtering, captioning, and shard IO.

A clip couples rendered frames with the per-frame actions and poses that
produced them, plus three caption styles and the world-event log. Shards
are single files holding many clips: magic + version + count header,
length-prefixed records, and a whole-file crc32 footer so torn writes are
detected before any record is trusted.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from lbw import world as w
from lbw.geometry import (
    CameraPose,
    Intrinsics,
    Leg,
    Trajectory,
    default_intrinsics,
    gen_rect_path,
    gen_rotation_path,
    gen_waypoint_path,
    quat_normalize,
    sample_rotation_speed,
)

SHARD_MAGIC = b"LBW1"
SHARD_VERSION = 1

# words that imply camera motion; static scene captions must avoid them
MOTION_BLACKLIST = ("moves", "pans", "turns", "forward", "approaches")


class ShardError(Exception):
    pass


class ShardFormatError(ShardError):
    pass


class ShardVersionError(ShardError):
    pass


class ShardChecksumError(ShardError):
    pass


class ShardTruncatedError(ShardError):
    pass


@dataclass
class ClipRecord:
    clip_id: str
    kind: str
    frames: np.ndarray  # (n, h, w, 3) uint8
    timestamps: np.ndarray  # (n,) float64, seconds
    actions: list  # ActionState per frame
    poses: np.ndarray  # (n, 7) float64: px py pz qw qx qy qz
    start_pose: np.ndarray  # (7,) state before actions[0]
    intrinsics: Intrinsics
    world_seed: int
    events: list = field(default_factory=list)  # (frame_idx, EventSpec)
    captions: dict = field(default_factory=dict)
    legs: list = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    @property
    def duration(self) -> float:
        """Length in seconds counting each frame's display interval."""
        n = self.n_frames
        if n < 2:
            return 0.0
        return float((self.timestamps[-1] - self.timestamps[0]) * n / (n - 1))

    @property
    def brightness(self) -> float:
        return w.luminance(self.frames)


def pose_to_vec(pose: CameraPose) -> np.ndarray:
    return np.concatenate([pose.position, pose.orientation])


def vec_to_pose(vec, intrinsics: Intrinsics) -> CameraPose:
    vec = np.asarray(vec, dtype=np.float64)
    return CameraPose(vec[:3], quat_normalize(vec[3:7]), intrinsics)


# ---------------------------------------------------------------------------
# clip building


def build_clip(
    world: w.WorldSpec,
    traj: Trajectory,
    events=None,
    height: int = 64,
    width: int = 64,
    clip_id: str = "",
) -> ClipRecord:
    """Render a trajectory into a clip, applying events at their frame index.

    An event at frame i affects frames i..n-1. The event log and captions
    are stored on the record.
    """
    events = sorted(events or [], key=lambda e: e[0])
    for idx, ev in events:
        if not (0 <= idx < len(traj)):
            raise ValueError(f"event frame {idx} outside clip of {len(traj)} frames")
    frames = np.empty((len(traj), height, width, 3), dtype=np.uint8)
    cur = world
    pending = list(events)
    for i, pose in enumerate(traj.poses):
        while pending and pending[0][0] == i:
            cur = w.apply_event(cur, pending.pop(0)[1])
        frames[i] = w.render(cur, pose, height, width)
    clip = ClipRecord(
        clip_id=clip_id or f"w{world.seed}-{traj.kind}",
        kind=traj.kind,
        frames=frames,
        timestamps=traj.timestamps.copy(),
        actions=list(traj.actions),
        poses=np.stack([pose_to_vec(p) for p in traj.poses]),
        start_pose=pose_to_vec(traj.start_pose),
        intrinsics=traj.poses[0].intrinsics,
        world_seed=world.seed,
        events=events,
        legs=list(traj.legs),
    )
    clip.captions = make_captions(world, clip)
    return clip


# ---------------------------------------------------------------------------
# slicing and filtering


def slice_clips(frames: np.ndarray, threshold: float = 0.5):
    """Split a frame sequence at hard cuts.

    The cut signal is the mean absolute inter-frame difference normalized by
    its maximum over the sequence, which makes the decision invariant to
    global brightness scaling. Returns half-open (start, end) spans.
    """
    frames = np.asarray(frames)
    n = frames.shape[0]
    if n == 0:
        return []
    if n == 1:
        return [(0, 1)]
    diffs = np.abs(np.diff(frames.astype(np.float64), axis=0)).mean(axis=(1, 2, 3))
    peak = diffs.max()
    norm = diffs / peak if peak > 0 else np.zeros_like(diffs)
    cuts = np.nonzero(norm > threshold)[0] + 1  # cut between i and i+1
    spans = []
    start = 0
    for c in cuts:
        spans.append((start, int(c)))
        start = int(c)
    spans.append((start, n))
    return spans


@dataclass(frozen=True)
class FilterCriteria:
    min_height: int = 64
    min_width: int = 64
    min_duration: float = 2.0
    min_brightness: float = 0.05


def filter_clip(clip: ClipRecord, criteria: FilterCriteria = FilterCriteria()):
    """(keep, reason): reason names the first failing attribute, bounds inclusive."""
    if clip.height < criteria.min_height or clip.width < criteria.min_width:
        return False, "resolution"
    if clip.duration < criteria.min_duration:
        return False, "duration"
    if clip.brightness < criteria.min_brightness:
        return False, "brightness"
    return True, None


# ---------------------------------------------------------------------------
# captions


def _pillar_summary(world: w.WorldSpec) -> str:
    counts = {}
    for _, _, color in world.pillars:
        counts[color] = counts.get(color, 0) + 1
    if not counts:
        return "an empty arena"
    parts = [f"{n} {color}" for color, n in sorted(counts.items())]
    return "pillars in " + ", ".join(parts)


_KIND_PHRASES = {
    "rect": "the camera circles a rectangular loop among the pillars",
    "rotation": "the camera turns in place through full revolutions",
    "waypoint": "the camera walks between scattered waypoints",
    "imported": "the camera follows a recorded walk",
    "gameplay": "the camera follows player input",
}

_EVENT_PHRASES = {
    "set_time_of_day": "the sky switches to {value}",
    "set_tint": "the lighting takes on a color cast",
    "spawn_object": "a new {color} block appears",
}


def _event_phrase(ev: w.EventSpec) -> str:
    if ev.kind == "set_time_of_day":
        return _EVENT_PHRASES[ev.kind].format(value=ev.value)
    if ev.kind == "spawn_object":
        return _EVENT_PHRASES[ev.kind].format(color=ev.value[1])
    return _EVENT_PHRASES[ev.kind]


def caption_narrative(world: w.WorldSpec, clip: ClipRecord) -> str:
    """One-paragraph story of what happens over the clip."""
    bits = [_KIND_PHRASES.get(clip.kind, "the camera explores the arena")]
    for _, ev in clip.events:
        bits.append(_event_phrase(ev))
    body = "; ".join(bits)
    return f"In an arena with {_pillar_summary(world)}, {body}."


def caption_scene(world: w.WorldSpec, clip: ClipRecord) -> str:
    """Static scene description; contains no camera-motion vocabulary."""
    sky = "night" if any(
        ev.kind == "set_time_of_day" and ev.value == "night" for _, ev in clip.events
    ) else world.time_of_day
    text = (
        f"A checkerboard-floored arena bounded by white walls under a {sky} sky, "
        f"with {_pillar_summary(world)}."
    )
    lowered = text.lower()
    assert not any(word in lowered for word in MOTION_BLACKLIST)
    return text


def caption_dense(world: w.WorldSpec, clip: ClipRecord):
    """Temporally grounded caption records, one per trajectory leg plus one
    per world event, with float second bounds."""
    fps = (clip.n_frames - 1) / (clip.timestamps[-1] - clip.timestamps[0]) if clip.n_frames > 1 else 1.0
    records = []
    t0 = float(clip.timestamps[0])

    def t_of(frame):
        frame = min(frame, clip.n_frames - 1)
        return float(clip.timestamps[frame])

    for leg in clip.legs:
        records.append(
            {
                "start_time": t_of(leg.start) - 1.0 / fps if leg.start == 0 else t_of(leg.start - 1),
                "end_time": t_of(leg.end - 1),
                "Event": leg.label,
                "caption": leg.detail or leg.label,
            }
        )
    for frame, ev in clip.events:
        t = t_of(frame)
        records.append({"start_time": t, "end_time": t, "Event": ev.kind, "caption": _event_phrase(ev)})
    records.sort(key=lambda r: (r["start_time"], r["end_time"]))
    return records


def make_captions(world: w.WorldSpec, clip: ClipRecord) -> dict:
    return {
        "narrative": caption_narrative(world, clip),
        "scene": caption_scene(world, clip),
        "dense": caption_dense(world, clip),
    }


# ---------------------------------------------------------------------------
# shard IO

_HEADER = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")
# f64 deltas: round-trips must reproduce oracle actions bit-exactly
_ACTION = struct.Struct("<Bdd")


def _encode_record(clip: ClipRecord) -> bytes:
    meta = {
        "clip_id": clip.clip_id,
        "kind": clip.kind,
        "n_frames": clip.n_frames,
        "height": clip.height,
        "width": clip.width,
        "intrinsics": [clip.intrinsics.fx, clip.intrinsics.fy, clip.intrinsics.cx, clip.intrinsics.cy],
        "world_seed": clip.world_seed,
        "events": [[idx, ev.kind, ev.value] for idx, ev in clip.events],
        "captions": clip.captions,
        "start_pose": list(clip.start_pose),
        "legs": [[l.start, l.end, l.label, l.detail] for l in clip.legs],
    }
    blob = json.dumps(meta, separators=(",", ":")).encode()
    parts = [_U32.pack(len(blob)), blob, clip.frames.tobytes()]
    for a in clip.actions:
        parts.append(_ACTION.pack(a.bitmask, a.yaw_delta, a.pitch_delta))
    parts.append(np.ascontiguousarray(clip.timestamps, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(clip.poses, dtype="<f8").tobytes())
    return b"".join(parts)


def _decode_record(buf: bytes) -> ClipRecord:
    try:
        if len(buf) < 4:
            raise ShardTruncatedError("record shorter than its meta length field")
        (jlen,) = _U32.unpack_from(buf, 0)
        off = 4
        if off + jlen > len(buf):
            raise ShardTruncatedError("meta block overruns record")
        meta = json.loads(buf[off : off + jlen].decode())
        off += jlen
        n, h, wd = int(meta["n_frames"]), int(meta["height"]), int(meta["width"])
        if n < 0 or h <= 0 or wd <= 0 or n > 1 << 20:
            raise ShardFormatError(f"implausible clip dims {n}x{h}x{wd}")
        need = n * h * wd * 3 + n * _ACTION.size + n * 8 + n * 7 * 8
        if off + need != len(buf):
            raise ShardTruncatedError(f"record payload is {len(buf) - off} bytes, expected {need}")
        frames = np.frombuffer(buf, dtype=np.uint8, count=n * h * wd * 3, offset=off)
        frames = frames.reshape(n, h, wd, 3).copy()
        off += n * h * wd * 3
        ts_off = off + n * _ACTION.size
        ts = np.frombuffer(buf, dtype="<f8", count=n, offset=ts_off).astype(np.float64)
        actions = []
        for i in range(n):
            mask, dy, dp = _ACTION.unpack_from(buf, off + i * _ACTION.size)
            actions.append(w.ActionState.from_bitmask(mask, dy, dp, float(ts[i])))
        off = ts_off + n * 8
        poses = np.frombuffer(buf, dtype="<f8", count=n * 7, offset=off).reshape(n, 7).copy()
        intr = Intrinsics(*[float(v) for v in meta["intrinsics"]])
        events = []
        for idx, kind, value in meta["events"]:
            if isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            events.append((int(idx), w.EventSpec(kind, value)))
        return ClipRecord(
            clip_id=str(meta["clip_id"]),
            kind=str(meta["kind"]),
            frames=frames,
            timestamps=ts,
            actions=actions,
            poses=poses,
            start_pose=np.asarray(meta["start_pose"], dtype=np.float64),
            intrinsics=intr,
            world_seed=int(meta["world_seed"]),
            events=events,
            captions=meta["captions"],
            legs=[Leg(int(a), int(b), str(c), str(d)) for a, b, c, d in meta["legs"]],
        )
    except ShardError:
        raise
    except Exception as e:  # malformed json, bad values: report, never crash
        raise ShardFormatError(f"corrupt record: {e}") from None


def write_shard(path, clips) -> None:
    body = bytearray(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, len(clips)))
    for clip in clips:
        rec = _encode_record(clip)
        body += _U32.pack(len(rec))
        body += rec
    body += _U32.pack(zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def read_shard(path):
    """Decode a shard; raises a ShardError subclass on any corruption."""
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_shard(buf)


def decode_shard(buf: bytes):
    if len(buf) < _HEADER.size + 4:
        raise ShardTruncatedError(f"{len(buf)} bytes is below the minimum shard size")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != SHARD_MAGIC:
        raise ShardFormatError(f"bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise ShardVersionError(f"unsupported shard version {version}")
    (stored,) = _U32.unpack_from(buf, len(buf) - 4)
    actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise ShardChecksumError(f"crc mismatch: stored {stored:#010x}, computed {actual:#010x}")
    off = _HEADER.size
    end = len(buf) - 4
    clips = []
    for _ in range(count):
        if off + 4 > end:
            raise ShardTruncatedError("record length field overruns shard body")
        (rlen,) = _U32.unpack_from(buf, off)
        off += 4
        if off + rlen > end:
            raise ShardTruncatedError("record overruns shard body")
        clips.append(_decode_record(buf[off : off + rlen]))
        off += rlen
    if off != end:
        raise ShardFormatError(f"{end - off} trailing bytes after the last record")
    return clips


# ---------------------------------------------------------------------------
# dataset generation and profiling

TRAJ_KINDS = ("rect", "rotation", "waypoint")


def generate_clip(seed: int, height: int = 64, width: int = 64, event_prob: float = 0.35) -> ClipRecord:
    """One seeded synthetic clip with a random trajectory kind and optional events."""
    rng = np.random.default_rng(seed)
    world = w.build_world(int(rng.integers(1 << 31)))
    kind = TRAJ_KINDS[int(rng.integers(len(TRAJ_KINDS)))]
    tseed = int(rng.integers(1 << 31))
    if kind == "rect":
        traj = gen_rect_path(scale=float(rng.uniform(2.0, 5.0)), speed=float(rng.uniform(0.5, 1.5)), seed=tseed)
    elif kind == "rotation":
        traj = gen_rotation_path(int(rng.integers(1, 3)), sample_rotation_speed(rng), seed=tseed)
    else:
        traj = gen_waypoint_path(int(rng.integers(2, 6)), float(rng.uniform(0.0, 0.6)), world, seed=tseed)

    events = []
    if rng.random() < event_prob and len(traj) >= 8:
        frame = int(rng.integers(len(traj) // 4, 3 * len(traj) // 4))
        roll = rng.random()
        if roll < 0.5:
            target = "night" if world.time_of_day == "day" else "day"
            events.append((frame, w.EventSpec("set_time_of_day", target)))
        elif roll < 0.75:
            tint = tuple(float(v) for v in rng.uniform(0.6, 1.4, size=3))
            events.append((frame, w.EventSpec("set_tint", tint)))
        else:
            occupied = {(c[0], c[1]) for c in world.pillars}
            for _ in range(50):
                cell = (int(rng.integers(2, 30)), int(rng.integers(2, 30)))
                if cell not in occupied:
                    color = list(w.PILLAR_COLORS)[int(rng.integers(len(w.PILLAR_COLORS)))]
                    events.append((frame, w.EventSpec("spawn_object", (cell, color))))
                    break
    return build_clip(world, traj, events, height, width, clip_id=f"clip-{seed:06d}")


def make_dataset(path, n_clips: int, seed: int = 0, height: int = 64, width: int = 64) -> dict:
    """Generate n seeded clips into one shard file; returns summary stats."""
    clips = [generate_clip(seed * 100003 + i, height, width) for i in range(n_clips)]
    kept = []
    dropped = {}
    for c in clips:
        ok, reason = filter_clip(c)
        if ok:
            kept.append(c)
        else:
            dropped[reason] = dropped.get(reason, 0) + 1
    write_shard(path, kept)
    return {
        "path": str(path),
        "clips": len(kept),
        "dropped": dropped,
        "frames": int(sum(c.n_frames for c in kept)),
        "kinds": {k: sum(1 for c in kept if c.kind == k) for k in TRAJ_KINDS},
    }


def profile_render(n_frames: int = 1000, height: int = 64, width: int = 64, seed: int = 0) -> dict:
    """Throughput probe: render n frames along a rotation path."""
    world = w.build_world(seed)
    traj = gen_rotation_path(8, 2.0, seed=seed)
    poses = (traj.poses * (n_frames // len(traj) + 1))[:n_frames]
    w.render(world, poses[0], height, width)  # warm-up
    t0 = time.perf_counter()
    for p in poses:
        w.render(world, p, height, width)
    dt = time.perf_counter() - t0
    return {"frames": n_frames, "seconds": dt, "fps": n_frames / dt, "ms_per_frame": 1e3 * dt / n_frames}


def profile_shard(path) -> dict:
    clips = read_shard(path)
    key_counts = {k: 0 for k in "WASD"}
    for c in clips:
        for a in c.actions:
            for k in a.keys:
                key_counts[k] += 1
    return {
        "clips": len(clips),
        "frames": int(sum(c.n_frames for c in clips)),
        "duration_s": float(sum(c.duration for c in clips)),
        "mean_brightness": float(np.mean([c.brightness for c in clips])) if clips else 0.0,
        "kinds": {k: sum(1 for c in clips if c.kind == k) for k in sorted({c.kind for c in clips})},
        "key_presses": key_counts,
        "events": int(sum(len(c.events) for c in clips)),
    }
