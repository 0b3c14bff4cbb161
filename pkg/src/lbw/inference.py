"""Streaming generation sessions: one rolling cache per session, one chunk
per call.

The session integrates the camera pose itself. Clients send per-frame
ActionStates; the pose folds through the oracle dynamics over an empty
arena (boundary walls only), mirroring how training trajectories were
produced, and the resulting ray maps condition the student. Chunk noise is
a pure function of (session seed, chunk index), so prompt swaps and
cache-capacity choices replay against an identical noise stream. Emitted
frames are values; later actions never revise them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

import lbw.world as w
from lbw.checkpoint import load_module
from lbw.diffusion import TARGET_TS
from lbw.distill import student_generate
from lbw.geometry import CameraPose, default_intrinsics, plucker_embed
from lbw.model import (
    KVCache,
    WorldModel,
    actions_to_tensor,
    encode_text,
    frames_to_tensor,
    tensor_to_frames,
)

_ARENA = w.empty_world()
_CENTER = (w.ARENA_CELLS / 2.0, w.EYE_HEIGHT, w.ARENA_CELLS / 2.0)


@dataclass
class SessionConfig:
    fps: float = 8.0  # serve clock and dynamics dt; keep at the data frame rate
    ts: tuple = TARGET_TS
    cache_chunks: int | None = None  # None: the model's trained window
    flush_cache_on_swap: bool = False  # drop stale history instead of keeping it
    init_frame: np.ndarray | None = None  # (H, W, 3) uint8 conditioning image
    start_position: tuple = _CENTER
    start_yaw: float = 0.0


@dataclass
class Session:
    """One live stream; owns its cache, camera pose and noise schedule."""

    student: WorldModel
    config: SessionConfig
    prompt: str
    start_prompt: str
    seed: int
    text: torch.Tensor  # (1, L) hashed prompt tokens, L may be 0
    cache: KVCache
    pose: CameraPose
    chunk_idx: int = 0
    primer: np.ndarray | None = None  # chunk 0 frames, made by start_session
    last_latent: torch.Tensor | None = None
    frames_emitted: int = 0
    queue_depth: int = 0  # written by the server loop, surfaced in stats
    wall_model: list = field(default_factory=list)
    wall_other: list = field(default_factory=list)


def idle_actions(n: int):
    return [w.ActionState() for _ in range(n)]


def pad_actions(actions, n: int):
    """Hold-to-repeat: short action lists repeat their last entry so a
    starved queue keeps the camera on its current input; empty holds idle."""
    actions = list(actions)[:n]
    if not actions:
        actions = [w.ActionState()]
    while len(actions) < n:
        actions.append(actions[-1])
    return actions


def chunk_generator(seed: int, chunk_idx: int) -> torch.Generator:
    # noise for chunk i must not depend on what was generated before it
    return torch.Generator().manual_seed((seed * 1_000_003 + chunk_idx) % 2**63)


def poses_to_plucker(poses, frame_hw) -> torch.Tensor:
    h, wd = frame_hw
    maps = np.stack([plucker_embed(p, h, wd) for p in poses])
    return torch.from_numpy(maps).float().permute(0, 3, 1, 2).unsqueeze(0)


def start_session(source, prompt: str = "", seed: int = 0, config: SessionConfig | None = None) -> Session:
    """Open a stream from a student WorldModel or a checkpoint path.

    Generates the conditioning chunk 0 from the prompt alone (idle
    controls), or commits config.init_frame repeated chunk_len times when
    an image is supplied. An empty prompt is valid and means null text
    conditioning. Stats counters start at zero; the primer chunk is not
    counted as streamed. Checkpoint magic/version problems propagate as
    CheckpointError.
    """
    config = config or SessionConfig()
    if isinstance(source, WorldModel):
        student = source
    else:
        student, _ = load_module(source, expect_kind="student")
    student.eval()
    cfg = student.cfg
    capacity = config.cache_chunks or cfg.cache_chunks
    intr = default_intrinsics(*cfg.frame_hw)
    sess = Session(
        student=student,
        config=config,
        prompt=prompt,
        start_prompt=prompt,
        seed=seed,
        text=encode_text(prompt, cfg.text_vocab),
        cache=KVCache(cfg.depth, capacity),
        pose=CameraPose.from_yaw_pitch(config.start_position, config.start_yaw, 0.0, intr),
    )
    sess.primer = _prime(sess)
    return sess


def _prime(sess: Session) -> np.ndarray:
    """Produce and commit chunk 0 so streamed chunks have context."""
    cfg = sess.student.cfg
    acts = idle_actions(cfg.chunk_len)
    poses = w.rollout(sess.pose, acts, 1.0 / sess.config.fps, _ARENA)
    sess.pose = poses[-1]
    a = actions_to_tensor(acts).unsqueeze(0)
    p = poses_to_plucker(poses, cfg.frame_hw)
    with torch.no_grad():
        if sess.config.init_frame is not None:
            frame = frames_to_tensor(sess.config.init_frame[None])
            chunk = frame.unsqueeze(0).repeat(1, cfg.chunk_len, 1, 1, 1)
            sess.student(chunk, torch.zeros(1, cfg.chunk_len), a, p, causal=True,
                         cache=sess.cache, frame_offset=0, append_cache=True, text=sess.text)
        else:
            chunk = student_generate(sess.student, sess.cache, a, p, 0,
                                     chunk_generator(sess.seed, 0), ts=sess.config.ts,
                                     text=sess.text)
    sess.chunk_idx = 1
    sess.last_latent = chunk.detach()
    return tensor_to_frames(chunk[0])


def stream_chunk(sess: Session, actions) -> np.ndarray:
    """Advance the stream by one chunk under exactly chunk_len ActionStates.

    Returns (chunk_len, H, W, 3) uint8 frames. Wall time splits into model
    (denoise steps + cache commit) and everything else (pose integration,
    ray maps, decode).
    """
    cfg = sess.student.cfg
    if len(actions) != cfg.chunk_len:
        raise ValueError(f"need {cfg.chunk_len} actions per chunk, got {len(actions)}")
    t0 = time.perf_counter()
    poses = w.rollout(sess.pose, list(actions), 1.0 / sess.config.fps, _ARENA)
    sess.pose = poses[-1]
    a = actions_to_tensor(list(actions)).unsqueeze(0)
    p = poses_to_plucker(poses, cfg.frame_hw)
    gen = chunk_generator(sess.seed, sess.chunk_idx)
    t1 = time.perf_counter()
    with torch.no_grad():
        chunk = student_generate(sess.student, sess.cache, a, p,
                                 sess.chunk_idx * cfg.chunk_len, gen,
                                 ts=sess.config.ts, text=sess.text)
    t2 = time.perf_counter()
    frames = tensor_to_frames(chunk[0])
    t3 = time.perf_counter()
    sess.last_latent = chunk.detach()
    sess.chunk_idx += 1
    sess.frames_emitted += cfg.chunk_len
    sess.wall_model.append(t2 - t1)
    sess.wall_other.append((t1 - t0) + (t3 - t2))
    return frames


def swap_prompt(sess: Session, text: str) -> None:
    """Swap the text conditioning for all later chunks.

    The cache is retained, so history stays consistent with the old prompt;
    set flush_cache_on_swap to drop it instead. stream_chunk reads the
    prompt once at entry, which makes a swap between calls atomic at the
    chunk boundary; concurrent callers must route swaps through the
    server's ingress queue rather than mutating the session directly.
    """
    sess.prompt = text
    sess.text = encode_text(text, sess.student.cfg.text_vocab)
    if sess.config.flush_cache_on_swap:
        sess.cache = KVCache(sess.student.cfg.depth, sess.cache.capacity)


def reset_session(sess: Session) -> np.ndarray:
    """Restart in place: original prompt and seed, fresh cache and stats.

    Replays the identical primer chunk, so a reset stream is
    frame-for-frame the session as first started.
    """
    cfg = sess.student.cfg
    intr = default_intrinsics(*cfg.frame_hw)
    sess.prompt = sess.start_prompt
    sess.text = encode_text(sess.start_prompt, cfg.text_vocab)
    sess.cache = KVCache(cfg.depth, sess.cache.capacity)
    sess.pose = CameraPose.from_yaw_pitch(sess.config.start_position, sess.config.start_yaw, 0.0, intr)
    sess.chunk_idx = 0
    sess.frames_emitted = 0
    sess.queue_depth = 0
    sess.wall_model.clear()
    sess.wall_other.clear()
    sess.primer = _prime(sess)
    return sess.primer


def session_stats(sess: Session) -> dict:
    """Latency accounting: per-chunk wall-time percentiles for the model
    and for everything around it, plus frame counters. Fresh sessions
    report zeros."""

    def pct(xs):
        if xs.size == 0:
            return {"p50_ms": 0.0, "p90_ms": 0.0, "max_ms": 0.0}
        return {
            "p50_ms": float(np.percentile(xs, 50) * 1e3),
            "p90_ms": float(np.percentile(xs, 90) * 1e3),
            "max_ms": float(xs.max() * 1e3),
        }

    model = np.asarray(sess.wall_model)
    other = np.asarray(sess.wall_other)
    total = float(model.sum() + other.sum())
    return {
        "chunks": len(sess.wall_model),
        "frames": sess.frames_emitted,
        "queue_depth": sess.queue_depth,
        "target_fps": sess.config.fps,
        "achieved_fps": sess.frames_emitted / total if total > 0 else 0.0,
        "model": pct(model),
        "overhead": pct(other),
        "overhead_ms_per_frame": float(other.sum() * 1e3 / sess.frames_emitted) if sess.frames_emitted else 0.0,
    }
