"""Behavior-cloned action agent: one frame in, a multi-second action plan
out.

The plan is a token sequence over {W, A, S, D, none} x {I, J, K, L, none},
one pair per step at a fixed rate; I/K pitch the camera up/down and J/L
yaw it left/right by pi/32 per step. A toy encoder (patch embedding plus
two plain attention blocks) stands in for the VLM backbone; it shares the
patchify/unpatchify layout with the world model. Driving a session just
alternates plan prediction with chunk streaming, holding each token for
fps/rate frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from lbw.inference import stream_chunk
from lbw.model import frames_to_tensor, patchify
from lbw.world import ActionState

KEY_VOCAB = ("", "W", "A", "S", "D")
MOUSE_VOCAB = ("", "I", "J", "K", "L")
MOUSE_DELTA = math.pi / 32


@dataclass
class AgentConfig:
    frame_hw: tuple = (64, 64)
    width: int = 64
    depth: int = 2
    heads: int = 4
    patch: int = 8
    horizon_s: float = 10.0
    rate_hz: float = 4.0

    @property
    def plan_len(self) -> int:
        return int(round(self.horizon_s * self.rate_hz))

    def to_dict(self) -> dict:
        return {
            "frame_hw": list(self.frame_hw),
            "width": self.width,
            "depth": self.depth,
            "heads": self.heads,
            "patch": self.patch,
            "horizon_s": self.horizon_s,
            "rate_hz": self.rate_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        d["frame_hw"] = tuple(d["frame_hw"])
        return cls(**d)


@dataclass
class ActionChunkPlan:
    """Greedy-decoded token pairs; empty strings are the null key/mouse."""

    tokens: list  # [(key, mouse), ...], length horizon_s * rate_hz
    horizon_s: float
    rate_hz: float

    def __post_init__(self):
        want = int(round(self.horizon_s * self.rate_hz))
        if len(self.tokens) != want:
            raise ValueError(f"plan needs {want} tokens, got {len(self.tokens)}")
        for key, mouse in self.tokens:
            if key not in KEY_VOCAB or mouse not in MOUSE_VOCAB:
                raise ValueError(f"token ({key!r}, {mouse!r}) outside the alphabet")

    def __len__(self):
        return len(self.tokens)


def token_to_action(key: str, mouse: str, timestamp: float = 0.0) -> ActionState:
    """Total map from the token alphabet into control states."""
    if key not in KEY_VOCAB or mouse not in MOUSE_VOCAB:
        raise ValueError(f"token ({key!r}, {mouse!r}) outside the alphabet")
    pitch = {"I": MOUSE_DELTA, "K": -MOUSE_DELTA}.get(mouse, 0.0)
    yaw = {"J": -MOUSE_DELTA, "L": MOUSE_DELTA}.get(mouse, 0.0)
    return ActionState(keys=frozenset({key}) if key else frozenset(),
                       yaw_delta=yaw, pitch_delta=pitch, timestamp=timestamp)


def plan_to_actions(plan: ActionChunkPlan, fps: float):
    """Expand a plan to per-frame ActionStates; each token holds for
    round(fps / rate) frames."""
    hold = max(1, int(round(fps / plan.rate_hz)))
    out = []
    for key, mouse in plan.tokens:
        out.extend(token_to_action(key, mouse) for _ in range(hold))
    return out


def tokens_to_ids(tokens) -> torch.Tensor:
    """[(key, mouse), ...] -> (L, 2) class ids for the two heads."""
    ids = [(KEY_VOCAB.index(k), MOUSE_VOCAB.index(mo)) for k, mo in tokens]
    return torch.tensor(ids, dtype=torch.int64)


def action_to_token(action: ActionState) -> tuple:
    """Project an oracle ActionState onto the token alphabet.

    Multi-key chords keep their first key in W/A/S/D order; the mouse
    token follows the dominant look axis and drops below half a step to
    null. Lossy by design: the planner speaks single-key tokens, not the
    oracle's full chord space.
    """
    key = next((k for k in ("W", "A", "S", "D") if k in action.keys), "")
    if abs(action.pitch_delta) >= abs(action.yaw_delta):
        v, pos, neg = action.pitch_delta, "I", "K"
    else:
        v, pos, neg = action.yaw_delta, "L", "J"
    mouse = "" if abs(v) < MOUSE_DELTA / 2 else (pos if v > 0 else neg)
    return key, mouse


def pairs_from_clip(clip, cfg: AgentConfig, fps: float = 8.0):
    """(observation frame, token plan) training pairs from one clip.

    The plan covers the horizon_s seconds after the observation, one token
    per 1/rate_hz, read from the oracle actions at stride fps/rate_hz.
    Starts are non-overlapping; clips shorter than one horizon yield none.
    """
    stride = max(1, int(round(fps / cfg.rate_hz)))
    span = cfg.plan_len * stride
    out = []
    for i in range(0, clip.n_frames - span, span):
        toks = [action_to_token(clip.actions[i + 1 + j * stride]) for j in range(cfg.plan_len)]
        out.append((clip.frames[i], toks))
    return out


class PlainBlock(nn.Module):
    """Unconditioned transformer block over one frame's patch tokens."""

    def __init__(self, c: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(c, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(c, elementwise_affine=False)
        self.qkv = nn.Linear(c, 3 * c)
        self.proj = nn.Linear(c, c)
        self.mlp = nn.Sequential(nn.Linear(c, 4 * c), nn.GELU(), nn.Linear(4 * c, c))

    def forward(self, x):
        b, s, c = x.shape
        nh, hd = self.heads, c // self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q, k, v = (z.view(b, s, nh, hd).transpose(1, 2) for z in (q, k, v))
        att = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(att.transpose(1, 2).reshape(b, s, c))
        return x + self.mlp(self.norm2(x))


class BehaviorCloner(nn.Module):
    """Single-observation policy: logits (B, plan_len, 2, 5), heads over
    the key and mouse vocabularies. The head starts at zero so an untrained
    agent is exactly uniform over both alphabets."""

    def __init__(self, cfg: AgentConfig):
        super().__init__()
        self.cfg = cfg
        h, w = cfg.frame_hw
        if h % cfg.patch or w % cfg.patch:
            raise ValueError(f"frame {h}x{w} not divisible by patch {cfg.patch}")
        s = (h // cfg.patch) * (w // cfg.patch)
        c = cfg.width
        self.in_proj = nn.Linear(3 * cfg.patch * cfg.patch, c)
        self.spatial_pos = nn.Parameter(torch.randn(1, s, c) * 0.02)
        self.blocks = nn.ModuleList(PlainBlock(c, cfg.heads) for _ in range(cfg.depth))
        self.out_norm = nn.LayerNorm(c, elementwise_affine=False)
        self.head = nn.Linear(c, cfg.plan_len * 10)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames: (B, 3, H, W) in [-1, 1]."""
        cfg = self.cfg
        if frames.shape[-2:] != torch.Size(cfg.frame_hw):
            raise ValueError(f"expected {cfg.frame_hw} frames, got {tuple(frames.shape[-2:])}")
        x = self.in_proj(patchify(frames.unsqueeze(1), cfg.patch)[:, 0]) + self.spatial_pos
        for blk in self.blocks:
            x = blk(x)
        pooled = self.out_norm(x).mean(dim=1)
        return self.head(pooled).view(-1, cfg.plan_len, 2, 5)


def agent_loss(agent: BehaviorCloner, frames: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Per-step cross-entropy summed over the two heads, mean over batch
    and steps. tokens: (B, plan_len, 2) class ids."""
    if tokens.ndim != 3 or tokens.shape[1] != agent.cfg.plan_len or tokens.shape[2] != 2:
        raise ValueError(f"tokens must be (B, {agent.cfg.plan_len}, 2), got {tuple(tokens.shape)}")
    if tokens.shape[0] != frames.shape[0]:
        raise ValueError("frames and tokens disagree on batch size")
    logits = agent(frames)
    key = F.cross_entropy(logits[:, :, 0].reshape(-1, 5), tokens[:, :, 0].reshape(-1))
    mouse = F.cross_entropy(logits[:, :, 1].reshape(-1, 5), tokens[:, :, 1].reshape(-1))
    return key + mouse


def agent_train_step(agent: BehaviorCloner, frames, tokens, opt: torch.optim.Optimizer) -> float:
    opt.zero_grad(set_to_none=True)
    loss = agent_loss(agent, frames, tokens)
    loss.backward()
    opt.step()
    return loss.item()


def agent_predict(agent: BehaviorCloner, observation: np.ndarray) -> ActionChunkPlan:
    """Greedy decode of one observation frame ((H, W, 3) uint8)."""
    cfg = agent.cfg
    if observation.shape != (*cfg.frame_hw, 3):
        raise ValueError(f"expected a {cfg.frame_hw} frame, got {observation.shape}")
    with torch.no_grad():
        logits = agent(frames_to_tensor(observation[None]))
    ids = logits.argmax(dim=-1)[0]  # (plan_len, 2)
    tokens = [(KEY_VOCAB[int(k)], MOUSE_VOCAB[int(mo)]) for k, mo in ids]
    return ActionChunkPlan(tokens, cfg.horizon_s, cfg.rate_hz)


def agent_drive(session, agent: BehaviorCloner, n_chunks: int) -> dict:
    """Closed loop: plan from the latest frame, spend the plan chunk by
    chunk, re-plan when it runs dry. Returns every plan made, the actions
    streamed, and the frames that came back."""
    record = {"plans": [], "actions": [], "frames": []}
    chunk_len = session.student.cfg.chunk_len
    queue = []
    obs = session.primer[-1]
    for _ in range(n_chunks):
        while len(queue) < chunk_len:
            plan = agent_predict(agent, obs)
            record["plans"].append(plan)
            queue.extend(plan_to_actions(plan, session.config.fps))
        acts, queue = queue[:chunk_len], queue[chunk_len:]
        frames = stream_chunk(session, acts)
        obs = frames[-1]
        record["actions"].append(acts)
        record["frames"].append(frames)
    return record
