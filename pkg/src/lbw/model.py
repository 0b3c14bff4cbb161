"""Block-causal video diffusion transformer with action conditioning.

Frames are patchified into spatial tokens; attention is bidirectional inside
a chunk (chunk_len consecutive frames) and causal across chunks, which lets
generated chunks be appended to a rolling KV cache and never revisited.
Temporal structure uses rotary embeddings on absolute frame indices (scores
depend only on index offsets, so evicting old chunks keeps the model in
distribution); spatial structure uses a learned per-patch table.

Conditioning enters four ways: denoising timestep through adaLN, keyboard
state through a parallel zero-initialized adaLN head, camera rays as
patchified Plucker maps added to the input tokens through a zero-initialized
projection, and prompt text through per-block cross-attention over hashed
bag-of-tokens embeddings. Every conditioning pathway other than the timestep
is a no-op at init (zero-initialized final layer), so adapters can be bolted
onto a pretrained backbone without disturbing it.
"""

from __future__ import annotations

import math
import re
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ACTION_DIM = 6  # W, A, S, D, yaw_delta, pitch_delta


@dataclass
class ModelConfig:
    width: int = 128
    depth: int = 4
    heads: int = 4
    patch: int = 8
    chunk_len: int = 4
    frame_hw: tuple = (32, 32)
    cache_chunks: int = 8  # rolling window M
    t_boundary: float = 0.5  # two-expert noise routing split
    rope_base: float = 10000.0
    text_vocab: int = 512  # hash buckets for prompt tokens

    @property
    def tokens_per_frame(self) -> int:
        h, w = self.frame_hw
        if h % self.patch or w % self.patch:
            raise ValueError(f"frame {h}x{w} not divisible by patch {self.patch}")
        return (h // self.patch) * (w // self.patch)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "depth": self.depth,
            "heads": self.heads,
            "patch": self.patch,
            "chunk_len": self.chunk_len,
            "frame_hw": list(self.frame_hw),
            "cache_chunks": self.cache_chunks,
            "t_boundary": self.t_boundary,
            "rope_base": self.rope_base,
            "text_vocab": self.text_vocab,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["frame_hw"] = tuple(d["frame_hw"])
        return cls(**d)


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> float32 (..., 3, H, W) in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).float() / 127.5 - 1.0
    return x.movedim(-1, -3)


def tensor_to_frames(x: torch.Tensor) -> np.ndarray:
    img = (x.movedim(-3, -1).clamp(-1.0, 1.0) + 1.0) * 127.5
    return img.round().to(torch.uint8).cpu().numpy()


TEXT_PAD = -1


def encode_text(prompts, vocab: int) -> torch.Tensor:
    """Hash prompt words into embedding-table buckets.

    Accepts one string or a list of them; returns (B, L) int64 indices
    right-padded with TEXT_PAD to the longest prompt. The hash is crc32, so
    indices are stable across processes (unlike built-in str hashing). An
    empty prompt yields a zero-length row, meaning null text conditioning.
    """
    if isinstance(prompts, str):
        prompts = [prompts]
    rows = []
    for p in prompts:
        words = re.findall(r"[a-z0-9]+", p.lower())
        rows.append([zlib.crc32(wd.encode()) % vocab for wd in words])
    width = max((len(r) for r in rows), default=0)
    out = torch.full((len(rows), width), TEXT_PAD, dtype=torch.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.int64)
    return out


def actions_to_tensor(actions) -> torch.Tensor:
    """ActionState list -> (T, 6) float32, look deltas normalized to [-1, 1]."""
    from lbw import world as w

    out = torch.zeros(len(actions), ACTION_DIM)
    for i, a in enumerate(actions):
        for bit, key in enumerate("WASD"):
            if key in a.keys:
                out[i, bit] = 1.0
        out[i, 4] = a.yaw_delta / w.MAX_YAW_STEP
        out[i, 5] = a.pitch_delta / w.MAX_PITCH_STEP
    return out


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, T, C, H, W) -> (B, T, S, C*patch*patch) with S spatial patches."""
    b, t, c, h, w = x.shape
    x = x.reshape(b, t, c, h // patch, patch, w // patch, patch)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, t, (h // patch) * (w // patch), c * patch * patch)


def unpatchify(tok: torch.Tensor, patch: int, hw) -> torch.Tensor:
    b, t, s, d = tok.shape
    h, w = hw
    c = d // (patch * patch)
    x = tok.reshape(b, t, h // patch, w // patch, c, patch, patch)
    x = x.permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, t, c, h, w)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().unsqueeze(-1) * 1000.0 * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(t.dtype if t.is_floating_point() else torch.float32)


def _rope_angles(positions: torch.Tensor, dim: int, base: float) -> torch.Tensor:
    half = dim // 2
    freqs = base ** (-torch.arange(half, dtype=torch.float64) / half)
    return positions.double().unsqueeze(-1) * freqs  # (..., half)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary embedding over the last dim; positions broadcast over heads.

    x: (B, nh, N, hd), positions: (N,) absolute frame indices.
    """
    hd = x.shape[-1]
    ang = _rope_angles(positions, hd, base).to(x.dtype)  # (N, hd/2)
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class KVCache:
    """Rolling per-chunk key/value store for every attention block.

    Chunks are appended whole and evicted whole once more than `capacity`
    are held. Entries keep whatever autograd graph they were created with;
    `detach_older_than(k)` cuts gradients flowing into all but the newest k
    chunks (gradient truncation during self-rollout training).
    """

    def __init__(self, n_blocks: int, capacity: int):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.capacity = capacity
        self.chunks = deque()  # each: list over blocks of (k, v, positions)

    def __len__(self):
        return len(self.chunks)

    @property
    def n_tokens(self) -> int:
        return sum(c[0][0].shape[-2] for c in self.chunks) if self.chunks else 0

    def frame_span(self):
        """(first, last+1) absolute frame indices currently held."""
        if not self.chunks:
            return (0, 0)
        first = int(self.chunks[0][0][2].min())
        last = int(self.chunks[-1][0][2].max())
        return (first, last + 1)

    def gather(self, block_idx: int):
        """Concatenated (K, V, positions) for one block, or None when empty."""
        if not self.chunks:
            return None
        ks, vs, ps = zip(*(c[block_idx] for c in self.chunks))
        return torch.cat(ks, dim=-2), torch.cat(vs, dim=-2), torch.cat(ps, dim=-1)

    def push_chunk(self, block_kvs) -> None:
        self.chunks.append(block_kvs)
        while len(self.chunks) > self.capacity:
            self.chunks.popleft()

    def detach_older_than(self, keep: int) -> None:
        for ci in range(len(self.chunks) - keep):
            self.chunks[ci] = [(k.detach(), v.detach(), p) for k, v, p in self.chunks[ci]]

    def clone_detached(self) -> "KVCache":
        out = KVCache(n_blocks=0, capacity=self.capacity)
        for chunk in self.chunks:
            out.chunks.append([(k.detach().clone(), v.detach().clone(), p.clone()) for k, v, p in chunk])
        return out


def modulate(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale) + shift


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.width
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(c, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(c, elementwise_affine=False)
        self.qkv = nn.Linear(c, 3 * c)
        self.proj = nn.Linear(c, c)
        self.cross_norm = nn.LayerNorm(c, elementwise_affine=False)
        self.cross_q = nn.Linear(c, c)
        self.cross_kv = nn.Linear(c, 2 * c)
        self.cross_out = nn.Linear(c, c)
        self.mlp = nn.Sequential(nn.Linear(c, 4 * c), nn.GELU(), nn.Linear(4 * c, c))
        self.ada_t = nn.Linear(c, 6 * c)
        self.ada_action = nn.Linear(c, 6 * c)
        nn.init.zeros_(self.ada_t.weight)
        nn.init.zeros_(self.ada_t.bias)
        nn.init.zeros_(self.ada_action.weight)
        nn.init.zeros_(self.ada_action.bias)
        nn.init.zeros_(self.cross_out.weight)
        nn.init.zeros_(self.cross_out.bias)

    def forward(self, x, cond_t, cond_a, positions, mask, cache_entry, collect, text=None):
        """x: (B, T, S, C); cond_*: (B, T, C); positions: (T,) frame indices.

        cache_entry: optional (K, V, pos) of past tokens; collect: list to
        receive this forward's (k, v, pos) for cache appends; text: optional
        (embeddings (B, L, C), keep-mask (B, L)) for prompt cross-attention.
        """
        cfg = self.cfg
        b, t, s, c = x.shape
        nh, hd = cfg.heads, c // cfg.heads

        ada = self.ada_t(F.silu(cond_t))
        if cond_a is not None:
            ada = ada + self.ada_action(F.silu(cond_a))
        sc1, sh1, g1, sc2, sh2, g2 = ada.unsqueeze(2).chunk(6, dim=-1)  # (B, T, 1, C)

        h = modulate(self.norm1(x), sc1, sh1).reshape(b, t * s, c)
        q, k, v = self.qkv(h).chunk(3, dim=-1)

        def heads(z):
            return z.reshape(b, t * s, nh, hd).transpose(1, 2)  # (B, nh, N, hd)

        q, k, v = heads(q), heads(k), heads(v)
        tok_pos = positions.repeat_interleave(s)  # (T*S,)
        q = apply_rope(q, tok_pos, cfg.rope_base)
        k = apply_rope(k, tok_pos, cfg.rope_base)
        if collect is not None:
            collect.append((k, v, tok_pos))

        if cache_entry is not None:
            pk, pv, _ = cache_entry
            k = torch.cat([pk, k], dim=-2)
            v = torch.cat([pv, v], dim=-2)
            if mask is not None:
                past = torch.ones(mask.shape[0], pk.shape[-2], dtype=torch.bool, device=mask.device)
                mask = torch.cat([past, mask], dim=-1)

        attn = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        attn = attn.transpose(1, 2).reshape(b, t, s, c)
        x = x + g1 * self.proj(attn.reshape(b, t * s, c)).reshape(b, t, s, c)
        if text is not None:
            x = x + self._cross_attend(x, text)
        x = x + g2 * self.mlp(modulate(self.norm2(x), sc2, sh2))
        return x

    def _cross_attend(self, x, text):
        """Every video token attends over the prompt tokens (no positions)."""
        emb, keep = text
        b, t, s, c = x.shape
        nh, hd = self.cfg.heads, c // self.cfg.heads
        q = self.cross_q(self.cross_norm(x).reshape(b, t * s, c))
        k, v = self.cross_kv(emb).chunk(2, dim=-1)
        q = q.reshape(b, t * s, nh, hd).transpose(1, 2)
        k = k.reshape(b, -1, nh, hd).transpose(1, 2)
        v = v.reshape(b, -1, nh, hd).transpose(1, 2)
        # a row with no prompt gets a dummy all-true mask, then its output is
        # zeroed; feeding an all-masked row to attention would produce nans
        has = keep.any(dim=-1)
        safe = torch.where(has.view(b, 1), keep, torch.ones_like(keep))
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=safe.view(b, 1, 1, -1))
        proj = self.cross_out(out.transpose(1, 2).reshape(b, t * s, c)).reshape(b, t, s, c)
        return proj * has.view(b, 1, 1, 1)


class WorldModel(nn.Module):
    """One expert: patch projection, conditioned blocks, zero-init output head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.width
        p = cfg.patch
        self.in_proj = nn.Linear(3 * p * p, c)
        self.spatial_pos = nn.Parameter(torch.randn(1, 1, cfg.tokens_per_frame, c) * 0.02)
        self.t_mlp = nn.Sequential(nn.Linear(c, c), nn.SiLU(), nn.Linear(c, c))
        # action pathways; exactly one zero layer each so they start as no-ops
        # yet still receive gradient
        self.action_key_mlp = nn.Sequential(nn.Linear(ACTION_DIM, c), nn.SiLU(), nn.Linear(c, c))
        self.action_plucker_proj = nn.Linear(6 * p * p, c)
        nn.init.zeros_(self.action_plucker_proj.weight)
        nn.init.zeros_(self.action_plucker_proj.bias)
        self.text_embed = nn.Embedding(cfg.text_vocab, c)
        nn.init.normal_(self.text_embed.weight, std=0.02)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.out_norm = nn.LayerNorm(c, elementwise_affine=False)
        self.ada_out = nn.Linear(c, 2 * c)
        self.out_proj = nn.Linear(c, 3 * p * p)
        nn.init.zeros_(self.ada_out.weight)
        nn.init.zeros_(self.ada_out.bias)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    # -- parameter groups ---------------------------------------------------

    def action_parameters(self):
        for name, p in self.named_parameters():
            if "action_" in name or ".ada_action" in name:
                yield p

    def backbone_parameters(self):
        action = {id(p) for p in self.action_parameters()}
        for p in self.parameters():
            if id(p) not in action:
                yield p

    # -- attention mask -----------------------------------------------------

    def _chunk_mask(self, t_frames: int, s: int, frame_offset: int, causal: bool):
        if not causal:
            return None
        idx = torch.arange(t_frames) + frame_offset
        cid = torch.div(idx, self.cfg.chunk_len, rounding_mode="floor")
        cid = cid.repeat_interleave(s)
        return cid.unsqueeze(-1) >= cid.unsqueeze(0)  # query chunk >= key chunk

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        actions: torch.Tensor | None = None,
        plucker: torch.Tensor | None = None,
        *,
        text: torch.Tensor | None = None,
        causal: bool = True,
        cache: KVCache | None = None,
        frame_offset: int = 0,
        append_cache: bool = False,
        return_hidden: bool = False,
    ) -> torch.Tensor:
        """Predict the clean chunk x0 from noisy frames.

        x: (B, T, 3, H, W); t: per-frame timesteps (B, T) in [0, 1];
        actions: (B, T, 6); plucker: (B, T, 6, H, W); text: hashed prompt
        indices (B, L) padded with TEXT_PAD (None or zero-length L means no
        text conditioning); frame_offset: absolute index of x's first frame
        (for rotary phases and chunk ids). return_hidden also yields the
        mid-stack activations (B, T, S, C), the feature tap used by the
        adversarial head during distillation.
        """
        cfg = self.cfg
        b, t_frames = x.shape[:2]
        if t.shape != (b, t_frames):
            raise ValueError(f"t must be per-frame (B, T), got {tuple(t.shape)}")
        if cache is not None and frame_offset % cfg.chunk_len:
            raise ValueError("cached generation must start on a chunk boundary")

        tok = self.in_proj(patchify(x, cfg.patch)) + self.spatial_pos
        if plucker is not None:
            tok = tok + self.action_plucker_proj(patchify(plucker, cfg.patch))
        s = tok.shape[2]

        # conditioning follows the activation dtype, not t's (samplers pass f32)
        cond_t = self.t_mlp(timestep_embedding(t, cfg.width).to(tok.dtype))
        cond_a = self.action_key_mlp(actions) if actions is not None else None
        text_kv = None
        if text is not None and text.shape[-1] > 0:
            text_kv = (self.text_embed(text.clamp_min(0)), text >= 0)

        positions = torch.arange(t_frames) + frame_offset
        mask = self._chunk_mask(t_frames, s, frame_offset, causal)
        collected = [] if append_cache else None

        h = tok
        hidden = None
        mid = (len(self.blocks) - 1) // 2
        for bi, block in enumerate(self.blocks):
            entry = cache.gather(bi) if cache is not None else None
            col = [] if append_cache else None
            h = block(h, cond_t, cond_a, positions, mask, entry, col, text_kv)
            if bi == mid:
                hidden = h
            if append_cache:
                collected.append(col[0])
        if append_cache and cache is not None:
            cache.push_chunk(collected)

        out_cond = cond_t if cond_a is None else cond_t + cond_a
        sc, sh = self.ada_out(F.silu(out_cond)).unsqueeze(2).chunk(2, dim=-1)
        out = self.out_proj(modulate(self.out_norm(h), sc, sh))
        out = unpatchify(out, cfg.patch, cfg.frame_hw)
        if return_hidden:
            return out, hidden
        return out

    def new_cache(self) -> KVCache:
        return KVCache(self.cfg.depth, self.cfg.cache_chunks)


class TwoExpertModel(nn.Module):
    """High-noise / low-noise expert pair routed on the chunk timestep.

    Both experts are full copies of the backbone. A chunk is served by the
    high-noise expert iff its timestep >= t_boundary (ties go high).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.high = WorldModel(cfg)
        self.low = WorldModel(cfg)

    def route(self, t: float) -> WorldModel:
        return self.high if t >= self.cfg.t_boundary else self.low

    def route_name(self, t: float) -> str:
        return "high" if t >= self.cfg.t_boundary else "low"

    def forward(self, x, t, actions=None, plucker=None, **kw):
        """Mixture forward for training: each expert predicts every frame;
        outputs are gathered per frame by its own timestep."""
        hi = self.high(x, t, actions, plucker, **kw)
        lo = self.low(x, t, actions, plucker, **kw)
        pick_hi = (t >= self.cfg.t_boundary).view(*t.shape, 1, 1, 1)
        return torch.where(pick_hi, hi, lo)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
