"""Rectified-flow training: bidirectional pretrain, action finetune, causal adaptation.

The forward process is linear: x_t = (1 - t) x0 + t eps with t in [0, 1],
and the model predicts x0. Per-chunk independent timesteps (with a clean
fraction held at t = 0) let any prefix act as context for any noise level,
which is what makes the later switch to chunk-causal attention and cached
streaming work. Timesteps are warped toward the noisy end by the flow shift
t = s u / (1 + (s - 1) u); training walks a curriculum of longer windows
with stronger shift.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from lbw import world as w
from lbw.geometry import plucker_embed
from lbw.model import (
    TEXT_PAD,
    ModelConfig,
    TwoExpertModel,
    WorldModel,
    actions_to_tensor,
    encode_text,
    frames_to_tensor,
)

log = logging.getLogger("lbw.train")

TARGET_TS = (1.0, 0.75, 0.5, 0.25)  # few-step sampling grid
P_CLEAN = 0.2

# (chunks per window, flow shift): short windows first, then longer with
# noisier timestep emphasis
CURRICULUM = ((2, 3.0), (4, 5.0), (8, 8.0))


def shift_time(u, s: float):
    """Warp uniform u toward t = 1 with flow shift s."""
    return s * u / (1.0 + (s - 1.0) * u)


def add_noise(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """x_t = (1 - t) x0 + t eps; t is per-frame (B, T)."""
    tt = t.view(*t.shape, 1, 1, 1)
    return (1.0 - tt) * x0 + tt * eps


def eps_from_x0(x_t: torch.Tensor, x0_hat: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Invert the flow at t > 0: the noise consistent with (x_t, x0_hat)."""
    tt = t.view(*t.shape, 1, 1, 1)
    return (x_t - (1.0 - tt) * x0_hat) / tt


def sample_chunk_timesteps(gen: torch.Generator, batch: int, n_chunks: int, shift: float,
                           p_clean: float = P_CLEAN) -> torch.Tensor:
    """Independent per-chunk timesteps, a p_clean fraction pinned at zero."""
    u = torch.rand(batch, n_chunks, generator=gen)
    t = shift_time(u, shift)
    clean = torch.rand(batch, n_chunks, generator=gen) < p_clean
    return torch.where(clean, torch.zeros_like(t), t)


def expand_to_frames(t_chunk: torch.Tensor, chunk_len: int) -> torch.Tensor:
    return t_chunk.repeat_interleave(chunk_len, dim=-1)


# ---------------------------------------------------------------------------
# clip tensors


def _no_text():
    return torch.zeros(0, dtype=torch.int64)


@dataclass
class ClipTensors:
    """Per-clip training arrays: frames in [-1, 1], action features, ray maps,
    hashed prompt tokens."""

    frames: torch.Tensor  # (T, 3, H, W)
    actions: torch.Tensor  # (T, 6)
    plucker: torch.Tensor  # (T, 6, H, W)
    clip_id: str = ""
    text: torch.Tensor = field(default_factory=_no_text)  # (L,) int64

    def __len__(self):
        return self.frames.shape[0]


def clip_to_tensors(clip, text_vocab: int = ModelConfig.text_vocab) -> ClipTensors:
    from lbw.data_engine import vec_to_pose

    frames = frames_to_tensor(clip.frames)
    actions = actions_to_tensor(clip.actions)
    h, wd = clip.height, clip.width
    maps = np.stack(
        [plucker_embed(vec_to_pose(clip.poses[i], clip.intrinsics), h, wd) for i in range(clip.n_frames)]
    )
    plucker = torch.from_numpy(maps).float().permute(0, 3, 1, 2)
    # the static scene caption is the prompt: it names attributes like the
    # sky that text swaps should steer, and no camera-motion words
    text = encode_text(clip.captions.get("scene", ""), text_vocab)[0]
    return ClipTensors(frames, actions, plucker, clip.clip_id, text)


def pad_text_rows(rows) -> torch.Tensor:
    """Stack variable-length (L,) token rows into (B, Lmax) with TEXT_PAD."""
    width = max((r.shape[0] for r in rows), default=0)
    out = torch.full((len(rows), width), TEXT_PAD, dtype=torch.int64)
    for i, r in enumerate(rows):
        out[i, : r.shape[0]] = r
    return out


def sample_windows(clips, n_frames: int, batch: int, gen: torch.Generator):
    """Random same-length windows across clips; chunk ids are window-relative."""
    xs, acts, plks, txts = [], [], [], []
    eligible = [c for c in clips if len(c) >= n_frames]
    if not eligible:
        raise ValueError(f"no clip is {n_frames} frames long")
    for _ in range(batch):
        c = eligible[int(torch.randint(len(eligible), (1,), generator=gen))]
        max_start = len(c) - n_frames
        start = int(torch.randint(max_start + 1, (1,), generator=gen))
        xs.append(c.frames[start : start + n_frames])
        acts.append(c.actions[start : start + n_frames])
        plks.append(c.plucker[start : start + n_frames])
        txts.append(c.text)
    return torch.stack(xs), torch.stack(acts), torch.stack(plks), pad_text_rows(txts)


# ---------------------------------------------------------------------------
# losses


def diffusion_loss(model, x0, actions, plucker, t_frames, gen, *, causal: bool, text=None):
    """Denoising MSE under per-chunk timesteps; returns (loss, per-sample)."""
    eps = torch.randn(x0.shape, generator=gen)
    x_t = add_noise(x0, t_frames, eps)
    pred = model(x_t, t_frames, actions, plucker, causal=causal, text=text)
    per_sample = ((pred - x0) ** 2).flatten(1).mean(dim=1)
    return per_sample.mean(), per_sample


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)

    def add(self, **kv):
        self.steps.append(kv)
        if log.isEnabledFor(logging.INFO) and (len(self.steps) % 50 == 1 or kv.get("final")):
            msg = " ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in kv.items())
            log.info(msg)

    def losses(self):
        return [s["loss"] for s in self.steps if "loss" in s]


def _phase_for_step(step: int, total: int, phases):
    """Equal-thirds curriculum split over the training budget."""
    edge = max(1, total // len(phases))
    return phases[min(step // edge, len(phases) - 1)]


def train_teacher(
    model: TwoExpertModel,
    clips,
    steps: int,
    lr: float = 3e-4,
    batch: int = 2,
    seed: int = 0,
    phases=CURRICULUM,
    use_actions: bool = False,
) -> TrainLog:
    """Bidirectional diffusion-forcing pretrain of both experts.

    Action adapters stay out of the optimizer, so the action pathway remains
    an exact no-op after any number of steps (use_actions=False) and the
    backbone can later be frozen while only adapters learn.
    """
    gen = torch.Generator().manual_seed(seed)
    params = list(model.high.backbone_parameters()) + list(model.low.backbone_parameters())
    opt = torch.optim.Adam(params, lr=lr)
    history = TrainLog()
    t0 = time.time()
    for step in range(steps):
        n_chunks, shift = _phase_for_step(step, steps, phases)
        n_frames = n_chunks * model.cfg.chunk_len
        x0, acts, plk, txt = sample_windows(clips, n_frames, batch, gen)
        t_frames = expand_to_frames(sample_chunk_timesteps(gen, batch, n_chunks, shift), model.cfg.chunk_len)
        if use_actions:
            loss, _ = diffusion_loss(model, x0, acts, plk, t_frames, gen, causal=False, text=txt)
        else:
            loss, _ = diffusion_loss(model, x0, None, None, t_frames, gen, causal=False, text=txt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.add(step=step, loss=loss.item(), chunks=n_chunks, shift=shift)
    history.add(step=steps, loss=loss.item(), seconds=time.time() - t0, final=True)
    return history


def action_finetune(
    model: TwoExpertModel,
    clips,
    steps: int,
    lr: float = 1e-3,
    batch: int = 2,
    seed: int = 1,
    phases=CURRICULUM,
) -> TrainLog:
    """Teach the zero-initialized action pathways on a frozen backbone."""
    gen = torch.Generator().manual_seed(seed)
    params = list(model.high.action_parameters()) + list(model.low.action_parameters())
    opt = torch.optim.Adam(params, lr=lr)
    backbone_before = [p.detach().clone() for p in model.high.backbone_parameters()]
    history = TrainLog()
    for step in range(steps):
        n_chunks, shift = _phase_for_step(step, steps, phases)
        x0, acts, plk, txt = sample_windows(clips, n_chunks * model.cfg.chunk_len, batch, gen)
        t_frames = expand_to_frames(sample_chunk_timesteps(gen, batch, n_chunks, shift), model.cfg.chunk_len)
        loss, _ = diffusion_loss(model, x0, acts, plk, t_frames, gen, causal=False, text=txt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.add(step=step, loss=loss.item())
    for before, after in zip(backbone_before, model.high.backbone_parameters()):
        if not torch.equal(before, after):
            raise RuntimeError("backbone drifted during action finetune")
    return history


def causal_adapt(
    model: TwoExpertModel,
    clips,
    steps: int,
    lr: float = 1e-4,
    batch: int = 2,
    seed: int = 2,
    phases=CURRICULUM,
) -> TrainLog:
    """Swap to chunk-causal attention and keep training everything.

    Clean (t = 0) chunks double as the cached-context distribution the
    streaming sampler will feed back, so the model learns to read exactly
    what the cache will later contain.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = TrainLog()
    for step in range(steps):
        n_chunks, shift = _phase_for_step(step, steps, phases)
        x0, acts, plk, txt = sample_windows(clips, n_chunks * model.cfg.chunk_len, batch, gen)
        t_frames = expand_to_frames(sample_chunk_timesteps(gen, batch, n_chunks, shift), model.cfg.chunk_len)
        loss, _ = diffusion_loss(model, x0, acts, plk, t_frames, gen, causal=True, text=txt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.add(step=step, loss=loss.item())
    return history


# ---------------------------------------------------------------------------
# sampling


def euler_step(x: torch.Tensor, x0_hat: torch.Tensor, t: float, t_next: float) -> torch.Tensor:
    """One rectified-flow Euler update toward t_next < t."""
    if not 0.0 <= t_next < t <= 1.0:
        raise ValueError(f"need 0 <= t_next < t <= 1, got {t_next}, {t}")
    return x0_hat + (t_next / t) * (x - x0_hat)


def sample_chunk(
    predict,
    shape,
    gen: torch.Generator,
    ts=TARGET_TS,
) -> torch.Tensor:
    """Few-step chunk generation: predict(x_t, t) -> x0_hat, Euler between ts."""
    ts = list(ts)
    if ts[0] != 1.0 or any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"timestep grid must descend from 1.0, got {ts}")
    x = torch.randn(shape, generator=gen)
    for i, t in enumerate(ts):
        x0_hat = predict(x, t)
        t_next = ts[i + 1] if i + 1 < len(ts) else 0.0
        x = x0_hat if t_next == 0.0 else euler_step(x, x0_hat, t, t_next)
    return x


def expert_predict(model: TwoExpertModel, actions, plucker, *, cache_high, cache_low, frame_offset,
                   text=None):
    """Closure for sample_chunk that routes each denoise step by its timestep."""

    def predict(x, t):
        expert = model.route(t)
        cache = cache_high if expert is model.high else cache_low
        t_frames = torch.full(x.shape[:2], t)
        return expert(x, t_frames, actions, plucker, causal=True, cache=cache, frame_offset=frame_offset,
                      text=text)

    return predict
