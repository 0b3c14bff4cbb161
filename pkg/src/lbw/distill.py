"""Few-step student distillation: distribution matching plus an adversarial term.

The student is a single causal network initialized from the teacher's
high-noise expert. Each outer step it free-runs H chunks with its rolling
cache (self rollout) so training sees the same drift it will face when
streaming; gradients flow only through the most recent K generations, the
rest of the rollout runs grad-free and the cache is detached at the window
boundary.

Two score estimators steer it. A frozen copy of the adapted teacher scores
the real distribution; a trainable copy tracks the student's own output
distribution and is refreshed r times per student update (two-timescale
rule). Both are read in noise space: with x0 nets, mu = eps_from_x0(...),
otherwise the stop-gradient surrogate below would push the student away
from the data. The student objective adds a small softplus adversarial term
from a scalar head on the fake score's mid-layer features; that head is the
only thing its loss trains.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from lbw.diffusion import TARGET_TS, TrainLog, add_noise, eps_from_x0, sample_chunk, sample_windows
from lbw.model import KVCache, ModelConfig, TwoExpertModel, WorldModel

log = logging.getLogger("lbw.distill")


@dataclass
class DistillConfig:
    steps: int = 200
    horizon: int = 3  # H chunks generated per rollout
    k_truncate: int = 2  # gradient window K, 1 <= K <= H
    context_chunks: int = 1
    r_fake: int = 5  # fake-score updates per student update
    lambda_adv: float = 0.05
    lr_student: float = 5e-5
    lr_fake: float = 1e-4
    lr_head: float = 1e-4
    batch: int = 1
    ts: tuple = TARGET_TS  # sampling grid, also the noising-t pool
    anneal_at: int = 0  # outer step after which rollouts go single-step (0 = never)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k_truncate <= self.horizon:
            raise ValueError("need 1 <= k_truncate <= horizon")
        if self.r_fake < 1:
            raise ValueError("r_fake must be >= 1")

    def ts_at(self, step: int) -> tuple:
        if self.anneal_at and step >= self.anneal_at:
            return (1.0,)
        return self.ts


def init_student(teacher: TwoExpertModel) -> WorldModel:
    """Student starts as a copy of the high-noise expert."""
    student = WorldModel(teacher.cfg)
    student.load_state_dict(copy.deepcopy(teacher.high.state_dict()))
    return student


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# losses


def dmd_loss(x_tilde: torch.Tensor, mu_real: torch.Tensor, mu_fake: torch.Tensor) -> torch.Tensor:
    """L = 1/2 || x~ - sg[x~ - (mu_real - mu_fake)] ||^2, per-sample sum,
    batch mean. d L / d x~ is exactly (mu_real - mu_fake) / batch."""
    target = (x_tilde - (mu_real - mu_fake)).detach()
    per_sample = 0.5 * ((x_tilde - target) ** 2).flatten(1).sum(dim=1)
    return per_sample.mean()


def gan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Generator term: E[softplus(1 - D(fake))]."""
    return F.softplus(1.0 - d_fake).mean()


def gan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Critic term: E_real[softplus(D(real))] - E_fake[softplus(1 - D(fake))].
    No R1/R2 style penalties, the graph holds just these two terms."""
    return F.softplus(d_real).mean() - F.softplus(1.0 - d_fake).mean()


class DiscHead(nn.Module):
    """Scalar critic on mean-pooled mid-layer score features."""

    def __init__(self, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(width),
            nn.Linear(width, width),
            nn.SiLU(),
            nn.Linear(width, 1),
        )

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        # (B, T, S, C) -> (B,)
        return self.net(hidden.mean(dim=(1, 2))).squeeze(-1)


def score_eps(model: TwoExpertModel, x_t, t_value: float, actions, plucker, text=None):
    """Noise-space score read at one shared timestep."""
    t_frames = torch.full(x_t.shape[:2], t_value)
    x0_hat = model.route(t_value)(x_t, t_frames, actions, plucker, causal=False, text=text)
    return eps_from_x0(x_t, x0_hat, t_frames)


# ---------------------------------------------------------------------------
# rollout


def student_generate(student: WorldModel, cache: KVCache, actions, plucker, frame_offset: int,
                     gen: torch.Generator, ts=TARGET_TS, text=None) -> torch.Tensor:
    """One autoregressive chunk: few-step sample against the cache, then a
    t=0 commit so later chunks attend to it. actions/plucker cover exactly
    this chunk's frames."""
    cfg = student.cfg
    if cache.chunks and cache.chunks[0][0][0].shape[-1] != cfg.width // cfg.heads:
        raise ValueError("cache width mismatch")
    b = actions.shape[0]
    shape = (b, cfg.chunk_len, 3, *cfg.frame_hw)

    def predict(x, t):
        t_frames = torch.full(x.shape[:2], t)
        return student(x, t_frames, actions, plucker, causal=True, cache=cache,
                       frame_offset=frame_offset, text=text)

    chunk = sample_chunk(predict, shape, gen, ts=ts)
    student(
        chunk,
        torch.zeros(b, cfg.chunk_len),
        actions,
        plucker,
        causal=True,
        cache=cache,
        frame_offset=frame_offset,
        append_cache=True,
        text=text,
    )
    return chunk


@dataclass
class RolloutBuffer:
    """Self-rollout output: generated chunks with their conditioning; only
    the most recent k_truncate chunks carry autograd graphs."""

    chunks: list  # each (B, chunk_len, 3, H, W)
    actions: torch.Tensor  # (B, H*chunk_len, 6) over the generated span
    plucker: torch.Tensor
    first_frame: int  # absolute index of the first generated frame
    text: torch.Tensor | None = None  # (B, L) hashed prompt tokens

    @property
    def grad_flags(self) -> tuple:
        return tuple(c.requires_grad for c in self.chunks)

    def kept(self, k: int):
        """(x_tilde, actions, plucker) for the last k chunks."""
        cl = self.chunks[0].shape[1]
        x = torch.cat(self.chunks[-k:], dim=1)
        return x, self.actions[:, -k * cl :], self.plucker[:, -k * cl :]


def self_rollout(student: WorldModel, ctx_x0, actions, plucker, cfg: DistillConfig,
                 gen: torch.Generator, ts=None, text=None) -> RolloutBuffer:
    """Context-conditioned free run of `horizon` chunks.

    ctx_x0 holds clean context frames, committed at t=0; actions/plucker
    cover context plus horizon. Chunks before the gradient window are
    generated grad-free and the cache is detached at the boundary, so
    exactly min(K, H) chunks carry graphs.
    """
    ts = cfg.ts if ts is None else ts
    cl = student.cfg.chunk_len
    n_ctx = ctx_x0.shape[1] // cl
    cache = student.new_cache()
    with torch.no_grad():
        for ci in range(n_ctx):
            sl = slice(ci * cl, (ci + 1) * cl)
            student(
                ctx_x0[:, sl],
                torch.zeros(ctx_x0.shape[0], cl),
                actions[:, sl],
                plucker[:, sl],
                causal=True,
                cache=cache,
                frame_offset=ci * cl,
                append_cache=True,
                text=text,
            )

    chunks = []
    for h in range(cfg.horizon):
        live = h >= cfg.horizon - cfg.k_truncate
        if h == cfg.horizon - cfg.k_truncate:
            cache.detach_older_than(0)
        ci = n_ctx + h
        sl = slice(ci * cl, (ci + 1) * cl)
        with torch.set_grad_enabled(live):
            chunks.append(
                student_generate(student, cache, actions[:, sl], plucker[:, sl], ci * cl, gen,
                                 ts=ts, text=text)
            )

    span = slice(n_ctx * cl, (n_ctx + cfg.horizon) * cl)
    return RolloutBuffer(chunks, actions[:, span], plucker[:, span], n_ctx * cl, text)


# ---------------------------------------------------------------------------
# training


@dataclass
class DistillState:
    student: WorldModel
    real_score: TwoExpertModel  # frozen
    fake_score: TwoExpertModel
    head: DiscHead
    opt_student: torch.optim.Optimizer
    opt_fake: torch.optim.Optimizer
    opt_head: torch.optim.Optimizer
    n_student_updates: int = 0
    n_fake_updates: int = 0
    n_head_updates: int = 0


def make_distill_state(teacher: TwoExpertModel, cfg: DistillConfig) -> DistillState:
    student = init_student(teacher)
    real_score = copy.deepcopy(teacher)
    real_score.requires_grad_(False)
    real_score.eval()
    fake_score = copy.deepcopy(teacher)
    head = DiscHead(teacher.cfg.width)
    return DistillState(
        student,
        real_score,
        fake_score,
        head,
        torch.optim.Adam(student.parameters(), lr=cfg.lr_student),
        torch.optim.Adam(fake_score.parameters(), lr=cfg.lr_fake),
        torch.optim.Adam(head.parameters(), lr=cfg.lr_head),
    )


def _draw_t(cfg: DistillConfig, gen: torch.Generator) -> float:
    return cfg.ts[int(torch.randint(len(cfg.ts), (1,), generator=gen))]


def student_update(state: DistillState, buffer: RolloutBuffer, cfg: DistillConfig,
                   gen: torch.Generator) -> dict:
    """Distribution-matching plus adversarial gradient, into the student only."""
    x_tilde, a, p = buffer.kept(cfg.k_truncate)
    txt = buffer.text
    t = _draw_t(cfg, gen)
    t_frames = torch.full(x_tilde.shape[:2], t)
    eps = torch.randn(x_tilde.shape, generator=gen)
    x_t = add_noise(x_tilde, t_frames, eps)
    with torch.no_grad():
        mu_real = score_eps(state.real_score, x_t.detach(), t, a, p, text=txt)
        mu_fake = score_eps(state.fake_score, x_t.detach(), t, a, p, text=txt)
    loss_dmd = dmd_loss(x_tilde, mu_real, mu_fake)

    # adversarial pass runs with fake net and head frozen: gradient reaches
    # the student through x_t but never their parameters
    state.fake_score.requires_grad_(False)
    state.head.requires_grad_(False)
    _, hidden = state.fake_score.route(t)(x_t, t_frames, a, p, causal=False, text=txt,
                                          return_hidden=True)
    loss_g = gan_g_loss(state.head(hidden))

    loss = loss_dmd + cfg.lambda_adv * loss_g
    state.opt_student.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_student.step()
    state.fake_score.requires_grad_(True)
    state.head.requires_grad_(True)
    state.n_student_updates += 1
    return {"dmd": loss_dmd.item(), "g": loss_g.item()}


def fake_score_step(state: DistillState, x_tilde, actions, plucker, cfg: DistillConfig,
                    gen: torch.Generator, text=None) -> dict:
    """Standard denoising loss on student samples; trains the fake score only."""
    x_tilde = x_tilde.detach()
    t = _draw_t(cfg, gen)
    t_frames = torch.full(x_tilde.shape[:2], t)
    eps = torch.randn(x_tilde.shape, generator=gen)
    x_t = add_noise(x_tilde, t_frames, eps)
    pred = state.fake_score.route(t)(x_t, t_frames, actions, plucker, causal=False, text=text)
    loss = ((pred - x_tilde) ** 2).mean()
    state.opt_fake.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_fake.step()
    state.n_fake_updates += 1
    return {"fake": loss.item()}


def head_step(state: DistillState, x_real, x_fake, actions, plucker, cfg: DistillConfig,
              gen: torch.Generator, text=None) -> dict:
    """Critic update. Features come out of the fake score under no_grad, so
    the loss can only move the head."""
    t = _draw_t(cfg, gen)
    t_frames = torch.full(x_fake.shape[:2], t)
    expert = state.fake_score.route(t)
    with torch.no_grad():
        x_t_real = add_noise(x_real, t_frames, torch.randn(x_real.shape, generator=gen))
        x_t_fake = add_noise(x_fake.detach(), t_frames, torch.randn(x_fake.shape, generator=gen))
        _, h_real = expert(x_t_real, t_frames, actions, plucker, causal=False, text=text,
                           return_hidden=True)
        _, h_fake = expert(x_t_fake, t_frames, actions, plucker, causal=False, text=text,
                           return_hidden=True)
    loss = gan_d_loss(state.head(h_real), state.head(h_fake))
    state.opt_head.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_head.step()
    state.n_head_updates += 1
    return {"d": loss.item()}


def self_rollout_train_step(state: DistillState, clips, cfg: DistillConfig, gen: torch.Generator,
                            step: int = 0) -> dict:
    """One outer step: rollout, student update, r fake updates, one head update."""
    cl = state.student.cfg.chunk_len
    total = (cfg.context_chunks + cfg.horizon) * cl
    x0, actions, plucker, text = sample_windows(clips, total, cfg.batch, gen)
    ctx = x0[:, : cfg.context_chunks * cl]
    buffer = self_rollout(state.student, ctx, actions, plucker, cfg, gen, ts=cfg.ts_at(step), text=text)

    stats = student_update(state, buffer, cfg, gen)
    x_fake, a, p = buffer.kept(cfg.k_truncate)
    x_fake = x_fake.detach()
    for _ in range(cfg.r_fake):
        stats.update(fake_score_step(state, x_fake, a, p, cfg, gen, text=text))
    x_real = x0[:, -x_fake.shape[1] :]
    stats.update(head_step(state, x_real, x_fake, a, p, cfg, gen, text=text))
    return stats


def train_distill(teacher: TwoExpertModel, clips, cfg: DistillConfig) -> tuple[WorldModel, TrainLog]:
    gen = torch.Generator().manual_seed(cfg.seed)
    state = make_distill_state(teacher, cfg)
    history = TrainLog()
    t0 = time.time()
    for step in range(cfg.steps):
        stats = self_rollout_train_step(state, clips, cfg, gen, step=step)
        history.add(step=step, loss=stats["dmd"], **stats)
    if state.n_fake_updates != cfg.r_fake * state.n_student_updates:
        raise RuntimeError(
            f"update ratio broke: {state.n_fake_updates} fake vs {state.n_student_updates} student"
        )
    log.info("distilled %d steps in %.1fs", cfg.steps, time.time() - t0)
    return state.student, history
