"""Command line front door.

`lbw data` makes and inspects shards, `lbw train` runs the three training
phases, `lbw serve` hosts a session, `lbw agent` clones and drives the
policy, `lbw ckpt init` mints a fresh untrained checkpoint and `lbw rig`
runs the recorded regression rigs. Training configs are flat key=value
text files (# comments allowed); every training run writes a line-
delimited JSON metrics log (step, loss, phase, ...) next to the output
checkpoint. The LBW_LOG environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from lbw import data_engine as de
from lbw.checkpoint import load_module, save_checkpoint
from lbw.model import ModelConfig, TwoExpertModel


def setup_logging() -> None:
    level = os.environ.get("LBW_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


# ---------------------------------------------------------------------------
# flat key=value configs


def parse_value(s: str):
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    if "," in s:
        return tuple(parse_value(p.strip()) for p in s.split(",") if p.strip())
    return s


def parse_config(path) -> dict:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = parse_value(val.strip())
    return out


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}


def split_model_config(conf: dict):
    """Split a flat config into ModelConfig kwargs and everything else."""
    mc = {}
    rest = {}
    for k, v in conf.items():
        if k in _MODEL_KEYS:
            mc[k] = tuple(v) if k == "frame_hw" else v
        else:
            rest[k] = v
    return ModelConfig(**mc), rest


def write_metrics(path, rows, phase: str, mode: str = "w") -> None:
    with open(path, mode) as fh:
        for row in rows:
            fh.write(json.dumps({"phase": phase, **row}, sort_keys=True) + "\n")


def load_shards(shards):
    """Clips from a shard file or every *.lbw1 under a directory."""
    p = Path(shards)
    paths = sorted(p.glob("*.lbw1")) if p.is_dir() else [p]
    if not paths:
        raise FileNotFoundError(f"no shards under {shards}")
    clips = []
    for sp in paths:
        clips.extend(de.read_shard(sp))
    return clips


# ---------------------------------------------------------------------------
# subcommands


def cmd_data_gen(args) -> int:
    if args.trajectory_kind:
        clips, seed = [], args.seed
        while len(clips) < args.clips:
            c = de.generate_clip(seed * 100003 + len(clips) + seed, args.height, args.width)
            seed += 1
            if c.kind != args.trajectory_kind or not de.filter_clip(c)[0]:
                continue
            clips.append(c)
        de.write_shard(args.out, clips)
        summary = {"path": args.out, "clips": len(clips), "kinds": {args.trajectory_kind: len(clips)}}
    else:
        summary = de.make_dataset(args.out, args.clips, args.seed, args.height, args.width)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_data_profile(args) -> int:
    out = de.profile_shard(args.shard) if args.shard else de.profile_render(args.frames)
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_data_caption(args) -> int:
    for clip in de.read_shard(args.shard):
        print(json.dumps({"clip_id": clip.clip_id, **clip.captions}, sort_keys=True))
    return 0


def cmd_train_teacher(args) -> int:
    from lbw.diffusion import action_finetune, train_teacher

    conf = parse_config(args.config) if args.config else {}
    mcfg, rest = split_model_config(conf)
    clips_raw = load_shards(args.shards)
    from lbw.diffusion import clip_to_tensors

    clips = [clip_to_tensors(c, mcfg.text_vocab) for c in clips_raw]
    model = TwoExpertModel(mcfg)
    steps = int(rest.get("steps", 500))
    ft_steps = int(rest.get("finetune_steps", max(1, steps // 2)))
    pre = train_teacher(model, clips, steps, lr=rest.get("lr", 3e-4),
                        batch=int(rest.get("batch", 2)), seed=int(rest.get("seed", 0)))
    ft = action_finetune(model, clips, ft_steps, lr=rest.get("finetune_lr", 1e-3),
                         batch=int(rest.get("batch", 2)))
    save_checkpoint(args.out, model, "teacher", mcfg, step=steps + ft_steps)
    metrics = args.log or f"{args.out}.metrics.jsonl"
    write_metrics(metrics, pre.steps, "pretrain")
    write_metrics(metrics, ft.steps, "action_finetune", mode="a")
    print(json.dumps({"ckpt": str(args.out), "metrics": metrics,
                      "loss": pre.losses()[-1], "finetune_loss": ft.losses()[-1]}))
    return 0


def cmd_train_adapt(args) -> int:
    from lbw.diffusion import causal_adapt, clip_to_tensors

    conf = parse_config(args.config) if args.config else {}
    model, meta = load_module(args.teacher, expect_kind="teacher")
    clips = [clip_to_tensors(c, model.cfg.text_vocab) for c in load_shards(args.shards)]
    steps = int(conf.get("steps", 300))
    hist = causal_adapt(model, clips, steps, lr=conf.get("lr", 1e-4),
                        batch=int(conf.get("batch", 2)), seed=int(conf.get("seed", 2)))
    save_checkpoint(args.out, model, "adapted", model.cfg, step=meta["step"] + steps)
    metrics = args.log or f"{args.out}.metrics.jsonl"
    write_metrics(metrics, hist.steps, "causal_adapt")
    print(json.dumps({"ckpt": str(args.out), "metrics": metrics, "loss": hist.losses()[-1]}))
    return 0


def cmd_train_distill(args) -> int:
    from lbw.diffusion import clip_to_tensors
    from lbw.distill import DistillConfig, train_distill

    conf = parse_config(args.config) if args.config else {}
    teacher, meta = load_module(args.teacher)
    if meta["kind"] not in ("teacher", "adapted"):
        raise SystemExit(f"distillation needs a teacher/adapted checkpoint, found {meta['kind']}")
    clips = [clip_to_tensors(c, teacher.cfg.text_vocab) for c in load_shards(args.shards)]
    dkeys = {f.name for f in fields(DistillConfig)}
    dcfg = DistillConfig(**{k: (tuple(v) if k == "ts" else v) for k, v in conf.items() if k in dkeys})
    student, hist = train_distill(teacher, clips, dcfg)
    save_checkpoint(args.out, student, "student", teacher.cfg, step=dcfg.steps,
                    extra={"distilled_from": str(args.teacher)})
    metrics = args.log or f"{args.out}.metrics.jsonl"
    write_metrics(metrics, hist.steps, "distill")
    print(json.dumps({"ckpt": str(args.out), "metrics": metrics, "loss": hist.losses()[-1]}))
    return 0


def cmd_serve(args) -> int:
    from lbw.server import ServeConfig, Server

    cfg = ServeConfig(port=args.port, fps=args.fps, cache_chunks=args.cache_chunks,
                      prompt=args.prompt, seed=args.seed)
    server = Server(args.ckpt, cfg)
    print(json.dumps({"listening": f"{cfg.host}:{server.port}"}))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.close()
    return 0


def cmd_agent_train(args) -> int:
    import torch

    from lbw.agent import AgentConfig, BehaviorCloner, agent_train_step, pairs_from_clip, tokens_to_ids
    from lbw.model import frames_to_tensor

    conf = parse_config(args.config) if args.config else {}
    akeys = {f.name for f in fields(AgentConfig)}
    acfg = AgentConfig(**{k: (tuple(v) if k == "frame_hw" else v) for k, v in conf.items() if k in akeys})
    pairs = []
    for clip in load_shards(args.shards):
        pairs.extend(pairs_from_clip(clip, acfg, fps=conf.get("fps", 8.0)))
    if not pairs:
        raise SystemExit("no training pairs: clips shorter than one plan horizon")
    frames = frames_to_tensor(np.stack([p[0] for p in pairs]))
    tokens = torch.stack([tokens_to_ids(p[1]) for p in pairs])
    agent = BehaviorCloner(acfg)
    opt = torch.optim.Adam(agent.parameters(), lr=conf.get("lr", 1e-3))
    steps = int(conf.get("steps", 200))
    batch = min(int(conf.get("batch", 8)), len(pairs))
    gen = torch.Generator().manual_seed(int(conf.get("seed", 0)))
    rows = []
    for step in range(steps):
        idx = torch.randint(0, len(pairs), (batch,), generator=gen)
        loss = agent_train_step(agent, frames[idx], tokens[idx], opt)
        rows.append({"step": step, "loss": loss})
    save_checkpoint(args.out, agent, "agent", acfg, step=steps, extra={"pairs": len(pairs)})
    metrics = args.log or f"{args.out}.metrics.jsonl"
    write_metrics(metrics, rows, "agent")
    print(json.dumps({"ckpt": str(args.out), "metrics": metrics, "pairs": len(pairs),
                      "loss": rows[-1]["loss"]}))
    return 0


def cmd_agent_drive(args) -> int:
    from lbw.agent import agent_drive
    from lbw.inference import SessionConfig, start_session

    agent, _ = load_module(args.agent, expect_kind="agent")
    sess = start_session(args.ckpt, args.prompt, args.seed, SessionConfig(fps=args.fps))
    record = agent_drive(sess, agent, args.chunks)
    frames = np.concatenate([sess.primer] + record["frames"]) if record["frames"] else sess.primer
    if args.out:
        np.savez_compressed(args.out, frames=frames,
                            plans=np.array([json.dumps(p.tokens) for p in record["plans"]]))
    print(json.dumps({"chunks": len(record["frames"]), "frames": int(frames.shape[0]),
                      "plans": len(record["plans"]), "out": args.out or None}))
    return 0


def cmd_ckpt_init(args) -> int:
    conf = parse_config(args.config) if args.config else {}
    mcfg, _ = split_model_config(conf)
    if args.kind == "student":
        from lbw.model import WorldModel

        module = WorldModel(mcfg)
    else:
        module = TwoExpertModel(mcfg)
    save_checkpoint(args.out, module, args.kind, mcfg, step=0)
    print(json.dumps({"ckpt": str(args.out), "kind": args.kind, "config": mcfg.to_dict()}))
    return 0


def cmd_rig(args) -> int:
    from lbw import rig

    runner = {"a": rig.run_rig_a, "b": rig.run_rig_b}[args.which]
    report = runner(record=args.record)
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0 if report.get("passed", False) or args.record else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lbw", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    data = sub.add_parser("data", help="shard generation and inspection").add_subparsers(
        dest="sub", required=True)
    g = data.add_parser("gen", help="generate a clip shard")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--clips", type=int, default=16)
    g.add_argument("--trajectory-kind", choices=de.TRAJ_KINDS, default=None)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_data_gen)
    pr_ = data.add_parser("profile", help="render throughput or shard stats")
    pr_.add_argument("--frames", type=int, default=1000)
    pr_.add_argument("--shard", default=None)
    pr_.set_defaults(fn=cmd_data_profile)
    cap = data.add_parser("caption", help="dump captions as JSON lines")
    cap.add_argument("--shard", required=True)
    cap.set_defaults(fn=cmd_data_caption)

    train = sub.add_parser("train", help="training phases").add_subparsers(dest="sub", required=True)
    t = train.add_parser("teacher", help="bidirectional pretrain + action finetune")
    t.add_argument("--config", default=None)
    t.add_argument("--shards", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.set_defaults(fn=cmd_train_teacher)
    a = train.add_parser("adapt", help="causal adaptation of a teacher")
    a.add_argument("--config", default=None)
    a.add_argument("--teacher", required=True)
    a.add_argument("--shards", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--log", default=None)
    a.set_defaults(fn=cmd_train_adapt)
    d = train.add_parser("distill", help="few-step student distillation")
    d.add_argument("--config", default=None)
    d.add_argument("--teacher", required=True)
    d.add_argument("--shards", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--log", default=None)
    d.set_defaults(fn=cmd_train_distill)

    srv = sub.add_parser("serve", help="host a streaming session")
    srv.add_argument("--ckpt", required=True)
    srv.add_argument("--port", type=int, default=8765)
    srv.add_argument("--fps", type=float, default=8.0)
    srv.add_argument("--cache-chunks", type=int, default=None)
    srv.add_argument("--prompt", default="")
    srv.add_argument("--seed", type=int, default=0)
    srv.set_defaults(fn=cmd_serve)

    agent = sub.add_parser("agent", help="behavior cloning").add_subparsers(dest="sub", required=True)
    at = agent.add_parser("train", help="clone oracle trajectories")
    at.add_argument("--config", default=None)
    at.add_argument("--shards", required=True)
    at.add_argument("--out", required=True)
    at.add_argument("--log", default=None)
    at.set_defaults(fn=cmd_agent_train)
    ad = agent.add_parser("drive", help="let the agent steer a session")
    ad.add_argument("--ckpt", required=True, help="student checkpoint")
    ad.add_argument("--agent", required=True)
    ad.add_argument("--chunks", type=int, default=8)
    ad.add_argument("--prompt", default="")
    ad.add_argument("--seed", type=int, default=0)
    ad.add_argument("--fps", type=float, default=8.0)
    ad.add_argument("--out", default=None, help="optional .npz rollout record")
    ad.set_defaults(fn=cmd_agent_drive)

    ck = sub.add_parser("ckpt", help="checkpoint utilities").add_subparsers(dest="sub", required=True)
    ci = ck.add_parser("init", help="mint an untrained checkpoint (serving smoke tests)")
    ci.add_argument("--config", default=None)
    ci.add_argument("--kind", choices=("teacher", "student"), default="teacher")
    ci.add_argument("--out", required=True)
    ci.set_defaults(fn=cmd_ckpt_init)

    rig = sub.add_parser("rig", help="regression rigs")
    rig.add_argument("which", choices=("a", "b"))
    rig.add_argument("--record", action="store_true", help="update recorded thresholds")
    rig.set_defaults(fn=cmd_rig)
    return p


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
