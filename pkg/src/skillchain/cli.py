"""Command-line entry points for demo collection, training, evaluation,
baselines, and report emission."""

from __future__ import annotations

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines
from .analysis import emit_report
from .chaining import (ChainConfig, MetricsWriter, SkillChain, evaluate_chain,
                       prepare_demos, pretrain_subtask, ps_config, run_chain)
from .checkpoint import load_chain_checkpoint, save_chain_checkpoint
from .demos import collect_demos, save_demos
from .env import make_task
from .ppo import PpoConfig


def _load_chain_config(path: str | None, k: int, seed: int) -> ChainConfig:
    if path is None:
        return ChainConfig(env=make_task(k), seed=seed)
    d = json.loads(Path(path).read_text())
    env = make_task(k=d.pop("k", k)) if "env" not in d else None
    if env is None:
        from .env import EnvConfig
        env_d = d.pop("env")
        env_d["base_pos"] = tuple(env_d["base_pos"])
        env_d["robot_start"] = tuple(env_d["robot_start"])
        env = EnvConfig(**env_d)
    ppo = PpoConfig(**d.pop("ppo")) if "ppo" in d else PpoConfig()
    d.setdefault("seed", seed)
    return ChainConfig(env=env, ppo=ppo, **d)


def cmd_collect_demos(args):
    cfg = make_task(args.k)
    ds = collect_demos(cfg, args.subtask, args.n, seed=args.seed)
    save_demos(ds, args.out)
    print(f"wrote {ds.count} demos for subtask {args.subtask} to {args.out}")


def cmd_pretrain(args):
    cfg = _load_chain_config(args.config, args.k, args.seed)
    demos = prepare_demos(cfg, args.demo_dir)
    chain = SkillChain.create(cfg, demos)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(out / "metrics.csv")
    subtasks = range(chain.k) if args.subtask < 0 else [args.subtask]
    for i in subtasks:
        pretrain_subtask(chain, i, metrics=metrics)
    metrics.close()
    save_chain_checkpoint(out / "pretrained.npz", chain.agents,
                          chain.gail_discs, chain.init_discs,
                          {"phase": "pretrained"})
    print(f"pretrained checkpoint written to {out / 'pretrained.npz'}")


def cmd_chain(args):
    cfg = _load_chain_config(args.config, args.k, args.seed)
    if args.method == "ps":
        cfg = ps_config(cfg)
    results = run_chain(cfg, args.out, args.demo_dir, method=args.method,
                        pretrained_checkpoint=args.checkpoints)
    print(json.dumps(results, indent=2, sort_keys=True))


def cmd_evaluate(args):
    agents, _, _, _ = load_chain_checkpoint(args.checkpoint)
    cfg = make_task(len(agents))
    res = evaluate_chain(agents, cfg, args.episodes, args.seed)
    res.pop("progress")
    print(json.dumps(res, indent=2, sort_keys=True))


def cmd_baseline(args):
    cfg = _load_chain_config(args.config, args.k, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    demos = prepare_demos(cfg, args.demo_dir)
    if args.method == "bc":
        policy, report = train_bc_entry(cfg, demos, args)
        res = baselines.evaluate_single_policy(policy, cfg.env,
                                               cfg.eval_episodes, cfg.seed)
        res.update(report)
        results = {"method": "bc", "seed": cfg.seed,
                   "final_progress": res["progress_mean"],
                   "val_mse": res.get("val_mse")}
    elif args.method in baselines.WHOLE_TASK_MODES:
        metrics = MetricsWriter(out / "metrics.csv")
        agent = baselines.train_whole_task(args.method, cfg, demos,
                                           args.budget_rounds, metrics)
        metrics.close()
        res = baselines.evaluate_single_policy(baselines._NormalizedActor(agent),
                                               cfg.env, cfg.eval_episodes, cfg.seed)
        results = {"method": args.method, "seed": cfg.seed,
                   "final_progress": res["progress_mean"]}
    elif args.method == "naive":
        agents, _, _, _ = load_chain_checkpoint(args.checkpoints)
        res = baselines.naive_sequencing(agents, cfg.env, cfg.eval_episodes, cfg.seed)
        results = {"method": "naive", "seed": cfg.seed,
                   "final_progress": res["progress_mean"],
                   "final_subtask_success": res["subtask_success_rate"]}
    elif args.method == "ps":
        results = baselines.policy_sequencing_finetune(
            cfg, out, args.demo_dir, pretrained_checkpoint=args.checkpoints)
    else:
        raise SystemExit(f"unknown baseline: {args.method}")
    res_copy = {k: v for k, v in results.items()}
    (out / "results.json").write_text(json.dumps(res_copy, indent=2, sort_keys=True))
    print(json.dumps(res_copy, indent=2, sort_keys=True))


def train_bc_entry(cfg, demos, args):
    return baselines.train_bc(demos, epochs=args.bc_epochs, seed=cfg.seed)


def cmd_report(args):
    info = emit_report(args.runs, out_dir=args.out, scatter_subtask=args.subtask)
    print(json.dumps(info, indent=2, sort_keys=True))


def main(argv=None):
    p = argparse.ArgumentParser(prog="skillchain")
    sub = p.add_subparsers(dest="cmd", required=True)

    d = sub.add_parser("collect-demos", help="record scripted-expert demos")
    d.add_argument("--k", type=int, default=4)
    d.add_argument("--subtask", type=int, required=True)
    d.add_argument("--n", type=int, default=200)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_collect_demos)

    pre = sub.add_parser("pretrain", help="pretrain subtask policies")
    pre.add_argument("--k", type=int, default=4)
    pre.add_argument("--subtask", type=int, default=-1, help="-1 = all")
    pre.add_argument("--config")
    pre.add_argument("--demo-dir", default="demos")
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--out", required=True)
    pre.set_defaults(fn=cmd_pretrain)

    ch = sub.add_parser("chain", help="pretrain (or load) + fine-tune a chain")
    ch.add_argument("--k", type=int, default=4)
    ch.add_argument("--config")
    ch.add_argument("--method", choices=["tsr", "ps"], default="tsr")
    ch.add_argument("--checkpoints", help="pretrained checkpoint to start from")
    ch.add_argument("--demo-dir", default="demos")
    ch.add_argument("--seed", type=int, default=0)
    ch.add_argument("--out", required=True)
    ch.set_defaults(fn=cmd_chain)

    ev = sub.add_parser("evaluate", help="evaluate a chain checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(fn=cmd_evaluate)

    b = sub.add_parser("baseline", help="run a comparison method")
    b.add_argument("--method", required=True,
                   choices=["bc", "ppo", "gail", "gail+ppo", "naive", "ps"])
    b.add_argument("--k", type=int, default=4)
    b.add_argument("--config")
    b.add_argument("--checkpoints", help="pretrained checkpoint (naive/ps)")
    b.add_argument("--demo-dir", default="demos")
    b.add_argument("--budget-rounds", type=int, default=200)
    b.add_argument("--bc-epochs", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_baseline)

    r = sub.add_parser("report", help="emit CSV/SVG report from run dirs")
    r.add_argument("--runs", required=True)
    r.add_argument("--out")
    r.add_argument("--subtask", type=int, default=1)
    r.set_defaults(fn=cmd_report)

    args = p.parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
