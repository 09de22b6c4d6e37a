"""``icrl train|eval|fewshot|probe|plot``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from ..evaluation import (
    TrialMetrics,
    attention_probe,
    context_generalization_eval,
    eval_trial_specs,
    evaluate_trial,
    few_shot_imitation_eval,
    run_trials,
)
from ..model import CheckpointError, ConfigError, init_params, load_checkpoint, save_checkpoint
from ..trainer import Trainer
from .config import ExperimentConfig, dump_config, parse_config
from .metrics import MetricsWriter
from .plotting import plot_metrics

log = logging.getLogger("icrl")


class UsageError(ValueError):
    pass


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path):
    if path is None:
        raise UsageError("this command needs --checkpoint PATH")
    model, extra, meta = load_checkpoint(path)
    model.eval()
    return model, extra, meta


def _label(cfg: ExperimentConfig, default: str) -> str:
    return cfg.eval.label or default


def run_train(cfg: ExperimentConfig, checkpoint: str | None = None) -> dict:
    """Train until the env-step budget; checkpoints go to ``out_dir/checkpoints``."""
    out = _out(cfg)
    budget = cfg.env_step_budget
    if checkpoint is not None:
        model, extra, meta = _load_model(checkpoint)
        model.train(False)
        trainer = Trainer(model, cfg.env.spec(), cfg.train, seed=meta.get("seed", cfg.seed))
        trainer.load_optimizer_arrays(extra)
        trainer.load_state_meta(meta)
        best = meta.get("best_return", float("-inf"))
    else:
        model = init_params(cfg.model, cfg.seed)
        trainer = Trainer(model, cfg.env.spec(), cfg.train, seed=cfg.seed)
        best = float("-inf")
    per_rollout = cfg.train.T * cfg.train.n_workers
    # The budget is a ceiling: only whole rollouts that fit are collected.
    if trainer.env_steps + per_rollout > budget:
        raise UsageError(f"env-step budget {budget} leaves no room for a rollout of {per_rollout} steps (at {trainer.env_steps})")
    dump_config(cfg, out / "config.yaml")
    metrics = MetricsWriter(out / "metrics.jsonl")
    ckpt_dir = out / "checkpoints"
    label = _label(cfg, out.name)
    recent = []

    def save(name, **more):
        meta = trainer.state_meta() | {"train": cfg.train.to_dict(), "env": cfg.to_dict()["env"], "best_return": best}
        meta.update(more)
        return save_checkpoint(ckpt_dir / name, model, trainer.optimizer_arrays(), meta)

    while trainer.env_steps + per_rollout <= budget:
        records = trainer.train_rollout()
        for r in records:
            metrics.write("train-window", r["env_step"], r | {"K": cfg.train.K, "label": label})
        recent.append(records[-1]["mean_return"])
        if trainer.rollouts_done % cfg.checkpoint_every == 0 or trainer.env_steps + per_rollout > budget:
            score = float(np.nanmean(recent)) if recent else float("-inf")
            recent = []
            if score > best:
                best = score
                save("best.ckpt")
            save("last.ckpt")
            log.info("env_steps=%d mean_return=%.2f", trainer.env_steps, score)
    return {"env_steps": trainer.env_steps, "checkpoint": str(ckpt_dir / "last.ckpt"), "best_return": best}


def run_eval(cfg: ExperimentConfig, checkpoint: str) -> dict:
    model, _, meta = _load_model(checkpoint)
    out = _out(cfg)
    e = cfg.eval
    env = cfg.env.spec()
    trials = eval_trial_specs(cfg.seed, e.n_trials, env)
    returns = evaluate_trial(
        model, trials, e.n_episodes, e.max_context, seed=cfg.seed, truncation=e.truncation, greedy=e.greedy
    )
    context = e.max_context or e.n_episodes * env.horizon
    m = TrialMetrics.from_returns(returns, env.horizon, context)
    metrics = MetricsWriter(out / "metrics.jsonl")
    step = int(meta.get("env_steps", 0))
    label = _label(cfg, Path(checkpoint).stem)
    payload = {"label": label, "checkpoint": str(checkpoint), "truncation": e.truncation, "metrics": m.to_dict()}
    metrics.write("eval-trial", step, payload)
    result = {"icl": m.to_dict()}
    if e.context_multiplier and e.context_multiplier != 1:
        train_T = int(meta.get("train", {}).get("T", cfg.train.T))
        cg = context_generalization_eval(model, trials, train_T, e.context_multiplier, seed=cfg.seed)
        metrics.write(
            "context-generalization",
            step,
            {"label": f"{label} x{e.context_multiplier:g} context", "train_context": train_T, "metrics": cg.to_dict()},
        )
        result["context_generalization"] = cg.to_dict()
    (out / "eval.json").write_text(json.dumps(result, indent=1))
    return result


def run_fewshot(cfg: ExperimentConfig, checkpoint: str) -> dict:
    model, _, meta = _load_model(checkpoint)
    out = _out(cfg)
    env = cfg.env.spec()
    trials = eval_trial_specs(cfg.seed, cfg.eval.fewshot_trials, env)
    means, errs = [], []
    for n in cfg.eval.demo_counts:
        r = few_shot_imitation_eval(model, trials, n, seed=cfg.seed, greedy=cfg.eval.greedy)
        means.append(float(r.mean()))
        errs.append(float(r.std(ddof=1) / np.sqrt(len(r))) if len(r) > 1 else 0.0)
    payload = {
        "label": _label(cfg, Path(checkpoint).stem),
        "demo_counts": list(cfg.eval.demo_counts),
        "mean_return": means,
        "stderr": errs,
        "n_trials": len(trials),
    }
    MetricsWriter(out / "metrics.jsonl").write("fewshot", int(meta.get("env_steps", 0)), payload)
    (out / "fewshot.json").write_text(json.dumps(payload, indent=1))
    return payload


def run_probe(cfg: ExperimentConfig, checkpoint: str) -> dict:
    model, _, meta = _load_model(checkpoint)
    out = _out(cfg)
    env = cfg.env.spec()
    n_ep = cfg.eval.probe_episodes
    trials = eval_trial_specs(cfg.seed, 1, env)
    run = run_trials(model, trials, n_ep, seed=cfg.seed, keep_tokens=True)
    H = env.horizon
    queries = range((n_ep - 1) * H, n_ep * H)
    profiles = attention_probe(model, run.tokens, queries)
    rows = [p.to_dict() for p in profiles]
    with open(out / "probe.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "head", "sink_mass", "current_mass", "earlier_mass", "class", "top_positions"])
        for p in profiles:
            w.writerow(
                [p.layer, p.head, f"{p.sink_mass:.6f}", f"{p.current_mass:.6f}", f"{p.earlier_mass:.6f}",
                 p.classification, " ".join(map(str, p.top_positions))]
            )
    payload = {"label": _label(cfg, Path(checkpoint).stem), "query_steps": [queries.start, queries.stop], "heads": rows}
    MetricsWriter(out / "metrics.jsonl").write("probe", int(meta.get("env_steps", 0)), payload)
    return payload


def run_plot(cfg: ExperimentConfig, metrics_paths: list[str] | None = None) -> list[str]:
    out = _out(cfg)
    paths = [Path(p) for p in (metrics_paths or [])] or [out / "metrics.jsonl"]
    for p in paths:
        if not p.exists():
            raise UsageError(f"no metrics file at {p}")
    return [str(p) for p in plot_metrics(paths, out / "plots")]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="icrl", description="In-context RL workbench on Darkroom.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (
        ("train", "train a policy (resumes when --checkpoint is given)"),
        ("eval", "in-context learning curve and context-length generalization"),
        ("fewshot", "first-episode return after oracle demonstrations"),
        ("probe", "per-head attention profile on one recorded trial"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    pp = sub.add_parser("plot", parents=[common], help="render charts and CSV tables from metrics")
    pp.add_argument("--metrics", nargs="*", help="metrics files (default: OUT/metrics.jsonl)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"out_dir={args.out}")
        cfg = parse_config(args.config, overrides)
        if args.command == "train":
            result = run_train(cfg, args.checkpoint)
        elif args.command == "eval":
            result = run_eval(cfg, args.checkpoint)
        elif args.command == "fewshot":
            result = run_fewshot(cfg, args.checkpoint)
        elif args.command == "probe":
            result = run_probe(cfg, args.checkpoint)
        else:
            result = run_plot(cfg, args.metrics)
    except (ConfigError, CheckpointError, UsageError, FileNotFoundError, ValueError, RuntimeError) as e:
        msg = str(e).replace("\n", " ")
        print(f"error {type(e).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(e, (ConfigError, UsageError)) else 1
    print(json.dumps(result if not isinstance(result, dict) or "heads" not in result else {"heads": len(result["heads"])}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
