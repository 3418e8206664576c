"""``spatial-lab`` command line: forge, pretrain, train-reward, eval-reward,
grpo, eval-policy, diagnose.

Every run directory receives ``run_config.json`` holding the resolved
settings; passing it back through ``--config`` replays the run.  Values from a
config file override command-line flags.  Exit codes: 0 ok, 2 usage,
3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import GenerationError, NonFiniteError, PerturbationError, TrainingDiverged, UnsatisfiableError
from .forge import ForgeConfig, GrammarConfig, build_dataset, generate_prompt, load_pairs
from .flow import Policy, SdeSchedule, evaluate_policy, init_velocity_net, pretrain
from .grpo import GrpoConfig, Rewarder, diagnose_advantage_bias, grpo_train, new_grpo_state
from .checkpoints import load_net, load_policy, save_grpo, save_net
from .numerics import RngStream
from .reward import OracleScorer, RewardTrainConfig, init_reward_net, pairwise_accuracy, train_reward
from .scenes import SpatialPrompt, embed_prompt

log = logging.getLogger("spatial_lab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "SPATIAL_LAB_OUT"

# Settings that steer the invocation itself rather than the computation.
_CONTROL = {"config", "resume", "command", "log_level", "handler"}

GRPO_COLUMNS = [
    "step",
    "reward_mean",
    "reward_std",
    "oracle_rate",
    "kl",
    "loss",
    "nfe_sampling",
    "nfe_training",
    "degenerate_groups",
    "clip_fraction",
]
PRETRAIN_COLUMNS = ["step", "loss"]
REWARD_COLUMNS = ["epoch", "train_loss", "eval_acc", "eval_acc_1", "eval_acc_2_3"]
EVAL_REWARD_COLUMNS = ["subset", "accuracy", "n_pairs"]
EVAL_POLICY_COLUMNS = ["checkpoint", "step", "oracle_mean", "all_satisfied_rate", "n_prompts", "samples_per_prompt"]
DIAGNOSE_COLUMNS = [
    "prompt_index",
    "n_atoms",
    "n_high_quality",
    "reward_std",
    "penalized_k0",
    "penalized_topk",
    "degenerate_k0",
    "degenerate_topk",
]


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Plumbing
# --------------------------------------------------------------------------


def _settings(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _CONTROL}


def _apply_config(args: argparse.Namespace) -> None:
    if not args.config:
        return
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    if "settings" in data:
        if data.get("command") not in (None, args.command):
            raise UsageError(f"config was written by '{data['command']}', not '{args.command}'")
        data = data["settings"]
    known = set(vars(args)) - _CONTROL
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    for key, value in data.items():
        setattr(args, key, value)


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / args.command
        args.out_dir = str(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_run_config(out: Path, args: argparse.Namespace) -> None:
    _write_json(out / "run_config.json", {"command": args.command, "settings": _settings(args)})


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _pairs(data_dir: str | None, split: str, limit: int | None = None):
    path = _require(data_dir, "--data directory") / f"{split}.jsonl"
    if not path.is_file():
        raise UsageError(f"{path} not found")
    pairs = load_pairs(path)
    return pairs[:limit] if limit else pairs


class MetricsCsv:
    """Append-only CSV with a fixed header.  ``keep_upto`` drops rows past a
    resumed checkpoint so the file continues from the saved step."""

    def __init__(self, path: Path, columns: list[str], keep_upto: int | None = None):
        self.path = path
        self.columns = columns
        rows = []
        if keep_upto is not None and path.is_file():
            with open(path, newline="", encoding="utf-8") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r[columns[0]]) <= keep_upto]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, columns, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)

    def append(self, record: dict) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, self.columns, extrasaction="ignore", lineterminator="\n").writerow(record)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _checkpoint_paths(out: Path, step: int) -> tuple[Path, Path]:
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    return ck / f"step_{step:06d}.ckpt", ck / "latest.ckpt"


def _snapshot(out: Path, step: int, save) -> None:
    path, latest = _checkpoint_paths(out, step)
    save(path)
    shutil.copyfile(path, latest)


def _latest(out: Path) -> Path:
    latest = out / "checkpoints" / "latest.ckpt"
    if not latest.is_file():
        raise UsageError(f"--resume given but no checkpoint in {latest.parent}")
    return latest


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_forge(args) -> int:
    out = _out_dir(args)
    grammar = GrammarConfig(
        k_objects=args.k_objects,
        n_classes=args.n_classes,
        atoms_min=args.atoms_min,
        atoms_max=args.atoms_max,
    )
    config = ForgeConfig(args.train_n, args.eval_n, args.pert_mix, grammar)
    _write_run_config(out, args)
    _, manifest = build_dataset(config, args.seed, out, threads=args.threads)
    print(json.dumps(manifest["splits"], sort_keys=True))
    return EXIT_OK


def pretrain_rows(pairs) -> tuple[np.ndarray, np.ndarray]:
    """(prompt, winner) and (perturbed prompt, loser): both layouts satisfy
    their own prompt, so both are clean conditional samples."""
    embs = [embed_prompt(p.prompt) for p in pairs] + [embed_prompt(p.perturbed_prompt) for p in pairs]
    x0 = [p.winner.positions.ravel() for p in pairs] + [p.loser.positions.ravel() for p in pairs]
    return np.stack(embs), np.stack(x0)


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    pairs = _pairs(args.data, "train", args.max_pairs)
    embs, x0 = pretrain_rows(pairs)
    k = pairs[0].prompt.k
    if args.resume:
        net, state, meta = load_net(_latest(out), "velocity")
        stream, start = RngStream.from_state(meta["stream"]), meta["step"]
    else:
        net = init_velocity_net(k, RngStream(args.seed, 1), tuple(args.hidden))
        state, stream, start = None, RngStream(args.seed, 2), 0
    _write_run_config(out, args)
    metrics = MetricsCsv(out / "metrics.csv", PRETRAIN_COLUMNS, keep_upto=start if args.resume else None)

    def on_step(step, net_, state_, loss):
        metrics.append({"step": step, "loss": loss})
        if step % args.ckpt_every == 0 or step == args.steps:
            _snapshot(out, step, lambda p: save_net(p, "velocity", net_, state_, step=step, stream=stream.state()))

    net, _, losses = pretrain(net, embs, x0, args.steps, stream, args.lr, args.batch_size, state, start, on_step)
    save_net(out / "policy.ckpt", "velocity", net, step=args.steps)
    _write_json(out / "summary.json", {"steps": args.steps, "final_loss": losses[-1] if losses else None, "k": k})
    return EXIT_OK


def cmd_train_reward(args) -> int:
    out = _out_dir(args)
    train = _pairs(args.data, "train", args.max_pairs)
    evals = _pairs(args.data, "eval", args.max_eval_pairs)
    config = RewardTrainConfig(args.epochs, args.lr, args.batch_size, args.mc_samples)
    if args.resume:
        net, state, meta = load_net(_latest(out), "reward")
        stream, start = RngStream.from_state(meta["stream"]), meta["epoch"]
    else:
        net = init_reward_net(train[0].prompt.k, RngStream(args.seed, 3), tuple(args.hidden))
        state, stream, start = None, RngStream(args.seed, 4), 0
    _write_run_config(out, args)
    metrics = MetricsCsv(out / "metrics.csv", REWARD_COLUMNS, keep_upto=start if args.resume else None)

    def on_epoch(epoch, net_, state_, record):
        metrics.append(record)
        if epoch % args.ckpt_every == 0 or epoch == args.epochs:
            _snapshot(out, epoch, lambda p: save_net(p, "reward", net_, state_, epoch=epoch, stream=stream.state()))

    net, history, _ = train_reward(net, train, evals, config, stream, state, start, on_epoch)
    save_net(out / "reward.ckpt", "reward", net, epoch=args.epochs)
    _write_json(out / "summary.json", {"epochs": args.epochs, "n_train": len(train), "final": history[-1] if history else None})
    return EXIT_OK


def cmd_eval_reward(args) -> int:
    out = _out_dir(args)
    pairs = _pairs(args.data, "eval", args.max_pairs)
    if args.oracle:
        scorer, source = OracleScorer(), "oracle"
    else:
        scorer, _, _ = load_net(_require(args.checkpoint, "--checkpoint"), "reward")
        source = str(args.checkpoint)
    _write_run_config(out, args)
    report = pairwise_accuracy(scorer, pairs)
    report["scorer"] = source
    _write_json(out / "eval_reward.json", report)
    n1 = sum(p.n_pert == 1 for p in pairs)
    rows = [
        {"subset": "overall", "accuracy": report["overall"], "n_pairs": len(pairs)},
        {"subset": "1", "accuracy": report["by_pert"]["1"], "n_pairs": n1},
        {"subset": "2_3", "accuracy": report["by_pert"]["2_3"], "n_pairs": len(pairs) - n1},
    ]
    _write_csv(out / "eval_reward.csv", EVAL_REWARD_COLUMNS, rows)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _grpo_config(args) -> GrpoConfig:
    return GrpoConfig(
        group_size=args.group,
        k=args.k,
        clip_eps=args.clip_eps,
        kl_beta=args.kl_beta,
        lr=args.lr,
        steps_per_traj=args.steps_per_traj,
        noise_level=args.noise_level,
        reward_source=args.reward_source,
        prompts_per_step=args.prompts_per_step,
        adapter_rank=args.rank,
        adapter_alpha=args.alpha,
    )


def _rewarder(args) -> Rewarder:
    if args.reward_source == "oracle":
        return Rewarder("oracle")
    net, _, _ = load_net(_require(args.reward, "--reward checkpoint"), "reward")
    return Rewarder("learned", net)


def cmd_grpo(args) -> int:
    out = _out_dir(args)
    config = _grpo_config(args)
    base, _, _ = load_net(_require(args.base, "--base checkpoint"), "velocity")
    policy = Policy(base)
    rewarder = _rewarder(args)
    pool = [p.prompt for p in _pairs(args.data, "train", args.pool_size)]
    stream = RngStream(args.seed, 5)
    state = None
    if args.resume:
        _, state, _ = load_policy(_latest(out))
    _write_run_config(out, args)
    start = state.step if state else 0
    metrics = MetricsCsv(out / "metrics.csv", GRPO_COLUMNS, keep_upto=start if args.resume else None)
    state = state or new_grpo_state(policy, config, stream.child(0))

    def on_step(st, m):
        metrics.append(m)
        if st.step % args.ckpt_every == 0 or st.step == args.steps:
            _snapshot(out, st.step, lambda p: save_grpo(p, policy, st))

    try:
        state, history, ledger = grpo_train(policy, rewarder, pool, config, args.steps, stream, state, on_step=on_step)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_grpo(out / "last_good.ckpt", policy, exc.last_good)
        raise
    save_grpo(out / "policy.ckpt", policy, state)
    nfe_train = sorted({m["nfe_training"] for m in history})
    summary = {
        "steps": state.step,
        "resumed_from": start if args.resume else None,
        "config": asdict(config),
        "subset_size": config.subset_size,
        "training_nfe_per_prompt_step": nfe_train[0] if len(nfe_train) == 1 else nfe_train,
        "sampling_nfe_per_prompt_step": config.group_size * config.steps_per_traj,
        "nfe_totals": {"sampling": ledger.total_sampling, "training": ledger.total_training},
        "final": history[-1] if history else None,
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps({"steps": state.step, "training_nfe_per_prompt_step": summary["training_nfe_per_prompt_step"]}))
    return EXIT_OK


def _eval_prompts(args) -> list[SpatialPrompt]:
    return [p.prompt for p in _pairs(args.data, "eval", args.n_prompts)]


def cmd_eval_policy(args) -> int:
    out = _out_dir(args)
    if not args.checkpoints:
        raise UsageError("at least one --checkpoints path is required")
    paths = [_require(c, "policy checkpoint") for c in args.checkpoints]
    prompts = _eval_prompts(args)
    schedule = SdeSchedule(args.eval_steps, args.noise_level)
    _write_run_config(out, args)
    rows = []
    for path in paths:
        policy, state, meta = load_policy(path)
        # common random numbers: every checkpoint sees the same noise
        rep = evaluate_policy(policy, prompts, schedule, RngStream(args.seed, 7), args.samples, args.sampler)
        step = state.step if state is not None else meta.get("step", 0)
        rows.append({"checkpoint": str(path), "step": step, **rep})
    _write_csv(out / "eval_policy.csv", EVAL_POLICY_COLUMNS, rows)
    _write_json(out / "eval_policy.json", {"sampler": args.sampler, "eval_steps": args.eval_steps, "results": rows})
    for r in rows:
        print(f"{r['checkpoint']}\t{r['oracle_mean']:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    out = _out_dir(args)
    policy, _, _ = load_policy(_require(args.policy, "--policy checkpoint"))
    rewarder = _rewarder(args)
    if args.data:
        prompts = _eval_prompts(args)
    else:
        grammar = GrammarConfig(k_objects=policy.k, atoms_min=args.atoms, atoms_max=args.atoms)
        gen = RngStream(args.seed, 8)
        prompts = [generate_prompt(gen.child(i), grammar, args.atoms) for i in range(args.n_prompts)]
    config = GrpoConfig(
        group_size=args.group,
        k=args.k,
        steps_per_traj=args.steps_per_traj,
        noise_level=args.noise_level,
        reward_source=args.reward_source,
    )
    _write_run_config(out, args)
    root = RngStream(args.seed, 9)
    reports, rows = [], []
    for i, prompt in enumerate(prompts):
        rep = diagnose_advantage_bias(policy, rewarder, prompt, config, args.threshold, root.child(i))
        reports.append(rep)
        rows.append(
            {
                "prompt_index": i,
                "n_atoms": len(prompt.atoms),
                "n_high_quality": rep["n_high_quality"],
                "reward_std": float(np.std(rep["rewards"])),
                "penalized_k0": rep["without_topk"]["n_penalized"],
                "penalized_topk": rep["with_topk"]["n_penalized"],
                "degenerate_k0": rep["without_topk"]["degenerate"],
                "degenerate_topk": rep["with_topk"]["degenerate"],
            }
        )
    totals = {
        "penalized_k0": sum(r["penalized_k0"] for r in rows),
        "penalized_topk": sum(r["penalized_topk"] for r in rows),
        "n_prompts": len(rows),
    }
    _write_csv(out / "diagnose.csv", DIAGNOSE_COLUMNS, rows)
    _write_json(out / "diagnose.json", {"k": args.k, "threshold": args.threshold, "totals": totals, "groups": reports})
    print(json.dumps(totals, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-lab", description="Spatial preference lab: forge data, train the reward and policy, evaluate.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(handler=handler)
        p.add_argument("--config", help="JSON settings; values override flags")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default=None, help=f"default: ${OUT_ENV}/<command> or runs/<command>")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        return p

    p = command("forge", cmd_forge, "generate preference pairs")
    p.add_argument("--train-n", type=int, default=5000)
    p.add_argument("--eval-n", type=int, default=1000)
    p.add_argument("--k-objects", type=int, default=4)
    p.add_argument("--n-classes", type=int, default=12)
    p.add_argument("--atoms-min", type=int, default=2)
    p.add_argument("--atoms-max", type=int, default=5)
    p.add_argument("--pert-mix", type=float, default=0.5, help="share of single-perturbation pairs")

    p = command("pretrain", cmd_pretrain, "flow-matching pretraining of the base policy")
    p.add_argument("--data", required=False)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--max-pairs", type=int, default=5000)
    p.add_argument("--hidden", type=_int_list, default=[128, 128])
    p.add_argument("--ckpt-every", type=int, default=50)
    p.add_argument("--resume", action="store_true")

    p = command("train-reward", cmd_train_reward, "fit the Gaussian reward model")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--mc-samples", type=int, default=100)
    p.add_argument("--max-pairs", type=int, default=None)
    p.add_argument("--max-eval-pairs", type=int, default=None)
    p.add_argument("--hidden", type=_int_list, default=[128, 128])
    p.add_argument("--ckpt-every", type=int, default=1)
    p.add_argument("--resume", action="store_true")

    p = command("eval-reward", cmd_eval_reward, "pairwise accuracy on held-out pairs")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score with the rule-based oracle")
    p.add_argument("--max-pairs", type=int, default=None)

    p = command("grpo", cmd_grpo, "GRPO fine-tuning with top-k filtering")
    p.add_argument("--data")
    p.add_argument("--base")
    p.add_argument("--reward")
    p.add_argument("--reward-source", choices=["learned", "oracle"], default="learned")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--group", type=int, default=24)
    p.add_argument("--k", type=int, default=6, help="0 disables top-k filtering")
    p.add_argument("--steps-per-traj", type=int, default=6)
    p.add_argument("--noise-level", type=float, default=0.7)
    p.add_argument("--clip-eps", type=float, default=1e-4)
    p.add_argument("--kl-beta", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--prompts-per-step", type=int, default=32)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--pool-size", type=int, default=5000)
    p.add_argument("--ckpt-every", type=int, default=50)
    p.add_argument("--resume", action="store_true")

    p = command("eval-policy", cmd_eval_policy, "oracle satisfaction of policy checkpoints")
    p.add_argument("--data")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--n-prompts", type=int, default=300)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--eval-steps", type=int, default=10)
    p.add_argument("--noise-level", type=float, default=0.7)
    p.add_argument("--sampler", choices=["ode", "sde"], default="ode")

    p = command("diagnose", cmd_diagnose, "advantage-bias counts with and without top-k")
    p.add_argument("--policy")
    p.add_argument("--reward")
    p.add_argument("--reward-source", choices=["learned", "oracle"], default="learned")
    p.add_argument("--data", help="take prompts from eval.jsonl instead of generating them")
    p.add_argument("--n-prompts", type=int, default=20)
    p.add_argument("--atoms", type=int, default=1, help="atoms per generated prompt")
    p.add_argument("--group", type=int, default=24)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--steps-per-traj", type=int, default=6)
    p.add_argument("--noise-level", type=float, default=0.7)
    p.add_argument("--threshold", type=float, default=1.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_config(args)
        return args.handler(args)
    except UsageError as exc:
        print(f"spatial-lab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"spatial-lab {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GenerationError, PerturbationError, UnsatisfiableError) as exc:
        print(f"spatial-lab {args.command}: generation failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"spatial-lab {args.command}: invalid setting: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"spatial-lab {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
