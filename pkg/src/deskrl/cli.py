"""Command-line entry point: ``deskrl train | eval | ablate``.

Exit status: 0 on success, 1 for configuration or argument errors, 2 for
failures at run time (corrupt checkpoints, locked output directories,
numerical blow-ups). ``DESKRL_SEED`` and ``DESKRL_OUT`` override the
config's seed and output directory; explicit flags win over both.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from filelock import FileLock, Timeout

from .config import ConfigError, ablation_variants, dump_config, load_config
from .errors import CheckpointError, DeskRLError, InvalidDifficulty
from .evaluation import EVAL_TEMPERATURE, difficulty_sweep, write_reports
from .policy import MAGIC as POLICY_MAGIC
from .policy import PolicyParameters, save_params
from .tasks import FAMILIES, SIZE_KEY
from .trainer import (
    TRAINER_MAGIC,
    TrainerState,
    ValidationSpec,
    build_validation_set,
    metrics_line,
    run_stages,
    save_state,
    state_from_bytes,
    validate,
)
from .vocab import VOCAB

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOCK_NAME = ".lock"


class RunLocked(DeskRLError, RuntimeError):
    pass


@contextmanager
def output_lock(out_dir):
    """Exclusive ownership of ``out_dir`` for the duration of a run.

    The lock is an OS-level file lock, so a killed run never leaves it held.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(out_dir / LOCK_NAME)
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunLocked(f"{out_dir} is in use by another run") from None
    try:
        yield out_dir
    finally:
        lock.release()
        (out_dir / LOCK_NAME).unlink(missing_ok=True)


def _env_seed():
    raw = os.environ.get("DESKRL_SEED")
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError("DESKRL_SEED", f"not an integer: {raw!r}") from None
    if seed < 0:
        raise ConfigError("DESKRL_SEED", "must be >= 0")
    return seed


def resolve_config(path, seed=None, out=None):
    cfg = load_config(path)
    env_out = os.environ.get("DESKRL_OUT") or None
    seed = seed if seed is not None else _env_seed()
    return cfg.with_overrides(seed=seed, output_dir=out if out is not None else env_out)


# -- training -----------------------------------------------------------------------------


def _validation_spec(cfg, seed):
    v = cfg.validation
    if not v.every:
        return None
    instances = build_validation_set(cfg.mixture, v.prompts_per_family, seed)
    return ValidationSpec(instances, n=v.n, cadence=v.every, temperature=v.temperature, max_len=v.max_len)


def train_run(cfg, out_dir, progress=None):
    """Run one training job into ``out_dir``; returns ``(state, log)``.

    Writes config.json, metrics.jsonl (flushed per record), periodic
    checkpoints under ``checkpoints/`` and the final trainer state and policy.
    """
    out_dir = Path(out_dir)
    (out_dir / "config.json").write_text(dump_config(cfg))
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    m = cfg.model
    state = TrainerState.initial(VOCAB.size, seed=cfg.seed, d=m.d, h=m.h, w=m.w, stage=cfg.stages[0])
    validation = _validation_spec(cfg, cfg.seed)

    with open(out_dir / "metrics.jsonl", "w") as metrics:
        def sink(record):
            metrics.write(metrics_line(record) + "\n")
            metrics.flush()
            done = record["step"] + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.total_steps:
                save_state(state, ckpt_dir / f"step_{done:06d}.state")
            if progress:
                progress(record)

        state, log = run_stages(state, cfg.stages, cfg.total_steps, validation, sink)
    save_state(state, out_dir / "final.state")
    save_params(state.params, out_dir / "policy.bin")
    return state, log


def cmd_train(args):
    cfg = resolve_config(args.config, args.seed, args.out)
    with output_lock(cfg.output_dir) as out:
        state, _ = train_run(cfg, out)
    print(f"trained {state.global_step} steps -> {Path(cfg.output_dir) / 'final.state'}")
    return EXIT_OK


# -- evaluation -------------------------------------------------------------------------------


def load_policy(path):
    """Policy weights from either a policy checkpoint or a trainer-state checkpoint."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError("file", f"cannot read {path}: {exc.strerror}") from None
    if blob[:8] == TRAINER_MAGIC:
        return state_from_bytes(blob).params
    if blob[:8] != POLICY_MAGIC:
        raise CheckpointError("magic", f"unrecognised magic {blob[:8]!r}")
    return PolicyParameters.from_bytes(blob)


def _int_list(text, name):
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(name, f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError(name, "empty list")
    return values


def cmd_eval(args):
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigError("--families", f"unknown family {fam!r}")
    if not families:
        raise ConfigError("--families", "empty list")
    sizes = _int_list(args.sizes, "--sizes")
    ks = sorted(set(_int_list(args.ks, "--ks")))
    if args.n < 1:
        raise ConfigError("--n", "must be >= 1")
    if ks[0] < 1 or ks[-1] > args.n:
        raise ConfigError("--ks", f"every k must lie in [1, {args.n}]")
    params = load_policy(args.ckpt)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    entries = []
    with output_lock(out):
        for fam in families:
            try:
                rows = difficulty_sweep(params, fam, sizes, args.n, seed=args.seed, prompts=args.prompts,
                                        ks=ks, temperature=args.temperature, max_len=args.max_len)
            except InvalidDifficulty as exc:
                raise ConfigError("--sizes", f"{fam}: {exc}") from None
            entries.extend((fam, r.size, r.matrix) for r in rows)
        write_reports(out, Path(args.ckpt).name, entries, ks)
    for fam, size, matrix in entries:
        print(f"{fam} {SIZE_KEY[fam]}={size} pass@1={matrix.pass1_rates().mean():.4f}")
    return EXIT_OK


# -- ablation ---------------------------------------------------------------------------------

SUMMARY_FIELDS = ("variant", "seed", "eps_low", "eps_high", "beta", "reset", "final_entropy",
                  "final_val_pass1", "final_kl", "mean_kl")


def run_ablation(cfg, out_dir, seeds=None):
    """Train every grid variant for every seed; returns summary rows."""
    seeds = list(seeds or (cfg.ablation and cfg.ablation.seeds) or [cfg.seed])
    rows = []
    out_dir = Path(out_dir)
    with open(out_dir / "kl_traces.csv", "w", newline="") as kl_fh:
        kl_csv = csv.writer(kl_fh, lineterminator="\n")
        kl_csv.writerow(["variant", "seed", "step", "kl", "reset_flag"])
        for name, variant in ablation_variants(cfg):
            for seed in seeds:
                run_cfg = variant.with_overrides(seed=seed, output_dir=str(out_dir / name / f"seed{seed}"))
                run_dir = Path(run_cfg.output_dir)
                run_dir.mkdir(parents=True, exist_ok=True)
                state, log = train_run(run_cfg, run_dir)
                for rec in log:
                    kl_csv.writerow([name, seed, rec["step"], rec["kl"], int(rec["reset_flag"])])
                kl_fh.flush()
                spec = _validation_spec(run_cfg, seed)
                final_pass1 = validate(state, spec, run_cfg.stages[-1].max_len)[0] if spec else None
                kls = [r["kl"] for r in log if r["kl"] is not None]
                last = run_cfg.stages[-1]
                rows.append({
                    "variant": name, "seed": seed, "eps_low": last.eps_low, "eps_high": last.eps_high,
                    "beta": last.beta, "reset": last.reset.enabled,
                    "final_entropy": log[-1]["entropy"] if log else None,
                    "final_val_pass1": final_pass1,
                    "final_kl": log[-1]["kl"] if log else None,
                    "mean_kl": sum(kls) / len(kls) if kls else None,
                })
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_ablate(args):
    cfg = resolve_config(args.config, args.seed, args.out)
    with output_lock(cfg.output_dir) as out:
        (out / "config.json").write_text(dump_config(cfg))
        rows = run_ablation(cfg, out)
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


# -- entry ---------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="deskrl", description="Desk-scale prolonged GRPO training lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="pass@k evaluation and difficulty sweep of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--families", required=True, help="comma-separated task families")
    e.add_argument("--sizes", required=True, help="comma-separated sizes for each family's size knob")
    e.add_argument("--n", type=int, required=True, help="samples per prompt")
    e.add_argument("--ks", required=True, help="comma-separated k values")
    e.add_argument("--prompts", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--temperature", type=float, default=EVAL_TEMPERATURE)
    e.add_argument("--max-len", type=int, default=32)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="clip x KL x reset ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors count as configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DeskRLError, OSError, ArithmeticError, ValueError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
