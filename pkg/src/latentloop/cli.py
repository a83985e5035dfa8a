"""Command-line entry points for the latent-feedback toolkit.

Every command reads a flat key=value config (overridable on the command
line), runs deterministically for a given seed, and writes its artifacts
into a fresh run directory together with the fully resolved config. Reruns
with identical inputs produce bitwise-identical artifacts; the --workers
flag is accepted everywhere but never changes results.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import inference as inf
from .data import (SyntheticTaskConfig, default_vocab, gen_synthetic_task,
                   is_perfect_square, leakage_audit, load_dataset, save_dataset)
from .model import (ModelConfig, DecoderParams, init_latent_head,
                    load_checkpoint, save_checkpoint)
from .norm_diag import LATENT, TEXT, accumulation_report, profile_norms, profile_to_csv
from .numerics import Rng
from .pca import (fit, fit_components, fit_report, load_basis, load_samples,
                  save_basis, save_samples)
from .training import TrainConfig, grad_check, train_model, training_log_csv


class ConfigError(Exception):
    """Raised for malformed or unknown configuration; maps to exit code 2."""


def _coerce(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def read_config_file(path) -> dict:
    """Flat key=value lines; blank lines and # comments ignored."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            out[key.strip()] = _coerce(val.strip())
    return out


def resolve_config(defaults: dict, file_path, overrides) -> dict:
    """Merge defaults <- config file <- key=value overrides; reject unknown keys."""
    cfg = dict(defaults)

    def apply(source: dict, origin: str):
        for key, val in source.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r} ({origin})")
            cfg[key] = val

    if file_path:
        apply(read_config_file(file_path), f"from {file_path}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, val = item.partition("=")
        apply({key.strip(): _coerce(val.strip())}, "command line")
    return cfg


def make_run_dir(out, cfg: dict, seed: int) -> str:
    os.makedirs(out, exist_ok=True)
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)] + [f"seed={seed}"]
    _write_text(os.path.join(out, "config.txt"), "\n".join(lines) + "\n")
    return out

def _write_text(path, text: str):
    with open(path, "w") as f:
        f.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_budget(budget: int):
    if budget < 1 or not is_perfect_square(budget):
        raise ConfigError(f"budget must be a perfect square, got {budget}")


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(d_model=cfg["d_model"], n_layers=cfg["n_layers"],
                       n_heads=cfg["n_heads"], d_ff=cfg["d_ff"],
                       vocab_size=cfg["vocab_size"], latent_k=cfg["latent_k"],
                       max_seq_len=cfg["max_seq_len"], init_seed=cfg["init_seed"])


_MODEL_DEFAULTS = {
    "d_model": 64, "n_layers": 4, "n_heads": 4, "d_ff": 256, "vocab_size": 64,
    "latent_k": 16, "max_seq_len": 512, "init_seed": 12345,
}


# -- commands ---------------------------------------------------------------

def cmd_pca_fit(args):
    defaults = {"samples": "", "variance_target": 0.95, "k": 0}
    cfg = resolve_config(defaults, args.config, args.set)
    if not cfg["samples"]:
        raise ConfigError("config key 'samples' (input sample file) is required")
    out = make_run_dir(args.out, cfg, args.seed)
    samples = load_samples(cfg["samples"])
    if cfg["k"]:
        basis = fit_components(samples, cfg["k"])
    else:
        basis = fit(samples, cfg["variance_target"])
    save_basis(basis, os.path.join(out, "basis.bin"))
    _write_json(os.path.join(out, "fit_report.json"),
                fit_report(basis, samples, cfg["variance_target"]))
    print(f"fit basis d={basis.d} k={basis.k} -> {out}")


def cmd_build_data(args):
    defaults = {"count": 1000, "budget": 16, "d": 64, "n_classes": 10,
                "text_only_fraction": 0.2, "target_norm": 8.0,
                "target_noise": 0.05}
    cfg = resolve_config(defaults, args.config, args.set)
    _check_budget(cfg["budget"])
    out = make_run_dir(args.out, cfg, args.seed)
    task = SyntheticTaskConfig(d=cfg["d"], budget=cfg["budget"],
                               n_classes=cfg["n_classes"],
                               target_norm=cfg["target_norm"],
                               target_noise=cfg["target_noise"],
                               text_only_fraction=cfg["text_only_fraction"])
    vocab = default_vocab(cfg["n_classes"])
    examples = gen_synthetic_task(Rng(args.seed), cfg["count"], task, vocab)
    save_dataset(examples, vocab, cfg["d"], os.path.join(out, "dataset.bin"))
    targets = [t for ex in examples if ex.segments.latent_span
               for t in ex.segments.latent_span.targets]
    if targets:
        save_samples(np.stack(targets), os.path.join(out, "targets.bin"))
    n_latent = sum(1 for e in examples if e.supervision_mode == "latent")
    print(f"wrote {len(examples)} examples ({n_latent} latent-supervised) -> {out}")


def cmd_train(args):
    defaults = dict(_MODEL_DEFAULTS)
    defaults.update({"dataset": "", "basis": "", "epochs": 2, "batch_size": 8,
                     "base_lr": 3e-3, "latent_head_lr": 3e-3,
                     "lambda_latent": 1.0, "scheduled_mix": 0.0,
                     "weight_decay": 0.01, "warmup_ratio": 0.03,
                     "init_perturb": 1e-3})
    cfg = resolve_config(defaults, args.config, args.set)
    for key in ("dataset", "basis"):
        if not cfg[key]:
            raise ConfigError(f"config key {key!r} is required")
    out = make_run_dir(args.out, cfg, args.seed)
    examples, vocab, _ = load_dataset(cfg["dataset"])
    basis = load_basis(cfg["basis"])
    params = DecoderParams(_model_config(cfg))
    init_latent_head(params, basis, perturb_scale=cfg["init_perturb"],
                     seed=args.seed)
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                     lambda_latent=cfg["lambda_latent"],
                     scheduled_mix=cfg["scheduled_mix"], seed=args.seed,
                     base_lr=cfg["base_lr"], latent_head_lr=cfg["latent_head_lr"],
                     weight_decay=cfg["weight_decay"],
                     warmup_ratio=cfg["warmup_ratio"])
    params, log = train_model(params, basis, examples, vocab, tc)
    save_checkpoint(params, os.path.join(out, "checkpoint.bin"))
    _write_text(os.path.join(out, "training_log.csv"), training_log_csv(log))
    print(f"trained {len(log)} steps; final total loss {log[-1]['total']:.6f} -> {out}")


def _labeled_batch(examples, vocab, limit):
    """(slots, labels) pairs for norm profiling: teacher-forced full sequences."""
    from .training import prepare_example
    batch = []
    for ex in examples[:limit]:
        prep = prepare_example(ex, vocab)
        labels = [LATENT if i in set(prep.pad_slots) else TEXT
                  for i in range(len(prep.slots))]
        batch.append((prep.slots, labels))
    return batch


def cmd_profile_norms(args):
    defaults = {"checkpoint": "", "dataset": "", "max_examples": 16}
    cfg = resolve_config(defaults, args.config, args.set)
    for key in ("checkpoint", "dataset"):
        if not cfg[key]:
            raise ConfigError(f"config key {key!r} is required")
    out = make_run_dir(args.out, cfg, args.seed)
    params = load_checkpoint(cfg["checkpoint"])
    examples, vocab, _ = load_dataset(cfg["dataset"])
    batch = _labeled_batch(examples, vocab, cfg["max_examples"])
    profile = profile_norms(params, batch)
    _write_text(os.path.join(out, "norm_profile.csv"), profile_to_csv(profile))
    report = accumulation_report(params, [slots for slots, _ in batch])
    _write_json(os.path.join(out, "accumulation.json"), report)
    print(f"profiled {report['n_positions']} positions; "
          f"accumulation gap {report['relative_gap']:.4f} -> {out}")


def _intervention_mode(name: str) -> inf.InterventionMode:
    if name == "clean":
        return inf.CLEAN
    if name == "zero_latent":
        return inf.ZERO_LATENT
    if name == "noise":
        return inf.noise_mode()
    raise ConfigError(f"unknown intervention mode {name!r}")


def cmd_intervene(args):
    defaults = {"checkpoint": "", "dataset": "", "basis": "", "mode": "clean",
                "budget": 16, "max_tokens": 64, "max_examples": 0,
                "save_transcripts": 4}
    cfg = resolve_config(defaults, args.config, args.set)
    for key in ("checkpoint", "dataset", "basis"):
        if not cfg[key]:
            raise ConfigError(f"config key {key!r} is required")
    mode = _intervention_mode(cfg["mode"])
    if mode.kind != "zero_latent":
        _check_budget(cfg["budget"])
    out = make_run_dir(args.out, cfg, args.seed)
    params = load_checkpoint(cfg["checkpoint"])
    examples, vocab, _ = load_dataset(cfg["dataset"])
    if cfg["max_examples"]:
        examples = examples[:cfg["max_examples"]]
    acc = inf.evaluate(params, load_basis(cfg["basis"]), examples, vocab, mode,
                       max(1, cfg["budget"]), args.seed,
                       max_tokens=cfg["max_tokens"])
    _write_json(os.path.join(out, "accuracy.json"),
                {"mode": cfg["mode"], "budget": cfg["budget"],
                 "accuracy": acc, "n_examples": len(examples)})
    basis = load_basis(cfg["basis"])
    rng = Rng(args.seed)
    lines = []
    for i, ex in enumerate(examples[:cfg["save_transcripts"]]):
        t = inf.decode(params, basis, list(ex.query_tokens), max(1, cfg["budget"]),
                       mode, rng.spawn(i), cfg["max_tokens"], vocab)
        lines.append(inf.transcript_to_jsonl(t))
    _write_text(os.path.join(out, "transcripts.jsonl"), "".join(lines))
    print(f"{cfg['mode']} accuracy {acc:.4f} over {len(examples)} examples -> {out}")


def cmd_sweep(args):
    defaults = {"checkpoint": "", "dataset": "", "basis": "",
                "budgets": "0,4,16,36", "seeds": "0,1,2", "max_tokens": 64,
                "max_examples": 0}
    cfg = resolve_config(defaults, args.config, args.set)
    for key in ("checkpoint", "dataset", "basis"):
        if not cfg[key]:
            raise ConfigError(f"config key {key!r} is required")
    try:
        budgets = [int(b) for b in str(cfg["budgets"]).split(",")]
        seeds = [int(s) for s in str(cfg["seeds"]).split(",")]
    except ValueError as exc:
        raise ConfigError(f"budgets/seeds must be comma-separated integers: {exc}")
    for b in budgets:
        if b != 0:
            _check_budget(b)
    out = make_run_dir(args.out, cfg, args.seed)
    params = load_checkpoint(cfg["checkpoint"])
    examples, vocab, _ = load_dataset(cfg["dataset"])
    if cfg["max_examples"]:
        examples = examples[:cfg["max_examples"]]
    rows, summary = inf.budget_sweep(params, load_basis(cfg["basis"]), examples,
                                     vocab, budgets, seeds,
                                     max_tokens=cfg["max_tokens"])
    _write_text(os.path.join(out, "sweep.csv"), inf.sweep_csv(rows))
    _write_json(os.path.join(out, "summary.json"), summary)
    for s in summary:
        print(f"budget {s['budget']}: {s['mean_accuracy']:.4f} "
              f"+/- {s['std_accuracy']:.4f}")


def cmd_audit(args):
    defaults = {"train_dataset": "", "eval_dataset": ""}
    cfg = resolve_config(defaults, args.config, args.set)
    for key in defaults:
        if not cfg[key]:
            raise ConfigError(f"config key {key!r} is required")
    out = make_run_dir(args.out, cfg, args.seed)
    train_ex, _, _ = load_dataset(cfg["train_dataset"])
    eval_ex, _, _ = load_dataset(cfg["eval_dataset"])
    report = leakage_audit(train_ex, eval_ex)
    _write_json(os.path.join(out, "audit.json"), report)
    n = len(report["image_collisions"]) + len(report["text_collisions"])
    print(f"{n} cross-split collisions -> {out}")


def cmd_grad_check(args):
    defaults = dict(_MODEL_DEFAULTS)
    defaults.update({"n_examples": 2, "budget": 4, "coords_per_group": 8,
                     "fd_step": 1e-5, "tolerance": 1e-4})
    cfg = resolve_config(defaults, args.config, args.set)
    _check_budget(cfg["budget"])
    out = make_run_dir(args.out, cfg, args.seed)
    vocab = default_vocab()
    params = DecoderParams(_model_config(cfg))
    task = SyntheticTaskConfig(d=cfg["d_model"], budget=cfg["budget"],
                               text_only_fraction=0.0)
    examples = gen_synthetic_task(Rng(args.seed), cfg["n_examples"], task, vocab)
    targets = np.stack([t for ex in examples
                        for t in ex.segments.latent_span.targets])
    basis = fit_components(targets, cfg["latent_k"])
    init_latent_head(params, basis, perturb_scale=1e-3, seed=args.seed)
    report = grad_check(params, basis, examples, vocab, fd_step=cfg["fd_step"],
                        coords_per_group=cfg["coords_per_group"], seed=args.seed)
    report["tolerance"] = cfg["tolerance"]
    report["passed"] = report["max_rel_error"] < cfg["tolerance"]
    _write_json(os.path.join(out, "grad_check.json"), report)
    print(f"max relative gradient error {report['max_rel_error']:.3e} "
          f"({'OK' if report['passed'] else 'FAIL'}) -> {out}")
    if not report["passed"]:
        raise RuntimeError("gradient check exceeded tolerance")


_COMMANDS = {
    "pca-fit": cmd_pca_fit,
    "build-data": cmd_build_data,
    "train": cmd_train,
    "profile-norms": cmd_profile_norms,
    "intervene": cmd_intervene,
    "sweep": cmd_sweep,
    "audit": cmd_audit,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentloop",
        description="PCA latent-feedback decoding toolkit")
    sub = parser.add_subparsers(dest="command")
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1,
                       help="accepted for interface compatibility; results "
                            "are identical for any value")
        p.add_argument("--out", required=True, help="run directory")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and argv[0] not in _COMMANDS and not argv[0].startswith("-"):
        print(f"error: unknown command {argv[0]!r}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if not args.command:
        parser.print_help()
        return 2
    if args.workers < 1:
        print("error: workers must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(1)
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
