"""Command-line front end: one executable covering corpus synthesis, training,
adaptation, evaluation, decoding, the forgetting protocol, the trade-off sweep
and a numeric self-check.

Settings merge with a fixed precedence: command-line flags override a
plain-text key=value config file, which overrides the MISE_LAB_SEED
environment variable (seed only), which overrides built-in defaults. Every
effective value is echoed into the run's output so a report alone suffices to
reproduce it.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error. Failures
print a one-line JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace

from .data import SynthConfig, generate_corpus, load_corpus, save_corpus
from .encoder import Vocabulary
from .episodes import Post, sample_test_task, split_periods
from .errors import DataError, UsageError
from .meta import (ModelConfig, S_EVAL, TrainConfig, adapt_with_inheritance,
                   init_model, ki_loss, load_checkpoint, meta_train,
                   model_from_checkpoint, save_checkpoint, soft_labels,
                   task_loss, total_loss, train_scratch_baseline)
from .metrics import (MultiEvalReport, decode_posts, forgetting_study,
                      kshot_eval, write_report)
from .numcore import NumericError, grad_check, rng_from
from .tagging import decode_tags, encode_spans, tag_name

ENV_SEED = "MISE_LAB_SEED"
K_GRID = (3, 5, 10)
SWEEP_LAMBDAS = tuple(round(0.1 * i, 1) for i in range(1, 10))
SWEEP_TEMPERATURES = (1.0, 3.0, 5.0, 7.0, 9.0)

# public key -> TrainConfig field (the lambda keyword needs an alias)
_TRAIN_KEYS = {f.name: f.name for f in fields(TrainConfig)}
_TRAIN_KEYS["lambda"] = "lam"
del _TRAIN_KEYS["lam"]

_SYNTH_KEYS = {f.name: f.name for f in fields(SynthConfig)}

_PLUMBING_KEYS = {"format", "workers", "repeats", "holdout_fraction"}
_ALL_KEYS = set(_TRAIN_KEYS) | set(_SYNTH_KEYS) | _PLUMBING_KEYS


class _Parser(argparse.ArgumentParser):
    """argparse that reports problems as UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------ config merging

def _coerce(key: str, raw: str, target_type: type):
    try:
        if target_type is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            return tuple(int(part) for part in raw.split(","))
        return raw
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} "
                         f"as {target_type.__name__}") from None


def _field_types(cfg_cls) -> dict:
    return {f.name: type(f.default) for f in fields(cfg_cls)}


def read_config_file(path) -> dict:
    """Plain-text key=value lines; # starts a comment; unknown keys rejected."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip().replace("-", "_")
            if key not in _ALL_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = raw.strip()
    return values


def _env_seed() -> int | None:
    raw = os.environ.get(ENV_SEED)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{ENV_SEED} must be an integer, got {raw!r}") from None


def _merged(args, public_keys: dict, cfg_cls):
    """Apply precedence CLI > file > env (seed only) > dataclass defaults."""
    file_cfg = read_config_file(args.config) if args.config else {}
    types = _field_types(cfg_cls)
    out = {}
    for public, field_name in public_keys.items():
        cli_val = getattr(args, field_name, None)
        if cli_val is not None:
            out[field_name] = cli_val
        elif public in file_cfg:
            out[field_name] = _coerce(public, file_cfg[public], types[field_name])
        elif field_name == "seed" and _env_seed() is not None:
            out[field_name] = _env_seed()
    return out


def build_train_config(args) -> TrainConfig:
    return TrainConfig(**_merged(args, _TRAIN_KEYS, TrainConfig))


def build_synth_config(args) -> SynthConfig:
    return SynthConfig(**_merged(args, _SYNTH_KEYS, SynthConfig))


def _plumbing(args, key: str, default, target_type: type):
    cli_val = getattr(args, key, None)
    if cli_val is not None:
        return cli_val
    file_cfg = read_config_file(args.config) if args.config else {}
    if key in file_cfg:
        return _coerce(key, file_cfg[key], target_type)
    return default


# ------------------------------------------------------------------- helpers

def _load_split(args, cfg_seedless=False):
    fmt = _plumbing(args, "format", "jsonl", str)
    corpus, _ = load_corpus(args.data, fmt=fmt)
    return split_periods(corpus)


def _report_fmt(path) -> str:
    return "text" if str(path).endswith(".txt") else "json"


def _summary(command: str, **payload) -> int:
    rec = {"command": command}
    rec.update(payload)
    print(json.dumps(rec, ensure_ascii=False))
    return 0


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    scfg = build_synth_config(args)
    corpus = generate_corpus(scfg)
    fmt = _plumbing(args, "format", "jsonl", str)
    save_corpus(corpus, args.out, fmt=fmt)
    periods = sorted({p.period for p in corpus})
    cfg_echo = {f.name: getattr(scfg, f.name) for f in fields(SynthConfig)}
    cfg_echo["length_range"] = list(scfg.length_range)
    return _summary("synth", out=str(args.out), format=fmt, posts=len(corpus.posts),
                    periods=periods, config=cfg_echo)


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    split = _load_split(args)
    if args.no_meta:
        ckpt = train_scratch_baseline(split, cfg)
    else:
        ckpt = meta_train(split, cfg)
    save_checkpoint(ckpt, args.out)
    return _summary("train", out=str(args.out), phase=ckpt.provenance["phase"],
                    steps=ckpt.provenance["step_count"], config=cfg.echo())


def cmd_adapt(args) -> int:
    cfg = build_train_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    split = _load_split(args)
    # same draw as evaluation episode 0, so `adapt` reproduces the first
    # episode of `eval` under the same seed and K
    task = sample_test_task(split, cfg.k, rng_from(cfg.seed, S_EVAL, 0),
                            cfg.eval_size)
    student = adapt_with_inheritance(ckpt, task, cfg)
    save_checkpoint(student, args.out)
    return _summary("adapt", out=str(args.out), period=task.period,
                    support_posts=len(task.support), adapt_steps=cfg.adapt_steps,
                    config=cfg.echo())


def cmd_eval(args) -> int:
    cfg = build_train_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    split = _load_split(args)
    workers = _plumbing(args, "workers", 1, int)
    kwargs = dict(episodes=cfg.episodes, workers=workers,
                  constrain=args.constrain_decode, binary=args.binary_token_metric)
    if args.k is not None:
        report = kshot_eval(ckpt, split, cfg, k=args.k, **kwargs)
    else:
        grid = [kshot_eval(ckpt, split, cfg, k=k, **kwargs) for k in K_GRID]
        report = MultiEvalReport(config=dict(cfg.echo()), reports=grid)
    if args.out:
        write_report(report, args.out, fmt=_report_fmt(args.out))
    print(report.to_text(), end="")
    return 0


def cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    fmt = _plumbing(args, "format", "jsonl", str)
    corpus, _ = load_corpus(args.data, fmt=fmt)
    model = model_from_checkpoint(ckpt)
    preds = decode_posts(model, corpus.posts, constrain=args.constrain_decode)
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, tags in enumerate(preds):
            spans, _ = decode_tags(tags)
            rec = {"index": i,
                   "spans": [[sp.start, sp.end] for sp in spans],
                   "tags": [tag_name(t) for t in tags]}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return _summary("decode", out=str(args.out), posts=len(preds),
                    constrained=bool(args.constrain_decode))


def cmd_forget(args) -> int:
    cfg = build_train_config(args)
    split = _load_split(args)
    repeats = _plumbing(args, "repeats", 5, int)
    holdout = _plumbing(args, "holdout_fraction", 0.2, float)
    report = forgetting_study(split, cfg, repeats=repeats,
                              holdout_fraction=holdout)
    if args.out:
        write_report(report, args.out, fmt=_report_fmt(args.out))
    print(report.to_text(), end="")
    return 0


class SweepReport:
    """Grid of one evaluation per (lambda, temperature) cell."""

    def __init__(self, config: dict, k: int, cells: list):
        self.config = config
        self.k = k
        self.cells = cells

    def to_json_dict(self) -> dict:
        return {"schema_version": 1, "kind": "sweep_grid", "config": self.config,
                "k": self.k, "cells": self.cells}

    def to_text(self) -> str:
        temps = sorted({c["temperature"] for c in self.cells})
        lams = sorted({c["lambda"] for c in self.cells})
        by_key = {(c["lambda"], c["temperature"]): c for c in self.cells}
        head = "lambda\\t" + "".join(f"{t:>9.1f}" for t in temps)
        lines = [head]
        for lam in lams:
            row = f"{lam:<8.1f}"
            for t in temps:
                row += f"{by_key[(lam, t)]['aggregate']['f1_mean']:>9.4f}"
            lines.append(row)
        best = max(self.cells, key=lambda c: c["aggregate"]["f1_mean"])
        lines.append(f"best: lambda={best['lambda']:.1f} "
                     f"temperature={best['temperature']:.1f} "
                     f"f1={best['aggregate']['f1_mean']:.4f}")
        return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    cfg = build_train_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    split = _load_split(args)
    workers = _plumbing(args, "workers", 1, int)
    k = args.k if args.k is not None else cfg.k
    cells = []
    for lam in SWEEP_LAMBDAS:
        for temp in SWEEP_TEMPERATURES:
            cell_cfg = replace(cfg, lam=lam, temperature=temp)
            rep = kshot_eval(ckpt, split, cell_cfg, k=k, episodes=cfg.episodes,
                             workers=workers, constrain=args.constrain_decode,
                             binary=args.binary_token_metric)
            cells.append({"lambda": lam, "temperature": temp,
                          "aggregate": rep.aggregate, "flags": rep.flags})
    report = SweepReport(config=dict(cfg.echo()), k=k, cells=cells)
    if args.out:
        write_report(report, args.out, fmt=_report_fmt(args.out))
    print(report.to_text(), end="")
    return 0


# ------------------------------------------------------------- numeric audit

def _audit_fixture(seed: int):
    """Tiny model plus a labeled task, small enough for central differences."""
    rng = rng_from(seed, 901)
    vocab_tokens = ["<pad>", "<unk>"] + [f"w{i}" for i in range(10)]
    vocab = Vocabulary.from_id_order(vocab_tokens)
    mcfg = ModelConfig(vocab_size=len(vocab_tokens), emb_dim=4, hidden_dim=3,
                       rep_dim=6)
    model = init_model(vocab, mcfg, seed)

    posts = []
    for j in range(2):
        n = int(rng.integers(4, 7))
        tokens = [f"w{int(rng.integers(10))}" for _ in range(n)]
        start = int(rng.integers(0, n - 1))
        end = min(n - 1, start + int(rng.integers(0, 2)))
        posts.append(Post(tokens, encode_spans([(start, end)], n), "2021H1"))

    teacher = init_model(vocab, mcfg, seed + 7919)
    return model, teacher, posts


def gradient_audit(n_models: int = 20, seed: int = 0,
                   temperature: float = 5.0, lam: float = 0.2) -> dict:
    """grad_check on the sequence loss, the distillation term and their blend
    across `n_models` tiny seeded models; reports the worst relative error."""
    worst = {"nll": 0.0, "ki": 0.0, "total": 0.0}
    for m in range(n_models):
        model, teacher, posts = _audit_fixture(seed * 1000 + m)
        grid = soft_labels(teacher, posts, temperature)

        def nll_fn(params):
            return task_loss(model.with_params(params), posts)

        def ki_fn(params):
            return ki_loss(grid, model.with_params(params), posts, temperature)

        def total_fn(params):
            crf_term = task_loss(model.with_params(params), posts)
            ki_term = ki_loss(grid, model.with_params(params), posts, temperature)
            return total_loss(crf_term, ki_term, lam)

        for name, fn in (("nll", nll_fn), ("ki", ki_fn), ("total", total_fn)):
            err = float(grad_check(fn, model.params))
            worst[name] = max(worst[name], err)
    overall = max(worst.values())
    return {"models": n_models, "seed": seed, "temperature": temperature,
            "lambda": lam, "max_rel_error": worst,
            "max_rel_error_overall": overall, "threshold": 1e-4,
            "passed": bool(overall < 1e-4)}


def cmd_gradcheck(args) -> int:
    env = _env_seed()
    seed = _plumbing(args, "seed", env if env is not None else 0, int)
    result = gradient_audit(seed=seed)
    text = json.dumps(result, ensure_ascii=False, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    if not result["passed"]:
        raise NumericError(
            f"gradient audit failed: max relative error "
            f"{result['max_rel_error_overall']:.3e} >= 1e-4")
    return 0


# -------------------------------------------------------------------- parser

def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--alpha", type=float, help="inner/adaptation learning rate")
    p.add_argument("--beta", type=float, help="outer learning rate")
    p.add_argument("--k", type=int, help="support shots per episode")
    p.add_argument("--episodes", type=int, help="test episodes per evaluation")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="distillation weight in [0, 1]")
    p.add_argument("--temperature", type=float, help="soft-label temperature")
    p.add_argument("--adapt-steps", type=int, help="meta-test descent steps")
    p.add_argument("--inner-steps", type=int, help="inner-loop steps per task")
    p.add_argument("--meta-batch", type=int, help="tasks per outer step")
    p.add_argument("--max-steps", type=int, help="outer-step budget")


def _add_common(p: _Parser, *, data=False, checkpoint=False, out_required=False,
                out=False, decode_flags=False) -> None:
    p.add_argument("--config", help="plain-text key=value settings file")
    p.add_argument("--seed", type=int,
                   help=f"base seed (falls back to ${ENV_SEED})")
    if data:
        p.add_argument("--data", required=True, help="corpus path")
        p.add_argument("--format", choices=("jsonl", "conll"),
                       help="corpus file format (default jsonl)")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    if out_required:
        p.add_argument("--out", required=True, help="output path")
    elif out:
        p.add_argument("--out", help="report path (.txt renders the text table)")
    if decode_flags:
        p.add_argument("--constrain-decode", action="store_true",
                       help="mask transitions to grammar-valid tag paths")
        p.add_argument("--binary-token-metric", action="store_true",
                       help="score non-O detection instead of exact tags")


def make_parser() -> _Parser:
    parser = _Parser(prog="miselab",
                     description="Few-shot stressor tagging laboratory.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add_common(p, out_required=True)
    p.add_argument("--format", choices=("jsonl", "conll"),
                   help="corpus file format (default jsonl)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="meta-train (or train the pooled baseline)")
    _add_common(p, data=True, out_required=True)
    _add_train_flags(p)
    p.add_argument("--no-meta", action="store_true",
                   help="pooled supervised baseline instead of meta-training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adapt a checkpoint to the latest period")
    _add_common(p, data=True, checkpoint=True, out_required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="K-shot episodic evaluation")
    _add_common(p, data=True, checkpoint=True, out=True, decode_flags=True)
    _add_train_flags(p)
    p.add_argument("--workers", type=int, help="parallel episodes (default 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="tag an unlabeled corpus")
    _add_common(p, data=True, checkpoint=True, out_required=True,
                decode_flags=False)
    p.add_argument("--constrain-decode", action="store_true",
                   help="mask transitions to grammar-valid tag paths")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("forget", help="retained-performance study on past data")
    _add_common(p, data=True, out=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_forget)

    p = sub.add_parser("sweep", help="lambda x temperature grid evaluation")
    _add_common(p, data=True, checkpoint=True, out=True, decode_flags=True)
    _add_train_flags(p)
    p.add_argument("--workers", type=int, help="parallel episodes (default 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="verify gradients on tiny fixtures")
    _add_common(p, out=True)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            raise UsageError("missing command (see --help)")
        return args.func(args)
    except UsageError as e:
        return _fail("usage", e, 2)
    except NumericError as e:
        return _fail("numeric", e, 4)
    except DataError as e:
        return _fail("data", e, 3)
    except OSError as e:
        return _fail("data", e, 3)


def _fail(kind: str, exc: Exception, code: int) -> int:
    record = {"error": {"type": kind, "exit_code": code, "message": str(exc)}}
    print(json.dumps(record, ensure_ascii=False), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
