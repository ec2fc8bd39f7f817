"""Token-level scoring and the two evaluation protocols.

`kshot_eval` runs seeded adaptation episodes against the latest period and
pools token precision/recall/F1 per episode. `forgetting_study` holds out a
slice of the past, retrains without it, adapts on the latest period, and
measures what the adapted model retains on the holdout. Reports serialize
deterministically: reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .crf import viterbi
from .episodes import TimeSplit, period_key, sample_test_task
from .errors import DataError
from .meta import (Checkpoint, Model, S_EVAL, S_FORGET, TrainConfig,
                   adapt_with_inheritance, meta_train, model_from_checkpoint,
                   post_emissions)
from .numcore import rng_from
from .tagging import O

SCHEMA_VERSION = 1


# ------------------------------------------------------------------ scoring

@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "flags": self.flags}


def token_prf(pred_seqs, gold_seqs, binary: bool = False) -> PRF:
    """Micro-averaged token scores, pooled over all sequences.

    Exact-tag mode: a true positive is a non-O gold token predicted with the
    same tag. Binary mode (behind the flag) only asks both sides to be non-O.
    Zero denominators score 0 and raise a flag.
    """
    if len(pred_seqs) != len(gold_seqs):
        raise DataError("prediction/gold sequence count mismatch")
    tp = pred_pos = gold_pos = 0
    for pred, gold in zip(pred_seqs, gold_seqs):
        if len(pred) != len(gold):
            raise DataError("prediction/gold length mismatch within a sequence")
        for p, g in zip(pred, gold):
            if p != O:
                pred_pos += 1
            if g != O:
                gold_pos += 1
                if (p == g) if not binary else (p != O):
                    tp += 1
    flags = []
    if pred_pos == 0:
        flags.append("no_predicted_tokens")
    if gold_pos == 0:
        flags.append("no_gold_tokens")
    precision = tp / pred_pos if pred_pos else 0.0
    recall = tp / gold_pos if gold_pos else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF(precision, recall, f1, flags)


def decode_posts(model: Model, posts, constrain: bool = False) -> list:
    """Viterbi tags for each post (deterministic; no gradients involved)."""
    out = []
    trans = model.params["trans"].data
    for post in posts:
        em = post_emissions(model, post)
        tags, _ = viterbi(em.data, trans, constrain=constrain)
        out.append(tags)
    return out


def evaluate_on_posts(ckpt: Checkpoint, posts, *, constrain: bool = False,
                      binary: bool = False) -> PRF:
    model = model_from_checkpoint(ckpt)
    gold = []
    for p in posts:
        if p.tags is None:
            raise DataError("evaluation posts must be labeled")
        gold.append(p.tags)
    return token_prf(decode_posts(model, posts, constrain), gold, binary=binary)


# ------------------------------------------------------------------ reports

@dataclass
class EpisodeResult:
    episode: int
    seed_path: list
    precision: float
    recall: float
    f1: float
    flags: list

    def as_dict(self) -> dict:
        return {"episode": self.episode, "seed_path": self.seed_path,
                "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "flags": self.flags}


def _stats(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class EvalReport:
    config: dict
    k: int
    episodes: list
    flags: list
    wall_clock_sec: float = 0.0  # kept on the object, not serialized

    @property
    def aggregate(self) -> dict:
        p_mean, _ = _stats([e.precision for e in self.episodes])
        r_mean, _ = _stats([e.recall for e in self.episodes])
        f_mean, f_std = _stats([e.f1 for e in self.episodes])
        return {"precision_mean": p_mean, "recall_mean": r_mean,
                "f1_mean": f_mean, "f1_std": f_std}

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "kshot_eval",
            "config": self.config,
            "k": self.k,
            "episodes": [e.as_dict() for e in self.episodes],
            "aggregate": self.aggregate,
            "flags": self.flags,
        }

    def to_text(self) -> str:
        return render_grid([self])


def render_grid(reports) -> str:
    """Shot-count grid: one row per K with pooled precision/recall/F1."""
    lines = [f"{'K':<9}{'Precision':>11}{'Recall':>11}{'F1':>11}{'F1-std':>11}"]
    for rep in reports:
        agg = rep.aggregate
        lines.append(f"{str(rep.k) + '-shot':<9}"
                     f"{agg['precision_mean']:>11.4f}{agg['recall_mean']:>11.4f}"
                     f"{agg['f1_mean']:>11.4f}{agg['f1_std']:>11.4f}")
    return "\n".join(lines) + "\n"


@dataclass
class MultiEvalReport:
    config: dict
    reports: list

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "kshot_eval_grid",
            "config": self.config,
            "by_k": {str(r.k): {"episodes": [e.as_dict() for e in r.episodes],
                                "aggregate": r.aggregate, "flags": r.flags}
                     for r in self.reports},
        }

    def to_text(self) -> str:
        return render_grid(self.reports)


def write_report(report, path, fmt: str = "json") -> None:
    """Bit-stable serialization: identical reports produce identical bytes."""
    if fmt == "json":
        text = json.dumps(report.to_json_dict(), ensure_ascii=False, indent=2) + "\n"
    elif fmt == "text":
        text = report.to_text()
    else:
        raise DataError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------- protocols

def kshot_eval(ckpt: Checkpoint, split: TimeSplit, cfg: TrainConfig, *,
               k: int | None = None, episodes: int | None = None,
               workers: int = 1, constrain: bool = False,
               binary: bool = False) -> EvalReport:
    """Seeded adaptation episodes on the latest period.

    Episode i draws its own rng from (seed, stream, i), so results do not
    depend on `workers` or on how many episodes run before it, and different
    K settings under one seed score against the same eval posts.
    """
    k = cfg.k if k is None else k
    episodes = cfg.episodes if episodes is None else episodes
    if episodes < 1:
        raise DataError("need at least one episode")

    def run(i: int) -> EpisodeResult:
        seed_path = [cfg.seed, S_EVAL, i]
        rng = rng_from(*seed_path)
        task = sample_test_task(split, k, rng, cfg.eval_size)
        episode_cfg = replace(cfg, k=k)
        student = adapt_with_inheritance(ckpt, task, episode_cfg)
        model = model_from_checkpoint(student)
        preds = decode_posts(model, task.eval_posts, constrain=constrain)
        prf = token_prf(preds, [p.tags for p in task.eval_posts], binary=binary)
        return EpisodeResult(i, seed_path, prf.precision, prf.recall, prf.f1, prf.flags)

    started = time.perf_counter()
    if workers <= 1:
        results = [run(i) for i in range(episodes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(episodes)))
    flags = sorted({f for r in results for f in r.flags})
    report = EvalReport(config=dict(cfg.echo()), k=k, episodes=results, flags=flags,
                        wall_clock_sec=time.perf_counter() - started)
    return report


@dataclass
class ForgettingReport:
    config: dict
    holdout_fraction: float
    repeats: list  # per repeat: {"before": .., "inherit": .., "finetune": ..}

    def _mean(self, arm: str) -> dict:
        keys = ("precision", "recall", "f1")
        return {k: float(np.mean([r[arm][k] for r in self.repeats])) for k in keys}

    @property
    def aggregate(self) -> dict:
        means = {arm: self._mean(arm) for arm in ("before", "inherit", "finetune")}
        means["retained_f1_gap"] = means["inherit"]["f1"] - means["finetune"]["f1"]
        return means

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "forgetting_study",
            "config": self.config,
            "holdout_fraction": self.holdout_fraction,
            "repeats": self.repeats,
            "aggregate": self.aggregate,
        }

    def to_text(self) -> str:
        agg = self.aggregate
        lines = [f"{'arm':<12}{'Precision':>11}{'Recall':>11}{'F1':>11}"]
        for arm in ("before", "inherit", "finetune"):
            m = agg[arm]
            lines.append(f"{arm:<12}{m['precision']:>11.4f}{m['recall']:>11.4f}"
                         f"{m['f1']:>11.4f}")
        lines.append(f"retained-F1 gap (inherit - finetune): {agg['retained_f1_gap']:.4f}")
        return "\n".join(lines) + "\n"


def forgetting_study(split: TimeSplit, cfg: TrainConfig, *, repeats: int = 5,
                     holdout_fraction: float = 0.2) -> ForgettingReport:
    """Hold out past data, retrain, adapt on the latest period, and measure
    retained F1 on the holdout for the inheritance arm vs plain fine-tuning.
    Both arms share the retrained model and the same adaptation episode."""
    if not 0.0 < holdout_fraction < 1.0:
        raise DataError("holdout fraction must lie strictly between 0 and 1")
    if repeats < 1:
        raise DataError("need at least one repeat")
    past = [p for p in split.past_posts() if p.tags is not None]
    n_hold = int(round(holdout_fraction * len(past)))
    if n_hold < 1 or len(past) - n_hold < 1:
        raise DataError(f"past pool of {len(past)} posts cannot support "
                        f"a {holdout_fraction:.0%} holdout")
    rows = []
    for r in range(repeats):
        rng = rng_from(cfg.seed, S_FORGET, r)
        perm = rng.permutation(len(past))
        holdout = sorted((past[i] for i in perm[:n_hold]), key=lambda p: p.index)
        kept = sorted((past[i] for i in perm[n_hold:]), key=lambda p: p.index)
        groups: dict[str, list] = {}
        for p in kept:
            groups.setdefault(p.period, []).append(p)
        ordered = sorted(groups, key=period_key)
        sub = TimeSplit({label: groups[label] for label in ordered},
                        split.latest_label, split.latest)
        run_cfg = replace(cfg, seed=int(rng.integers(2 ** 31)))
        meta_ckpt = meta_train(sub, run_cfg)
        task = sample_test_task(split, cfg.k, rng, cfg.eval_size)
        inherit = adapt_with_inheritance(meta_ckpt, task, run_cfg)
        finetune = adapt_with_inheritance(meta_ckpt, task, replace(run_cfg, lam=0.0))
        rows.append({
            "repeat": r,
            "holdout_size": n_hold,
            "before": evaluate_on_posts(meta_ckpt, holdout).as_dict(),
            "inherit": evaluate_on_posts(inherit, holdout).as_dict(),
            "finetune": evaluate_on_posts(finetune, holdout).as_dict(),
        })
    return ForgettingReport(config=dict(cfg.echo()),
                            holdout_fraction=holdout_fraction, repeats=rows)
