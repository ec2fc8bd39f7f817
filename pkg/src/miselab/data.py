"""Corpus I/O and the synthetic long-tail corpus generator.

Two on-disk formats: JSONL records {"tokens": [...], "tags": [...],
"period": "2019H1"} with tags optional, and CoNLL-style token<TAB>tag lines
with blank lines between posts and '# period: <label>' comments.

The generator writes posts whose stressor spans follow a Zipf class
distribution and embeds them in weak contextual cues: established classes
get a generic stress marker before the span and a class-correlated neighbor
token after it. Each period tilts the class mix toward an alternating half
of the inventory (pooled frequencies stay Zipf), so adapting to a period
means picking up its mix. The latest period draws a configurable fraction
of its spans from classes no past period contains; those surface as a
shared stem plus a per-mention paraphrase token, with no marker. Surface
tokens also appear outside spans as decoys, so bare lexical matches are not
reliable evidence.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .episodes import Corpus, Post, period_key
from .errors import DataError
from .numcore import rng_from
from .tagging import decode_tags, encode_spans, tag_id, tag_name

_FIELDS = ("tokens", "tags", "period")

# generator shape knobs (kept out of SynthConfig on purpose: they define the
# corpus family, not its size)
_SPAN_COUNT_P = (0.15, 0.55, 0.30)
# the latest period mentions stressors more sparsely than the past ones, so
# a model carried over from the past over-predicts span entries until it
# re-estimates the density from the support posts
_SPAN_COUNT_P_LATEST = (0.45, 0.50, 0.05)
_PAST_LEN3_P = 0.3
_MARKER_COUNT = 4
_STEM_COUNT = 3
_NOVEL_CLASS_MAX = 3
_NOVEL_VARIANTS = 5
_P_MARKER = 0.6
_P_MARKER_LATEST = 0.95
_P_CUE = 0.35
_P_MARKER_NOISE = 0.12
_P_DECOY = 0.18
_P_DECOY_FULL = 0.45
_ZIPF_FILLER = 1.1
_TILT = 3.0


# ------------------------------------------------------------------ loading

@dataclass
class CorpusSummary:
    post_count: int
    labeled_count: int
    posts_per_period: dict
    span_count: int
    surface_histogram: dict

    def to_json_dict(self) -> dict:
        return {
            "post_count": self.post_count,
            "labeled_count": self.labeled_count,
            "posts_per_period": self.posts_per_period,
            "span_count": self.span_count,
            "distinct_surfaces": len(self.surface_histogram),
        }


def summarize(corpus: Corpus) -> CorpusSummary:
    per_period: Counter = Counter()
    surfaces: Counter = Counter()
    span_count = 0
    labeled = 0
    for post in corpus:
        per_period[post.period] += 1
        if post.tags is None:
            continue
        labeled += 1
        spans, _ = decode_tags(post.tags)
        span_count += len(spans)
        for sp in spans:
            surfaces[" ".join(post.tokens[sp.start:sp.end + 1])] += 1
    try:
        ordered = sorted(per_period, key=period_key)
    except DataError:
        ordered = sorted(per_period)
    return CorpusSummary(
        post_count=len(corpus),
        labeled_count=labeled,
        posts_per_period={k: per_period[k] for k in ordered},
        span_count=span_count,
        surface_histogram=dict(surfaces),
    )


def _resolve_fields(field_map: dict | None) -> dict:
    names = {k: k for k in _FIELDS}
    if field_map:
        for k, v in field_map.items():
            if k not in names:
                raise DataError(f"unknown field-map key {k!r}")
            names[k] = v
    return names


def _tags_from_names(raw, where: str) -> list[int]:
    if not isinstance(raw, list):
        raise DataError(f"{where}: tags must be a list")
    return [tag_id(str(t)) for t in raw]


def load_corpus(path, fmt: str = "jsonl",
                field_map: dict | None = None) -> tuple[Corpus, CorpusSummary]:
    if fmt == "jsonl":
        corpus = _load_jsonl(path, _resolve_fields(field_map))
    elif fmt == "conll":
        corpus = _load_conll(path)
    else:
        raise DataError(f"unknown corpus format {fmt!r}")
    return corpus, summarize(corpus)


def _load_jsonl(path, names: dict) -> Corpus:
    posts = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or names["tokens"] not in rec:
                raise DataError(f"line {lineno}: record lacks a {names['tokens']!r} field")
            tokens = rec[names["tokens"]]
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise DataError(f"line {lineno}: tokens must be a list of strings")
            if not tokens:
                raise DataError(f"line {lineno}: empty post")
            tags = None
            if names["tags"] in rec and rec[names["tags"]] is not None:
                tags = _tags_from_names(rec[names["tags"]], f"line {lineno}")
                if len(tags) != len(tokens):
                    raise DataError(
                        f"line {lineno}: {len(tags)} tags for {len(tokens)} tokens")
            period = str(rec.get(names["period"], ""))
            posts.append(Post(tokens, tags, period))
    return Corpus(posts)


def _load_conll(path) -> Corpus:
    posts = []
    tokens: list[str] = []
    tags: list[str] = []
    period = ""
    start_line = 1

    def flush(lineno):
        nonlocal tokens, tags, period
        if not tokens:
            return
        labeled = [t for t in tags if t is not None]
        if labeled and len(labeled) != len(tokens):
            raise DataError(
                f"line {lineno}: post starting at line {start_line} mixes "
                "labeled and unlabeled tokens")
        post_tags = [tag_id(t) for t in tags] if labeled else None
        posts.append(Post(tokens, post_tags, period))
        tokens, tags = [], []

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("# period:"):
                period = line[len("# period:"):].strip()
                continue
            if not line.strip():
                flush(lineno)
                continue
            if not tokens:
                start_line = lineno
            parts = line.split("\t")
            if len(parts) == 1:
                tokens.append(parts[0])
                tags.append(None)
            elif len(parts) == 2:
                if not parts[0]:
                    raise DataError(f"line {lineno}: empty token")
                tokens.append(parts[0])
                tags.append(parts[1])
            else:
                raise DataError(f"line {lineno}: expected 'token<TAB>tag', got {line!r}")
        flush(lineno if posts or tokens else 0)
    return Corpus(posts)


# ------------------------------------------------------------------- saving

def save_corpus(corpus: Corpus, path, fmt: str = "jsonl") -> None:
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for post in corpus:
                rec = {"tokens": post.tokens}
                if post.tags is not None:
                    rec["tags"] = [tag_name(t) for t in post.tags]
                rec["period"] = post.period
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    elif fmt == "conll":
        with open(path, "w", encoding="utf-8") as fh:
            for post in corpus:
                if post.period:
                    fh.write(f"# period: {post.period}\n")
                for i, tok in enumerate(post.tokens):
                    if post.tags is None:
                        fh.write(tok + "\n")
                    else:
                        fh.write(f"{tok}\t{tag_name(post.tags[i])}\n")
                fh.write("\n")
    else:
        raise DataError(f"unknown corpus format {fmt!r}")


# ---------------------------------------------------------------- generator

@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic corpus; defaults give 7 past periods + 1 latest
    whose spans are novel-class with probability 0.3."""

    vocab_size: int = 300
    num_classes: int = 12
    zipf_exponent: float = 1.1
    num_periods: int = 8
    novel_fraction: float = 0.3
    posts_per_period: int = 40
    length_range: tuple = (8, 14)
    seed: int = 0

    def __post_init__(self):
        if self.num_periods < 2:
            raise DataError("need at least 2 periods (past + latest)")
        if not 0.0 <= self.novel_fraction <= 1.0:
            raise DataError("novel_fraction must lie in [0, 1]")
        if self.length_range[0] < 4 or self.length_range[1] < self.length_range[0]:
            raise DataError(f"bad post length range {self.length_range}")
        if self.num_classes < 1 or self.posts_per_period < 1:
            raise DataError("num_classes and posts_per_period must be positive")
        if self.zipf_exponent <= 0:
            raise DataError("zipf_exponent must be positive")


@dataclass
class _Layout:
    markers: list[str]
    stems: list[str]
    surfaces: list[list[tuple]]  # per class, one or more variant token tuples
    cues: list[str]
    fillers: list[str]
    filler_p: np.ndarray
    past_classes: list[int]
    novel_classes: list[int]
    zipf_p: np.ndarray


def period_labels(num_periods: int, start: tuple[int, int] = (2018, 2)) -> list[str]:
    year, half = start
    out = []
    for _ in range(num_periods):
        out.append(f"{year}H{half}")
        if half == 2:
            year, half = year + 1, 1
        else:
            half = 2
    return out


def _build_layout(cfg: SynthConfig, rng: np.random.Generator) -> _Layout:
    markers = [f"m{i}" for i in range(_MARKER_COUNT)]
    stems = [f"b{i}" for i in range(_STEM_COUNT)]
    novel_count = 0
    if cfg.novel_fraction > 0:
        novel_count = min(cfg.num_classes - 1, _NOVEL_CLASS_MAX)
    first_novel = cfg.num_classes - novel_count
    surfaces: list[list[tuple]] = []
    cues = []
    specific = 0
    for c in range(cfg.num_classes):
        if c < first_novel:
            # established surfaces open with a stem shared across classes,
            # so classes interfere through a common prefix
            stem = stems[c % _STEM_COUNT]
            n = 3 if rng.random() < _PAST_LEN3_P else 2
            surfaces.append([(stem,) + tuple(f"s{c}_{j}" for j in range(n - 1))])
            specific += n - 1
        else:
            # novel classes paraphrase: a shared stem plus a token that
            # varies per mention, so a few shots never expose the whole
            # class and the stem alone is no evidence of novelty
            stem = stems[c % _STEM_COUNT]
            surfaces.append([(stem, f"v{c}_{j}") for j in range(_NOVEL_VARIANTS)])
            specific += _NOVEL_VARIANTS
        cues.append(f"c{c}")
    used = _MARKER_COUNT + _STEM_COUNT + specific + cfg.num_classes
    filler_count = cfg.vocab_size - used
    if filler_count < 10:
        raise DataError(
            f"vocab_size {cfg.vocab_size} too small: {cfg.num_classes} classes "
            f"need {used} reserved tokens plus at least 10 fillers")
    fillers = [f"w{i}" for i in range(filler_count)]
    fw = np.array([(r + 1) ** -_ZIPF_FILLER for r in range(filler_count)])
    past = list(range(first_novel))
    novel = list(range(first_novel, cfg.num_classes))
    w = np.array([(r + 1) ** -cfg.zipf_exponent for r in range(len(past))])
    return _Layout(markers, stems, surfaces, cues, fillers, fw / fw.sum(),
                   past, novel, w / w.sum())


def _period_mix(layout: _Layout, period_index: int) -> np.ndarray:
    """Class weights for one period: Zipf mass tilted toward an alternating
    half of the classes.  Each class is boosted in half the periods and damped
    in the other half, so frequencies pooled over periods stay Zipf while any
    single period has its own recognizable mix."""
    n = len(layout.past_classes)
    boost = np.where((np.arange(n) + period_index) % 2 == 0, _TILT, 1.0 / _TILT)
    w = layout.zipf_p * boost
    return w / w.sum()


def _draw_class(layout: _Layout, class_p: np.ndarray, latest: bool,
                novel_fraction: float, rng: np.random.Generator) -> int:
    if latest and layout.novel_classes and rng.random() < novel_fraction:
        return layout.novel_classes[int(rng.integers(len(layout.novel_classes)))]
    return layout.past_classes[int(rng.choice(len(layout.past_classes), p=class_p))]


def _filler(layout: _Layout, latest: bool, rng: np.random.Generator) -> list[str]:
    """One filler draw; usually a single token, occasionally a decoy run."""
    r = rng.random()
    if r < _P_MARKER_NOISE:
        return [layout.markers[int(rng.integers(len(layout.markers)))]]
    if r < _P_MARKER_NOISE + _P_DECOY:
        # decoy: surface material outside any span, so bare surfaces are not
        # reliable evidence; mostly single tokens, in past periods sometimes
        # the whole surface run, which makes unmarked past mentions a
        # calibration call. Drawn from past classes only to keep the latest
        # period's novel surfaces genuinely unseen
        c = layout.past_classes[int(rng.choice(len(layout.past_classes), p=layout.zipf_p))]
        variant = layout.surfaces[c][int(rng.integers(len(layout.surfaces[c])))]
        if not latest and rng.random() < _P_DECOY_FULL:
            return list(variant)
        return [variant[int(rng.integers(len(variant)))]]
    return [layout.fillers[int(rng.choice(len(layout.fillers), p=layout.filler_p))]]


def _make_post(cfg: SynthConfig, layout: _Layout, period: str, latest: bool,
               class_p: np.ndarray, rng: np.random.Generator) -> Post:
    lo, hi = cfg.length_range
    count_p = _SPAN_COUNT_P_LATEST if latest else _SPAN_COUNT_P
    n_spans = int(rng.choice(3, p=count_p))
    target = int(rng.integers(lo, hi + 1))
    segs = []  # (tokens, span_start_within, span_len)
    for _ in range(n_spans):
        c = _draw_class(layout, class_p, latest, cfg.novel_fraction, rng)
        # novel stressors surface without the generic marker vocabulary:
        # their context gives the tagger nothing transferable to lean on.
        # Established mentions in the latest period are almost always marked;
        # unmarked (ambiguous) mentions are a past-period phenomenon
        p_marker = _P_MARKER_LATEST if latest else _P_MARKER
        marked = c in layout.past_classes and rng.random() < p_marker
        pre = [layout.markers[int(rng.integers(len(layout.markers)))]] if marked else []
        cue = [layout.cues[c]] if rng.random() < _P_CUE else []
        variants = layout.surfaces[c]
        surface = list(variants[int(rng.integers(len(variants)))])
        segs.append((pre + surface + cue, len(pre), len(surface)))
    while segs and sum(len(s[0]) for s in segs) > hi:
        segs.pop()
    required = sum(len(s[0]) for s in segs)
    length = max(target, required)
    gaps = len(segs) + 1
    alloc = rng.multinomial(length - required, np.full(gaps, 1.0 / gaps))
    tokens: list[str] = []
    spans = []
    for gi in range(gaps):
        for _ in range(int(alloc[gi])):
            tokens.extend(_filler(layout, latest, rng))
        if gi < len(segs):
            seg_tokens, off, span_len = segs[gi]
            start = len(tokens) + off
            spans.append((start, start + span_len - 1))
            tokens.extend(seg_tokens)
    return Post(tokens, encode_spans(spans, len(tokens)), period)


def generate_corpus(cfg: SynthConfig) -> Corpus:
    """Deterministic in cfg.seed: same config -> byte-identical corpus."""
    rng = rng_from(cfg.seed)
    layout = _build_layout(cfg, rng)
    labels = period_labels(cfg.num_periods)
    posts = []
    for pi, label in enumerate(labels):
        latest = pi == len(labels) - 1
        class_p = _period_mix(layout, pi)
        for _ in range(cfg.posts_per_period):
            posts.append(_make_post(cfg, layout, label, latest, class_p, rng))
    return Corpus(posts)


def surface_class(token: str) -> int | None:
    """Recover the generator class id from a surface token name, if any."""
    if token[:1] in ("s", "v") and "_" in token:
        head = token[1:token.index("_")]
        if head.isdigit():
            return int(head)
    return None
