"""Half-year time splits and episodic task sampling.

Period labels look like '2019H1'. Every period except the chronologically
last belongs to the past pool; a training task draws support and validation
posts from one eligible past period, a test task draws support and query
posts from the latest period. Draws are without replacement and support
never overlaps the evaluation set.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

EVAL_SIZE_DEFAULT = 15

_PERIOD_RE = re.compile(r"^(\d{4})H([12])$")


@dataclass
class Post:
    tokens: list[str]
    tags: list[int] | None
    period: str
    index: int = -1

    def __post_init__(self):
        if self.tags is not None and len(self.tags) != len(self.tokens):
            raise DataError(
                f"post {self.index}: {len(self.tags)} tags for {len(self.tokens)} tokens")


@dataclass
class Corpus:
    posts: list[Post] = field(default_factory=list)

    def __post_init__(self):
        for i, p in enumerate(self.posts):
            p.index = i

    def __len__(self) -> int:
        return len(self.posts)

    def __iter__(self):
        return iter(self.posts)


def period_key(label: str) -> tuple[int, int]:
    m = _PERIOD_RE.match(label)
    if not m:
        raise DataError(f"unparseable period label {label!r} (want e.g. '2019H1')")
    return int(m.group(1)), int(m.group(2))


@dataclass
class TimeSplit:
    """Past periods (label -> posts, chronological) plus the latest period."""

    past: dict[str, list[Post]]
    latest_label: str
    latest: list[Post]

    @property
    def counts(self) -> dict[str, int]:
        out = {label: len(posts) for label, posts in self.past.items()}
        out[self.latest_label] = len(self.latest)
        return out

    def past_posts(self) -> list[Post]:
        return [p for posts in self.past.values() for p in posts]


def split_periods(corpus: Corpus) -> TimeSplit:
    """Group posts by period label and split off the chronologically last."""
    groups: dict[str, list[Post]] = {}
    for post in corpus:
        period_key(post.period)
        groups.setdefault(post.period, []).append(post)
    if len(groups) < 2:
        raise DataError(f"need at least 2 periods to split, found {len(groups)}")
    ordered = sorted(groups, key=period_key)
    latest = ordered[-1]
    return TimeSplit(
        past={label: groups[label] for label in ordered[:-1]},
        latest_label=latest,
        latest=groups[latest],
    )


@dataclass
class MetaTask:
    """One episode: K labeled support posts plus a disjoint evaluation set."""

    kind: str  # "train" | "test"
    period: str
    support: list[Post]
    eval_posts: list[Post]


def _labeled(posts: list[Post]) -> list[Post]:
    return [p for p in posts if p.tags is not None]


def _draw(pool: list[Post], k: int, eval_size: int,
          rng: np.random.Generator) -> tuple[list[Post], list[Post]]:
    # eval first: episodes sharing a seed then keep the same eval set no
    # matter the K, so shot-count comparisons are paired
    eidx = rng.choice(len(pool), size=eval_size, replace=False)
    eval_posts = [pool[int(i)] for i in eidx]
    taken = {int(i) for i in eidx}
    rest = [i for i in range(len(pool)) if i not in taken]
    sidx = rng.choice(len(rest), size=k, replace=False)
    support = [pool[rest[int(i)]] for i in sidx]
    return support, eval_posts


def sample_train_task(split: TimeSplit, k: int, rng: np.random.Generator,
                      eval_size: int = EVAL_SIZE_DEFAULT) -> MetaTask:
    """Uniformly pick an eligible past period, then draw K + eval_size posts."""
    if k < 1 or eval_size < 1:
        raise DataError("k and eval_size must be positive")
    eligible = [label for label, posts in split.past.items()
                if len(_labeled(posts)) >= k + eval_size]
    if not eligible:
        raise DataError(
            f"no past period has {k + eval_size} labeled posts to sample from")
    label = eligible[int(rng.integers(len(eligible)))]
    support, eval_posts = _draw(_labeled(split.past[label]), k, eval_size, rng)
    return MetaTask("train", label, support, eval_posts)


def sample_test_task(split: TimeSplit, k: int, rng: np.random.Generator,
                     eval_size: int = EVAL_SIZE_DEFAULT) -> MetaTask:
    """Draw a support/query episode from the latest period."""
    if k < 1 or eval_size < 1:
        raise DataError("k and eval_size must be positive")
    pool = _labeled(split.latest)
    if len(pool) < k + eval_size:
        raise DataError(
            f"latest period has {len(pool)} labeled posts, needs {k + eval_size}")
    support, eval_posts = _draw(pool, k, eval_size, rng)
    return MetaTask("test", split.latest_label, support, eval_posts)
