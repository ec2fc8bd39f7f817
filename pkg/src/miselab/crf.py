"""Linear-chain scoring over the five span tags.

Sequence score = sum of per-token emissions plus tag-pair transitions; no
separate start/end potentials. The partition function runs in log space and
is differentiable; Viterbi is plain numpy (no gradients) with an optional
BIOES-grammar mask and lowest-index tie-breaking.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import DataError
from .tagging import ALLOWED_NEXT, END_TAGS, NUM_TAGS, START_TAGS

NEG_INF = float("-inf")


def transition_mask() -> np.ndarray:
    """(5,5) additive mask: 0 where the BIOES grammar allows from->to, else -inf."""
    m = np.full((NUM_TAGS, NUM_TAGS), NEG_INF)
    for frm, allowed in ALLOWED_NEXT.items():
        for to in allowed:
            m[frm, to] = 0.0
    return m


def boundary_masks() -> tuple[np.ndarray, np.ndarray]:
    start = np.array([0.0 if t in START_TAGS else NEG_INF for t in range(NUM_TAGS)])
    end = np.array([0.0 if t in END_TAGS else NEG_INF for t in range(NUM_TAGS)])
    return start, end


def emissions(reps: nc.Tensor, w: nc.Tensor, b: nc.Tensor) -> nc.Tensor:
    """Per-token tag logits as a learned linear map of the representations."""
    return nc.add(nc.matmul(reps, w), b)


def _check_em(em) -> int:
    if em.data.ndim != 2 or em.data.shape[1] != NUM_TAGS:
        raise ValueError(f"emission matrix must be (n, {NUM_TAGS})")
    n = em.data.shape[0]
    if n == 0:
        raise DataError("cannot score an empty sequence")
    return n


def _check_tags(tags: Sequence[int], n: int) -> np.ndarray:
    t = np.asarray(tags, dtype=np.intp)
    if t.ndim != 1 or t.size != n:
        raise DataError(f"tag sequence length {t.size} does not match {n} tokens")
    if t.size and (t.min() < 0 or t.max() >= NUM_TAGS):
        raise DataError("tag id out of range")
    return t


def path_score(em: nc.Tensor, trans: nc.Tensor, tags: Sequence[int]) -> nc.Tensor:
    """Unnormalized score of one tag path: emissions plus pairwise transitions."""
    n = _check_em(em)
    t = _check_tags(tags, n)
    score = nc.tsum(nc.take_pairs(em, np.arange(n), t))
    if n > 1:
        score = nc.add(score, nc.tsum(nc.take_pairs(trans, t[:-1], t[1:])))
    return score


def log_partition(em: nc.Tensor, trans: nc.Tensor) -> nc.Tensor:
    """log sum over all 5^n paths, by the forward recursion in log space."""
    n = _check_em(em)
    alpha = nc.gather_rows(em, np.array([0]))  # (1, 5)
    for i in range(1, n):
        prev = nc.reshape(alpha, (NUM_TAGS, 1))
        moved = nc.logsumexp(nc.add(prev, trans), axis=0)  # (5,)
        alpha = nc.add(nc.reshape(moved, (1, NUM_TAGS)), nc.gather_rows(em, np.array([i])))
    return nc.logsumexp(alpha)


def nll_loss(em: nc.Tensor, trans: nc.Tensor, tags: Sequence[int]) -> nc.Tensor:
    """Negative log-likelihood of the gold path: log Z minus the path score."""
    return nc.sub(log_partition(em, trans), path_score(em, trans, tags))


def viterbi(em: np.ndarray, trans: np.ndarray, constrain: bool = False) -> tuple[list[int], float]:
    """Best path and its score; ties resolve to the lowest tag index.

    With `constrain`, transitions and sequence boundaries outside the BIOES
    grammar are masked to -inf, so the result always decodes cleanly.
    """
    em = np.asarray(em, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    if em.ndim != 2 or em.shape[1] != NUM_TAGS:
        raise ValueError(f"emission matrix must be (n, {NUM_TAGS})")
    n = em.shape[0]
    if n == 0:
        raise DataError("cannot decode an empty sequence")
    move = trans + transition_mask() if constrain else trans
    delta = em[0].copy()
    if constrain:
        start, end = boundary_masks()
        delta += start
    back = np.zeros((n, NUM_TAGS), dtype=np.intp)
    for i in range(1, n):
        scores = delta[:, None] + move  # (from, to)
        best_from = np.argmax(scores, axis=0)  # first max = lowest index
        delta = scores[best_from, np.arange(NUM_TAGS)] + em[i]
        back[i] = best_from
    if constrain:
        delta = delta + end
    last = int(np.argmax(delta))
    score = float(delta[last])
    path = [last]
    for i in range(n - 1, 0, -1):
        last = int(back[i, last])
        path.append(last)
    path.reverse()
    return path, score
