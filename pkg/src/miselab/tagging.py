"""BIOES span codec for single-type stressor spans.

Tag ids are fixed: O=0, B=1, I=2, E=3, S=4. A span is a closed token range
[start, end]; length-1 spans encode as S, longer ones as B I... E.
"""

from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence

from .errors import DataError

O, B, I, E, S = 0, 1, 2, 3, 4
TAG_NAMES = ("O", "B", "I", "E", "S")
NUM_TAGS = 5

_NAME_TO_ID = {name: i for i, name in enumerate(TAG_NAMES)}

# Successor sets of the BIOES grammar, plus legal start/end tags.
ALLOWED_NEXT = {
    O: frozenset({O, B, S}),
    B: frozenset({I, E}),
    I: frozenset({I, E}),
    E: frozenset({O, B, S}),
    S: frozenset({O, B, S}),
}
START_TAGS = frozenset({O, B, S})
END_TAGS = frozenset({O, E, S})


class Span(NamedTuple):
    start: int
    end: int  # inclusive


def tag_id(name: str) -> int:
    try:
        return _NAME_TO_ID[name]
    except KeyError:
        raise DataError(f"unknown tag string {name!r}") from None


def tag_name(tid: int) -> str:
    if not 0 <= tid < NUM_TAGS:
        raise DataError(f"tag id {tid} out of range")
    return TAG_NAMES[tid]


def encode_spans(spans: Iterable[Sequence[int]], length: int) -> list[int]:
    """Emit the tag sequence carrying `spans` over `length` tokens.

    Spans must be in-bounds, well-ordered (start <= end) and pairwise disjoint.
    """
    tags = [O] * length
    seen: list[Span] = []
    for raw in spans:
        sp = Span(int(raw[0]), int(raw[1]))
        if sp.start > sp.end:
            raise DataError(f"span {sp} has start after end")
        if sp.start < 0 or sp.end >= length:
            raise DataError(f"span {sp} out of bounds for length {length}")
        for other in seen:
            if sp.start <= other.end and other.start <= sp.end:
                raise DataError(f"span {sp} overlaps {other}")
        seen.append(sp)
        if sp.start == sp.end:
            tags[sp.start] = S
        else:
            tags[sp.start] = B
            for i in range(sp.start + 1, sp.end):
                tags[i] = I
            tags[sp.end] = E
    return tags


def decode_tags(tags: Sequence[int]) -> tuple[list[Span], bool]:
    """Back out spans from a tag sequence; invalid runs are repaired.

    Left-to-right scan: a maximal B I* E run is a span, a lone S is a span,
    any other non-O token is dropped. The second return value reports whether
    anything had to be dropped (False exactly on grammar-valid input).
    """
    spans: list[Span] = []
    repaired = False
    n = len(tags)
    i = 0
    while i < n:
        t = tags[i]
        if t == O:
            i += 1
        elif t == S:
            spans.append(Span(i, i))
            i += 1
        elif t == B:
            j = i + 1
            while j < n and tags[j] == I:
                j += 1
            if j < n and tags[j] == E:
                spans.append(Span(i, j))
                i = j + 1
            else:
                repaired = True
                i += 1
        else:  # stray I or E
            repaired = True
            i += 1
    return spans, repaired


def validate_transitions(tags: Sequence[int]) -> list[tuple]:
    """Grammar violations as (position, from_tag, to_tag) triples.

    Boundary problems use None on the missing side. The end-of-sequence check
    is skipped when the final transition is already flagged, so a sequence
    like B,B reports the single offending transition. Empty result iff the
    sequence is generated by the BIOES grammar.
    """
    out: list[tuple] = []
    n = len(tags)
    if n == 0:
        return out
    for t in tags:
        if not 0 <= t < NUM_TAGS:
            raise DataError(f"tag id {t} out of range")
    if tags[0] not in START_TAGS:
        out.append((0, None, tags[0]))
    last_pair_bad = False
    for i in range(n - 1):
        if tags[i + 1] not in ALLOWED_NEXT[tags[i]]:
            out.append((i, tags[i], tags[i + 1]))
            last_pair_bad = i == n - 2
    if tags[-1] not in END_TAGS and not last_pair_bad:
        out.append((n - 1, tags[-1], None))
    return out


def is_valid(tags: Sequence[int]) -> bool:
    return not validate_transitions(tags)
