import json

import numpy as np
import pytest

from miselab.data import (SynthConfig, generate_corpus, load_corpus,
                          period_labels, save_corpus, summarize, surface_class)
from miselab.episodes import split_periods
from miselab.errors import DataError
from miselab.tagging import decode_tags, validate_transitions


def span_class(post, span):
    """Generator class id of a span, read off its surface tokens."""
    for i in range(span.start, span.end + 1):
        c = surface_class(post.tokens[i])
        if c is not None:
            return c
    return None


def all_spans(corpus):
    for post in corpus:
        spans, repaired = decode_tags(post.tags)
        assert not repaired
        for sp in spans:
            yield post, sp


# ----------------------------------------------------------------- load/save

def test_jsonl_round_trip(tmp_path):
    corpus = generate_corpus(SynthConfig(posts_per_period=10, num_periods=3, seed=1))
    path = tmp_path / "c.jsonl"
    save_corpus(corpus, path)
    loaded, summary = load_corpus(path)
    assert len(loaded) == len(corpus)
    for a, b in zip(corpus, loaded):
        assert a.tokens == b.tokens and a.tags == b.tags and a.period == b.period
    assert summary.post_count == 30


def test_conll_round_trip(tmp_path):
    corpus = generate_corpus(SynthConfig(posts_per_period=10, num_periods=3, seed=2))
    path = tmp_path / "c.conll"
    save_corpus(corpus, path, fmt="conll")
    loaded, _ = load_corpus(path, fmt="conll")
    for a, b in zip(corpus, loaded):
        assert a.tokens == b.tokens and a.tags == b.tags and a.period == b.period


def test_save_is_byte_stable(tmp_path):
    corpus = generate_corpus(SynthConfig(posts_per_period=8, num_periods=2, seed=3))
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_corpus(corpus, p1)
    save_corpus(corpus, p2)
    assert p1.read_bytes() == p2.read_bytes()
    # load and re-save: still the same bytes
    loaded, _ = load_corpus(p1)
    p3 = tmp_path / "c.jsonl"
    save_corpus(loaded, p3)
    assert p1.read_bytes() == p3.read_bytes()


def test_jsonl_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"tokens": ["a"], "period": "2020H1"}\nnot json\n')
    with pytest.raises(DataError, match="line 2"):
        load_corpus(path)
    path.write_text('{"period": "2020H1"}\n')
    with pytest.raises(DataError, match="line 1"):
        load_corpus(path)
    path.write_text('{"tokens": ["a", "b"], "tags": ["O"], "period": "2020H1"}\n')
    with pytest.raises(DataError, match="line 1"):
        load_corpus(path)
    path.write_text('{"tokens": ["a"], "tags": ["X"], "period": "2020H1"}\n')
    with pytest.raises(DataError):
        load_corpus(path)


def test_conll_errors(tmp_path):
    path = tmp_path / "bad.conll"
    path.write_text("a\tO\tEXTRA\n")
    with pytest.raises(DataError, match="line 1"):
        load_corpus(path, fmt="conll")
    path.write_text("# period: 2020H1\na\tO\nb\n\n")
    with pytest.raises(DataError, match="mixes"):
        load_corpus(path, fmt="conll")


def test_unlabeled_posts_load(tmp_path):
    path = tmp_path / "plain.jsonl"
    path.write_text('{"tokens": ["hello", "world"], "period": "2021H1"}\n')
    corpus, _ = load_corpus(path)
    assert corpus.posts[0].tags is None


def test_field_map_renames_jsonl_fields(tmp_path):
    path = tmp_path / "alt.jsonl"
    path.write_text('{"words": ["a"], "labels": ["S"], "time": "2020H2"}\n')
    corpus, _ = load_corpus(path, field_map={"tokens": "words", "tags": "labels",
                                             "period": "time"})
    post = corpus.posts[0]
    assert post.tokens == ["a"] and post.tags == [4] and post.period == "2020H2"
    with pytest.raises(DataError):
        load_corpus(path, field_map={"bogus": "x"})


def test_unknown_format_rejected(tmp_path):
    corpus = generate_corpus(SynthConfig(posts_per_period=5, num_periods=2, seed=0))
    with pytest.raises(DataError):
        save_corpus(corpus, tmp_path / "x", fmt="csv")
    with pytest.raises(DataError):
        load_corpus(tmp_path / "x", fmt="csv")


# ----------------------------------------------------------------- generator

def test_generator_is_deterministic():
    a = generate_corpus(SynthConfig(seed=5))
    b = generate_corpus(SynthConfig(seed=5))
    for pa, pb in zip(a, b):
        assert pa.tokens == pb.tokens and pa.tags == pb.tags
    c = generate_corpus(SynthConfig(seed=6))
    assert any(pa.tokens != pc.tokens for pa, pc in zip(a, c))


def test_generated_tags_are_grammar_valid():
    corpus = generate_corpus(SynthConfig(seed=0))
    assert len(corpus) == 320
    for post in corpus:
        assert validate_transitions(post.tags) == []


def test_period_labels_cover_configured_count():
    assert period_labels(3) == ["2018H2", "2019H1", "2019H2"]
    corpus = generate_corpus(SynthConfig(seed=0))
    assert sorted({p.period for p in corpus}) == period_labels(8)
    split = split_periods(corpus)
    assert split.latest_label == "2022H1"
    assert len(split.past) == 7


def test_post_lengths_respect_range():
    cfg = SynthConfig(seed=1, length_range=(8, 14))
    for post in generate_corpus(cfg):
        # spans may push a post past the target, but never absurdly far
        assert 8 <= len(post.tokens) <= 14 + 6


def test_novel_classes_appear_only_in_latest_period():
    cfg = SynthConfig(seed=2, posts_per_period=80)
    corpus = generate_corpus(cfg)
    split = split_periods(corpus)
    past_classes = set()
    latest_classes = set()
    for post, sp in all_spans(corpus):
        c = span_class(post, sp)
        assert c is not None
        if post.period == split.latest_label:
            latest_classes.add(c)
        else:
            past_classes.add(c)
    novel = latest_classes - past_classes
    assert novel, "latest period should introduce unseen classes"
    # with 12 classes and the 3-class novel cap, ids 9..11 are the novel ones
    assert novel <= {9, 10, 11}
    assert past_classes <= set(range(9))


def test_novel_share_matches_configured_fraction():
    # pool latest-period spans until 1000 draws, then check the binomial band
    cfg = SynthConfig(seed=6, num_periods=2, posts_per_period=1400,
                      novel_fraction=0.3)
    corpus = generate_corpus(cfg)
    split = split_periods(corpus)
    draws = []
    for post, sp in all_spans(corpus):
        if post.period != split.latest_label:
            continue
        draws.append(1 if span_class(post, sp) >= 9 else 0)
        if len(draws) == 1000:
            break
    assert len(draws) == 1000
    share = sum(draws) / 1000
    assert 0.27 <= share <= 0.33


def test_pooled_class_frequencies_follow_zipf():
    # 50 classes at exponent 1.2; pooled mention counts over all past periods
    # should fall on a log-log line with slope near -1.2
    cfg = SynthConfig(seed=7, num_classes=50, zipf_exponent=1.2,
                      posts_per_period=150, vocab_size=300)
    corpus = generate_corpus(cfg)
    split = split_periods(corpus)
    counts = {}
    for post, sp in all_spans(corpus):
        if post.period == split.latest_label:
            continue
        c = span_class(post, sp)
        counts[c] = counts.get(c, 0) + 1
    freq = np.array(sorted(counts.values(), reverse=True), dtype=float)
    freq = freq[freq >= 5]
    assert freq.size >= 15
    ranks = np.arange(1, freq.size + 1)
    slope = np.polyfit(np.log(ranks), np.log(freq), 1)[0]
    assert -1.45 < slope < -0.95


def test_summarize_counts_spans():
    corpus = generate_corpus(SynthConfig(seed=0, posts_per_period=20, num_periods=2))
    s = summarize(corpus)
    assert s.post_count == 40 == s.labeled_count
    assert s.span_count == sum(1 for _ in all_spans(corpus))
    assert set(s.posts_per_period) == {"2018H2", "2019H1"}


def test_surface_class_token_mapping():
    assert surface_class("s3_0") == 3
    assert surface_class("v10_2") == 10
    assert surface_class("b1") is None
    assert surface_class("m0") is None
    assert surface_class("w17") is None
    assert surface_class("c4") is None
    assert surface_class("s_x") is None


def test_config_validation():
    with pytest.raises(DataError):
        SynthConfig(num_periods=1)
    with pytest.raises(DataError):
        SynthConfig(novel_fraction=1.5)
    with pytest.raises(DataError):
        SynthConfig(length_range=(3, 2))
    with pytest.raises(DataError):
        SynthConfig(zipf_exponent=0)


def test_small_vocab_raises_at_generation():
    cfg = SynthConfig(vocab_size=60, num_classes=30)
    with pytest.raises(DataError, match="too small"):
        generate_corpus(cfg)
