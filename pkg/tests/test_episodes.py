import numpy as np
import pytest

from miselab.data import SynthConfig, generate_corpus
from miselab.episodes import (Corpus, Post, sample_test_task,
                              sample_train_task, period_key, split_periods)
from miselab.errors import DataError
from miselab.numcore import rng_from


def small_corpus():
    return generate_corpus(SynthConfig(posts_per_period=30, num_periods=4, seed=3))


def test_period_key_parses_half_year_labels():
    assert period_key("2019H1") == (2019, 1)
    assert period_key("2021H2") == (2021, 2)
    assert period_key("2019H1") < period_key("2019H2") < period_key("2020H1")
    for bad in ("2019", "H1", "2019H3", "19H1", ""):
        with pytest.raises(DataError):
            period_key(bad)


def test_post_validates_tag_length():
    with pytest.raises(DataError):
        Post(["a", "b"], [0], "2020H1")
    Post(["a", "b"], None, "2020H1")  # unlabeled is fine


def test_corpus_assigns_indices():
    corpus = Corpus([Post(["a"], None, "2020H1"), Post(["b"], None, "2020H2")])
    assert [p.index for p in corpus] == [0, 1]


def test_split_periods_orders_chronologically():
    split = split_periods(small_corpus())
    labels = list(split.past) + [split.latest_label]
    assert labels == sorted(labels, key=period_key)
    assert split.latest_label == max(labels, key=period_key)
    assert sum(split.counts.values()) == 120


def test_split_needs_two_periods():
    with pytest.raises(DataError):
        split_periods(Corpus([Post(["a"], None, "2020H1")]))


def test_train_task_comes_from_one_past_period():
    split = split_periods(small_corpus())
    task = sample_train_task(split, 5, rng_from(0, 1))
    assert task.kind == "train"
    assert task.period in split.past
    assert len(task.support) == 5 and len(task.eval_posts) == 15
    for p in task.support + task.eval_posts:
        assert p.period == task.period


def test_test_task_comes_from_latest_period():
    split = split_periods(small_corpus())
    task = sample_test_task(split, 3, rng_from(0, 2))
    assert task.kind == "test"
    assert task.period == split.latest_label
    assert len(task.support) == 3


def test_support_and_eval_are_disjoint():
    split = split_periods(small_corpus())
    for i in range(20):
        task = sample_test_task(split, 5, rng_from(0, 3, i))
        sup = {p.index for p in task.support}
        ev = {p.index for p in task.eval_posts}
        assert not sup & ev
        assert len(sup) == 5 and len(ev) == 15


def test_eval_set_is_paired_across_shot_counts():
    split = split_periods(small_corpus())
    by_k = {}
    for k in (3, 5, 10):
        task = sample_test_task(split, k, rng_from(7, 4, 0))
        by_k[k] = [p.index for p in task.eval_posts]
    assert by_k[3] == by_k[5] == by_k[10]


def test_sampling_is_seed_deterministic():
    split = split_periods(small_corpus())
    a = sample_test_task(split, 5, rng_from(1, 2, 3))
    b = sample_test_task(split, 5, rng_from(1, 2, 3))
    assert [p.index for p in a.support] == [p.index for p in b.support]
    assert [p.index for p in a.eval_posts] == [p.index for p in b.eval_posts]


def test_infeasible_draws_raise():
    split = split_periods(small_corpus())
    with pytest.raises(DataError):
        sample_test_task(split, 50, rng_from(0, 5))
    with pytest.raises(DataError):
        sample_train_task(split, 50, rng_from(0, 6))
    with pytest.raises(DataError):
        sample_test_task(split, 0, rng_from(0, 7))
