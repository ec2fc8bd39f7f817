"""Token scoring, report serialization, and the two evaluation protocols."""

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miselab.errors import DataError
from miselab.metrics import (EpisodeResult, EvalReport, MultiEvalReport,
                             decode_posts, evaluate_on_posts, forgetting_study,
                             kshot_eval, render_grid, token_prf, write_report)
from miselab.meta import model_from_checkpoint
from miselab.tagging import B, E, I, O, S

from conftest import TINY_TRAIN


# ------------------------------------------------------------- token scoring

def test_token_prf_exact_counts():
    pred = [[O, B, E, O], [S, O, O, B]]
    gold = [[O, B, E, S], [B, O, O, B]]
    # gold non-O: 5, pred non-O: 4, exact tag matches on gold non-O: 3
    prf = token_prf(pred, gold)
    assert prf.precision == 3 / 4
    assert prf.recall == 3 / 5
    assert prf.f1 == pytest.approx(2 * (3 / 4) * (3 / 5) / (3 / 4 + 3 / 5))
    assert prf.flags == []


def test_token_prf_binary_relaxes_tag_identity():
    pred = [[S, O, O, B]]
    gold = [[B, O, O, B]]
    exact = token_prf(pred, gold)
    loose = token_prf(pred, gold, binary=True)
    assert exact.recall == 1 / 2
    assert loose.recall == 1.0
    assert loose.precision == 1.0


def test_token_prf_binary_still_counts_false_positives():
    # a non-O prediction on a gold O token hurts binary precision too
    prf = token_prf([[B, S]], [[B, O]], binary=True)
    assert prf.precision == 1 / 2
    assert prf.recall == 1.0


def test_token_prf_perfect_prediction():
    seqs = [[O, B, I, E], [S, O]]
    prf = token_prf(seqs, seqs)
    assert prf.precision == prf.recall == prf.f1 == 1.0


def test_token_prf_zero_denominators_flagged():
    none_pred = token_prf([[O, O]], [[O, S]])
    assert none_pred.precision == 0.0
    assert none_pred.f1 == 0.0
    assert "no_predicted_tokens" in none_pred.flags

    none_gold = token_prf([[O, S]], [[O, O]])
    assert none_gold.recall == 0.0
    assert none_gold.f1 == 0.0
    assert "no_gold_tokens" in none_gold.flags

    both = token_prf([[O]], [[O]])
    assert set(both.flags) == {"no_predicted_tokens", "no_gold_tokens"}


def test_token_prf_shape_mismatches():
    with pytest.raises(DataError, match="count"):
        token_prf([[O]], [[O], [O]])
    with pytest.raises(DataError, match="length"):
        token_prf([[O, O]], [[O]])


tag_seq = st.lists(st.integers(min_value=0, max_value=4), min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(tag_seq, tag_seq), min_size=1, max_size=6))
def test_token_prf_micro_pooling(pairs):
    """Scoring many sequences equals scoring their concatenation."""
    pairs = [(p[: len(g)], g[: len(p)]) for p, g in pairs]
    preds = [p for p, _ in pairs]
    golds = [g for _, g in pairs]
    pooled = token_prf(preds, golds)
    flat = token_prf([sum(preds, [])], [sum(golds, [])])
    assert pooled.precision == flat.precision
    assert pooled.recall == flat.recall
    assert pooled.f1 == flat.f1


# ------------------------------------------------------------------ decoding

def test_decode_posts_shapes_and_determinism(tiny_meta, tiny_split):
    model = model_from_checkpoint(tiny_meta)
    posts = tiny_split.latest[:4]
    first = decode_posts(model, posts)
    again = decode_posts(model, posts)
    assert first == again
    for tags, post in zip(first, posts):
        assert len(tags) == len(post.tokens)
        assert set(tags) <= {O, B, I, E, S}


def test_decode_posts_constrained_is_grammar_valid(tiny_meta, tiny_split):
    from miselab.tagging import validate_transitions

    model = model_from_checkpoint(tiny_meta)
    for tags in decode_posts(model, tiny_split.latest[:6], constrain=True):
        assert validate_transitions(tags) == []


def test_evaluate_on_posts_requires_labels(tiny_meta, tiny_split):
    post = replace(tiny_split.latest[0], tags=None)
    with pytest.raises(DataError, match="labeled"):
        evaluate_on_posts(tiny_meta, [post])


def test_evaluate_on_posts_matches_manual_pipeline(tiny_meta, tiny_split):
    posts = tiny_split.latest[:5]
    via_helper = evaluate_on_posts(tiny_meta, posts)
    model = model_from_checkpoint(tiny_meta)
    manual = token_prf(decode_posts(model, posts), [p.tags for p in posts])
    assert via_helper.as_dict() == manual.as_dict()


# ------------------------------------------------------------------- reports

def fake_report(k=5):
    eps = [EpisodeResult(0, [0, 5, 0], 0.5, 0.25, 1 / 3, []),
           EpisodeResult(1, [0, 5, 1], 1.0, 0.75, 6 / 7, ["no_gold_tokens"])]
    return EvalReport(config={"seed": 0}, k=k, episodes=eps, flags=["no_gold_tokens"])


def test_eval_report_aggregate_recomputes_from_episodes():
    rep = fake_report()
    agg = rep.aggregate
    assert agg["precision_mean"] == 0.75
    assert agg["recall_mean"] == 0.5
    assert agg["f1_mean"] == pytest.approx((1 / 3 + 6 / 7) / 2)
    assert agg["f1_std"] == pytest.approx(np.std([1 / 3, 6 / 7]))


def test_eval_report_json_shape():
    doc = fake_report().to_json_dict()
    assert doc["schema_version"] == 1
    assert doc["kind"] == "kshot_eval"
    assert doc["k"] == 5
    assert len(doc["episodes"]) == 2
    assert doc["episodes"][0]["seed_path"] == [0, 5, 0]
    assert doc["flags"] == ["no_gold_tokens"]
    json.dumps(doc)  # serializable as-is


def test_render_grid_layout():
    text = render_grid([fake_report(3), fake_report(10)])
    lines = text.splitlines()
    assert len(lines) == 3
    assert lines[0].split() == ["K", "Precision", "Recall", "F1", "F1-std"]
    assert lines[1].startswith("3-shot")
    assert lines[2].startswith("10-shot")
    assert text.endswith("\n")
    assert "0.7500" in lines[1]


def test_multi_report_groups_by_k():
    doc = MultiEvalReport(config={}, reports=[fake_report(3), fake_report(5)]).to_json_dict()
    assert doc["kind"] == "kshot_eval_grid"
    assert sorted(doc["by_k"]) == ["3", "5"]
    assert doc["by_k"]["3"]["aggregate"]["precision_mean"] == 0.75


def test_write_report_byte_stable(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_report(fake_report(), a)
    write_report(fake_report(), b)
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["kind"] == "kshot_eval"

    t = tmp_path / "grid.txt"
    write_report(fake_report(), t, fmt="text")
    assert t.read_text() == fake_report().to_text()

    with pytest.raises(DataError, match="format"):
        write_report(fake_report(), tmp_path / "x.bin", fmt="pickle")


# ----------------------------------------------------------------- protocols

def test_kshot_eval_worker_count_is_invisible(tiny_meta, tiny_split):
    serial = kshot_eval(tiny_meta, tiny_split, TINY_TRAIN, k=3, episodes=5)
    threaded = kshot_eval(tiny_meta, tiny_split, TINY_TRAIN, k=3, episodes=5,
                          workers=3)
    assert serial.to_json_dict() == threaded.to_json_dict()


def test_kshot_eval_episode_seeding(tiny_meta, tiny_split):
    rep = kshot_eval(tiny_meta, tiny_split, TINY_TRAIN, k=3, episodes=4)
    assert [e.episode for e in rep.episodes] == [0, 1, 2, 3]
    assert [e.seed_path[2] for e in rep.episodes] == [0, 1, 2, 3]
    # same seed prefix everywhere, so reruns regenerate the same draws
    assert {tuple(e.seed_path[:2]) for e in rep.episodes} == {(TINY_TRAIN.seed, 5)}
    again = kshot_eval(tiny_meta, tiny_split, TINY_TRAIN, k=3, episodes=4)
    assert rep.to_json_dict() == again.to_json_dict()


def test_kshot_eval_flags_pool_over_episodes(tiny_meta, tiny_split):
    rep = kshot_eval(tiny_meta, tiny_split, TINY_TRAIN, k=3, episodes=3)
    assert rep.flags == sorted({f for e in rep.episodes for f in e.flags})


def test_kshot_eval_needs_episodes(tiny_meta, tiny_split):
    with pytest.raises(DataError, match="episode"):
        kshot_eval(tiny_meta, tiny_split, TINY_TRAIN, k=3, episodes=0)


def test_forgetting_study_structure(tiny_split):
    rep = forgetting_study(tiny_split, TINY_TRAIN, repeats=2, holdout_fraction=0.25)
    assert len(rep.repeats) == 2
    past_labeled = sum(1 for p in tiny_split.past_posts() if p.tags is not None)
    expected_hold = round(0.25 * past_labeled)
    for row in rep.repeats:
        assert row["holdout_size"] == expected_hold
        for arm in ("before", "inherit", "finetune"):
            assert set(row[arm]) == {"precision", "recall", "f1", "flags"}

    agg = rep.aggregate
    gap = np.mean([r["inherit"]["f1"] for r in rep.repeats]) - \
        np.mean([r["finetune"]["f1"] for r in rep.repeats])
    assert agg["retained_f1_gap"] == pytest.approx(gap)

    doc = rep.to_json_dict()
    assert doc["kind"] == "forgetting_study"
    assert doc["holdout_fraction"] == 0.25
    text = rep.to_text()
    assert "retained-F1 gap" in text
    for arm in ("before", "inherit", "finetune"):
        assert arm in text


def test_forgetting_study_input_validation(tiny_split):
    with pytest.raises(DataError, match="holdout"):
        forgetting_study(tiny_split, TINY_TRAIN, repeats=1, holdout_fraction=0.0)
    with pytest.raises(DataError, match="holdout"):
        forgetting_study(tiny_split, TINY_TRAIN, repeats=1, holdout_fraction=1.0)
    with pytest.raises(DataError, match="repeat"):
        forgetting_study(tiny_split, TINY_TRAIN, repeats=0)
