import copy
import json

import numpy as np
import pytest

from promptmtl.decoding import DecodeConfig
from promptmtl.errors import EmptyPool, SchemaError
from promptmtl.evaluation import (
    condition_prompts,
    dev_score,
    majority_baseline,
    majority_label,
    random_baseline,
    run_eval,
    write_predictions,
)
from promptmtl.model import ModelConfig, build_model
from promptmtl.prompts import ParaphrasePool, training_references
from promptmtl.tasks import Example, TaskDescriptor

TASK3 = TaskDescriptor("er", "synth_er", "en", "classification", ("ang", "hap", "sad"))


def examples(labels):
    return [Example(("u00",), lab) for lab in labels]


# --- baselines ----------------------------------------------------------------------


def test_random_baseline_is_chance():
    task = TaskDescriptor("scr", "x", "en", "classification", ("a", "b", "c", "d"))
    refs = list("abcd") * 25
    value = random_baseline(task, refs, n_seeds=1000, seed=3)
    sigma = np.sqrt(0.25 * 0.75 / len(refs) / 1000)
    assert abs(value - 0.25) < 3 * sigma


def test_majority_baseline_accuracy():
    train = examples(["ang"] * 5 + ["hap"] * 4 + ["sad"] * 2)
    refs = ["ang"] * 5 + ["hap"] * 4 + ["sad"] * 2
    assert majority_label(train) == "ang"
    assert majority_baseline(TASK3, train, refs) == pytest.approx(5 / 11, abs=1e-15)


def test_majority_tie_breaks_lexicographically():
    assert majority_label(examples(["sad", "hap", "sad", "hap"])) == "hap"


def test_majority_baseline_macro_f1_on_skewed_data():
    task = TaskDescriptor("er", "synth_er", "en", "classification", ("ang", "hap", "sad"), metric="f1")
    train = examples(["ang"] * 8 + ["hap"] + ["sad"])
    refs = ["ang"] * 5 + ["hap"] * 4 + ["sad"] * 2
    # the majority class gets P = 5/11, R = 1; the other classes score 0
    f1_ang = 2 * (5 / 11) / (5 / 11 + 1)
    assert majority_baseline(task, train, refs) == pytest.approx(f1_ang / 3, abs=1e-12)


# --- conditions ----------------------------------------------------------------------


def test_condition_prompt_counts(pools):
    pool = pools["er"]
    seen = condition_prompts(TASK3, pool, "seen")
    assert len(seen) == len(pool.seen) and all(i.permutation == (0, 1, 2) for i in seen)
    order = condition_prompts(TASK3, pool, "order", n_orders=2, seed=1)
    perms = {i.permutation for i in order}
    assert len(order) == 2 * len(pool.seen) and len(perms) == 2 and (0, 1, 2) not in perms
    unseen = condition_prompts(TASK3, pool, "unseen", references=training_references(pools))
    assert [i.description for i in unseen] == list(pool.unseen)
    with pytest.raises(SchemaError):
        condition_prompts(TASK3, pool, "paraphrase")


def test_unseen_phrase_failing_gate_is_refused():
    pool = ParaphrasePool("er", ("Classify the emotion of the speaker",), ("Classify the emotion of the speakers",))
    with pytest.raises(SchemaError):
        condition_prompts(TASK3, pool, "unseen")
    with pytest.raises(EmptyPool):
        condition_prompts(TASK3, ParaphrasePool("er", ("x y z",)), "unseen")


# --- run_eval -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def untrained(small_vocab):
    cfg = ModelConfig(len(small_vocab), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_width=32, seed=8)
    return build_model(cfg, small_vocab)


def test_unseen_report_averages_five_sub_runs(untrained, small_vocab, small_suite, pools):
    report = run_eval(untrained, small_vocab, small_suite[0], condition="unseen", pools=pools, limit=10,
                      baseline_seeds=50)
    assert len(report.sub_runs) == 5
    assert report.value == pytest.approx(np.mean([r["value"] for r in report.sub_runs]), abs=1e-15)
    assert report.following_rate == pytest.approx(np.mean([r["following_rate"] for r in report.sub_runs]), abs=1e-15)
    assert set(report.baselines) == {"random", "majority"}
    assert report.n_examples == 10


def test_order_report_has_per_order_details(untrained, small_vocab, small_suite, pools):
    report = run_eval(untrained, small_vocab, small_suite[1], condition="order", pools=pools, limit=8, max_phrases=2,
                      baseline_seeds=20)
    assert len(report.sub_runs) == 4
    assert len(report.details["per_order"]) == 2
    vals = list(report.details["per_order"].values())
    assert report.details["order_gap"] == pytest.approx(max(vals) - min(vals), abs=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_constrained_decoding_always_follows(small_vocab, small_suite, pools, seed):
    cfg = ModelConfig(len(small_vocab), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_width=32, seed=seed)
    model = build_model(cfg, small_vocab)
    for man in small_suite[:2]:
        for mode in ("instruction_prev", "specifier"):
            report = run_eval(model, small_vocab, man, mode=mode, pools=pools, decode_cfg=DecodeConfig(constrained=True),
                              limit=10, max_phrases=2, baseline_seeds=10)
            assert report.following_rate == 1.0


def test_specifier_mode_reports_single_run(untrained, small_vocab, small_suite):
    report = run_eval(untrained, small_vocab, small_suite[0], mode="specifier", limit=5, baseline_seeds=10)
    assert report.condition == "specifier" and len(report.sub_runs) == 1


def test_seqgen_report(untrained, small_vocab, small_suite, pools):
    report = run_eval(untrained, small_vocab, small_suite[2], pools=pools, limit=5, max_phrases=1)
    assert report.metric == "slu_f1_exact" and report.baselines == {}
    assert 0.0 <= report.value <= 1.0


def test_evaluation_is_pure(untrained, small_vocab, small_suite, pools):
    man = small_suite[0]
    before = copy.deepcopy(man)
    kw = dict(condition="seen", pools=pools, limit=8, max_phrases=2, baseline_seeds=10)
    a = run_eval(untrained, small_vocab, man, **kw)
    b = run_eval(untrained, small_vocab, man, **kw)
    assert a.dumps() == b.dumps()
    assert man == before


def test_missing_pool(untrained, small_vocab, small_suite):
    with pytest.raises(EmptyPool):
        run_eval(untrained, small_vocab, small_suite[0], pools={})


def test_predictions_written_as_jsonl(tmp_path, untrained, small_vocab, small_suite, pools):
    report, preds = run_eval(untrained, small_vocab, small_suite[0], pools=pools, limit=4, max_phrases=1,
                             baseline_seeds=5, return_predictions=True)
    write_predictions(tmp_path / "p.jsonl", preds[0])
    rows = [json.loads(line) for line in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert len(rows) == 4 and {"resolved", "following", "reference", "tokens"} <= set(rows[0])
    assert report.to_text().startswith("task")


def test_dev_score_is_deterministic(untrained, small_vocab, small_suite, pools):
    a = dev_score(untrained, small_vocab, small_suite, pools, "instruction_prev", limit=6)
    b = dev_score(untrained, small_vocab, small_suite, pools, "instruction_prev", limit=6)
    assert a == b and 0.0 <= a <= 1.0
