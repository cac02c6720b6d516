from collections import Counter

import numpy as np
import pytest

from promptmtl import vocab as V
from promptmtl.errors import LabelNotInOptions, SchemaError, SignatureCollision
from promptmtl.prompts import Instruction
from promptmtl.tasks import (
    INPUT_TOKENS,
    DatasetManifest,
    Example,
    TaskDescriptor,
    make_training_sequence,
    make_zero_shot_variant,
    pronounce,
    synth_classification,
    synth_seqgen,
    upsample,
)


def contains(seq, sub):
    return any(tuple(seq[i : i + len(sub)]) == tuple(sub) for i in range(len(seq) - len(sub) + 1))


def test_descriptor_validation():
    with pytest.raises(SchemaError):
        TaskDescriptor("fsd", "asv", "en", "classification", ("a", "b", "c"), metric="eer")
    with pytest.raises(SchemaError):
        TaskDescriptor("ner", "x", "en", "seqgen", metric="accuracy")
    with pytest.raises(SchemaError):
        TaskDescriptor("scr", "x", "en", "classification", ("a",), metric="exact_match")
    d = TaskDescriptor("fsd", "asv", "en", "classification", ("bonafide", "spoof"), metric="eer")
    assert d.positive == "spoof"
    assert TaskDescriptor.from_json(d.to_json()) == d


def test_signature_embedded_without_noise():
    m = synth_classification(0, 2, noise_rate=0.0, n_train=8, n_dev=2, n_test=2)
    sigs = m.meta["signatures"]
    for ex in m.train:
        assert contains(ex.input, sigs[ex.target])
        assert not any(contains(ex.input, s) for lab, s in sigs.items() if lab != ex.target)
        assert sigs[ex.target] == list(pronounce(ex.target))


def test_generators_are_deterministic():
    assert synth_classification(5, 4) == synth_classification(5, 4)
    assert synth_seqgen(5) == synth_seqgen(5)
    assert synth_classification(5, 4) != synth_classification(6, 4)


def test_balanced_majority_share():
    m = synth_classification(1, 4, n_test=200)
    counts = Counter(ex.target for ex in m.test)
    assert max(counts.values()) / len(m.test) == 0.25


def test_splits_are_disjoint():
    for m in (synth_classification(2, 6), synth_seqgen(2), synth_seqgen(2, mode="parse")):
        sets = [set(ex.input for ex in m.splits[s]) for s in ("train", "dev", "test")]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])


def test_signature_collision():
    with pytest.raises(SignatureCollision):
        synth_classification(0, 5, input_vocab_size=1, signature_len=1)


def test_seqgen_pair_format():
    m = synth_seqgen(3, spans_per_utt=(1, 1))
    ex = m.train[0]
    assert len(ex.target) == 3 and ex.target[1] == "FILL" and ex.target[0].startswith("sl:")
    m2 = synth_seqgen(3, spans_per_utt=(2, 2))
    t = m2.train[0].target
    assert t[3] == "SEP" and t[-1] != "SEP"
    empty = synth_seqgen(3, spans_per_utt=(0, 0), n_train=1, n_dev=1, n_test=1)
    assert empty.train[0].target == ()


def test_seqgen_parse_format():
    m = synth_seqgen(4, mode="parse", spans_per_utt=(1, 1))
    t = m.train[0].target
    assert t[0].startswith("[in:") and t[1].startswith("[sl:") and t[-2:] == ("]", "]")
    assert m.descriptor.metric == "exact_match"


def test_zero_shot_variant():
    src = synth_classification(7, 4)
    zs = make_zero_shot_variant(src, 1, exclude=src.descriptor.labels)
    assert not set(zs.descriptor.labels) & set(src.descriptor.labels)
    assert zs.descriptor.dataset != src.descriptor.dataset
    renamed = zs.meta["renamed"]
    for old, new in renamed.items():
        assert pronounce(old) == pronounce(new)
    assert [ex.input for ex in zs.test] == [ex.input for ex in src.test]
    assert [renamed[ex.target] for ex in src.test] == [ex.target for ex in zs.test]
    rng = np.random.default_rng(0)
    n = len(zs.test)
    draws = [np.mean([zs.descriptor.labels[int(i)] == ex.target for i, ex in zip(rng.integers(4, size=n), zs.test)])
             for _ in range(400)]
    assert abs(np.mean(draws) - 0.25) < 3 * np.sqrt(0.25 * 0.75 / n / 400)


def test_upsample():
    m = synth_classification(8, 3, n_train=100)
    assert upsample(m, 1) == m
    up = upsample(m, 3)
    assert len(up.train) == 300 and up.test == m.test and up.upsample_factor == 3
    with pytest.raises(SchemaError):
        upsample(m, 0)


def test_manifest_round_trip(tmp_path):
    for m in (synth_classification(9, 3, n_train=10), synth_seqgen(9, n_train=10)):
        m.save(tmp_path / m.descriptor.task_type)
        assert DatasetManifest.load(tmp_path / m.descriptor.task_type) == m


def test_manifest_schema_errors(tmp_path):
    m = synth_classification(9, 3, n_train=5)
    m.save(tmp_path / "m")
    (tmp_path / "m" / "train.jsonl").write_text('{"input": "not a list", "target": "x"}\n')
    with pytest.raises(SchemaError):
        DatasetManifest.load(tmp_path / "m")
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "missing")
    with pytest.raises(SchemaError):
        DatasetManifest(m.descriptor, {"train": (Example(("u00",), "not-a-label"),)})


@pytest.fixture
def scr_setup():
    task = TaskDescriptor("scr", "google_scr", "en", "classification", ("go", "down", "up"))
    desc = "Classify speech-based commands."
    from promptmtl.prompts import ParaphrasePool

    vocab = V.build_vocabulary([task], pools=[ParaphrasePool("scr", (desc,))], input_tokens=INPUT_TOKENS)
    return task, desc, vocab


def test_training_sequence_instruction(scr_setup):
    task, desc, vocab = scr_setup
    ex = Example(("u00", "u01"), "down")
    instr = Instruction.for_labels(desc, task.labels)
    seq = make_training_sequence(ex, task, "instruction_prev", instr, vocab)
    toks = vocab.decode(seq.decoder_tokens)
    assert toks[-4:] == ["TRANS", "NT", "1", "EOS"]
    assert seq.loss_mask == (False,) * (len(toks) - 2) + (True, True)
    assert toks[0] == "SOP"


def test_training_sequence_specifier(scr_setup):
    task, desc, vocab = scr_setup
    seq = make_training_sequence(Example(("u00",), "down"), task, "specifier", None, vocab)
    assert vocab.decode(seq.decoder_tokens) == ["SOT", "⟨en⟩", "⟨scr⟩", "⟨google_scr⟩", "NT", "down", "EOS"]
    assert sum(seq.loss_mask) == 2


def test_training_sequence_label_missing(scr_setup):
    task, desc, vocab = scr_setup
    instr = Instruction.for_labels(desc, ("go", "up"))
    with pytest.raises(LabelNotInOptions):
        make_training_sequence(Example(("u00",), "down"), task, "instruction_prev", instr, vocab)


def test_training_sequence_seqgen(small_suite, small_vocab, pools):
    ner = small_suite[2]
    ex = next(e for e in ner.train if e.target)
    instr = Instruction(pools["ner"].seen[0], task_kind="seqgen")
    seq = make_training_sequence(ex, ner.descriptor, "instruction_prev", instr, small_vocab)
    n = len(ex.target) + 1
    assert seq.loss_mask[-n:] == (True,) * n and not any(seq.loss_mask[:-n])
    assert small_vocab.decode(seq.decoder_tokens[-n:]) == list(ex.target) + ["EOS"]


def test_seqgen_transcript_format():
    m = synth_seqgen(5, mode="asr", spans_per_utt=(2, 2), n_train=20, n_dev=5, n_test=5)
    assert m.descriptor.task_type == "asr" and m.descriptor.metric == "exact_match"
    for ex in m.train:
        assert len(ex.target) == 2
        for word in ex.target:
            assert contains(ex.input, pronounce(word))
