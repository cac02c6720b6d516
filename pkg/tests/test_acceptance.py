"""Acceptance criteria 1-11, one test each.

Every test records a PASS/FAIL line through the ``acceptance`` fixture; the
lines are printed in the terminal summary at the end of the session.  The
trained-model criteria (5-9) share one fit of ``configs/toy.yaml``.
"""

import math
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import yaml
from click.testing import CliRunner

from promptmtl import experiment as X
from promptmtl import metrics as M
from promptmtl import vocab as V
from promptmtl.cli import main
from promptmtl.decoding import DecodeConfig
from promptmtl.evaluation import run_eval
from promptmtl.model import ModelConfig, batch_loss, build_model, collate
from promptmtl.prompts import Instruction, NotAnOption, build_instruction_prompt, build_specifier_prompt, training_references
from promptmtl.train import fit, lr_at

import test_metrics as TM
import test_model as TMO
import test_prompts as TP

ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = ROOT / "configs" / "toy.yaml"
STEP_BUDGET = 5000
SECONDS_BUDGET = 600


def record(acceptance, n, passed, detail):
    acceptance[n] = (bool(passed), detail)
    assert passed, f"criterion {n}: {detail}"


# --- 1-4: format, oracles, gradients, mask -------------------------------------------


def test_criterion_01_golden_prompts(acceptance):
    start = time.perf_counter()
    ok = 0
    for row in TP.GOLDEN:
        task, vocab = TP.golden_vocab(row)
        spec = build_specifier_prompt(task.specifier, vocab)
        instr = build_instruction_prompt(Instruction.for_labels(row["description"], row["labels"]), row["language"], vocab)
        ok += str(spec) == row["specifier"] and str(instr) == row["instruction"]
        if "instruction_tokens" in row:
            ok -= list(instr.tokens) != row["instruction_tokens"]
    seconds = time.perf_counter() - start
    record(acceptance, 1, ok == len(TP.GOLDEN) == 5 and seconds < 1.0,
           f"{ok}/{len(TP.GOLDEN)} golden rows match token for token in {seconds:.3f} s")


def test_criterion_02_metric_oracles(acceptance):
    rng = np.random.default_rng(20)
    n = 120
    worst = 0.0
    start = time.perf_counter()
    for _ in range(n):
        labels = [f"c{i}" for i in range(int(rng.integers(2, 6)))]
        size = int(rng.integers(1, 25))
        refs = TM.random_labels(rng, labels, size)
        preds = TM.random_labels(rng, labels, size, allow_invalid=True)
        worst = max(worst, abs(M.accuracy(preds, refs) - float(TM.oracle_accuracy(preds, refs, labels))))
        worst = max(worst, abs(M.macro_f1(preds, refs, labels) - float(TM.oracle_macro_f1(preds, refs, labels))))
    for _ in range(n):
        size = int(rng.integers(2, 20))
        pairs = [(round(float(s), 1), bool(b)) for s, b in zip(rng.random(size), rng.integers(0, 2, size=size))]
        pairs[0], pairs[1] = (pairs[0][0], True), (pairs[1][0], False)
        worst = max(worst, abs(M.eer(pairs) - float(TM.oracle_eer(pairs))))
    tags, words = ["k00", "k01", "k02"], ["a", "b", "c"]
    for _ in range(n):
        refs = [TM.pair_seq(rng, tags, words) for _ in range(int(rng.integers(1, 4)))]
        preds = [TM.pair_seq(rng, tags, words) if rng.random() < 0.6 else r for r in refs]
        worst = max(worst, abs(M.slu_f1(preds, refs) - float(TM.oracle_slu_f1(preds, refs))))
    for _ in range(n):
        refs = ["".join(rng.choice(list("ab "), size=int(rng.integers(1, 6)))) for _ in range(5)]
        preds = [r if rng.random() < 0.5 else r + str(rng.choice([" ", "a"])) for r in refs]
        want = sum(p.split() == r.split() for p, r in zip(preds, refs)) / len(refs)
        worst = max(worst, abs(M.exact_match_rate(preds, refs) - want))
    seconds = time.perf_counter() - start
    record(acceptance, 2, worst <= 1e-9 and seconds < 30,
           f"{n} instances per metric, max deviation {worst:.1e}, {seconds:.1f} s")


def test_criterion_03_gradient_check(acceptance):
    start = time.perf_counter()
    worst = TMO.gradient_check(24)
    seconds = time.perf_counter() - start
    record(acceptance, 3, worst < 1e-4 and seconds < 120,
           f"24 tiny float64 configs, worst relative error {worst:.1e}, {seconds:.1f} s")


def test_criterion_04_loss_mask(acceptance, small_vocab):
    rng = np.random.default_rng(4)
    pad = small_vocab.id(V.PAD)
    cases = changed = 0
    for reduction in ("sequence", "token"):
        cfg = ModelConfig(len(small_vocab), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_width=32,
                          loss_reduction=reduction)
        model = build_model(cfg, small_vocab)
        for _ in range(30):
            batch = collate(TMO.random_sequences(rng, len(small_vocab), int(rng.integers(1, 5))), pad)
            base = batch_loss(model, batch)
            targets = batch.targets.clone()
            free = (~batch.mask).nonzero().tolist()
            for b, t in free:
                targets[b, t] = int(rng.integers(len(small_vocab)))
            batch.targets = targets
            changed += not torch.equal(batch_loss(model, batch), base)
            cases += 1
    record(acceptance, 4, cases >= 50 and changed == 0, f"{cases} random cases, {changed} with a changed loss")


# --- 5-9: the trained toy model ---------------------------------------------------------


def em_of(preds):
    return M.exact_match_rate([[] if p.resolved is NotAnOption else list(p.resolved) for p in preds],
                              [p.reference for p in preds])


@pytest.fixture(scope="session")
def toy():
    cfg = X.ExperimentConfig.load(TOY_CONFIG)
    torch.set_num_threads(1)
    pools = cfg.load_pools()
    manifests, zs = X.build_suite(cfg.data_config(), cfg.seed)
    vocab = X.suite_vocabulary(manifests + [zs], pools)
    train_cfg = cfg.train_config()
    start = time.perf_counter()
    result = fit(manifests, pools, cfg.model_config(len(vocab)), train_cfg, vocab)
    seconds = time.perf_counter() - start
    model = result.model.eval()
    refs = training_references(pools)
    free, constrained = DecodeConfig(), DecodeConfig(constrained=True)
    runs = {}
    for m in manifests:
        task = m.descriptor
        conds = ("seen", "unseen", "order") if task.kind == "classification" else ("seen", "unseen")
        for cond in conds:
            for dc in (free, constrained) if task.kind == "classification" else (free,):
                runs[task.task_type, cond, dc.constrained] = run_eval(
                    model, vocab, m, mode=cfg.mode, condition=cond, pools=pools, references=refs, decode_cfg=dc,
                    seed=cfg.seed, n_orders=2, return_predictions=True,
                )
    zero_shot = {
        "instruction": run_eval(model, vocab, zs, mode=cfg.mode, condition="seen", pools=pools, references=refs),
        "specifier": run_eval(model, vocab, zs, mode="specifier", decode_cfg=constrained),
    }
    classification = [m.descriptor.task_type for m in manifests if m.descriptor.kind == "classification"]
    seqgen = [m.descriptor.task_type for m in manifests if m.descriptor.kind == "seqgen"]
    return SimpleNamespace(cfg=cfg, train_cfg=train_cfg, result=result, seconds=seconds, runs=runs, zs=zs,
                           zero_shot=zero_shot, classification=classification, seqgen=seqgen, manifests=manifests)


def value(toy, task, cond, constrained=False):
    return toy.runs[task, cond, constrained][0].value


@pytest.mark.slow
def test_criterion_05_multitask_training(acceptance, toy):
    accs = {t: value(toy, t, "seen") for t in toy.classification}
    ems = {t: float(np.mean([em_of(p) for p in toy.runs[t, "seen", False][1]])) for t in toy.seqgen}
    n_classes = [len(m.descriptor.labels) for m in toy.manifests if m.descriptor.kind == "classification"]
    steps = toy.result.state.step
    passed = (
        len(accs) == 3 and len(ems) == 1 and all(4 <= n <= 8 for n in n_classes)
        and all(a >= 0.95 for a in accs.values()) and all(e >= 0.90 for e in ems.values())
        and steps <= STEP_BUDGET and toy.seconds < SECONDS_BUDGET
    )
    detail = ", ".join(f"{t} acc {a:.3f}" for t, a in accs.items()) + ", " + ", ".join(
        f"{t} EM {e:.3f}" for t, e in ems.items())
    record(acceptance, 5, passed, f"{detail}; {steps} steps ({toy.result.state.stopped}), {toy.seconds:.0f} s")


@pytest.mark.slow
def test_criterion_06_unseen_phrases(acceptance, toy):
    gaps = {}
    for t in toy.classification:
        unseen = toy.runs[t, "unseen", False][0]
        assert len(unseen.sub_runs) == 5
        gaps[t] = value(toy, t, "seen") - unseen.value
    passed = all(abs(g) <= 0.02 for g in gaps.values())
    detail = ", ".join(f"{t} seen-unseen {g:+.3f}" for t, g in gaps.items())
    record(acceptance, 6, passed, f"{detail} (5 gated phrases each)")


@pytest.mark.slow
def test_criterion_07_option_order(acceptance, toy):
    gaps = {}
    for t in toy.classification:
        per_order = toy.runs[t, "order", False][0].details["per_order"]
        assert len(per_order) == 2
        gaps[t] = max(per_order.values()) - min(per_order.values())
    passed = all(g <= 0.02 for g in gaps.values())
    record(acceptance, 7, passed, ", ".join(f"{t} gap {g:.3f}" for t, g in gaps.items()) + " across 2 orders")


@pytest.mark.slow
def test_criterion_08_following_rate(acceptance, toy):
    constrained = [r[0].following_rate for k, r in toy.runs.items() if k[2]]
    free = {f"{k[0]}/{k[1]}": r[0].following_rate for k, r in toy.runs.items() if not k[2]}
    passed = constrained and all(f == 1.0 for f in constrained) and all(f >= 0.95 for f in free.values())
    lowest = min(free, key=free.get)
    record(acceptance, 8, passed,
           f"constrained min {min(constrained):.3f} over {len(constrained)} sets; "
           f"unconstrained min {free[lowest]:.3f} ({lowest})")


@pytest.mark.slow
def test_criterion_09_zero_shot(acceptance, toy):
    n = len(toy.zs.descriptor.labels)
    chance = 1.0 / n
    instr, spec = toy.zero_shot["instruction"], toy.zero_shot["specifier"]
    majority = instr.baselines["majority"]
    seen_labels = {lab for m in toy.manifests for lab in m.descriptor.labels}
    passed = (
        not seen_labels & set(toy.zs.descriptor.labels)
        and instr.value >= chance + 0.10 and instr.value >= majority + 0.10
        and abs(spec.value - chance) < 0.10
    )
    record(acceptance, 9, passed,
           f"instruction {instr.value:.3f} vs random {chance:.3f} / majority {majority:.3f}; "
           f"specifier {spec.value:.3f}")


# --- 10-11: schedule and reproducibility -------------------------------------------------


def closed_form(step, max_lr, warmup):
    return max_lr * step / warmup if step <= warmup else max_lr * math.sqrt(warmup / step)


@pytest.mark.slow
def test_criterion_10_lr_schedule(acceptance, toy):
    w, peak = toy.train_cfg.warmup_steps, toy.train_cfg.max_lr
    points = [1, w // 2, w, 4 * w]
    exact = all(lr_at(s, peak, w) == closed_form(s, peak, w) for s in points)
    log = toy.result.log
    logged = all(rec["lr"] == lr_at(rec["step"], peak, w) for rec in log)
    record(acceptance, 10, exact and logged and len(log) == toy.result.state.step,
           f"closed form at {points}; {len(log)} logged steps match")


REPRO = {
    "data": {"n_train": 120, "n_dev": 12, "n_test": 30},
    "model": {"d_model": 32, "n_heads": 4, "n_enc_layers": 1, "n_dec_layers": 2, "ffn_width": 64},
    "train": {"steps_per_epoch": 40, "max_epochs": 2, "batch_size": 8, "checkpoint_interval_steps": 40,
              "warmup_steps": 20, "max_lr": 0.002, "dev_limit": 12},
    "eval": {"max_phrases": 2, "baseline_seeds": 20},
}


def test_criterion_11_reproducibility(acceptance, tmp_path):
    runner = CliRunner()

    def run(*args):
        res = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
        assert res.exit_code == 0, res.output
        return Path(res.output.strip().splitlines()[-1])

    cfg = tmp_path / "repro.yaml"
    cfg.write_text(yaml.safe_dump(REPRO))
    data = run("synth-data", "--config", cfg, "--out-dir", tmp_path / "runs", "--seed", 3)
    outputs = []
    for _ in range(2):
        ckpt = run("train", "--config", cfg, "--out-dir", tmp_path / "runs", "--data-dir", data, "--seed", 3)
        ev = run("eval", "--config", cfg, "--out-dir", tmp_path / "runs", "--data-dir", data, "--seed", 3,
                 "--checkpoint", ckpt)
        files = sorted((ev / "reports").glob("*.json")) + sorted((ev / "predictions").glob("*.jsonl"))
        outputs.append({f.name: f.read_bytes() for f in files})
    identical = outputs[0] == outputs[1] and len(outputs[0]) > 0
    record(acceptance, 11, identical, f"{len(outputs[0])} report and prediction files bitwise identical across 2 runs")
