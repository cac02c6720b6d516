"""Decoding a test split under a prompt condition and scoring it."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metrics as M
from . import vocab as V
from .decoding import DecodeConfig, decode, greedy_decode_batch
from .errors import EmptyPool, SchemaError
from .prompts import (
    Instruction,
    NotAnOption,
    ParaphrasePool,
    compile_prompt,
    decode_option,
    is_novel,
    normalized_edit_distance,
    training_references,
)
from .tasks import DatasetManifest, Example, TaskDescriptor

CONDITIONS = ("seen", "unseen", "order")


@dataclass(frozen=True)
class Prediction:
    index: int
    tokens: tuple[str, ...]
    resolved: object
    reference: object
    score: float | None = None

    def to_json(self) -> dict:
        res = self.resolved
        return {
            "index": self.index,
            "tokens": list(self.tokens),
            "resolved": None if res is NotAnOption else (res if isinstance(res, str) else " ".join(res)),
            "following": res is not NotAnOption,
            "reference": self.reference if isinstance(self.reference, str) else " ".join(self.reference),
            "score": self.score,
        }


@dataclass
class EvalReport:
    task_id: str
    metric: str
    value: float
    following_rate: float
    condition: str
    mode: str
    n_examples: int
    baselines: dict = field(default_factory=dict)
    sub_runs: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        rows = [
            ("task", self.task_id),
            ("mode", self.mode),
            ("condition", self.condition),
            ("metric", self.metric),
            ("value", f"{self.value:.4f}"),
            ("following_rate", f"{self.following_rate:.4f}"),
            ("n_examples", str(self.n_examples)),
        ]
        rows += [(f"baseline_{k}", f"{v:.4f}") for k, v in sorted(self.baselines.items())]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        if self.sub_runs:
            lines.append("")
            lines.append(f"{'run':<5}{'value':>8}{'follow':>8}  prompt")
            for i, r in enumerate(self.sub_runs):
                lines.append(f"{i:<5}{r['value']:>8.4f}{r['following_rate']:>8.4f}  {r['description']} {r['permutation']}")
        return "\n".join(lines) + "\n"


# --- baselines -------------------------------------------------------------


def random_baseline(task: TaskDescriptor, refs: Sequence[str], *, n_seeds: int = 1000, seed: int = 0) -> float:
    """Expected metric of uniform random guessing, averaged over ``n_seeds`` draws."""
    labels = list(task.labels)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_seeds):
        guesses = [labels[i] for i in rng.integers(len(labels), size=len(refs))]
        total += _classification_metric(task, guesses, refs)
    return total / n_seeds


def majority_label(train: Sequence[Example]) -> str:
    """Most frequent training label; ties go to the lexicographically smallest."""
    counts = Counter(ex.target for ex in train)
    best = max(counts.values())
    return min(lab for lab, c in counts.items() if c == best)


def majority_baseline(task: TaskDescriptor, train: Sequence[Example], refs: Sequence[str]) -> float:
    lab = majority_label(train)
    return _classification_metric(task, [lab] * len(refs), refs)


# --- scoring ---------------------------------------------------------------


def _classification_metric(task: TaskDescriptor, preds, refs, scores=None) -> float:
    if task.metric == "accuracy":
        return M.accuracy(preds, refs)
    if task.metric == "f1":
        if task.f1_average == "binary":
            return M.binary_f1(preds, refs, task.positive)
        return M.macro_f1(preds, refs, task.labels)
    if task.metric == "eer":
        if scores is None:
            # hard decisions as scores
            scores = [1.0 if p == task.positive else 0.0 for p in preds]
        return M.eer(zip(scores, [r == task.positive for r in refs]))
    raise SchemaError(f"metric {task.metric} does not apply to classification")


def score_predictions(task: TaskDescriptor, preds: Sequence[Prediction]) -> tuple[float, dict]:
    """Task metric plus details for a list of predictions."""
    resolved = [p.resolved for p in preds]
    refs = [p.reference for p in preds]
    if task.kind == "classification":
        scores = [p.score for p in preds] if task.metric == "eer" else None
        return _classification_metric(task, resolved, refs, scores), {}
    texts = [[] if r is NotAnOption else list(r) for r in resolved]
    if task.metric == "slu_f1":
        value, det = M.slu_f1(texts, refs, return_details=True)
        return value, det
    return M.exact_match_rate(texts, refs), {}


# --- prediction --------------------------------------------------------------


def _prompt_for(task: TaskDescriptor, mode: str, instr: Instruction | None, vocab: V.Vocabulary):
    return compile_prompt(mode, vocab, spec=task.specifier, instr=instr)


def predict(
    model,
    vocab: V.Vocabulary,
    task: TaskDescriptor,
    examples: Sequence[Example],
    mode: str,
    instructions: Instruction | Sequence[Instruction] | None,
    decode_cfg: DecodeConfig = DecodeConfig(),
    *,
    batch_size: int = 128,
) -> list[Prediction]:
    """Decode every example after its prompt and map the output back to a label.

    ``instructions`` is one instruction shared by all examples or one per
    example; it is ignored in specifier mode.  In instruction modes a
    classification output is read as an option number; in specifier mode it
    must be a single label token.  Constrained decoding emits exactly one
    token from the option numbers (or, in specifier mode, the label tokens).
    """
    if mode != "specifier" and instructions is None:
        raise SchemaError(f"mode {mode} needs an instruction")
    if isinstance(instructions, Instruction) or instructions is None:
        instructions = [instructions] * len(examples)
    if len(instructions) != len(examples):
        raise SchemaError("one instruction per example expected")
    eos, pad = vocab.id(V.EOS), vocab.id(V.PAD)
    if task.kind != "classification" and decode_cfg.constrained:
        # there is no option set to constrain to; sequence outputs decode freely
        decode_cfg = replace(decode_cfg, constrained=False)
    if mode == "specifier" and task.kind == "classification":
        for lab in task.labels:
            vocab.require(lab, "label")
    prompts = {}
    encs, pids, allowed, score_ids, maps = [], [], [], [], []
    for ex, instr in zip(examples, instructions):
        key = id(instr)
        if key not in prompts:
            prompts[key] = _prompt_for(task, mode, instr, vocab)
        cp = prompts[key]
        encs.append(vocab.encode(ex.input))
        pids.append(vocab.encode_text(cp.tokens))
        maps.append(cp.option_map)
        if task.kind == "classification":
            if mode == "specifier":
                allowed.append(vocab.encode(task.labels))
                score_ids.append(vocab.id(task.positive))
            else:
                allowed.append(vocab.encode([str(i) for i in sorted(cp.option_map)]))
                pos_opt = [i for i, lab in cp.option_map.items() if lab == task.positive]
                score_ids.append(vocab.id(str(pos_opt[0])) if pos_opt else eos)
        else:
            allowed.append([])
            score_ids.append(eos)

    outs: list[list[int]] = []
    scores: list[float | None] = []
    if decode_cfg.beam_size == 1 or decode_cfg.constrained:
        for s in range(0, len(examples), batch_size):
            o, sc = greedy_decode_batch(
                model, encs[s : s + batch_size], pids[s : s + batch_size], decode_cfg, eos, pad,
                allowed[s : s + batch_size], score_ids[s : s + batch_size],
            )
            outs += o
            scores += sc
    else:
        for e, p, a in zip(encs, pids, allowed):
            outs.append(decode(model, e, p, decode_cfg, eos, a))
        for s in range(0, len(examples), batch_size):
            cfg1 = DecodeConfig(constrained=True)
            _, sc = greedy_decode_batch(
                model, encs[s : s + batch_size], pids[s : s + batch_size], cfg1, eos, pad,
                allowed[s : s + batch_size], score_ids[s : s + batch_size],
            )
            scores += sc

    preds = []
    for i, (ex, toks, omap, sc) in enumerate(zip(examples, outs, maps, scores)):
        words = tuple(vocab.decode(toks))
        if task.kind == "classification":
            if mode == "specifier":
                res = words[0] if len(words) == 1 and words[0] in task.labels else NotAnOption
            else:
                res = decode_option(words, omap)
        else:
            res = words if all(vocab.class_of(w) == "text" for w in words) else NotAnOption
        preds.append(Prediction(i, words, res, ex.target, sc if task.kind == "classification" else None))
    return preds


# --- conditions --------------------------------------------------------------


def _permutations(n: int, k: int, seed: int) -> list[tuple[int, ...]]:
    """``k`` distinct non-identity orders (fewer if n! - 1 < k)."""
    rng = np.random.default_rng(seed)
    ident = tuple(range(n))
    found: list[tuple[int, ...]] = []
    limit = math.factorial(n) - 1
    while len(found) < min(k, limit):
        p = tuple(int(x) for x in rng.permutation(n))
        if p != ident and p not in found:
            found.append(p)
    return found


def condition_prompts(
    task: TaskDescriptor,
    pool: ParaphrasePool,
    condition: str,
    *,
    references: Sequence[str] | None = None,
    n_orders: int = 2,
    seed: int = 0,
    max_phrases: int | None = None,
    threshold: float = 0.9,
) -> list[Instruction]:
    """Instructions for one evaluation condition.

    ``seen`` uses every seen description in canonical option order;
    ``unseen`` every unseen description in canonical order, after checking
    each one passes the novelty gate against ``references``; ``order`` pairs
    every seen description with ``n_orders`` non-canonical option orders.
    """
    if condition not in CONDITIONS:
        raise SchemaError(f"unknown condition {condition!r}")
    if condition == "unseen":
        phrases = list(pool.unseen)
        if not phrases:
            raise EmptyPool(f"no unseen descriptions for {pool.task_type}")
        refs = list(pool.seen) if references is None else list(references)
        for ph in phrases:
            if not is_novel(ph, refs, threshold):
                d = normalized_edit_distance(ph, refs, unit="word")
                raise SchemaError(f"unseen description {ph!r} fails the novelty gate (distance {d:.3f})")
        source = "unseen_pool"
    else:
        phrases = list(pool.seen)
        if not phrases:
            raise EmptyPool(f"no seen descriptions for {pool.task_type}")
        source = "seen_pool"
    if max_phrases is not None:
        phrases = phrases[:max_phrases]
    kind = task.kind
    if kind != "classification":
        return [Instruction(ph, source=source, task_kind=kind) for ph in phrases]
    n = len(task.labels)
    if condition == "order":
        perms = _permutations(n, n_orders, seed)
    else:
        perms = [tuple(range(n))]
    return [Instruction.for_labels(ph, task.labels, p, source=source, task_kind=kind) for p in perms for ph in phrases]


def run_eval(
    model,
    vocab: V.Vocabulary,
    manifest: DatasetManifest,
    *,
    mode: str = "instruction_prev",
    condition: str = "seen",
    pools: Mapping[str, ParaphrasePool] | None = None,
    references: Sequence[str] | None = None,
    decode_cfg: DecodeConfig = DecodeConfig(),
    split: str = "test",
    seed: int = 0,
    n_orders: int = 2,
    max_phrases: int | None = None,
    limit: int | None = None,
    baseline_seeds: int = 1000,
    return_predictions: bool = False,
):
    """Evaluate one task; the reported value is the mean over prompt sub-runs."""
    task = manifest.descriptor
    examples = list(manifest.splits[split])
    if limit is not None:
        examples = examples[:limit]
    if not examples:
        raise SchemaError(f"split {split!r} of {task.task_id} is empty")
    if mode == "specifier":
        runs = [None]
    else:
        if pools is None or task.task_type not in pools:
            raise EmptyPool(f"no paraphrase pool for {task.task_type}")
        if references is None:
            references = training_references(pools)
        runs = condition_prompts(
            task, pools[task.task_type], condition, references=references, n_orders=n_orders, seed=seed,
            max_phrases=max_phrases,
        )
    sub_runs, all_preds = [], []
    for instr in runs:
        preds = predict(model, vocab, task, examples, mode, instr, decode_cfg)
        value, det = score_predictions(task, preds)
        follow = M.following_rate([p.resolved for p in preds])
        sub_runs.append(
            {
                "description": instr.description if instr else "",
                "permutation": list(instr.permutation) if instr else [],
                "value": value,
                "following_rate": follow,
                **det,
            }
        )
        all_preds.append(preds)
    refs = [ex.target for ex in examples]
    baselines = {}
    if task.kind == "classification":
        baselines["random"] = random_baseline(task, refs, n_seeds=baseline_seeds, seed=seed)
        baselines["majority"] = majority_baseline(task, manifest.train, refs)
    details = {}
    if condition == "order" and task.kind == "classification" and mode != "specifier":
        by_perm: dict[str, list[float]] = {}
        for r in sub_runs:
            by_perm.setdefault(",".join(map(str, r["permutation"])), []).append(r["value"])
        details["per_order"] = {k: float(np.mean(v)) for k, v in by_perm.items()}
        vals = list(details["per_order"].values())
        details["order_gap"] = float(max(vals) - min(vals))
    report = EvalReport(
        task_id=task.task_id,
        metric="slu_f1_exact" if task.metric == "slu_f1" else task.metric,
        value=float(np.mean([r["value"] for r in sub_runs])),
        following_rate=float(np.mean([r["following_rate"] for r in sub_runs])),
        condition=condition if mode != "specifier" else "specifier",
        mode=mode,
        n_examples=len(examples),
        baselines=baselines,
        sub_runs=sub_runs,
        details=details,
        decode=asdict(decode_cfg),
    )
    if return_predictions:
        return report, all_preds
    return report


def dev_score(
    model,
    vocab: V.Vocabulary,
    manifests: Sequence[DatasetManifest],
    pools: Mapping[str, ParaphrasePool],
    mode: str,
    *,
    seed: int = 0,
    limit: int | None = 200,
) -> float:
    """Mean dev metric over tasks; each example gets a seeded seen description and order."""
    values = []
    for mi, man in enumerate(manifests):
        task = man.descriptor
        examples = list(man.dev)[:limit] if limit is not None else list(man.dev)
        if not examples:
            continue
        instrs = None
        if mode != "specifier":
            pool = pools[task.task_type]
            rng = np.random.default_rng([seed, mi, 7919])
            instrs = []
            for _ in examples:
                desc = pool.seen[int(rng.integers(len(pool.seen)))]
                if task.kind == "classification":
                    perm = rng.permutation(len(task.labels))
                    instrs.append(Instruction.for_labels(desc, task.labels, perm, source="seen_pool"))
                else:
                    instrs.append(Instruction(desc, source="seen_pool", task_kind=task.kind))
        preds = predict(model, vocab, task, examples, mode, instrs)
        if task.kind == "classification":
            values.append(M.accuracy([p.resolved for p in preds], [p.reference for p in preds]))
        else:
            values.append(M.exact_match_rate([[] if p.resolved is NotAnOption else p.resolved for p in preds],
                                             [p.reference for p in preds]))
    if not values:
        raise SchemaError("no dev examples to score")
    return float(np.mean(values))


def write_predictions(path, preds: Sequence[Prediction]) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")
