"""Multi-task training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import vocab as V
from .errors import EmptyPool, SchemaError, TrainingDiverged
from .model import AdamW, ModelConfig, Seq2Seq, batch_loss, build_model, collate, load_checkpoint, save_checkpoint
from .prompts import GRAMMARS, Instruction, ParaphrasePool, precomputed_orders, sample_instruction
from .tasks import DatasetManifest, TrainingSequence, make_training_sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 3e-4
    warmup_steps: int = 200
    batch_size: int = 32
    steps_per_epoch: int = 500
    max_epochs: int = 10
    checkpoint_interval_steps: int = 500
    patience: int = 3
    seed: int = 0
    mode: str = "instruction_prev"
    paraphrase_orders_k: int = 2
    n_descriptions: int | None = None
    grad_clip: float | None = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    dev_limit: int | None = 200
    stop_at: float | None = None
    description_noise: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise SchemaError("warmup_steps must be >= 1")
        if self.patience < 1:
            raise SchemaError("patience must be >= 1")
        if self.mode not in GRAMMARS:
            raise SchemaError(f"unknown prompt mode {self.mode!r}")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.max_epochs < 1:
            raise SchemaError("batch_size, steps_per_epoch and max_epochs must be positive")
        if not 0.0 <= self.description_noise < 1.0:
            raise SchemaError("description_noise must be in [0, 1)")
        if self.checkpoint_interval_steps < 1:
            raise SchemaError("checkpoint_interval_steps must be positive")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    @property
    def max_steps(self) -> int:
        return self.steps_per_epoch * self.max_epochs


def lr_at(step: int, max_lr: float, warmup: int) -> float:
    """Linear warmup to ``max_lr`` at ``warmup``, then inverse square-root decay."""
    if step <= 0:
        return 0.0
    return max_lr * min(step / warmup, math.sqrt(warmup / step))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _restrict(pool: ParaphrasePool, n: int | None) -> ParaphrasePool:
    if n is None:
        return pool
    return ParaphrasePool(pool.task_type, pool.seen[:n], pool.unseen, pool.metadata)


def _substitution_words(pools: Mapping[str, ParaphrasePool]) -> list[str]:
    words = {w for pool in pools.values() for ph in pool.seen for w in V.tokenize_text(ph)}
    return sorted(w for w in words if any(c.isalnum() for c in w))


def perturb_description(instr: Instruction, rate: float, words: Sequence[str], rng: np.random.Generator) -> Instruction:
    """Swap each word of the description for a random training word with probability ``rate``."""
    toks = V.tokenize_text(instr.description)
    hits = rng.random(len(toks)) < rate
    picks = rng.integers(len(words), size=len(toks))
    out = [words[int(j)] if hit and any(c.isalnum() for c in t) else t for t, hit, j in zip(toks, hits, picks)]
    return replace(instr, description=" ".join(out))


def assemble_epoch_stream(
    manifests: Sequence[DatasetManifest],
    pools: Mapping[str, ParaphrasePool],
    cfg: TrainConfig,
    epoch_seed: int,
    vocab: V.Vocabulary,
) -> list[TrainingSequence]:
    """One epoch of training sequences, shuffled and sized to steps x batch.

    Each example gets its own description and option order, drawn from a
    generator keyed by (epoch seed, manifest index, example index), so the
    stream does not depend on how the work is split.  With
    ``paraphrase_orders_k > 0`` the option order comes from k orders fixed per
    (example, description) for the whole run.  ``description_noise`` swaps
    description words for random words of the seen phrases, so that the model
    does not lean on any particular wording.
    """
    items = []
    subs = _substitution_words(pools) if cfg.description_noise > 0 and cfg.mode != "specifier" else []
    for mi, man in enumerate(manifests):
        task = man.descriptor
        pool = None
        if cfg.mode != "specifier":
            if task.task_type not in pools:
                raise EmptyPool(f"no paraphrase pool for task type {task.task_type!r}")
            pool = _restrict(pools[task.task_type], cfg.n_descriptions)
        for ei, ex in enumerate(man.train):
            instr = None
            if pool is not None:
                rng = np.random.default_rng([epoch_seed, mi, ei])
                orders = None
                if cfg.paraphrase_orders_k > 0 and task.kind == "classification":
                    n = len(task.labels)
                    orders = lambda d, mi=mi, ei=ei, n=n: precomputed_orders(
                        n, cfg.paraphrase_orders_k, np.random.default_rng([cfg.seed, mi, ei, d])
                    )
                instr = sample_instruction(task, pool, rng, orders)
                if subs:
                    instr = perturb_description(instr, cfg.description_noise, subs, rng)
            items.append(make_training_sequence(ex, task, cfg.mode, instr, vocab))
    if not items:
        raise SchemaError("no training examples")
    order = np.random.default_rng(epoch_seed).permutation(len(items))
    need = cfg.steps_per_epoch * cfg.batch_size
    idx = [int(order[i % len(order)]) for i in range(need)]
    return [items[i] for i in idx]


@dataclass
class TrainState:
    step: int = 0
    best_metric: float = -math.inf
    best_step: int = 0
    evals_since_best: int = 0
    n_evals: int = 0
    stopped: str = ""


@dataclass
class FitResult:
    model: Seq2Seq
    best_metric: float
    best_step: int
    log: list[dict]
    evals: list[dict]
    state: TrainState
    checkpoint: Path | None = None


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def fit(
    manifests: Sequence[DatasetManifest],
    pools: Mapping[str, ParaphrasePool],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    vocab: V.Vocabulary,
    *,
    out_dir=None,
    resume_from=None,
    dev_scorer: Callable[[Seq2Seq], float] | None = None,
    max_steps: int | None = None,
) -> FitResult:
    """Train, evaluate dev every ``checkpoint_interval_steps`` and keep the best.

    Stops when ``patience`` consecutive evaluations bring no improvement, when
    the dev score reaches ``stop_at``, or after ``max_epochs``.  ``max_steps``
    caps the run (used to interrupt and resume).
    """
    if dev_scorer is None:
        from .evaluation import dev_score

        def dev_scorer(m):
            return dev_score(m, vocab, manifests, pools, train_cfg.mode, seed=train_cfg.seed, limit=train_cfg.dev_limit)

    out_dir = Path(out_dir) if out_dir is not None else None
    model = build_model(model_cfg, vocab)
    opt = AdamW(model.parameters(), train_cfg.adam_betas, train_cfg.adam_eps, train_cfg.weight_decay)
    state = TrainState()
    steplog: list[dict] = []
    evals: list[dict] = []
    best = _snapshot(model)
    if resume_from is not None:
        model, best, opt, state, steplog, evals = _resume(resume_from, vocab, train_cfg)

    pad = vocab.id(V.PAD)
    spe = train_cfg.steps_per_epoch
    last_step = train_cfg.max_steps if max_steps is None else min(max_steps, train_cfg.max_steps)
    stream, stream_epoch = None, -1
    last_finite = _snapshot(model)
    while state.step < last_step and not state.stopped:
        step = state.step + 1
        epoch = (step - 1) // spe
        if epoch != stream_epoch:
            stream = assemble_epoch_stream(manifests, pools, train_cfg, epoch_seed(train_cfg.seed, epoch), vocab)
            stream_epoch = epoch
        pos = (step - 1) % spe
        batch = collate(stream[pos * train_cfg.batch_size : (pos + 1) * train_cfg.batch_size], pad)
        lr = lr_at(step, train_cfg.max_lr, train_cfg.warmup_steps)
        model.zero_grad(set_to_none=False)
        value = batch_loss(model, batch)
        if not torch.isfinite(value):
            raise TrainingDiverged(f"loss became {float(value.detach())} at step {step}", last_finite=last_finite)
        value.backward()
        if train_cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step(lr)
        state.step = step
        steplog.append({"step": step, "loss": float(value.detach()), "lr": lr})
        if step % train_cfg.checkpoint_interval_steps == 0 or step == train_cfg.max_steps:
            last_finite = _snapshot(model)
            score = float(dev_scorer(model))
            state.n_evals += 1
            evals.append({"step": step, "dev_metric": score})
            log.info("step %d loss %.4f dev %.4f", step, float(value.detach()), score)
            # ties go to the later checkpoint, but only a strict gain resets patience
            if score >= state.best_metric:
                state.best_step = step
                best = _snapshot(model)
            if score > state.best_metric:
                state.best_metric, state.evals_since_best = score, 0
            else:
                state.evals_since_best += 1
            if state.evals_since_best >= train_cfg.patience:
                state.stopped = "patience"
            elif train_cfg.stop_at is not None and score >= train_cfg.stop_at:
                state.stopped = "target"
            if out_dir is not None:
                _save_state(out_dir, model, best, opt, state, steplog, evals, vocab, train_cfg)
    if state.step >= train_cfg.max_steps and not state.stopped:
        state.stopped = "max_epochs"

    if out_dir is not None:
        _save_state(out_dir, model, best, opt, state, steplog, evals, vocab, train_cfg)
    best_model = build_model(model_cfg, vocab)
    best_model.load_state_dict(best)
    ckpt = out_dir / "best" if out_dir is not None else None
    return FitResult(best_model, state.best_metric, state.best_step, steplog, evals, state, ckpt)


def _save_state(out_dir, model, best, opt, state, steplog, evals, vocab, train_cfg):
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = {"train_config": asdict(train_cfg), "train_state": asdict(state)}
    save_checkpoint(out_dir / "last", model, vocab.hash, state.step, extra, optimizer=opt)
    best_model = copy.deepcopy(model)
    best_model.load_state_dict(best)
    save_checkpoint(out_dir / "best", best_model, vocab.hash, state.best_step, {"dev_metric": state.best_metric})
    with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in steplog:
            fh.write(json.dumps(rec) + "\n")
    with open(out_dir / "dev_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in evals:
            fh.write(json.dumps(rec) + "\n")


def _resume(out_dir, vocab, train_cfg):
    out_dir = Path(out_dir)
    model, header = load_checkpoint(out_dir / "last", vocab)
    best_model, _ = load_checkpoint(out_dir / "best", vocab)
    opt = AdamW(model.parameters(), train_cfg.adam_betas, train_cfg.adam_eps, train_cfg.weight_decay)
    with np.load(out_dir / "last" / "optimizer.npz") as arrays:
        opt.load_arrays(arrays)
    st = dict(header["train_state"])
    st["stopped"] = ""
    state = TrainState(**st)
    steplog = [json.loads(line) for line in (out_dir / "train_log.jsonl").read_text().splitlines() if line.strip()]
    evals = [json.loads(line) for line in (out_dir / "dev_log.jsonl").read_text().splitlines() if line.strip()]
    steplog = steplog[: state.step]
    return model, _snapshot(best_model), opt, state, steplog, evals
