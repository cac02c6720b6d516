"""Greedy and beam-search decoding after a compiled prompt."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import SchemaError

StepFn = Callable[[tuple[int, ...]], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 1
    length_penalty: float = 0.0
    maxlen_ratio: float = 1.0
    constrained: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise SchemaError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise SchemaError("length_penalty must be >= 0")
        if self.maxlen_ratio <= 0:
            raise SchemaError("maxlen_ratio must be > 0")

    def max_new_tokens(self, encoder_len: int) -> int:
        return max(1, math.ceil(self.maxlen_ratio * encoder_len))


def greedy_search(step: StepFn, eos_id: int, max_len: int) -> list[int]:
    """Pick the most likely token until EOS or ``max_len`` tokens (EOS not returned)."""
    out: list[int] = []
    while len(out) < max_len:
        tok = int(np.argmax(step(tuple(out))))
        if tok == eos_id:
            break
        out.append(tok)
    return out


def beam_search(
    step: StepFn, eos_id: int, max_len: int, beam_size: int, length_penalty: float = 0.0
) -> tuple[list[int], float]:
    """Beam search with an additive length reward.

    A hypothesis scores ``sum(log p) + length_penalty * n`` where ``n`` counts
    emitted tokens including EOS.  Hypotheses still open after ``max_len``
    tokens are closed without an EOS.  Returns the best tokens (EOS stripped)
    and its score.
    """
    running: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    ended: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_len):
        cands = []
        for score, prefix in running:
            lp = np.asarray(step(prefix), dtype=np.float64)
            for tok in range(lp.shape[0]):
                cands.append((score + float(lp[tok]) + length_penalty, prefix + (tok,)))
        # stable: ties keep hypothesis order then token order
        order = sorted(range(len(cands)), key=lambda i: -cands[i][0])[:beam_size]
        running = []
        for i in order:
            score, seq = cands[i]
            if seq[-1] == eos_id:
                ended.append((score, seq[:-1]))
            else:
                running.append((score, seq))
        if not running:
            break
    ended.extend(running)
    best = max(range(len(ended)), key=lambda i: (ended[i][0], -i))
    return list(ended[best][1]), ended[best][0]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max()
    return x - np.log(np.exp(x).sum())


class _ModelStep:
    """Caches the encoder output and exposes next-token log-probs for a prefix."""

    def __init__(self, model, encoder_input, prompt_tokens):
        self.model = model
        self.prompt = list(prompt_tokens)
        enc = torch.as_tensor([list(encoder_input)], dtype=torch.long)
        self.pad = torch.zeros_like(enc, dtype=torch.bool)
        with torch.no_grad():
            self.mem = model.encode(enc, self.pad)

    def __call__(self, prefix):
        dec = torch.as_tensor([self.prompt + list(prefix)], dtype=torch.long)
        with torch.no_grad():
            logits = self.model.decode(self.mem, self.pad, dec)[0, -1].numpy()
        return _log_softmax(logits)


def _constrained_first(step, allowed):
    lp = step(())
    allowed = list(allowed)
    return [allowed[int(np.argmax(lp[allowed]))]]


def greedy_decode(model, encoder_input, prompt_tokens, cfg: DecodeConfig, eos_id: int, allowed_first: Sequence[int] = ()):
    step = _ModelStep(model, encoder_input, prompt_tokens)
    if cfg.constrained:
        return _constrained_first(step, allowed_first)
    return greedy_search(step, eos_id, cfg.max_new_tokens(len(encoder_input)))


def beam_decode(model, encoder_input, prompt_tokens, cfg: DecodeConfig, eos_id: int, allowed_first: Sequence[int] = ()):
    step = _ModelStep(model, encoder_input, prompt_tokens)
    if cfg.constrained:
        return _constrained_first(step, allowed_first)
    tokens, _ = beam_search(step, eos_id, cfg.max_new_tokens(len(encoder_input)), cfg.beam_size, cfg.length_penalty)
    return tokens


def decode(model, encoder_input, prompt_tokens, cfg: DecodeConfig, eos_id: int, allowed_first: Sequence[int] = ()):
    fn = greedy_decode if cfg.beam_size == 1 else beam_decode
    return fn(model, encoder_input, prompt_tokens, cfg, eos_id, allowed_first)


@torch.no_grad()
def greedy_decode_batch(
    model,
    encoder_inputs: Sequence[Sequence[int]],
    prompts: Sequence[Sequence[int]],
    cfg: DecodeConfig,
    eos_id: int,
    pad_id: int,
    allowed_first: Sequence[Sequence[int]] | None = None,
    score_ids: Sequence[int] | None = None,
):
    """Batched greedy decoding.

    Returns the emitted tokens per example and, when ``score_ids`` is given,
    the first-step probability of ``score_ids[b]`` for each example.
    """
    B = len(encoder_inputs)
    S = max(len(e) for e in encoder_inputs)
    enc = torch.full((B, S), pad_id, dtype=torch.long)
    enc_pad = torch.ones((B, S), dtype=torch.bool)
    for b, e in enumerate(encoder_inputs):
        enc[b, : len(e)] = torch.as_tensor(list(e))
        enc_pad[b, : len(e)] = False
    mem = model.encode(enc, enc_pad)
    lengths = [len(p) for p in prompts]
    budgets = [cfg.max_new_tokens(len(e)) for e in encoder_inputs]
    steps = 1 if cfg.constrained else max(budgets)
    dec = torch.full((B, max(lengths) + steps), pad_id, dtype=torch.long)
    for b, p in enumerate(prompts):
        dec[b, : len(p)] = torch.as_tensor(list(p))
    outs: list[list[int]] = [[] for _ in range(B)]
    done = [False] * B
    scores = None
    rows = torch.arange(B)
    for t in range(steps):
        cur = [lengths[b] + len(outs[b]) for b in range(B)]
        width = max(cur)
        logits = model.decode(mem, enc_pad, dec[:, :width])
        last = logits[rows, torch.as_tensor(cur) - 1]
        if t == 0 and score_ids is not None:
            probs = torch.softmax(last, dim=-1)
            scores = [float(probs[b, score_ids[b]]) for b in range(B)]
        for b in range(B):
            if done[b]:
                continue
            if t == 0 and cfg.constrained:
                allowed = list(allowed_first[b])
                tok = allowed[int(torch.argmax(last[b, allowed]))]
                outs[b].append(tok)
                done[b] = True
                continue
            tok = int(torch.argmax(last[b]))
            if tok == eos_id:
                done[b] = True
                continue
            outs[b].append(tok)
            dec[b, cur[b]] = tok
            if len(outs[b]) >= budgets[b]:
                done[b] = True
        if all(done):
            break
    return outs, scores
