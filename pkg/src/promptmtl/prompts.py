"""Prompt compilation for the three decoder-prompt grammars.

``specifier``           SOT <lang> <task> <dataset> NT
``instruction_prev``    SOP <instruction> SOT <lang> TRANS NT
``instruction_inline``  SOT <lang> <instruction> NT

Classification instructions carry an enumerated option list and the model is
trained to emit the option number rather than the label itself.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import vocab as V
from .errors import (
    BadPermutation,
    EmptyInstruction,
    EmptyPool,
    EmptyString,
    MissingOptions,
    SchemaError,
)

GRAMMARS = ("specifier", "instruction_prev", "instruction_inline")
SOURCES = ("seen_pool", "unseen_pool", "user")


class _NotAnOption:
    """Marker for a decoded output that names no option."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NotAnOption"

    def __reduce__(self):
        return (_NotAnOption, ())


NotAnOption = _NotAnOption()


@dataclass(frozen=True)
class TaskSpecifier:
    task_type: str
    language: str
    dataset: str


@dataclass(frozen=True)
class Instruction:
    description: str
    options: tuple[tuple[int, str], ...] = ()
    permutation: tuple[int, ...] = ()
    source: str = "user"
    task_kind: str = "classification"

    def __post_init__(self):
        idx = [i for i, _ in self.options]
        if idx != list(range(len(idx))):
            raise BadPermutation("option indices must be 0..n-1 in order")
        labels = [lab for _, lab in self.options]
        if len(set(labels)) != len(labels):
            raise BadPermutation("each label may appear only once among the options")
        if self.options and sorted(self.permutation) != list(range(len(self.options))):
            raise BadPermutation("permutation does not match the option count")
        if self.source not in SOURCES:
            raise ValueError(f"unknown instruction source {self.source!r}")

    @property
    def option_map(self) -> dict[int, str]:
        return dict(self.options)

    @classmethod
    def for_labels(cls, description, labels, permutation=None, *, source="user", task_kind="classification"):
        """Build an instruction whose options are ``labels`` under ``permutation``."""
        labels = list(labels)
        if permutation is None:
            permutation = range(len(labels))
        _, option_map = render_options(labels, permutation)
        return cls(
            description=description,
            options=tuple(sorted(option_map.items())),
            permutation=tuple(int(p) for p in permutation),
            source=source,
            task_kind=task_kind,
        )


@dataclass(frozen=True)
class ParaphrasePool:
    task_type: str
    seen: tuple[str, ...]
    unseen: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise SchemaError(f"descriptions both seen and unseen: {sorted(overlap)}")

    @classmethod
    def from_json(cls, data: Mapping) -> "ParaphrasePool":
        try:
            task_type = data["task_type"]
            seen = tuple(data["seen"])
            unseen = tuple(data.get("unseen", ()))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad paraphrase pool: {exc}") from None
        if not all(isinstance(s, str) for s in seen + unseen):
            raise SchemaError("paraphrase pool entries must be strings")
        meta = {k: v for k, v in data.items() if k not in ("task_type", "seen", "unseen")}
        return cls(task_type, seen, unseen, meta)

    def to_json(self) -> dict:
        return {"task_type": self.task_type, "seen": list(self.seen), "unseen": list(self.unseen), **self.metadata}

    @classmethod
    def load(cls, path) -> "ParaphrasePool":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def load_pools(paths) -> dict[str, ParaphrasePool]:
    """Load pool files (or every ``*.json`` in a directory) keyed by task type."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    pools = {}
    for f in files:
        pool = ParaphrasePool.load(f)
        pools[pool.task_type] = pool
    return pools


def default_pool_dir() -> Path:
    return Path(__file__).parent / "pools"


@dataclass(frozen=True)
class CompiledPrompt:
    tokens: tuple[str, ...]
    option_map: dict[int, str]
    grammar: str
    text: str

    def __str__(self):
        return self.text


def build_specifier_prompt(spec: TaskSpecifier, vocab: V.Vocabulary) -> CompiledPrompt:
    lang, task, ds = V.tag(spec.language), V.tag(spec.task_type), V.tag(spec.dataset)
    vocab.require(lang, "lang")
    vocab.require(task, "task")
    vocab.require(ds, "dataset")
    tokens = (V.SOT, lang, task, ds, V.NT)
    return CompiledPrompt(tokens, {}, "specifier", " ".join(tokens))


def render_options(labels: Sequence[str], permutation: Sequence[int]) -> tuple[str, dict[int, str]]:
    """Render ``The options are 0."l0", 1."l1".`` for the permuted labels."""
    labels = list(labels)
    permutation = [int(p) for p in permutation]
    if len(permutation) != len(labels) or sorted(permutation) != list(range(len(labels))):
        raise BadPermutation(f"{permutation} is not a permutation of 0..{len(labels) - 1}")
    option_map = {i: labels[p] for i, p in enumerate(permutation)}
    body = ", ".join(f'{i}."{option_map[i]}"' for i in range(len(labels)))
    return f"The options are {body}.", option_map


def _option_tokens(option_map: Mapping[int, str]) -> list[str]:
    out = ["The", "options", "are"]
    n = len(option_map)
    for i in range(n):
        out += [str(i), ".", '"', option_map[i], '"', "," if i < n - 1 else "."]
    return out


def _with_period(description: str) -> str:
    description = description.strip()
    if description and description[-1] not in ".!?":
        description += "."
    return description


def _instruction_body(instr: Instruction) -> tuple[list[str], str]:
    description = _with_period(instr.description)
    if not description:
        raise EmptyInstruction("instruction description is empty")
    if instr.task_kind == "classification" and not instr.options:
        raise MissingOptions("classification instruction without options")
    tokens = V.tokenize_text(description)
    text = description
    if instr.options:
        opt_text, _ = render_options(
            [lab for _, lab in sorted(instr.options)], range(len(instr.options))
        )
        tokens += _option_tokens(instr.option_map)
        text += " " + opt_text
    return tokens, text


def build_instruction_prompt(instr: Instruction, language: str, vocab: V.Vocabulary) -> CompiledPrompt:
    lang = V.tag(language)
    vocab.require(lang, "lang")
    body, text = _instruction_body(instr)
    tokens = (V.SOP, *body, V.SOT, lang, V.TRANS, V.NT)
    return CompiledPrompt(tokens, instr.option_map, "instruction_prev", f"SOP {text} SOT {lang} TRANS NT")


def build_inline_instruction_prompt(instr: Instruction, language: str, vocab: V.Vocabulary) -> CompiledPrompt:
    lang = V.tag(language)
    vocab.require(lang, "lang")
    body, text = _instruction_body(instr)
    tokens = (V.SOT, lang, *body, V.NT)
    return CompiledPrompt(tokens, instr.option_map, "instruction_inline", f"SOT {lang} {text} NT")


def compile_prompt(grammar: str, vocab: V.Vocabulary, *, spec: TaskSpecifier, instr: Instruction | None = None):
    if grammar == "specifier":
        return build_specifier_prompt(spec, vocab)
    if instr is None:
        raise MissingOptions(f"grammar {grammar} needs an instruction")
    if grammar == "instruction_prev":
        return build_instruction_prompt(instr, spec.language, vocab)
    if grammar == "instruction_inline":
        return build_inline_instruction_prompt(instr, spec.language, vocab)
    raise ValueError(f"unknown prompt grammar {grammar!r}")


def sample_instruction(task, pool: ParaphrasePool, rng: np.random.Generator, orders=None) -> Instruction:
    """Draw a seen description and an option order for ``task``.

    With ``orders`` given, the permutation is one of those precomputed orders;
    otherwise it is uniform over all permutations.  ``orders`` may also be a
    callable taking the index of the drawn description, which lets each
    description keep its own set of orders.
    """
    if not pool.seen:
        raise EmptyPool(f"paraphrase pool for {pool.task_type} has no seen descriptions")
    d = int(rng.integers(len(pool.seen)))
    description = pool.seen[d]
    labels = list(task.labels)
    if task.kind != "classification":
        return Instruction(description, source="seen_pool", task_kind=task.kind)
    if callable(orders):
        orders = orders(d)
    if orders is not None:
        perm = orders[int(rng.integers(len(orders)))]
    else:
        perm = rng.permutation(len(labels))
    return Instruction.for_labels(description, labels, perm, source="seen_pool", task_kind=task.kind)


def precomputed_orders(n_labels: int, k: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    return [tuple(int(x) for x in rng.permutation(n_labels)) for _ in range(k)]


# --- novelty audit -------------------------------------------------------


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance between two sequences (strings or word lists)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _units(s: str, unit: str):
    if unit == "char":
        return s
    if unit == "word":
        return s.split()
    raise ValueError(f"unit must be 'char' or 'word', not {unit!r}")


def normalized_edit_distance(candidate: str, references: Sequence[str], *, unit: str = "char", reduce: str = "mean") -> float:
    """Edit distance from ``candidate`` to ``references`` over the candidate's length.

    ``reduce`` picks the mean (default) or the minimum over references.
    """
    cand = _units(candidate, unit)
    if len(cand) == 0:
        raise EmptyString("candidate is empty")
    if not references:
        raise EmptyPool("no reference prompts to compare against")
    dists = [levenshtein(cand, _units(r, unit)) for r in references]
    if reduce == "mean":
        return sum(dists) / len(dists) / len(cand)
    if reduce == "min":
        return min(dists) / len(cand)
    raise ValueError(f"reduce must be 'mean' or 'min', not {reduce!r}")


def is_novel(candidate: str, seen: Sequence[str], threshold: float = 0.9, *, unit: str = "word", reduce: str = "mean") -> bool:
    """True when the candidate is farther than ``threshold`` from the training prompts.

    The gate defaults to word-level distance; ``seen`` should hold every
    training description, not only those of the candidate's task type.
    """
    return normalized_edit_distance(candidate, seen, unit=unit, reduce=reduce) > threshold


def training_references(pools: Mapping[str, ParaphrasePool] | Sequence[ParaphrasePool]) -> list[str]:
    """All seen descriptions across ``pools``: the reference set for the novelty gate."""
    items = pools.values() if isinstance(pools, Mapping) else pools
    return [s for p in items for s in p.seen]


def audit_pool(pool: ParaphrasePool, references: Sequence[str] | None = None, threshold: float = 0.9, *, unit: str = "word", reduce: str = "mean"):
    """Per-unseen-phrase distances and pass/fail rows."""
    refs = list(pool.seen) if references is None else list(references)
    rows = []
    for phrase in pool.unseen:
        d = normalized_edit_distance(phrase, refs, unit=unit, reduce=reduce)
        rows.append({"phrase": phrase, "distance": d, "passed": d > threshold})
    return rows


_INT_RE = re.compile(r"\d+")


def decode_option(predicted_tokens: Sequence[str], option_map: Mapping[int, str]):
    """Map an emitted option number back to its label, or NotAnOption."""
    text = "".join(predicted_tokens).strip()
    if not _INT_RE.fullmatch(text):
        return NotAnOption
    i = int(text)
    if i not in option_map:
        return NotAnOption
    return option_map[i]
