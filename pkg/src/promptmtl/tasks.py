"""Task registry, synthetic corpora and training-sequence assembly.

Synthetic "speech" is a sequence of discrete acoustic units.  Every label and
entity phrase is a written word whose pronunciation maps each letter to a
unit; the 26 letters pair up into 13 homophone pairs (a/b, c/d, ...), so two
different spellings can sound the same.  A classification utterance carries
the pronunciation of its label somewhere inside silence and random units.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import vocab as V
from .errors import EmptyLabelSet, LabelNotInOptions, SchemaError, SignatureCollision
from .prompts import Instruction, TaskSpecifier, compile_prompt

KINDS = ("classification", "seqgen")
METRICS = ("accuracy", "f1", "eer", "slu_f1", "exact_match")
SPLITS = ("train", "dev", "test")

LETTERS = string.ascii_lowercase
N_UNITS = 13
UNITS = tuple(f"u{i:02d}" for i in range(N_UNITS))
SILENCE = "sil"
TAG_MARKERS = tuple(f"k{i:02d}" for i in range(16))
INTENT_MARKERS = tuple(f"i{i:02d}" for i in range(8))
NOISE = tuple(f"n{i:02d}" for i in range(8))
INPUT_TOKENS = UNITS + (SILENCE,) + NOISE + TAG_MARKERS + INTENT_MARKERS

FILL = "FILL"
SEP = "SEP"
CLOSE = "]"


def unit_of(ch: str) -> str:
    i = LETTERS.find(ch.lower())
    if i < 0:
        return UNITS[ord(ch) % N_UNITS]
    return UNITS[i // 2]


def pronounce(word: str) -> tuple[str, ...]:
    return tuple(unit_of(c) for c in word if not c.isspace())


def homophone(ch: str) -> str:
    i = LETTERS.find(ch)
    if i < 0:
        return ch
    return LETTERS[i ^ 1]


@dataclass(frozen=True)
class TaskDescriptor:
    task_type: str
    dataset: str
    language: str
    kind: str
    labels: tuple[str, ...] = ()
    metric: str = "accuracy"
    f1_average: str = "macro"
    positive_label: str | None = None
    output_tokens: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "output_tokens", tuple(self.output_tokens))
        if self.kind not in KINDS:
            raise SchemaError(f"unknown task kind {self.kind!r}")
        if self.metric not in METRICS:
            raise SchemaError(f"unknown metric {self.metric!r}")
        if self.kind == "classification":
            if not self.labels:
                raise EmptyLabelSet(f"classification task {self.task_id} has no labels")
            if len(set(self.labels)) != len(self.labels):
                raise SchemaError(f"duplicate labels in {self.task_id}")
            if self.metric in ("slu_f1", "exact_match"):
                raise SchemaError(f"{self.metric} needs a seqgen task")
            if self.metric == "eer" and len(self.labels) != 2:
                raise SchemaError("eer is only defined for binary classification")
            if self.f1_average not in ("macro", "binary"):
                raise SchemaError(f"unknown F1 averaging {self.f1_average!r}")
            if self.f1_average == "binary" and len(self.labels) != 2:
                raise SchemaError("binary F1 needs exactly two labels")
            if self.positive_label is not None and self.positive_label not in self.labels:
                raise SchemaError(f"positive label {self.positive_label!r} is not a label")
        else:
            if self.labels:
                raise SchemaError("seqgen tasks carry no label set")
            if self.metric not in ("slu_f1", "exact_match"):
                raise SchemaError(f"{self.metric} is a classification metric")

    @property
    def task_id(self) -> str:
        return f"{self.task_type}/{self.dataset}"

    @property
    def specifier(self) -> TaskSpecifier:
        return TaskSpecifier(self.task_type, self.language, self.dataset)

    @property
    def positive(self) -> str:
        """Label treated as positive by EER and binary F1 (last label by default)."""
        return self.positive_label if self.positive_label is not None else self.labels[-1]

    def to_json(self) -> dict:
        d = {
            "task_type": self.task_type,
            "dataset": self.dataset,
            "language": self.language,
            "kind": self.kind,
            "labels": list(self.labels),
            "metric": self.metric,
            "f1_average": self.f1_average,
            "positive_label": self.positive_label,
            "output_tokens": list(self.output_tokens),
        }
        return d

    @classmethod
    def from_json(cls, d) -> "TaskDescriptor":
        try:
            return cls(**{k: d[k] for k in ("task_type", "dataset", "language", "kind")},
                       **{k: d[k] for k in ("labels", "metric", "f1_average", "positive_label", "output_tokens") if k in d})
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad task descriptor: {exc}") from None


@dataclass(frozen=True)
class Example:
    input: tuple[str, ...]
    target: str | tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "input", tuple(self.input))
        if not isinstance(self.target, str):
            object.__setattr__(self, "target", tuple(self.target))
        if not self.input:
            raise SchemaError("example input is empty")


@dataclass(frozen=True)
class DatasetManifest:
    descriptor: TaskDescriptor
    splits: dict[str, tuple[Example, ...]]
    upsample_factor: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.upsample_factor < 1:
            raise SchemaError("upsample_factor must be >= 1")
        d = self.descriptor
        if d.kind == "classification":
            labels = set(d.labels)
            for split, exs in self.splits.items():
                for ex in exs:
                    if ex.target not in labels:
                        raise SchemaError(f"{d.task_id}/{split}: target {ex.target!r} is not a label")

    @property
    def train(self):
        return self.splits.get("train", ())

    @property
    def dev(self):
        return self.splits.get("dev", ())

    @property
    def test(self):
        return self.splits.get("test", ())

    def save(self, directory) -> Path:
        """Write ``descriptor.json`` plus one ``<split>.jsonl`` per split."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        header = {
            "descriptor": self.descriptor.to_json(),
            "upsample_factor": self.upsample_factor,
            "splits": list(self.splits),
            "meta": self.meta,
        }
        (directory / "descriptor.json").write_text(json.dumps(header, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
        for split, exs in self.splits.items():
            with open(directory / f"{split}.jsonl", "w", encoding="utf-8") as fh:
                for ex in exs:
                    target = ex.target if isinstance(ex.target, str) else list(ex.target)
                    fh.write(json.dumps({"input": list(ex.input), "target": target}, ensure_ascii=False) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "DatasetManifest":
        directory = Path(directory)
        header_path = directory / "descriptor.json"
        if not header_path.exists():
            raise FileNotFoundError(header_path)
        try:
            header = json.loads(header_path.read_text(encoding="utf-8"))
            descriptor = TaskDescriptor.from_json(header["descriptor"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise SchemaError(f"{header_path}: {exc}") from None
        splits = {}
        for split in header.get("splits", SPLITS):
            path = directory / f"{split}.jsonl"
            if not path.exists():
                continue
            exs = []
            for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    target = rec["target"]
                    if not isinstance(rec["input"], list) or not isinstance(target, (str, list)):
                        raise TypeError("input must be a list, target a string or list")
                    exs.append(Example(tuple(rec["input"]), target))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise SchemaError(f"{path}:{lineno}: {exc}") from None
            splits[split] = tuple(exs)
        return cls(descriptor, splits, int(header.get("upsample_factor", 1)), header.get("meta", {}))


@dataclass(frozen=True)
class TrainingSequence:
    encoder_input: tuple[int, ...]
    decoder_tokens: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    task_id: str = ""

    def __post_init__(self):
        if len(self.decoder_tokens) != len(self.loss_mask):
            raise SchemaError("loss mask and decoder tokens differ in length")


# --- generators ----------------------------------------------------------


def _random_word(rng, n_units, length):
    letters = LETTERS[: 2 * n_units]
    return "".join(letters[int(i)] for i in rng.integers(len(letters), size=length))


def _contains(seq, sub):
    n = len(sub)
    return any(tuple(seq[i : i + n]) == tuple(sub) for i in range(len(seq) - n + 1))


def _make_names(rng, n, n_units, length, exclude, key):
    """Draw ``n`` words whose pronunciations are pairwise distinct under ``key``."""
    from math import comb

    space = comb(n_units + length - 1, length) if key is sorted else n_units**length
    if space < n:
        raise SignatureCollision(f"{n_units} units cannot host {n} distinct signatures of length {length}")
    names, keys = [], set()
    attempts = 0
    while len(names) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise SignatureCollision("could not draw collision-free signatures")
        w = _random_word(rng, n_units, length)
        k = tuple(key(pronounce(w)))
        if w in exclude or k in keys:
            continue
        names.append(w)
        keys.add(k)
    return names


def _fill(rng, length, noise_rate):
    """Silence with each frame replaced by a non-speech noise token at ``noise_rate``."""
    seq = [SILENCE] * length
    for i in range(length):
        if rng.random() < noise_rate:
            seq[i] = NOISE[int(rng.integers(len(NOISE)))]
    return seq


def _split_sizes(n_train, n_dev, n_test):
    return {"train": n_train, "dev": n_dev, "test": n_test}


def synth_classification(
    seed: int,
    n_classes: int,
    input_vocab_size: int = 8,
    signature_len: int = 3,
    utterance_len: int = 12,
    noise_rate: float = 0.3,
    n_train: int = 400,
    n_dev: int = 80,
    n_test: int = 200,
    *,
    task_type: str = "scr",
    dataset: str = "synth_scr",
    language: str = "en",
    labels: Sequence[str] | None = None,
    class_weights: Sequence[float] | None = None,
    metric: str = "accuracy",
    f1_average: str = "macro",
    positive_label: str | None = None,
    exclude_labels: Sequence[str] = (),
) -> DatasetManifest:
    """Synthetic classification corpus.

    Each class gets a label word; its pronunciation is the class signature,
    placed at a uniform position in an utterance of silence where each
    frame is replaced by a non-speech noise token with probability ``noise_rate``.
    Utterances in which another class's signature appears are rejected, so
    the label is always recoverable from the input.
    """
    if n_classes < 2:
        raise SchemaError("need at least two classes")
    if signature_len < 1 or utterance_len < signature_len:
        raise SchemaError("need 1 <= signature_len <= utterance_len")
    if not 1 <= input_vocab_size <= N_UNITS:
        raise SchemaError(f"input_vocab_size must be in 1..{N_UNITS}")
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = _make_names(rng, n_classes, input_vocab_size, signature_len, set(exclude_labels), sorted)
    else:
        labels = list(labels)
        if len(labels) != n_classes:
            raise SchemaError("len(labels) must equal n_classes")
    sigs = {lab: pronounce(lab) for lab in labels}
    if len({tuple(sorted(s)) for s in sigs.values()}) != len(labels):
        raise SignatureCollision("two labels share a signature")

    weights = np.full(n_classes, 1.0 / n_classes) if class_weights is None else np.asarray(class_weights, float)
    weights = weights / weights.sum()
    seen_inputs = set()
    splits = {}
    for split, n in _split_sizes(n_train, n_dev, n_test).items():
        counts = np.floor(weights * n).astype(int)
        counts[: n - counts.sum()] += 1
        targets = [labels[c] for c in range(n_classes) for _ in range(counts[c])]
        targets = [targets[i] for i in rng.permutation(len(targets))]
        exs = []
        for lab in targets:
            sig = sigs[lab]
            for _ in range(10000):
                seq = _fill(rng, utterance_len, noise_rate)
                pos = int(rng.integers(utterance_len - len(sig) + 1))
                seq[pos : pos + len(sig)] = sig
                key = tuple(seq)
                if key in seen_inputs:
                    continue
                if any(_contains(seq, s) for other, s in sigs.items() if other != lab):
                    continue
                break
            else:
                raise SignatureCollision("could not draw a unique utterance; enlarge utterance_len or noise_rate")
            seen_inputs.add(key)
            exs.append(Example(key, lab))
        splits[split] = tuple(exs)
    desc = TaskDescriptor(task_type, dataset, language, "classification", tuple(labels), metric, f1_average, positive_label)
    meta = {"generator": "synth_classification", "seed": seed, "signatures": {k: list(v) for k, v in sigs.items()}}
    return DatasetManifest(desc, splits, 1, meta)


def synth_seqgen(
    seed: int,
    n_tags: int = 4,
    phrase_vocab: int | Sequence[str] = 12,
    spans_per_utt: tuple[int, int] = (0, 2),
    utterance_len: int = 14,
    noise_rate: float = 0.05,
    n_train: int = 400,
    n_dev: int = 80,
    n_test: int = 200,
    *,
    mode: str = "ner",
    n_intents: int = 3,
    phrase_len: int = 4,
    input_vocab_size: int = 8,
    task_type: str | None = None,
    dataset: str | None = None,
    language: str = "en",
    tag_names: Sequence[str] | None = None,
    intent_names: Sequence[str] | None = None,
) -> DatasetManifest:
    """Synthetic sequence-generation corpus (entity pairs, semantic parses or transcripts).

    A span is a tag marker unit followed by the pronunciation of a phrase
    word.  ``mode="ner"`` targets ``tag FILL phrase SEP tag FILL phrase``;
    ``mode="parse"`` targets ``[in:intent [sl:tag phrase ] ]`` with the intent
    announced by a marker at the start of the utterance.  ``mode="asr"`` is the
    auxiliary transcript task: spans carry no tag marker and the target is the
    spoken words in order.
    """
    if n_tags < 1:
        raise SchemaError("need at least one tag")
    if n_tags > len(TAG_MARKERS) or n_intents > len(INTENT_MARKERS):
        raise SchemaError("too many tags or intents for the marker inventory")
    if mode not in ("ner", "parse", "asr"):
        raise SchemaError(f"unknown seqgen mode {mode!r}")
    task_type = task_type or {"ner": "ner", "parse": "sp", "asr": "asr"}[mode]
    dataset = dataset or f"synth_{task_type}"
    rng = np.random.default_rng(seed)
    if isinstance(phrase_vocab, int):
        phrases = _make_names(rng, phrase_vocab, input_vocab_size, phrase_len, set(), tuple)
    else:
        phrases = list(phrase_vocab)
        if len({pronounce(p) for p in phrases}) != len(phrases):
            raise SignatureCollision("two phrases share a pronunciation")
    tags = list(tag_names or [f"tag{i}" for i in range(n_tags)])[:n_tags]
    intents = list(intent_names or [f"intent{i}" for i in range(n_intents)])[:n_intents]
    lo, hi = spans_per_utt
    marker = 0 if mode == "asr" else 1
    max_span = max(len(pronounce(p)) for p in phrases) + marker
    head = 1 if mode == "parse" else 0
    if head + hi * max_span > utterance_len:
        raise SchemaError("utterance_len too short for the requested spans")

    if mode == "ner":
        outputs = [f"sl:{t}" for t in tags] + [FILL, SEP] + phrases
    elif mode == "asr":
        outputs = list(phrases)
    else:
        outputs = [f"[in:{i}" for i in intents] + [f"[sl:{t}" for t in tags] + [CLOSE] + phrases

    seen_inputs = set()
    splits = {}
    for split, n in _split_sizes(n_train, n_dev, n_test).items():
        exs = []
        while len(exs) < n:
            k = int(rng.integers(lo, hi + 1))
            chosen = [(int(rng.integers(n_tags)), phrases[int(rng.integers(len(phrases)))]) for _ in range(k)]
            intent = int(rng.integers(n_intents))
            spans = [[TAG_MARKERS[t]][:marker] + list(pronounce(p)) for t, p in chosen]
            free = utterance_len - head - sum(len(s) for s in spans)
            # distribute the free positions into k+1 gaps
            cuts = np.sort(rng.integers(free + 1, size=k)) if k else np.array([], int)
            gaps = np.diff(np.concatenate([[0], cuts, [free]])).astype(int)
            seq = [INTENT_MARKERS[intent]] if head else []
            for g, span in zip(gaps, spans + [[]]):
                seq += _fill(rng, int(g), noise_rate) + span
            key = tuple(seq)
            if key in seen_inputs:
                continue
            seen_inputs.add(key)
            if mode == "ner":
                target = []
                for j, (t, p) in enumerate(chosen):
                    if j:
                        target.append(SEP)
                    target += [f"sl:{tags[t]}", FILL, p]
            elif mode == "asr":
                target = [p for _, p in chosen]
            else:
                target = [f"[in:{intents[intent]}"]
                for t, p in chosen:
                    target += [f"[sl:{tags[t]}", p, CLOSE]
                target.append(CLOSE)
            exs.append(Example(key, tuple(target)))
        splits[split] = tuple(exs)
    metric = "slu_f1" if mode == "ner" else "exact_match"
    desc = TaskDescriptor(task_type, dataset, language, "seqgen", (), metric, output_tokens=tuple(outputs))
    meta = {"generator": "synth_seqgen", "seed": seed, "mode": mode, "phrases": phrases, "tags": tags}
    return DatasetManifest(desc, splits, 1, meta)


def make_zero_shot_variant(
    source: DatasetManifest,
    seed: int,
    *,
    dataset: str | None = None,
    language: str | None = None,
    exclude: Sequence[str] = (),
) -> DatasetManifest:
    """Relabel ``source`` with fresh label words and a fresh dataset tag.

    Each new label is a respelling of the old one using homophone letters, so
    the utterances are unchanged and still carry the right pronunciation, but
    the label token itself never occurs in training.  ``exclude`` lists
    tokens the new labels must avoid (e.g. every training label).
    """
    desc = source.descriptor
    if desc.kind != "classification":
        raise SchemaError("zero-shot relabelling applies to classification tasks")
    rng = np.random.default_rng(seed)
    banned = set(exclude) | set(desc.labels)
    mapping = {}
    for lab in desc.labels:
        flippable = [i for i, c in enumerate(lab) if c in LETTERS]
        if not flippable:
            raise SchemaError(f"label {lab!r} has no letters to respell")
        for _ in range(1000):
            mask = rng.random(len(flippable)) < 0.5
            if not mask.any():
                mask[int(rng.integers(len(flippable)))] = True
            chars = list(lab)
            for i, m in zip(flippable, mask):
                if m:
                    chars[i] = homophone(chars[i])
            new = "".join(chars)
            if new not in banned:
                break
        else:
            raise SignatureCollision(f"no fresh respelling available for {lab!r}")
        banned.add(new)
        mapping[lab] = new
    splits = {
        split: tuple(Example(ex.input, mapping[ex.target]) for ex in exs) for split, exs in source.splits.items()
    }
    new_desc = replace(
        desc,
        dataset=dataset or f"{desc.dataset}_zs",
        language=language or desc.language,
        labels=tuple(mapping[lab] for lab in desc.labels),
        positive_label=mapping[desc.positive_label] if desc.positive_label else None,
    )
    meta = dict(source.meta)
    meta.update({"zero_shot_of": desc.task_id, "renamed": mapping, "seed": seed})
    return DatasetManifest(new_desc, splits, 1, meta)


def upsample(manifest: DatasetManifest, factor: int) -> DatasetManifest:
    """Repeat the training split ``factor`` times; dev and test are untouched."""
    if factor < 1 or int(factor) != factor:
        raise SchemaError("upsampling factor must be a positive integer")
    splits = dict(manifest.splits)
    splits["train"] = tuple(manifest.train) * int(factor)
    return replace(manifest, splits=splits, upsample_factor=manifest.upsample_factor * int(factor))


def make_training_sequence(
    example: Example,
    task: TaskDescriptor,
    mode: str,
    instr: Instruction | None,
    vocab: V.Vocabulary,
) -> TrainingSequence:
    """Compile ``prompt ++ target ++ EOS`` with the loss restricted to target and EOS."""
    if mode != "specifier" and instr is None:
        raise SchemaError(f"mode {mode} needs an instruction")
    prompt = compile_prompt(mode, vocab, spec=task.specifier, instr=instr)
    if task.kind == "classification":
        if mode == "specifier":
            target = [example.target]
        else:
            idx = [i for i, lab in prompt.option_map.items() if lab == example.target]
            if not idx:
                raise LabelNotInOptions(f"label {example.target!r} not among the options")
            target = [str(idx[0])]
    else:
        target = list(example.target)
    prompt_ids = vocab.encode_text(prompt.tokens)
    target_ids = vocab.encode(target) + [vocab.id(V.EOS)]
    return TrainingSequence(
        tuple(vocab.encode(example.input)),
        tuple(prompt_ids + target_ids),
        (False,) * len(prompt_ids) + (True,) * len(target_ids),
        task.task_id,
    )
