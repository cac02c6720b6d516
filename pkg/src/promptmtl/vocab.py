"""Closed token registry shared by prompts, data assembly and the model.

Ids are assigned class by class (controls, languages, task types, datasets,
option numbers, labels, input units, instruction/output text), each class
sorted lexicographically, so two builds from the same task list agree.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DuplicateSpecifier, EmptyLabelSet, SchemaError, UnknownToken

SOT = "SOT"
SOP = "SOP"
NT = "NT"
TRANS = "TRANS"
EOS = "EOS"
PAD = "PAD"
UNK = "UNK"

DEFAULT_CONTROLS = (SOT, SOP, NT, TRANS, EOS, PAD, UNK)

CLASS_ORDER = ("control", "lang", "task", "dataset", "option", "label", "input", "text")

# words emitted by the option renderer; always part of the text class
OPTION_WORDS = ("The", "options", "are", ".", ",", '"')

_WORD_RE = re.compile(r'[^\s".,]+|[".,]')


def tag(name: str) -> str:
    """Wrap a specifier name as a special token, e.g. ``en`` -> ``⟨en⟩``."""
    if name.startswith("⟨") and name.endswith("⟩"):
        return name
    return f"⟨{name}⟩"


def untag(token: str) -> str:
    if token.startswith("⟨") and token.endswith("⟩"):
        return token[1:-1]
    return token


def tokenize_text(text: str) -> list[str]:
    """Split free text into words and the punctuation marks ``. , "``."""
    return _WORD_RE.findall(text)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    classes: dict[str, tuple[str, ...]]
    ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = {}
        for i, tok in enumerate(self.tokens):
            if tok in ids:
                raise SchemaError(f"token {tok!r} listed twice")
            ids[tok] = i
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.ids

    @property
    def control(self):
        return self.classes["control"]

    @property
    def lang_tags(self):
        return self.classes["lang"]

    @property
    def task_tags(self):
        return self.classes["task"]

    @property
    def dataset_tags(self):
        return self.classes["dataset"]

    @property
    def option_tokens(self):
        return self.classes["option"]

    @property
    def label_tokens(self):
        return self.classes["label"]

    @property
    def input_tokens(self):
        return self.classes["input"]

    @property
    def text_tokens(self):
        return self.classes["text"]

    def id(self, token: str) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise UnknownToken(f"unknown token {token!r}") from None

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def encode_text(self, tokens: Iterable[str]) -> list[int]:
        """Like :meth:`encode` but maps unknown words to UNK."""
        unk = self.ids[UNK]
        return [self.ids.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.tokens):
                raise UnknownToken(f"unknown id {i}")
            out.append(self.tokens[i])
        return out

    def class_of(self, token: str) -> str:
        for name in CLASS_ORDER:
            if token in self.classes[name]:
                return name
        raise UnknownToken(f"unknown token {token!r}")

    def require(self, token: str, cls: str) -> int:
        """Id of ``token``, which must belong to class ``cls``."""
        if token not in self.classes[cls]:
            raise UnknownToken(f"{token!r} is not a registered {cls} token")
        return self.ids[token]

    @property
    def hash(self) -> str:
        payload = json.dumps(
            {"tokens": list(self.tokens), "classes": {k: list(v) for k, v in self.classes.items()}},
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        """Write ``path`` (one token per line) and ``path.classes.json``."""
        path = Path(path)
        for tok in self.tokens:
            if "\n" in tok:
                raise SchemaError(f"token {tok!r} contains a newline")
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        sidecar = {k: list(v) for k, v in self.classes.items()}
        _sidecar(path).write_text(json.dumps(sidecar, indent=1, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        path = Path(path)
        tokens = path.read_text(encoding="utf-8").split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        classes = json.loads(_sidecar(path).read_text(encoding="utf-8"))
        if set(classes) != set(CLASS_ORDER):
            raise SchemaError(f"vocabulary sidecar must list classes {CLASS_ORDER}")
        flat = [t for name in CLASS_ORDER for t in classes[name]]
        if flat != tokens:
            raise SchemaError("vocabulary sidecar does not match the token file")
        return cls(tuple(tokens), {k: tuple(classes[k]) for k in CLASS_ORDER})


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".classes.json")


def build_vocabulary(
    tasks: Sequence,
    base_controls: Sequence[str] = DEFAULT_CONTROLS,
    *,
    pools: Sequence = (),
    input_tokens: Iterable[str] = (),
    text_tokens: Iterable[str] = (),
) -> Vocabulary:
    """Build the registry for ``tasks`` (objects shaped like TaskDescriptor).

    Instruction words are taken from ``pools`` (objects with ``seen`` and
    ``unseen`` description lists); seqgen output tokens come from each task's
    ``output_tokens``.
    """
    lang, task_types, datasets, labels = set(), set(), set(), set()
    seen_tasks = set()
    n_options = 0
    for t in tasks:
        key = (t.task_type, t.dataset)
        if key in seen_tasks:
            raise DuplicateSpecifier(f"task {t.task_type}/{t.dataset} registered twice")
        seen_tasks.add(key)
        if t.kind == "classification":
            if not t.labels:
                raise EmptyLabelSet(f"task {t.task_type}/{t.dataset} has no labels")
            labels.update(t.labels)
            n_options = max(n_options, len(t.labels))
        lang.add(tag(t.language))
        task_types.add(tag(t.task_type))
        datasets.add(tag(t.dataset))

    controls = set(base_controls)
    for a, b, what in (
        (task_types, datasets, "task type and dataset"),
        (task_types, lang, "task type and language"),
        (datasets, lang, "dataset and language"),
    ):
        clash = a & b
        if clash:
            raise DuplicateSpecifier(f"{sorted(clash)} used as both {what} specifier")

    options = {str(i) for i in range(n_options)}
    inputs = set(input_tokens)
    taken = controls | lang | task_types | datasets | options
    for name, group in (("label", labels), ("input", inputs)):
        clash = group & taken
        if clash:
            raise DuplicateSpecifier(f"{name} tokens {sorted(clash)} collide with reserved tokens")
    if labels & inputs:
        raise DuplicateSpecifier(f"tokens {sorted(labels & inputs)} are both labels and input units")

    words = set(text_tokens)
    if tasks:
        words.update(OPTION_WORDS)
    for t in tasks:
        words.update(getattr(t, "output_tokens", ()))
    for pool in pools:
        for phrase in list(pool.seen) + list(pool.unseen):
            words.update(tokenize_text(phrase))
    words -= taken | labels | inputs

    classes = {
        "control": tuple(sorted(controls)),
        "lang": tuple(sorted(lang)),
        "task": tuple(sorted(task_types)),
        "dataset": tuple(sorted(datasets)),
        "option": tuple(sorted(options)),
        "label": tuple(sorted(labels)),
        "input": tuple(sorted(inputs)),
        "text": tuple(sorted(words)),
    }
    tokens = tuple(t for name in CLASS_ORDER for t in classes[name])
    return Vocabulary(tokens, classes)
