"""Experiment configuration and the standard synthetic task suite.

The CLI and the acceptance tests both go through this module, so a run
launched from the command line and one launched from Python see the same
data, vocabulary and hyperparameters.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import vocab as V
from .decoding import DecodeConfig
from .errors import SchemaError
from .model import ModelConfig
from .prompts import GRAMMARS, ParaphrasePool, default_pool_dir, load_pools
from .tasks import INPUT_TOKENS, DatasetManifest, make_zero_shot_variant, synth_classification, synth_seqgen
from .train import TrainConfig

VOCAB_FILE = "vocab.txt"
ZERO_SHOT_DIR = "zero_shot"


@dataclass(frozen=True)
class DataConfig:
    """Sizes of the synthetic suite: three classification tasks, one tagging task.

    ``asr`` adds the optional auxiliary transcript task (off by default).
    """

    n_train: int = 3000
    n_dev: int = 80
    n_test: int = 200
    asr: bool = False

    def __post_init__(self):
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise SchemaError("split sizes must be positive")


def build_suite(data: DataConfig, seed: int = 0) -> tuple[list[DatasetManifest], DatasetManifest]:
    """Training manifests plus the relabeled zero-shot variant of the emotion task.

    Every task draws its labels apart from the others so a label token names
    exactly one class in the whole suite; the zero-shot labels avoid all of
    them.
    """
    sizes = {"n_train": data.n_train, "n_dev": data.n_dev, "n_test": data.n_test}
    scr = synth_classification(seed * 10 + 1, 8, task_type="scr", dataset="synth_scr", language="ar", **sizes)
    ic = synth_classification(
        seed * 10 + 2, 6, task_type="ic", dataset="synth_ic", exclude_labels=scr.descriptor.labels, **sizes
    )
    er = synth_classification(
        seed * 10 + 3, 4, task_type="er", dataset="synth_er",
        exclude_labels=scr.descriptor.labels + ic.descriptor.labels, **sizes,
    )
    ner = synth_seqgen(seed * 10 + 4, **sizes)
    train = [scr, ic, er, ner]
    if data.asr:
        train.append(synth_seqgen(seed * 10 + 6, mode="asr", **sizes))
    used = [lab for m in train for lab in m.descriptor.labels]
    zs = make_zero_shot_variant(er, seed * 10 + 5, exclude=used)
    return train, zs


def suite_vocabulary(manifests, pools: Mapping[str, ParaphrasePool]) -> V.Vocabulary:
    """Vocabulary over every manifest given, zero-shot variants included.

    The zero-shot labels get rows in the table but no training signal.
    """
    return V.build_vocabulary(
        [m.descriptor for m in manifests], pools=list(pools.values()), input_tokens=INPUT_TOKENS
    )


def manifest_dirname(manifest: DatasetManifest) -> str:
    d = manifest.descriptor
    return f"{d.task_type}__{d.dataset}"


def write_suite(data_dir, manifests, zero_shot: DatasetManifest, vocab: V.Vocabulary) -> Path:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    for m in manifests:
        m.save(data_dir / manifest_dirname(m))
    zero_shot.save(data_dir / ZERO_SHOT_DIR / manifest_dirname(zero_shot))
    vocab.save(data_dir / VOCAB_FILE)
    return data_dir


def _manifests_in(directory: Path) -> list[DatasetManifest]:
    dirs = sorted(p.parent for p in directory.glob("*/descriptor.json"))
    return [DatasetManifest.load(d) for d in dirs]


def read_suite(data_dir) -> tuple[list[DatasetManifest], list[DatasetManifest], V.Vocabulary]:
    """Training manifests, zero-shot manifests and vocabulary written by :func:`write_suite`."""
    data_dir = Path(data_dir)
    vocab_path = data_dir / VOCAB_FILE
    if not vocab_path.exists():
        raise FileNotFoundError(vocab_path)
    manifests = _manifests_in(data_dir)
    if not manifests:
        raise FileNotFoundError(f"no manifests under {data_dir}")
    zero_shot = _manifests_in(data_dir / ZERO_SHOT_DIR) if (data_dir / ZERO_SHOT_DIR).is_dir() else []
    return manifests, zero_shot, V.Vocabulary.load(vocab_path)


# --- experiment config ------------------------------------------------------


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    pools: str = ""
    out_dir: str = "runs"
    checkpoint: str = ""
    mode: str = "instruction_prev"
    seed: int = 0
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in GRAMMARS:
            raise SchemaError(f"unknown prompt mode {self.mode!r}")
        # Validate the sections eagerly so a bad file fails before any work.
        self.data_config()
        self.train_config()
        self.decode_config()
        self.model_config(vocab_size=1)
        unknown = set(self.eval) - {"n_orders", "max_phrases", "limit", "baseline_seeds", "split", "conditions"}
        if unknown:
            raise SchemaError(f"unknown eval settings: {sorted(unknown)}")

    def data_config(self) -> DataConfig:
        return _build(DataConfig, self.data, "data")

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, {"seed": self.seed, "mode": self.mode, **self.train}, "train")

    def decode_config(self) -> DecodeConfig:
        return _build(DecodeConfig, self.decode, "decode")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return _build(ModelConfig, {"seed": self.seed, **self.model, "vocab_size": vocab_size}, "model")

    def load_pools(self) -> dict[str, ParaphrasePool]:
        path = Path(self.pools) if self.pools else default_pool_dir()
        if not path.exists():
            raise FileNotFoundError(path)
        return load_pools(path)

    def to_json(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_json(), sort_keys=True), encoding="utf-8")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise SchemaError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise SchemaError(f"{path}: top level must be a mapping")
        return cls.from_mapping(data)


def _build(cls, values: Mapping, section: str):
    if not isinstance(values, Mapping):
        raise SchemaError(f"config section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(values) - known
    if unknown:
        raise SchemaError(f"unknown {section} settings: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise SchemaError(f"bad {section} settings: {exc}") from None


def merge(defaults: Mapping, overrides: Mapping) -> dict:
    """Recursive dict merge; ``None`` values in ``overrides`` are skipped."""
    out = dict(defaults)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path=None, overrides: Mapping | None = None) -> ExperimentConfig:
    """Defaults, then the config file, then command-line overrides."""
    base = ExperimentConfig().to_json()
    if path is not None:
        base = merge(base, ExperimentConfig.load(path).to_json())
    return ExperimentConfig.from_mapping(merge(base, overrides or {}))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
