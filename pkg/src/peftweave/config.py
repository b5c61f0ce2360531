"""Declarative experiment configuration with key-path validation errors."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml

from .data import LANGUAGE_INSTRUCTION, PROFILES, TASK_INSTRUCTIONS, TEMPLATES, VERBALIZERS, LanguageProfile
from .model import ModelConfig
from .peft import TASK_VARIANTS, Variant
from .tokenizer import Vocab
from .training import TrainingHyperparams

PHASES = ("language_adapter", "language_prompt", "task_adapter", "task_prompt")
BUILTIN_BACKBONE = "builtin"


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending key path."""


def digest(obj: Any, n: int = 16) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:n]


def _take(d: Mapping, key: str, path: str, kind, default=dataclasses.MISSING):
    if key not in d:
        if default is dataclasses.MISSING:
            raise ConfigError(f"{path}.{key}: required key missing".lstrip("."))
        return default
    value = d[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is float and isinstance(value, str):
        # YAML 1.1 reads exponent literals without a dot, such as 5e-5, as strings
        try:
            value = float(value)
        except ValueError:
            pass
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"{path}.{key}: expected {name}, got {type(value).__name__}".lstrip("."))
    return value


def _check_keys(d: Mapping, allowed, path: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(d).__name__}")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}: unknown key".lstrip("."))


@dataclass(frozen=True)
class BackboneSpec:
    """Where the frozen base model comes from: the shipped file, a path, or a pretraining recipe."""

    path: Optional[str] = BUILTIN_BACKBONE
    pretrain_steps: int = 6000
    learning_rate: float = 2e-3
    batch_size: int = 32
    corpus_size: int = 4000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping, path: str) -> "BackboneSpec":
        _check_keys(d, [f.name for f in dataclasses.fields(cls)], path)
        return cls(
            path=_take(d, "path", path, (str, type(None)), BUILTIN_BACKBONE),
            pretrain_steps=_take(d, "pretrain_steps", path, int, 6000),
            learning_rate=_take(d, "learning_rate", path, float, 2e-3),
            batch_size=_take(d, "batch_size", path, int, 32),
            corpus_size=_take(d, "corpus_size", path, int, 4000),
            seed=_take(d, "seed", path, int, 0),
        )


@dataclass(frozen=True)
class LanguageSpec:
    name: str
    profile: Optional[LanguageProfile] = None  # synthesized when set
    corpus: Optional[str] = None  # one sentence per line
    corpus_size: int = 2000
    instruction: str = LANGUAGE_INSTRUCTION

    @classmethod
    def from_dict(cls, d: Mapping, path: str) -> "LanguageSpec":
        _check_keys(d, ["name", "synth", "corpus", "corpus_size", "instruction"], path)
        name = _take(d, "name", path, str)
        corpus = _take(d, "corpus", path, (str, type(None)), None)
        synth = d.get("synth")
        profile = None
        if synth is not None:
            if isinstance(synth, str):
                if synth not in PROFILES:
                    raise ConfigError(f"{path}.synth: unknown profile {synth!r}")
                profile = dataclasses.replace(PROFILES[synth], name=name)
            elif isinstance(synth, Mapping):
                try:
                    profile = LanguageProfile.from_dict({"name": name, **synth})
                except TypeError as e:
                    raise ConfigError(f"{path}.synth: {e}") from None
            else:
                raise ConfigError(f"{path}.synth: expected a profile name or mapping")
        if (profile is None) == (corpus is None):
            raise ConfigError(f"{path}: exactly one of 'synth' or 'corpus' is required")
        instruction = _take(d, "instruction", path, str, LANGUAGE_INSTRUCTION)
        if "{Language}" not in instruction:
            raise ConfigError(f"{path}.instruction: template lacks the {{Language}} placeholder")
        return cls(name, profile, corpus, _take(d, "corpus_size", path, int, 2000), instruction)

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {"name": self.name, "corpus_size": self.corpus_size, "instruction": self.instruction}
        if self.profile is not None:
            p = self.profile.to_dict()
            p.pop("name")
            d["synth"] = p
        else:
            d["corpus"] = self.corpus
        return d


@dataclass(frozen=True)
class TaskSpec:
    name: str
    template: str
    instruction: str
    verbalizers: Optional[Tuple[str, ...]] = None
    synth: Optional[str] = None  # "copy" builds the toy last-word QA task
    data: Optional[Dict[str, Dict[str, str]]] = None  # language -> {train, test} JSONL paths
    train_size: int = 600
    test_size: int = 100

    @classmethod
    def from_dict(cls, d: Mapping, path: str) -> "TaskSpec":
        _check_keys(d, ["name", "template", "instruction", "verbalizers", "synth", "data", "train_size",
                        "test_size"], path)
        name = _take(d, "name", path, str)
        template = _take(d, "template", path, str, name)
        if template not in TEMPLATES:
            raise ConfigError(f"{path}.template: unknown template id {template!r}")
        instruction = _take(d, "instruction", path, str, TASK_INSTRUCTIONS[template])
        if "{Language}" not in instruction:
            raise ConfigError(f"{path}.instruction: template lacks the {{Language}} placeholder")
        verbalizers = _take(d, "verbalizers", path, (list, type(None)), None)
        if verbalizers is not None:
            if tuple(verbalizers) != VERBALIZERS.get(template, ()):
                raise ConfigError(f"{path}.verbalizers: must equal {list(VERBALIZERS.get(template, ()))}")
            verbalizers = tuple(verbalizers)
        synth = _take(d, "synth", path, (str, type(None)), None)
        if synth not in (None, "copy"):
            raise ConfigError(f"{path}.synth: unknown synthetic task {synth!r}")
        if synth == "copy" and template != "qa":
            raise ConfigError(f"{path}.synth: the copy task uses the qa template")
        data = d.get("data")
        if data is not None:
            if not isinstance(data, Mapping):
                raise ConfigError(f"{path}.data: expected a mapping of language to split paths")
            for lang, splits in data.items():
                _check_keys(splits, ["train", "test"], f"{path}.data.{lang}")
                for split in ("train", "test"):
                    _take(splits, split, f"{path}.data.{lang}", str)
            data = {k: dict(v) for k, v in data.items()}
        if (synth is None) == (data is None):
            raise ConfigError(f"{path}: exactly one of 'synth' or 'data' is required")
        return cls(name, template, instruction, verbalizers, synth, data,
                   _take(d, "train_size", path, int, 600), _take(d, "test_size", path, int, 100))

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {"name": self.name, "template": self.template, "instruction": self.instruction,
                             "train_size": self.train_size, "test_size": self.test_size}
        if self.verbalizers is not None:
            d["verbalizers"] = list(self.verbalizers)
        if self.synth is not None:
            d["synth"] = self.synth
        else:
            d["data"] = self.data
        return d


def _model_from_dict(d: Mapping, path: str) -> ModelConfig:
    names = [f.name for f in dataclasses.fields(ModelConfig) if f.name != "vocab"] + ["sentinel_count"]
    _check_keys(d, names, path)
    kwargs = {k: _take(d, k, path, int) for k in d if k != "sentinel_count"}
    vocab = Vocab(sentinel_count=_take(d, "sentinel_count", path, int, Vocab().sentinel_count))
    try:
        return ModelConfig(vocab=vocab, **kwargs)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


HYPERPARAM_TYPES = {"learning_rate": float, "weight_decay": float, "batch_size": int, "total_steps": int,
                    "optimizer": str, "eval_every_steps": int, "max_input_length": int, "seed": int}


def _hyperparams_from_dict(d: Mapping, path: str) -> Dict[str, TrainingHyperparams]:
    _check_keys(d, PHASES, path)
    hp_fields = [f.name for f in dataclasses.fields(TrainingHyperparams)]
    out = {}
    for phase in PHASES:
        overrides = d.get(phase, {}) or {}
        _check_keys(overrides, hp_fields, f"{path}.{phase}")
        overrides = {k: _take(overrides, k, f"{path}.{phase}", HYPERPARAM_TYPES[k]) for k in overrides}
        kind = phase.split("_")[1]
        try:
            out[phase] = TrainingHyperparams.for_artifact(kind, **overrides)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}.{phase}: {e}") from None
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    languages: Tuple[LanguageSpec, ...]
    tasks: Tuple[TaskSpec, ...]
    configurations: Tuple[Variant, ...] = TASK_VARIANTS
    model: ModelConfig = field(default_factory=ModelConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    hyperparams: Dict[str, TrainingHyperparams] = field(default_factory=lambda: _hyperparams_from_dict({}, ""))
    seeds: Tuple[int, ...] = (0,)
    output_dir: str = "runs"
    prompt_tokens: int = 50
    bottleneck: Optional[int] = None
    val_fraction: float = 0.15
    base_dir: str = field(default=".", compare=False)

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str = ".") -> "ExperimentConfig":
        _check_keys(d, ["languages", "tasks", "configurations", "model", "backbone", "hyperparams", "seeds",
                        "output_dir", "prompt_tokens", "bottleneck", "val_fraction"], "")
        langs = _take(d, "languages", "", list)
        if not langs:
            raise ConfigError("languages: at least one language is required")
        languages = tuple(LanguageSpec.from_dict(x, f"languages[{i}]") for i, x in enumerate(langs))
        names = [l.name for l in languages]
        if len(set(names)) != len(names):
            raise ConfigError("languages: duplicate language names")
        tasks_raw = _take(d, "tasks", "", list)
        if not tasks_raw:
            raise ConfigError("tasks: at least one task is required")
        tasks = tuple(TaskSpec.from_dict(x, f"tasks[{i}]") for i, x in enumerate(tasks_raw))
        for i, t in enumerate(tasks):
            if t.data is not None:
                missing = sorted(set(names) - set(t.data))
                if missing:
                    raise ConfigError(f"tasks[{i}].data.{missing[0]}: no dataset for this language")
        configurations = []
        for i, name in enumerate(_take(d, "configurations", "", list, [v.value for v in TASK_VARIANTS])):
            try:
                v = Variant.parse(name)
            except ValueError:
                raise ConfigError(f"configurations[{i}]: unknown variant {name!r}") from None
            if v not in TASK_VARIANTS:
                raise ConfigError(f"configurations[{i}]: {name!r} is not a task configuration")
            configurations.append(v)
        seeds = _take(d, "seeds", "", list, [0])
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds: expected a non-empty list of integers")
        val_fraction = _take(d, "val_fraction", "", float, 0.15)
        if not 0 < val_fraction < 1:
            raise ConfigError("val_fraction: must lie in (0, 1)")
        cfg = cls(
            languages=languages,
            tasks=tasks,
            configurations=tuple(configurations),
            model=_model_from_dict(d.get("model", {}) or {}, "model"),
            backbone=BackboneSpec.from_dict(d.get("backbone", {}) or {}, "backbone"),
            hyperparams=_hyperparams_from_dict(d.get("hyperparams", {}) or {}, "hyperparams"),
            seeds=tuple(seeds),
            output_dir=_take(d, "output_dir", "", str, "runs"),
            prompt_tokens=_take(d, "prompt_tokens", "", int, 50),
            bottleneck=_take(d, "bottleneck", "", (int, type(None)), None),
            val_fraction=val_fraction,
            base_dir=base_dir,
        )
        if cfg.prompt_tokens < 1:
            raise ConfigError("prompt_tokens: must be positive")
        return cfg

    def to_dict(self) -> dict:
        return {
            "languages": [l.to_dict() for l in self.languages],
            "tasks": [t.to_dict() for t in self.tasks],
            "configurations": [v.value for v in self.configurations],
            "model": self.model.to_dict(),
            "backbone": dataclasses.asdict(self.backbone),
            "hyperparams": {k: v.to_dict() for k, v in self.hyperparams.items()},
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "prompt_tokens": self.prompt_tokens,
            "bottleneck": self.bottleneck,
            "val_fraction": self.val_fraction,
        }

    def language(self, name: str) -> LanguageSpec:
        for l in self.languages:
            if l.name == name:
                return l
        raise KeyError(f"unknown language {name!r}")

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}")

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def check_paths(self):
        """Every referenced file must exist at launch."""
        for i, l in enumerate(self.languages):
            if l.corpus is not None and not self.resolve(l.corpus).is_file():
                raise ConfigError(f"languages[{i}].corpus: file not found: {l.corpus}")
        for i, t in enumerate(self.tasks):
            for lang, splits in (t.data or {}).items():
                for split, p in splits.items():
                    if not self.resolve(p).is_file():
                        raise ConfigError(f"tasks[{i}].data.{lang}.{split}: file not found: {p}")
        bp = self.backbone.path
        if bp not in (None, BUILTIN_BACKBONE) and not self.resolve(bp).is_file():
            raise ConfigError(f"backbone.path: file not found: {bp}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except FileNotFoundError:
        raise ConfigError(f"<file>: config not found: {path}") from None
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"<file>: not valid YAML/JSON: {e}") from None
    if raw is None:
        raw = {}
    return ExperimentConfig.from_dict(raw, base_dir=str(path.parent))


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    """Serialize as JSON for ``.json`` paths, YAML otherwise."""
    d = cfg.to_dict()
    text = json.dumps(d, indent=2) if path is not None and str(path).endswith(".json") else \
        yaml.safe_dump(d, sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
