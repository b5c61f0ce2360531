"""Training loops for the backbone, language representations and task representations.

Randomness is drawn from per-step streams keyed by ``(seed, purpose, step)``
rather than from a generator that advances across steps. A run resumed from
step ``k`` therefore sees exactly the batches and corruptions it would have
seen had it never stopped.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from . import checkpoint as ckpt
from .data import LANGUAGE_INSTRUCTION, TextToTextExample, encode_example, instruction_for
from .model import ModelConfig, TinyTransformer
from .objective import CorruptionSpec, span_corrupt
from .optim import Optimizer
from .peft import (DEFAULT_PROMPT_TOKENS, AdapterSet, LANGUAGE, PeftAssembly, SoftPrompt, TASK, Variant,
                   assemble, init_soft_prompt)
from .tokenizer import ByteTokenizer

log = logging.getLogger(__name__)

Pair = Tuple[List[int], List[int]]

# default values per artifact kind: (learning rate, weight decay, optimizer)
ARTIFACT_DEFAULTS = {
    "adapter": (5e-5, 0.0, "adamw"),
    "prompt": (5e-1, 1e-5, "adafactor"),
}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class FreezeViolation(AssertionError):
    pass


@dataclass
class TrainingHyperparams:
    learning_rate: float
    weight_decay: float = 0.0
    batch_size: int = 32
    total_steps: int = 2000
    optimizer: str = "adamw"
    eval_every_steps: int = 50
    max_input_length: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.eval_every_steps < 1 or self.total_steps < 0:
            raise ValueError("batch_size and eval_every_steps must be positive, total_steps non-negative")
        if self.total_steps and self.eval_every_steps > self.total_steps:
            raise ValueError("eval_every_steps must not exceed total_steps")
        if self.optimizer not in Optimizer.KINDS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def for_artifact(cls, kind: str, **overrides) -> "TrainingHyperparams":
        lr, wd, opt = ARTIFACT_DEFAULTS[kind]
        params = {"learning_rate": lr, "weight_decay": wd, "optimizer": opt}
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRun:
    variant: Variant
    hyperparams: TrainingHyperparams
    directory: Optional[Path]
    history: List[Tuple[int, float, float]] = field(default_factory=list)
    best_step: Optional[int] = None
    steps_executed: int = 0

    @property
    def best_val_loss(self) -> float:
        return min(v for _, _, v in self.history)

    @property
    def initial_val_loss(self) -> float:
        return self.history[0][2]

    @property
    def best_path(self) -> Optional[Path]:
        return None if self.directory is None else self.directory / "best.pwck"

    @property
    def last_path(self) -> Optional[Path]:
        return None if self.directory is None else self.directory / "last.pwck"

    def record(self, step: int, train_loss: float, val_loss: float) -> bool:
        """Append an evaluation; returns True when it is the new best (ties keep the earlier)."""
        self.history.append((step, train_loss, val_loss))
        if self.best_step is None or val_loss < self._val_at(self.best_step):
            self.best_step = step
            return True
        return False

    def _val_at(self, step: int) -> float:
        return next(v for s, _, v in self.history if s == step)

    def write_history(self, path):
        with open(path, "w") as fh:
            fh.write("step\ttrain_loss\tval_loss\n")
            for s, tr, va in self.history:
                fh.write(f"{s}\t{tr!r}\t{va!r}\n")

    def manifest(self) -> dict:
        return {
            "variant": self.variant.value,
            "hyperparams": self.hyperparams.to_dict(),
            "seed": self.hyperparams.seed,
            "best_step": self.best_step,
            "steps_executed": self.steps_executed,
        }


def read_history(path) -> List[Tuple[int, float, float]]:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            s, tr, va = line.rstrip("\n").split("\t")
            rows.append((int(s), float(tr), float(va)))
    return rows


def step_rng(seed: int, purpose: str, step: int) -> np.random.Generator:
    key = int.from_bytes(purpose.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([seed, key, step])


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for 1-based ``step``: epoch-wise shuffles, last partial batch dropped."""
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise ValueError(f"training set of {n} examples is smaller than batch_size={batch_size}")
    epoch, j = divmod(step - 1, per_epoch)
    perm = step_rng(seed, "order", epoch).permutation(n)
    return perm[j * batch_size:(j + 1) * batch_size]


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> Tensor:
    width = max(len(s) for s in seqs)
    return torch.tensor([list(s) + [pad_id] * (width - len(s)) for s in seqs], dtype=torch.long)


def collate(pairs: Sequence[Pair], pad_id: int) -> Tuple[Tensor, Tensor]:
    return pad_batch([p[0] for p in pairs], pad_id), pad_batch([p[1] for p in pairs], pad_id)


@torch.no_grad()
def dataset_loss(assembly: PeftAssembly, pairs: Sequence[Pair], batch_size: int = 64) -> float:
    """Token-weighted mean cross-entropy over every pair."""
    pad = assembly.backbone.pad_id
    total, count = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        src, tgt = collate(pairs[i:i + batch_size], pad)
        n = int((tgt != pad).sum())
        total += float(assembly(src, tgt, check_finite=False).loss) * n
        count += n
    return total / count


def encode_pairs(examples: Sequence[TextToTextExample], tokenizer: ByteTokenizer, limit: int) -> List[Pair]:
    return [(encode_example(tokenizer, e.input_text, limit), tokenizer.encode(e.target_text)) for e in examples]


def _snapshot(assembly: PeftAssembly) -> Dict[str, Tensor]:
    trainable = {id(p) for p in assembly.trainable_parameters()}
    return {n: p.detach().clone() for n, p in assembly.named_tensors() if id(p) not in trainable}


def verify_frozen(assembly: PeftAssembly, snapshot: Dict[str, Tensor]):
    current = dict(assembly.named_tensors())
    for name, before in snapshot.items():
        if not torch.equal(current[name], before):
            raise FreezeViolation(f"frozen tensor {name!r} changed during training")


def artifact_tensors(assembly: PeftAssembly, group: str) -> Dict[str, Tensor]:
    return {n: p for n, p in assembly.groups()[group]}


def _run_loop(assembly: PeftAssembly, hp: TrainingHyperparams, variant: Variant, n_train: int,
              make_batch: Callable[[int, np.ndarray], Tuple[Tensor, Tensor]], val_pairs: Sequence[Pair],
              out_dir: Optional[Path], resume: bool = True, verify_freeze: bool = True,
              on_step: Optional[Callable[[int, float], None]] = None) -> TrainRun:
    group = next(iter(assembly.freeze_mask))
    params = assembly.trainable_parameters()
    opt = Optimizer(params, hp.optimizer, hp.learning_rate, hp.weight_decay)
    run = TrainRun(variant, hp, out_dir)
    snapshot = _snapshot(assembly) if verify_freeze else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    start = 0
    if out_dir is not None and resume and run.last_path.exists():
        start = _load_resume_state(run, assembly, opt, group)
        log.info("resuming %s from step %d", variant.value, start)

    def save(path: Path, step: int):
        tensors = dict(artifact_tensors(assembly, group))
        tensors.update(opt.state_tensors())
        ckpt.save_tensors(path, tensors, {"step": step, "group": group, "variant": variant.value,
                                          "history": run.history, "best_step": run.best_step})

    if start == 0:
        run.record(0, float("nan"), dataset_loss(assembly, val_pairs))
        if out_dir is not None:
            save(run.best_path, 0)
            save(run.last_path, 0)

    window: List[float] = []
    for step in range(start + 1, hp.total_steps + 1):
        idx = batch_indices(n_train, hp.batch_size, hp.seed, step)
        src, tgt = make_batch(step, idx)
        try:
            loss = assembly(src, tgt).loss
        except FloatingPointError:
            raise TrainingDivergedError(step, float("nan")) from None
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        run.steps_executed += 1
        window.append(value)
        if on_step is not None:
            on_step(step, value)
        if step % hp.eval_every_steps == 0 or step == hp.total_steps:
            val = dataset_loss(assembly, val_pairs)
            is_best = run.record(step, float(np.mean(window)), val)
            window.clear()
            log.debug("%s step %d train %.4f val %.4f", variant.value, step, run.history[-1][1], val)
            if out_dir is not None:
                if is_best:
                    save(run.best_path, step)
                save(run.last_path, step)
    opt.zero_grad()

    if snapshot is not None:
        verify_frozen(assembly, snapshot)
    if out_dir is not None:
        run.write_history(out_dir / "history.tsv")
        with open(out_dir / "run.json", "w") as fh:
            json.dump(run.manifest(), fh, indent=2)
    return run


def _load_resume_state(run: TrainRun, assembly: PeftAssembly, opt: Optimizer, group: str) -> int:
    tensors, meta = ckpt.load_tensors(run.last_path)
    ckpt.restore(artifact_tensors(assembly, group), {k: v for k, v in tensors.items() if not k.startswith("optim.")})
    opt.load_state_tensors({k: v for k, v in tensors.items() if k.startswith("optim.")})
    run.history = [tuple(h) for h in meta["history"]]
    run.best_step = meta["best_step"]
    return int(meta["step"])


def load_best(run_dir, assembly: PeftAssembly) -> int:
    """Restore the trainable group from ``best.pwck``; returns its step."""
    tensors, meta = ckpt.load_tensors(Path(run_dir) / "best.pwck")
    group = meta["group"]
    ckpt.restore(artifact_tensors(assembly, group), {k: v for k, v in tensors.items() if not k.startswith("optim.")})
    return int(meta["step"])


# -- language representations -------------------------------------------------------

def new_language_artifact(backbone: TinyTransformer, kind: str, language: str,
                          prompt_tokens: int = DEFAULT_PROMPT_TOKENS, bottleneck: Optional[int] = None,
                          seed: int = 0):
    if kind == "adapter":
        return AdapterSet(backbone.cfg, LANGUAGE, bottleneck, seed=seed)
    if kind == "prompt":
        return init_soft_prompt(instruction_for(LANGUAGE_INSTRUCTION, language), prompt_tokens,
                                backbone.embed.weight, role=LANGUAGE)
    raise ValueError(f"unknown artifact kind {kind!r}")


def train_language_representation(backbone: TinyTransformer, artifact: AdapterSet | SoftPrompt,
                                   corpus: Sequence[str], hyperparams: TrainingHyperparams,
                                   out_dir=None, val_corpus: Optional[Sequence[str]] = None,
                                   spec: CorruptionSpec = CorruptionSpec(), resume: bool = True,
                                   verify_freeze: bool = True) -> TrainRun:
    """Span-corruption training of one language adapter set or soft prompt.

    Without ``val_corpus`` the last 15% of ``corpus`` is held out. Validation
    examples are corrupted once, from a fixed stream.
    """
    if not corpus:
        raise ValueError("empty corpus")
    variant = Variant.LANG_ADAPTER if isinstance(artifact, AdapterSet) else Variant.LANG_PROMPT
    assembly = assemble(backbone, variant, language=artifact)
    tok = ByteTokenizer(backbone.cfg.vocab)
    limit = hyperparams.max_input_length - assembly.prompt_length
    if val_corpus is None:
        n_val = max(1, int(math.floor(0.15 * len(corpus) + 0.5)))
        corpus, val_corpus = corpus[:-n_val], corpus[-n_val:]
    train_ids = [encode_example(tok, t, limit) for t in corpus]
    train_ids = [ids for ids in train_ids if len(ids) >= 3]
    val_rng = step_rng(hyperparams.seed, "valcorr", 0)
    val_pairs = [span_corrupt(encode_example(tok, t, limit), spec, val_rng, tok.vocab) for t in val_corpus
                 if len(encode_example(tok, t, limit)) >= 3]

    def make_batch(step, idx):
        rng = step_rng(hyperparams.seed, "corrupt", step)
        pairs = [span_corrupt(train_ids[i], spec, rng, tok.vocab) for i in idx]
        return collate(pairs, tok.pad_id)

    return _run_loop(assembly, hyperparams, variant, len(train_ids), make_batch, val_pairs,
                     Path(out_dir) if out_dir else None, resume, verify_freeze)


# -- task representations ----------------------------------------------------------------

def new_task_artifact(backbone: TinyTransformer, variant: Variant, instruction: str,
                      prompt_tokens: int = DEFAULT_PROMPT_TOKENS, bottleneck: Optional[int] = None, seed: int = 0):
    if variant.task_kind == "adapter":
        return AdapterSet(backbone.cfg, TASK, bottleneck, seed=seed)
    return init_soft_prompt(instruction, prompt_tokens, backbone.embed.weight, role=TASK)


def train_task_representation(backbone: TinyTransformer, variant: Variant, task_artifact,
                               train_set: Sequence[TextToTextExample], val_set: Sequence[TextToTextExample],
                               hyperparams: TrainingHyperparams, out_dir=None, language_artifact=None,
                               resume: bool = True, verify_freeze: bool = True) -> TrainRun:
    if not train_set:
        raise ValueError("empty training set")
    if not val_set:
        raise ValueError("empty validation set")
    assembly = assemble(backbone, variant, language=language_artifact, task=task_artifact)
    tok = ByteTokenizer(backbone.cfg.vocab)
    limit = hyperparams.max_input_length - assembly.prompt_length
    train_pairs = encode_pairs(train_set, tok, limit)
    val_pairs = encode_pairs(val_set, tok, limit)

    def make_batch(step, idx):
        return collate([train_pairs[i] for i in idx], tok.pad_id)

    return _run_loop(assembly, hyperparams, variant, len(train_pairs), make_batch, val_pairs,
                     Path(out_dir) if out_dir else None, resume, verify_freeze)


# -- backbone ------------------------------------------------------------------------------

PRETRAIN_MIXTURE = (
    ("denoise", 0.35),
    ("last", 0.25),
    ("first", 0.25),
    ("echo", 0.15),
)


def pretraining_pair(text: str, kind: str, tok: ByteTokenizer, rng: np.random.Generator,
                     spec: CorruptionSpec = CorruptionSpec()) -> Pair:
    """One example of the backbone's instruction mixture.

    Each task is announced by a literal instruction except ``echo``, which
    copies an un-instructed (possibly corrupted) input verbatim. Prompt-based
    artifacts later have to select a behaviour the input alone does not name.
    """
    ids = tok.encode(text)
    words = text.split()
    if kind == "denoise":
        src, tgt = span_corrupt(ids, spec, rng, tok.vocab)
        return tok.encode("denoise: ", add_eos=False) + src, tgt
    if kind == "last":
        return tok.encode("last word: " + text), tok.encode(words[-1])
    if kind == "first":
        return tok.encode("first word: " + text), tok.encode(words[0])
    if kind == "echo":
        if rng.random() < 0.5:
            ids, _ = span_corrupt(ids, spec, rng, tok.vocab)
        return ids, list(ids)
    raise ValueError(f"unknown pretraining task {kind!r}")


def pretrain_backbone(cfg: ModelConfig, corpora: Dict[str, Sequence[str]], steps: int = 6000,
                      learning_rate: float = 2e-3, batch_size: int = 32, seed: int = 0,
                      on_step: Optional[Callable[[int, float], None]] = None) -> TinyTransformer:
    """Full-parameter multitask training that stands in for a tuned base model.

    A randomly initialised frozen backbone has no skill for a prompt to
    select, so every downstream experiment starts from this model, frozen.
    The learning rate decays from ``learning_rate`` to a tenth of it on a
    cosine schedule.
    """
    model = TinyTransformer(cfg)
    tok = ByteTokenizer(cfg.vocab)
    texts = [t for lang in sorted(corpora) for t in corpora[lang] if len(t.split()) >= 2]
    if not texts:
        raise ValueError("pretraining needs at least one multi-word sentence")
    kinds = [k for k, _ in PRETRAIN_MIXTURE]
    weights = np.array([w for _, w in PRETRAIN_MIXTURE])
    opt = Optimizer(list(model.parameters()), "adamw", learning_rate, 0.0)
    for step in range(1, steps + 1):
        rng = step_rng(seed, "pretrain", step)
        pairs = []
        for i in rng.integers(0, len(texts), size=batch_size):
            kind = kinds[rng.choice(len(kinds), p=weights / weights.sum())]
            pairs.append(pretraining_pair(texts[i], kind, tok, rng))
        src, tgt = collate(pairs, tok.pad_id)
        loss = model(src, tgt, check_finite=False).loss
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        opt.lr = learning_rate * (0.1 + 0.45 * (1.0 + math.cos(math.pi * step / steps)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if on_step is not None:
            on_step(step, value)
    opt.zero_grad()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_backbone(model: TinyTransformer, path, metadata: Optional[dict] = None):
    meta = {"model_config": model.cfg.to_dict()}
    meta.update(metadata or {})
    ckpt.save_tensors(path, dict(model.state_dict()), meta)


def load_backbone(path) -> TinyTransformer:
    tensors, meta = ckpt.load_tensors(path)
    model = TinyTransformer(ModelConfig.from_dict(meta["model_config"]))
    ckpt.restore(dict(model.state_dict()), tensors)
    for p in model.parameters():
        p.requires_grad_(False)
    return model
