"""Adapters, soft prompts and the six language x task compositions."""

from __future__ import annotations

import enum
from typing import Dict, Iterator, List, Optional, Tuple

import torch
from torch import Tensor, nn

from .model import ModelConfig, PeftState, TinyTransformer, named_generator
from .tokenizer import ByteTokenizer

LANGUAGE = "language"
TASK = "task"
DEFAULT_PROMPT_TOKENS = 50


def default_bottleneck(d_model: int) -> int:
    return max(1, d_model // 4)


class Adapter(nn.Module):
    """Bottleneck residual block: ``h + up(relu(down(h)))``.

    The up-projection starts at zero so a fresh adapter is the identity.
    """

    def __init__(self, d_model: int, bottleneck: int, role: str = TASK):
        super().__init__()
        if not 1 <= bottleneck <= d_model:
            raise ValueError(f"bottleneck must be in [1, {d_model}], got {bottleneck}")
        self.d_model = d_model
        self.role = role
        self.down = nn.Linear(d_model, bottleneck)
        self.up = nn.Linear(bottleneck, d_model)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.d_model:
            raise ValueError(f"adapter expects width {self.d_model}, got {h.shape[-1]}")
        return h + self.up(torch.relu(self.down(h)))


def adapter_forward(h: Tensor, adapter: Adapter) -> Tensor:
    return adapter(h)


def stack_adapters(h: Tensor, language: Adapter, task: Adapter) -> Tensor:
    """Language adapter first; the task adapter consumes its output."""
    if language.d_model != task.d_model:
        raise ValueError("language and task adapters disagree on d_model")
    return task(language(h))


class AdapterSet(nn.Module):
    """One adapter per transformer layer, encoder layers first."""

    def __init__(self, cfg: ModelConfig, role: str, bottleneck: Optional[int] = None, seed: int = 0):
        super().__init__()
        self.role = role
        self.d_model = cfg.d_model
        self.bottleneck = bottleneck or default_bottleneck(cfg.d_model)
        self.layers = nn.ModuleList(Adapter(cfg.d_model, self.bottleneck, role) for _ in range(cfg.n_layers))
        with torch.no_grad():
            for i, a in enumerate(self.layers):
                gen = named_generator(seed, f"{role}_adapter.{i}.down.weight")
                a.down.weight.normal_(0.0, cfg.d_model ** -0.5, generator=gen)
                a.down.bias.zero_()

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> Adapter:
        return self.layers[i]

    def named_tensors(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for i, a in enumerate(self.layers):
            for n, p in a.named_parameters():
                yield f"{prefix}.{i}.{n}", p


class SoftPrompt(nn.Module):
    def __init__(self, embedding: Tensor, role: str = TASK, init_instruction: str = ""):
        super().__init__()
        if embedding.dim() != 2 or embedding.shape[0] < 1:
            raise ValueError("soft prompt needs at least one row")
        self.role = role
        self.init_instruction = init_instruction
        self.embedding = nn.Parameter(embedding.detach().clone())

    @property
    def token_count(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_model(self) -> int:
        return self.embedding.shape[1]


def init_soft_prompt(instruction: str, token_count: int, embedding_table: Tensor,
                     tokenizer: Optional[ByteTokenizer] = None, role: str = TASK) -> SoftPrompt:
    """Embed the instruction and tile its rows cyclically to ``token_count`` rows.

    Longer instructions are truncated. The returned prompt owns a copy, so
    training it never touches ``embedding_table``.
    """
    if not instruction:
        raise ValueError("instruction must be non-empty")
    if token_count < 1:
        raise ValueError("token_count must be >= 1")
    tokenizer = tokenizer or ByteTokenizer()
    ids = torch.tensor(tokenizer.encode(instruction, add_eos=False))
    rows = embedding_table.detach()[ids]
    idx = torch.arange(token_count) % rows.shape[0]
    return SoftPrompt(rows[idx].clone(), role=role, init_instruction=instruction)


def concat_prompts(language: SoftPrompt, task: SoftPrompt) -> Tensor:
    if language.d_model != task.d_model:
        raise ValueError("language and task prompts disagree on d_model")
    return torch.cat([language.embedding, task.embedding], dim=0)


class Variant(enum.Enum):
    """Task-training compositions, in the canonical reporting order."""

    TASK_ADAPTER = "TaskAdapterOnly"
    TASK_PROMPT = "SoftTaskPromptOnly"
    LANG_ADAPTER_TASK_ADAPTER = "LangAdapter+TaskAdapter"
    LANG_ADAPTER_TASK_PROMPT = "LangAdapter+SoftTaskPrompt"
    LANG_PROMPT_TASK_ADAPTER = "SoftLangPrompt+TaskAdapter"
    LANG_PROMPT_TASK_PROMPT = "SoftLangPrompt+SoftTaskPrompt"
    # language-representation training modes
    LANG_ADAPTER = "LangAdapter"
    LANG_PROMPT = "SoftLangPrompt"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        for v in cls:
            if v.value == name or v.name == name:
                return v
        raise ValueError(f"unknown variant {name!r}")

    @property
    def language_kind(self) -> Optional[str]:
        if self.value.startswith("LangAdapter"):
            return "adapter"
        if self.value.startswith("SoftLangPrompt"):
            return "prompt"
        return None

    @property
    def task_kind(self) -> Optional[str]:
        if self.is_language_training:
            return None
        return "adapter" if self.value.endswith("TaskAdapter") or self is Variant.TASK_ADAPTER else "prompt"

    @property
    def is_language_training(self) -> bool:
        return self in (Variant.LANG_ADAPTER, Variant.LANG_PROMPT)

    @property
    def order(self) -> int:
        return list(Variant).index(self)


TASK_VARIANTS: Tuple[Variant, ...] = tuple(v for v in Variant if not v.is_language_training)

GROUP_BACKBONE = "backbone"


class PeftAssembly(nn.Module):
    """A backbone plus installed artifacts and the freeze mask for one variant.

    Parameter groups are ``backbone``, ``lang_adapter``, ``lang_prompt``,
    ``task_adapter`` and ``task_prompt``; exactly one of them is trainable.
    With ``variant=None`` the bare backbone is wrapped and nothing trains.
    """

    def __init__(self, backbone: TinyTransformer, variant: Optional[Variant],
                 language: AdapterSet | SoftPrompt | None = None,
                 task: AdapterSet | SoftPrompt | None = None):
        super().__init__()
        self.backbone = backbone
        self.variant = variant
        self.language = language
        self.task = task
        self._trainable = self._resolve_trainable()
        self.apply_freeze()

    def _resolve_trainable(self) -> Optional[str]:
        if self.variant is None:
            return None
        if self.variant.is_language_training:
            return f"lang_{self.variant.language_kind}"
        return f"task_{self.variant.task_kind}"

    @property
    def freeze_mask(self) -> frozenset:
        """Names of the parameter groups that receive gradients."""
        return frozenset({self._trainable} - {None})

    def groups(self) -> Dict[str, List[Tuple[str, Tensor]]]:
        out: Dict[str, List[Tuple[str, Tensor]]] = {
            GROUP_BACKBONE: [(f"backbone.{n}", p) for n, p in self.backbone.named_parameters()]
        }
        for role, art in (("lang", self.language), ("task", self.task)):
            if isinstance(art, AdapterSet):
                out[f"{role}_adapter"] = list(art.named_tensors(f"{role}_adapter"))
            elif isinstance(art, SoftPrompt):
                out[f"{role}_prompt"] = [(f"{role}_prompt.embedding", art.embedding)]
        return out

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        return [t for g in self.groups().values() for t in g]

    def peft_tensors(self) -> List[Tuple[str, Tensor]]:
        return [t for g, ts in self.groups().items() if g != GROUP_BACKBONE for t in ts]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for _, p in self.groups().get(self._trainable, [])]

    def apply_freeze(self):
        for group, tensors in self.groups().items():
            for _, p in tensors:
                p.requires_grad_(group == self._trainable)

    def peft_state(self) -> PeftState:
        adapter_sets = [a for a in (self.language, self.task) if isinstance(a, AdapterSet)]
        prompts = [p for p in (self.language, self.task) if isinstance(p, SoftPrompt)]
        adapters = None
        if adapter_sets:
            adapters = [[s[i] for s in adapter_sets] for i in range(self.backbone.cfg.n_layers)]
        prompt = None
        if len(prompts) == 2:
            prompt = concat_prompts(*prompts)
        elif prompts:
            prompt = prompts[0].embedding
        return PeftState(adapters=adapters, prompt=prompt)

    def forward(self, src: Tensor, tgt: Tensor, check_finite: bool = True):
        return self.backbone(src, tgt, self.peft_state(), check_finite=check_finite)

    def generate(self, src: Tensor, max_new_tokens: int = 32):
        return self.backbone.generate(src, self.peft_state(), max_new_tokens)

    @property
    def prompt_length(self) -> int:
        return sum(a.token_count for a in (self.language, self.task) if isinstance(a, SoftPrompt))


def _check_artifact(art, kind: Optional[str], cfg: ModelConfig, what: str):
    if kind is None:
        if art is not None:
            raise ValueError(f"variant takes no {what} artifact")
        return
    expected = AdapterSet if kind == "adapter" else SoftPrompt
    if art is None:
        raise ValueError(f"variant requires a {what} {kind}")
    if not isinstance(art, expected):
        raise TypeError(f"{what} artifact must be {expected.__name__}, got {type(art).__name__}")
    if art.d_model != cfg.d_model:
        raise ValueError(f"{what} {kind} has d_model={art.d_model}, backbone has {cfg.d_model}")
    if kind == "adapter" and len(art) != cfg.n_layers:
        raise ValueError(f"{what} adapter set has {len(art)} layers, backbone has {cfg.n_layers}")


def assemble(backbone: TinyTransformer, variant: Variant,
             language: AdapterSet | SoftPrompt | None = None,
             task: AdapterSet | SoftPrompt | None = None) -> PeftAssembly:
    """Validate artifacts against ``variant`` and install them."""
    cfg = backbone.cfg
    _check_artifact(language, variant.language_kind, cfg, "language")
    _check_artifact(task, variant.task_kind, cfg, "task")
    return PeftAssembly(backbone, variant, language, task)


def baseline(backbone: TinyTransformer) -> PeftAssembly:
    """The backbone alone, for no-PEFT reference scores."""
    return PeftAssembly(backbone, None)


def adapter_parameter_count(d_model: int, bottleneck: int, n_layers: int) -> int:
    return n_layers * (d_model * bottleneck + bottleneck + bottleneck * d_model + d_model)


def trainable_parameter_count(variant: Variant, cfg: ModelConfig, bottleneck: Optional[int] = None,
                              prompt_tokens: int = DEFAULT_PROMPT_TOKENS) -> int:
    bottleneck = bottleneck or default_bottleneck(cfg.d_model)
    kind = variant.language_kind if variant.is_language_training else variant.task_kind
    if kind == "adapter":
        return adapter_parameter_count(cfg.d_model, bottleneck, cfg.n_layers)
    return prompt_tokens * cfg.d_model
