"""Small pre-LN encoder-decoder transformer used as the frozen backbone.

The backbone exposes two injection points used by the PEFT layer:

* an ordered stack of adapters applied to the feed-forward output of every
  layer (encoder layers first, then decoder layers), and
* a prompt matrix prepended to the encoder input embeddings.

Both are passed in per call through :class:`PeftState`; the backbone itself
never stores PEFT parameters, so its ``state_dict`` is the backbone only.

Positions enter only through a bucketed relative-position bias shared by all
self-attention layers of a stack, so prepending a prompt does not move the
source tokens relative to each other.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .tokenizer import Vocab

EMBED_INIT_STD = 1.0
REL_BIAS_INIT_STD = 0.1


def init_std(name: str, p: Tensor) -> float:
    """Unit-variance embeddings, fan-in scaled projections, small position biases."""
    if name == "embed.weight":
        return EMBED_INIT_STD
    if "rel_bias" in name:
        return REL_BIAS_INIT_STD
    return p.shape[1] ** -0.5


@dataclass
class ModelConfig:
    vocab: Vocab = field(default_factory=Vocab)
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_input_length: int = 256
    max_target_length: int = 128
    relative_buckets: int = 32
    relative_max_distance: int = 128
    rng_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("d_model", "n_heads", "d_ff", "max_input_length", "max_target_length",
                     "relative_max_distance"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.relative_buckets < 4:
            raise ValueError("relative_buckets must be >= 4")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    @property
    def n_layers(self) -> int:
        return self.n_enc_layers + self.n_dec_layers

    def to_dict(self) -> dict:
        return {
            "sentinel_count": self.vocab.sentinel_count,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers,
            "d_ff": self.d_ff,
            "max_input_length": self.max_input_length,
            "max_target_length": self.max_target_length,
            "relative_buckets": self.relative_buckets,
            "relative_max_distance": self.relative_max_distance,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        vocab = Vocab(d.pop("sentinel_count", 100))
        return cls(vocab=vocab, **d)


def backbone_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`TinyTransformer`."""
    d, ff = cfg.d_model, cfg.d_ff
    attn = 4 * (d * d + d)
    ffn = d * ff + ff + ff * d + d
    ln = 2 * d
    enc_layer = 2 * ln + attn + ffn
    dec_layer = 3 * ln + 2 * attn + ffn
    return (
        cfg.vocab_size * d
        + 2 * cfg.relative_buckets * cfg.n_heads
        + cfg.n_enc_layers * enc_layer
        + cfg.n_dec_layers * dec_layer
        + 2 * ln
    )


def named_generator(seed: int, name: str) -> torch.Generator:
    """Independent RNG stream keyed by ``(seed, name)``."""
    digest = hashlib.blake2b(f"{seed}/{name}".encode(), digest_size=8).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest, "little") & (2**63 - 1))


def relative_position_bucket(relative: Tensor, bidirectional: bool, num_buckets: int, max_distance: int) -> Tensor:
    """Map ``key_pos - query_pos`` to a bucket: exact when near, log-spaced when far."""
    bucket = torch.zeros_like(relative)
    if bidirectional:
        num_buckets //= 2
        bucket = bucket + (relative > 0).long() * num_buckets
        n = relative.abs()
    else:
        n = (-relative).clamp(min=0)
    max_exact = num_buckets // 2
    far = max_exact + (
        torch.log(n.clamp(min=1).float() / max_exact)
        / math.log(max_distance / max_exact)
        * (num_buckets - max_exact)
    ).long()
    far = far.clamp(max=num_buckets - 1)
    return bucket + torch.where(n < max_exact, n, far)


@dataclass
class PeftState:
    """PEFT artifacts handed to the backbone for one forward pass.

    ``adapters[i]`` is the ordered adapter stack for layer ``i`` (encoder
    layers first). ``prompt`` is a ``(P, d_model)`` matrix prepended to every
    encoder input in the batch.
    """

    adapters: Optional[Sequence[Sequence[nn.Module]]] = None
    prompt: Optional[Tensor] = None

    @property
    def prompt_length(self) -> int:
        return 0 if self.prompt is None else self.prompt.shape[0]


@dataclass
class Seq2SeqOutput:
    logits: Tensor
    loss: Tensor


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor, memory: Tensor, bias: Tensor) -> Tensor:
        # bias: additive, broadcastable to (B, H, Tq, Tk); masked keys hold -inf-like values
        B, Tq, _ = x.shape
        Tk = memory.shape[1]
        q = self.q(x).view(B, Tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(memory).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v(memory).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        return self.o(out.transpose(1, 2).reshape(B, Tq, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.wi = nn.Linear(d_model, d_ff)
        self.wo = nn.Linear(d_ff, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.wo(F.relu(self.wi(x)))


def _apply_adapters(h: Tensor, stack: Optional[Sequence[nn.Module]]) -> Tensor:
    if stack:
        for adapter in stack:
            h = adapter(h)
    return h


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_attn = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln_ff = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)

    def forward(self, x, bias, adapters=None):
        h = self.ln_attn(x)
        x = x + self.attn(h, h, bias)
        # adapters sit on the FFN branch, before the residual add
        return x + _apply_adapters(self.ff(self.ln_ff(x)), adapters)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_self = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln_cross = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln_ff = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)

    def forward(self, y, memory, self_bias, cross_bias, adapters=None):
        h = self.ln_self(y)
        y = y + self.self_attn(h, h, self_bias)
        y = y + self.cross_attn(self.ln_cross(y), memory, cross_bias)
        return y + _apply_adapters(self.ff(self.ln_ff(y)), adapters)


class TinyTransformer(nn.Module):
    """Encoder-decoder with a tied embedding / output projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.enc_rel_bias = nn.Parameter(torch.empty(cfg.relative_buckets, cfg.n_heads))
        self.dec_rel_bias = nn.Parameter(torch.empty(cfg.relative_buckets, cfg.n_heads))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.enc_ln = nn.LayerNorm(d)
        self.dec_ln = nn.LayerNorm(d)
        self.reset_parameters()

    @property
    def pad_id(self) -> int:
        return self.cfg.vocab.pad_id

    @property
    def eos_id(self) -> int:
        return self.cfg.vocab.eos_id

    @property
    def decoder_start_id(self) -> int:
        return self.cfg.vocab.pad_id

    @torch.no_grad()
    def reset_parameters(self):
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                gen = named_generator(self.cfg.rng_seed, name)
                p.normal_(0.0, init_std(name, p), generator=gen)
            elif ".ln" in f".{name}" or name.startswith(("enc_ln", "dec_ln")):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            else:
                p.zero_()

    # -- validation -------------------------------------------------------

    def check_finite(self, peft: Optional[PeftState] = None):
        tensors = list(self.named_parameters())
        if peft is not None:
            if peft.prompt is not None:
                tensors.append(("prompt", peft.prompt))
            for i, stack in enumerate(peft.adapters or ()):
                for j, adapter in enumerate(stack):
                    tensors.extend((f"adapter[{i}][{j}].{n}", p) for n, p in adapter.named_parameters())
        for name, t in tensors:
            if not torch.isfinite(t).all():
                raise FloatingPointError(f"non-finite values in parameter {name!r}")

    def _adapters_for(self, peft: Optional[PeftState], layer: int):
        if peft is None or peft.adapters is None:
            return None
        return peft.adapters[layer]

    def _position_bias(self, table: Tensor, q_len: int, k_len: int, bidirectional: bool) -> Tensor:
        rel = torch.arange(k_len)[None, :] - torch.arange(q_len)[:, None]
        buckets = relative_position_bucket(rel, bidirectional, self.cfg.relative_buckets,
                                           self.cfg.relative_max_distance)
        return table[buckets].permute(2, 0, 1).unsqueeze(0)  # (1, H, Tq, Tk)

    @staticmethod
    def _masked(bias: Tensor, visible: Tensor) -> Tensor:
        return bias.masked_fill(~visible, torch.finfo(bias.dtype).min)

    # -- passes -------------------------------------------------------------

    def encode(self, src: Tensor, peft: Optional[PeftState] = None):
        """Returns encoder memory ``(B, P+S, d)`` and key visibility ``(B, 1, 1, P+S)``."""
        B, S = src.shape
        P = peft.prompt_length if peft is not None else 0
        if S + P > self.cfg.max_input_length:
            raise ValueError(f"source length {S} + prompt length {P} exceeds "
                             f"max_input_length={self.cfg.max_input_length}")
        x = self.embed(src)
        visible = src != self.pad_id
        if P:
            prompt = peft.prompt.to(x.dtype).unsqueeze(0).expand(B, -1, -1)
            x = torch.cat([prompt, x], dim=1)
            visible = torch.cat([visible.new_ones(B, P), visible], dim=1)
        visible = visible[:, None, None, :]
        bias = self._masked(self._position_bias(self.enc_rel_bias, P + S, P + S, True), visible)
        for i, layer in enumerate(self.encoder):
            x = layer(x, bias, self._adapters_for(peft, i))
        return self.enc_ln(x), visible

    def decode(self, dec_in: Tensor, memory: Tensor, visible: Tensor, peft: Optional[PeftState] = None) -> Tensor:
        T = dec_in.shape[1]
        if T > self.cfg.max_target_length:
            raise ValueError(f"target length {T} exceeds max_target_length={self.cfg.max_target_length}")
        y = self.embed(dec_in)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        self_bias = self._masked(self._position_bias(self.dec_rel_bias, T, T, False), causal)
        cross_bias = self._masked(memory.new_zeros(1, 1, 1, memory.shape[1]), visible)
        n_enc = self.cfg.n_enc_layers
        for i, layer in enumerate(self.decoder):
            y = layer(y, memory, self_bias, cross_bias, self._adapters_for(peft, n_enc + i))
        y = self.dec_ln(y)
        return (y * self.cfg.d_model**-0.5) @ self.embed.weight.t()

    def shift_right(self, tgt: Tensor) -> Tensor:
        start = tgt.new_full((tgt.shape[0], 1), self.decoder_start_id)
        return torch.cat([start, tgt[:, :-1]], dim=1)

    def forward(self, src: Tensor, tgt: Tensor, peft: Optional[PeftState] = None,
                check_finite: bool = True) -> Seq2SeqOutput:
        """Teacher-forced pass; loss is mean CE over non-PAD target tokens."""
        if src.dim() == 1:
            src, tgt = src.unsqueeze(0), tgt.unsqueeze(0)
        if check_finite:
            self.check_finite(peft)
        memory, visible = self.encode(src, peft)
        logits = self.decode(self.shift_right(tgt), memory, visible, peft)
        loss = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=self.pad_id
        )
        return Seq2SeqOutput(logits=logits, loss=loss)

    @torch.no_grad()
    def generate(self, src: Tensor, peft: Optional[PeftState] = None, max_new_tokens: int = 32) -> List[List[int]]:
        """Greedy decoding; returns generated ids per row, EOS excluded.

        ``torch.argmax`` returns the first maximal index, so ties go to the
        lowest token id.
        """
        if max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if src.dim() == 1:
            src = src.unsqueeze(0)
        max_new_tokens = min(max_new_tokens, self.cfg.max_target_length)
        memory, visible = self.encode(src, peft)
        B = src.shape[0]
        dec_in = src.new_full((B, 1), self.decoder_start_id)
        done = [False] * B
        out: List[List[int]] = [[] for _ in range(B)]
        for _ in range(max_new_tokens):
            nxt = self.decode(dec_in, memory, visible, peft)[:, -1].argmax(dim=-1)
            for b, tok in enumerate(nxt.tolist()):
                if done[b]:
                    continue
                if tok == self.eos_id:
                    done[b] = True
                else:
                    out[b].append(tok)
            if all(done):
                break
            dec_in = torch.cat([dec_in, nxt.unsqueeze(1)], dim=1)
        return out
