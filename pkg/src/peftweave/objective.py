"""Span corruption: replace random spans with sentinels, emit the spans as target."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .tokenizer import Vocab


@dataclass(frozen=True)
class CorruptionSpec:
    mask_rate: float = 0.15
    mean_span_length: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if self.mean_span_length < 1.0:
            raise ValueError(f"mean_span_length must be >= 1, got {self.mean_span_length}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def corruption_counts(n: int, spec: CorruptionSpec) -> Tuple[int, int]:
    """(masked tokens, span count) for a sequence of ``n`` ordinary tokens."""
    m = max(1, _round_half_up(spec.mask_rate * n))
    m = min(m, n - 1)
    spans = max(1, _round_half_up(m / spec.mean_span_length))
    # spans need at least one unmasked token between neighbours
    spans = min(spans, m, n - m + 1)
    return m, spans


def _positive_composition(total: int, parts: int, rng: np.random.Generator) -> List[int]:
    if parts == 1:
        return [total]
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    bounds = np.concatenate([[0], cuts, [total]])
    return np.diff(bounds).tolist()


def _nonneg_composition(total: int, parts: int, rng: np.random.Generator) -> List[int]:
    # stars and bars: choose parts-1 bar slots among total+parts-1
    bars = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    bounds = np.concatenate([[-1], bars, [total + parts - 1]])
    return (np.diff(bounds) - 1).tolist()


def span_corrupt(ids: Sequence[int], spec: CorruptionSpec, rng: np.random.Generator,
                 vocab: Vocab | None = None) -> Tuple[List[int], List[int]]:
    """Returns ``(corrupted input, target)``, both EOS-terminated.

    A trailing EOS on ``ids`` is ignored. Span lengths are a uniform random
    composition of the masked count; the gaps between spans are a uniform
    composition of the unmasked count with every interior gap >= 1.
    """
    vocab = vocab or Vocab()
    tokens = list(ids)
    if tokens and tokens[-1] == vocab.eos_id:
        tokens = tokens[:-1]
    n = len(tokens)
    if n < 2:
        raise ValueError(f"need at least 2 tokens to corrupt, got {n}")
    if any(vocab.is_sentinel(t) for t in tokens):
        raise ValueError("input already contains sentinel ids")
    if vocab.eos_id in tokens or vocab.pad_id in tokens:
        raise ValueError("PAD or EOS inside the sequence body")
    m, s = corruption_counts(n, spec)
    if s > vocab.sentinel_count:
        raise ValueError(f"{s} spans exceed the {vocab.sentinel_count} available sentinels")

    span_lens = _positive_composition(m, s, rng)
    extra = (n - m) - (s - 1)
    gaps = _nonneg_composition(extra, s + 1, rng)
    for i in range(1, s):
        gaps[i] += 1

    corrupted: List[int] = []
    target: List[int] = []
    pos = 0
    for k in range(s):
        corrupted.extend(tokens[pos:pos + gaps[k]])
        pos += gaps[k]
        sentinel = vocab.sentinel_id(k)
        corrupted.append(sentinel)
        target.append(sentinel)
        target.extend(tokens[pos:pos + span_lens[k]])
        pos += span_lens[k]
    corrupted.extend(tokens[pos:])
    corrupted.append(vocab.eos_id)
    target.append(vocab.eos_id)
    return corrupted, target


def reconstruct(corrupted: Sequence[int], target: Sequence[int], vocab: Vocab | None = None) -> List[int]:
    """Splice target spans back into their sentinel slots (EOS-terminated)."""
    vocab = vocab or Vocab()
    tgt = list(target)
    if not tgt or tgt[-1] != vocab.eos_id or vocab.eos_id in tgt[:-1]:
        raise ValueError("target must end with exactly one EOS")
    tgt = tgt[:-1]
    spans: List[Tuple[int, List[int]]] = []
    for t in tgt:
        if vocab.is_sentinel(t):
            spans.append((vocab.sentinel_index(t), []))
        elif not spans:
            raise ValueError("target must start with a sentinel")
        else:
            spans[-1][1].append(t)

    src = list(corrupted)
    if src and src[-1] == vocab.eos_id:
        src = src[:-1]
    in_order = [vocab.sentinel_index(t) for t in src if vocab.is_sentinel(t)]
    if any(b <= a for a, b in zip(in_order, in_order[1:])):
        raise ValueError(f"sentinels in input are not strictly increasing: {in_order}")
    if in_order != [k for k, _ in spans]:
        raise ValueError(f"sentinel mismatch: input has {in_order}, target has {[k for k, _ in spans]}")

    lookup = dict(spans)
    out: List[int] = []
    for t in src:
        if vocab.is_sentinel(t):
            out.extend(lookup[vocab.sentinel_index(t)])
        else:
            out.append(t)
    out.append(vocab.eos_id)
    return out
