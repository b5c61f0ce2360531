"""Byte-level tokenizer with reserved sentinel ids for span corruption."""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar, Iterable, List

N_BYTES = 256


@dataclass(frozen=True)
class Vocab:
    """Id layout: bytes 0-255, then PAD/EOS/UNK, then sentinels at the top.

    Sentinel 0 owns the highest id, sentinel ``sentinel_count - 1`` the lowest
    of the sentinel block.
    """

    sentinel_count: int = 100

    def __post_init__(self):
        if self.sentinel_count < 1:
            raise ValueError(f"sentinel_count must be >= 1, got {self.sentinel_count}")

    pad_id: ClassVar[int] = N_BYTES
    eos_id: ClassVar[int] = N_BYTES + 1
    unk_id: ClassVar[int] = N_BYTES + 2

    @property
    def base_size(self) -> int:
        return N_BYTES + 3

    @property
    def size(self) -> int:
        return self.base_size + self.sentinel_count

    def sentinel_id(self, k: int) -> int:
        if not 0 <= k < self.sentinel_count:
            raise ValueError(f"sentinel index {k} out of range [0, {self.sentinel_count})")
        return self.size - 1 - k

    def is_sentinel(self, token_id: int) -> bool:
        return self.base_size <= token_id < self.size

    def sentinel_index(self, token_id: int) -> int:
        if not self.is_sentinel(token_id):
            raise ValueError(f"id {token_id} is not a sentinel")
        return self.size - 1 - token_id


class ByteTokenizer:
    """Maps text to UTF-8 byte ids plus a trailing EOS.

    Holds no mutable state, so one instance can be shared across threads.
    """

    def __init__(self, vocab: Vocab | None = None):
        self.vocab = vocab or Vocab()

    @property
    def pad_id(self) -> int:
        return self.vocab.pad_id

    @property
    def eos_id(self) -> int:
        return self.vocab.eos_id

    def encode(self, text: str, add_eos: bool = True) -> List[int]:
        ids = list(text.encode("utf-8"))
        if add_eos:
            ids.append(self.vocab.eos_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        parts: List[str] = []
        run = bytearray()

        def flush():
            if run:
                parts.append(run.decode("utf-8", errors="replace"))
                run.clear()

        for i in ids:
            i = int(i)
            if 0 <= i < N_BYTES:
                run.append(i)
            elif i in (self.vocab.pad_id, self.vocab.eos_id):
                continue
            elif self.vocab.is_sentinel(i):
                flush()
                parts.append(f"<extra_id_{self.vocab.sentinel_index(i)}>")
            else:
                flush()
                parts.append("�")
        flush()
        return "".join(parts)

    def sentinel_id(self, k: int) -> int:
        return self.vocab.sentinel_id(k)
