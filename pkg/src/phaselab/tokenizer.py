"""Byte-level tokenizer with reserved special-token slots.

Ids 0..255 are raw UTF-8 bytes; special tokens occupy reserved slots from 256
upward, inside the fixed vocabulary (registering one never grows
``vocab_size``). This stands in for a trained subword tokenizer at desk scale
while preserving the reserved-slot behavior of a production vocabulary.
"""

from __future__ import annotations

import numpy as np

from .config import ConfigError

N_BYTE_TOKENS = 256

# Canonical registration order; ids are stable given a vocab size.
STANDARD_SPECIALS = (
    "<eod>",
    "<|fim_prefix|>",
    "<|fim_suffix|>",
    "<|fim_middle|>",
    "<s>",
    "</s>",
    "<|sys_start|>",
    "<|sys_end|>",
    "<|im_start|>",
    "<|im_end|>",
)


class TokenizerError(ValueError):
    pass


class ByteTokenizer:
    def __init__(self, vocab_size: int = 512, specials: tuple[str, ...] = STANDARD_SPECIALS):
        if vocab_size < N_BYTE_TOKENS + len(specials):
            raise ConfigError(
                f"vocab_size {vocab_size} cannot hold {N_BYTE_TOKENS} byte tokens "
                f"plus {len(specials)} reserved specials")
        self.vocab_size = vocab_size
        self._special_to_id: dict[str, int] = {}
        self._id_to_special: dict[int, str] = {}
        for surface in specials:
            self.register_special(surface)

    def register_special(self, surface: str) -> int:
        """Reserve a slot for a special token; idempotent per surface form."""
        if surface in self._special_to_id:
            return self._special_to_id[surface]
        token_id = N_BYTE_TOKENS + len(self._special_to_id)
        if token_id >= self.vocab_size:
            raise TokenizerError(
                f"no reserved slot left for {surface!r} (vocab_size {self.vocab_size})")
        self._special_to_id[surface] = token_id
        self._id_to_special[token_id] = surface
        return token_id

    def special_id(self, surface: str) -> int:
        try:
            return self._special_to_id[surface]
        except KeyError:
            raise TokenizerError(f"special token {surface!r} is not registered") from None

    @property
    def specials(self) -> dict[str, int]:
        return dict(self._special_to_id)

    @property
    def eod_id(self) -> int:
        return self.special_id("<eod>")

    def encode(self, text: str) -> np.ndarray:
        """Plain content encoding; no special tokens are ever produced."""
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.uint32)

    def decode(self, ids) -> str:
        """Bytes decode to text; special ids render as their surface forms."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise TokenizerError("token id outside vocabulary")
        parts: list[str] = []
        byte_run: list[int] = []

        def flush():
            if byte_run:
                parts.append(bytes(byte_run).decode("utf-8", errors="replace"))
                byte_run.clear()

        for i in ids.tolist():
            if i < N_BYTE_TOKENS:
                byte_run.append(i)
            else:
                flush()
                surface = self._id_to_special.get(i)
                if surface is None:
                    raise TokenizerError(f"id {i} is a reserved slot with no special registered")
                parts.append(surface)
        flush()
        return "".join(parts)
