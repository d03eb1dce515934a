"""Conversation wire format: special-token framing, assembly, and parsing.

A conversation is framed as

    <s> <|sys_start|> system <|sys_end|> <|im_start|> user <|im_end|> reply
    ... </s>

with the six specials drawn from reserved vocabulary slots. ``assemble`` and
``parse`` are exact inverses on valid conversations. In the rendered surface
string the specials are separated from content by single spaces; parsing
strips exactly one such space on each side, so content texts must not carry
leading/trailing whitespace of their own (that is part of conversation
validity, enforced at construction).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tokenizer import ByteTokenizer


class ChatFormatError(ValueError):
    pass


class InjectionError(ChatFormatError):
    """Raw special-token surface form found inside content text."""


class ParseError(ChatFormatError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token position {position})")
        self.position = position


@dataclass(frozen=True)
class SpecialTokens:
    sys_start: int
    sys_end: int
    im_start: int
    im_end: int
    bos: int
    eos: int

    def __post_init__(self):
        ids = [self.sys_start, self.sys_end, self.im_start, self.im_end,
               self.bos, self.eos]
        if len(set(ids)) != 6:
            raise ChatFormatError("the six special token ids must be distinct")

    @classmethod
    def from_tokenizer(cls, tokenizer: ByteTokenizer) -> "SpecialTokens":
        return cls(
            sys_start=tokenizer.special_id("<|sys_start|>"),
            sys_end=tokenizer.special_id("<|sys_end|>"),
            im_start=tokenizer.special_id("<|im_start|>"),
            im_end=tokenizer.special_id("<|im_end|>"),
            bos=tokenizer.special_id("<s>"),
            eos=tokenizer.special_id("</s>"),
        )

    def as_set(self) -> frozenset:
        return frozenset((self.sys_start, self.sys_end, self.im_start,
                          self.im_end, self.bos, self.eos))


SPECIAL_SURFACES = ("<s>", "</s>", "<|sys_start|>", "<|sys_end|>",
                    "<|im_start|>", "<|im_end|>")


def _check_text(text: str, role: str) -> None:
    for surface in SPECIAL_SURFACES:
        if surface in text:
            raise InjectionError(f"{role} text contains raw special token {surface!r}")
    if text != text.strip():
        raise ChatFormatError(f"{role} text must not carry leading/trailing whitespace")


@dataclass(frozen=True)
class ChatTurn:
    """One conversation: a system prompt plus ordered (user, assistant) exchanges."""

    system_prompt: str
    exchanges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "exchanges", tuple(tuple(e) for e in self.exchanges))
        if len(self.exchanges) < 1:
            raise ChatFormatError("a conversation needs at least one exchange")
        _check_text(self.system_prompt, "system")
        for user, assistant in self.exchanges:
            _check_text(user, "user")
            _check_text(assistant, "assistant")


def assemble(conv: ChatTurn, specials: SpecialTokens,
             tokenizer: ByteTokenizer) -> np.ndarray:
    """Token sequence: bos, sys pair around the system prompt, then one
    im_start/im_end pair per user utterance with the assistant reply after
    im_end, closed by eos."""
    parts: list[np.ndarray] = [np.array([specials.bos], dtype=np.uint32)]
    parts.append(np.array([specials.sys_start], dtype=np.uint32))
    parts.append(tokenizer.encode(conv.system_prompt))
    parts.append(np.array([specials.sys_end], dtype=np.uint32))
    for user, assistant in conv.exchanges:
        parts.append(np.array([specials.im_start], dtype=np.uint32))
        parts.append(tokenizer.encode(user))
        parts.append(np.array([specials.im_end], dtype=np.uint32))
        parts.append(tokenizer.encode(assistant))
    parts.append(np.array([specials.eos], dtype=np.uint32))
    return np.concatenate(parts)


def parse(tokens, specials: SpecialTokens, tokenizer: ByteTokenizer) -> ChatTurn:
    """Inverse of assemble; raises :class:`ParseError` naming the offending
    position on malformed sequences."""
    ids = np.asarray(tokens).tolist()
    n = len(ids)
    if n == 0 or ids[0] != specials.bos:
        raise ParseError("sequence must begin with the bos token", 0)
    if ids[-1] != specials.eos:
        raise ParseError("sequence must end with the eos token", n - 1)
    special_set = specials.as_set()

    def decode_span(start: int, end: int) -> str:
        for k in range(start, end):
            if ids[k] in special_set:
                raise ParseError("unexpected special token inside content", k)
        text = tokenizer.decode(ids[start:end])
        # surface-rendered sequences carry one separator space per side
        if text.startswith(" "):
            text = text[1:]
        if text.endswith(" "):
            text = text[:-1]
        return text

    pos = 1
    if pos >= n or ids[pos] != specials.sys_start:
        raise ParseError("expected sys_start after bos", pos)
    pos += 1
    try:
        sys_end_at = ids.index(specials.sys_end, pos)
    except ValueError:
        raise ParseError("missing sys_end", n - 1) from None
    system = decode_span(pos, sys_end_at)
    pos = sys_end_at + 1

    exchanges: list[tuple[str, str]] = []
    while pos < n - 1:
        if ids[pos] == specials.im_end:
            raise ParseError("im_end before im_start", pos)
        if ids[pos] != specials.im_start:
            raise ParseError("expected im_start", pos)
        pos += 1
        try:
            im_end_at = ids.index(specials.im_end, pos)
        except ValueError:
            raise ParseError("missing im_end", n - 1) from None
        user = decode_span(pos, im_end_at)
        pos = im_end_at + 1
        nxt = pos
        while nxt < n - 1 and ids[nxt] != specials.im_start:
            nxt += 1
        assistant = decode_span(pos, nxt)
        exchanges.append((user, assistant))
        pos = nxt
    if not exchanges:
        raise ParseError("conversation holds no exchanges", pos)
    return ChatTurn(system_prompt=system, exchanges=tuple(exchanges))


def render(conv: ChatTurn) -> str:
    """Human-readable surface form with single spaces between the pieces."""
    pieces = ["<s>", "<|sys_start|>", conv.system_prompt, "<|sys_end|>"]
    for user, assistant in conv.exchanges:
        pieces.extend(["<|im_start|>", user, "<|im_end|>", assistant])
    pieces.append("</s>")
    return " ".join(pieces)


def assistant_loss_targets(tokens, specials: SpecialTokens,
                           ignore_index: int = -1) -> np.ndarray:
    """Next-token targets masked to assistant spans only.

    targets[t] = tokens[t+1] when tokens[t+1] lies inside an assistant
    response (the content between an im_end and the following im_start or
    eos, the closing eos included, so the model learns to stop); everywhere
    else ``ignore_index``. Optional finetuning mask; plain LM training keeps
    every position.
    """
    ids = np.asarray(tokens)
    targets = np.full(ids.shape, ignore_index, dtype=np.int64)
    in_assistant = False
    for t in range(ids.size - 1):
        cur = int(ids[t])
        nxt = int(ids[t + 1])
        if cur == specials.im_end:
            in_assistant = True
        elif cur == specials.im_start or cur == specials.eos:
            in_assistant = False
        if in_assistant and nxt != specials.im_start:
            targets[t] = nxt
    return targets


def assembled_length(conv: ChatTurn, tokenizer: ByteTokenizer) -> int:
    """Exact token budget: content + bos/eos + sys pair + one pair per exchange."""
    content = tokenizer.encode(conv.system_prompt).size
    for user, assistant in conv.exchanges:
        content += tokenizer.encode(user).size + tokenizer.encode(assistant).size
    return content + 2 + 2 + 2 * len(conv.exchanges)


# ---------------------------------------------------------------------------
# Conversation interchange file: one JSON record per line
# ---------------------------------------------------------------------------

def write_conversations(convs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for conv in convs:
            fh.write(json.dumps({"system": conv.system_prompt,
                                 "turns": [list(e) for e in conv.exchanges]},
                                ensure_ascii=False))
            fh.write("\n")


def read_conversations(path) -> list[ChatTurn]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            out.append(ChatTurn(system_prompt=doc["system"],
                                exchanges=tuple((u, a) for u, a in doc["turns"])))
    return out
