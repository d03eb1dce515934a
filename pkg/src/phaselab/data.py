"""Tokenized shards, mixture sampling, FIM, and exact token accounting.

A shard is an immutable tokenized corpus slice with document boundaries and a
seeded shuffle order. Batches are drawn by per-sequence mixture sampling over
per-domain token streams; the cursor state makes the stream exactly
resumable. The fill-in-the-middle transform applies per document, before
window packing, to code domains only.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import CODE_DOMAINS, ConfigError, MixtureSpec, PhaseSpec
from .tokenizer import ByteTokenizer

SHARD_MAGIC = b"PLSH"
SHARD_VERSION = 1

FIM_PREFIX = "<|fim_prefix|>"
FIM_SUFFIX = "<|fim_suffix|>"
FIM_MIDDLE = "<|fim_middle|>"


class IngestError(ValueError):
    pass


class ShardFormatError(ValueError):
    pass


class AccountingError(RuntimeError):
    pass


@dataclass
class TokenShard:
    """A tagged, tokenized corpus slice.

    ``doc_boundaries`` holds the exclusive end offset of every document
    (strictly increasing; the last entry equals ``token_count``).
    """

    domain: str
    token_ids: np.ndarray       # uint32 [token_count]
    doc_boundaries: np.ndarray  # int64, strictly increasing ends
    shuffle_seed: int

    def __post_init__(self):
        self.token_ids = np.ascontiguousarray(self.token_ids, dtype=np.uint32)
        self.doc_boundaries = np.ascontiguousarray(self.doc_boundaries, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        if self.doc_boundaries.size == 0:
            raise ShardFormatError("shard has no documents")
        diffs = np.diff(np.concatenate(([0], self.doc_boundaries)))
        if (diffs <= 0).any():
            raise ShardFormatError("doc_boundaries must be strictly increasing")
        if int(self.doc_boundaries[-1]) != self.token_count:
            raise ShardFormatError("last boundary must equal token_count")

    @property
    def token_count(self) -> int:
        return int(self.token_ids.size)

    @property
    def n_docs(self) -> int:
        return int(self.doc_boundaries.size)

    def document(self, index: int) -> np.ndarray:
        start = 0 if index == 0 else int(self.doc_boundaries[index - 1])
        return self.token_ids[start:int(self.doc_boundaries[index])]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.domain.encode())
        h.update(self.token_ids.tobytes())
        h.update(self.doc_boundaries.tobytes())
        h.update(str(self.shuffle_seed).encode())
        return h.hexdigest()


def ingest(documents, domain: str, tokenizer: ByteTokenizer, seed: int) -> TokenShard:
    """Tokenize documents into a shard.

    Each document gets the end-of-document separator appended; document order
    is the seeded permutation ``np.random.default_rng(seed).permutation(n)``
    (that generator is the contract, so ingestion can be verified externally).
    """
    documents = list(documents)
    if not documents:
        raise IngestError("empty corpus: no documents to ingest")
    if any(len(doc) == 0 for doc in documents):
        raise IngestError("documents must be non-empty")
    eod = tokenizer.eod_id
    encoded = []
    for doc in documents:
        ids = tokenizer.encode(doc)
        if ids.size and int(ids.max()) >= tokenizer.vocab_size:
            raise IngestError("token id overflows the vocabulary")
        encoded.append(np.concatenate([ids, np.array([eod], dtype=np.uint32)]))
    order = np.random.default_rng(seed).permutation(len(encoded))
    shuffled = [encoded[i] for i in order]
    token_ids = np.concatenate(shuffled)
    boundaries = np.cumsum([a.size for a in shuffled], dtype=np.int64)
    return TokenShard(domain=domain, token_ids=token_ids,
                      doc_boundaries=boundaries, shuffle_seed=seed)


# ---------------------------------------------------------------------------
# Shard file format: little-endian header, fixed-width ids, boundary block
# ---------------------------------------------------------------------------

def write_shard(shard: TokenShard, path) -> str:
    """Write the binary shard file; returns its sha256 hex digest."""
    domain_bytes = shard.domain.encode("utf-8")
    header = SHARD_MAGIC + struct.pack(
        "<IH", SHARD_VERSION, len(domain_bytes)) + domain_bytes + struct.pack(
        "<QqQ", shard.token_count, shard.shuffle_seed, shard.n_docs)
    body = shard.token_ids.astype("<u4").tobytes() + shard.doc_boundaries.astype("<i8").tobytes()
    blob = header + body
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def read_shard(path) -> TokenShard:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SHARD_MAGIC:
        raise ShardFormatError(f"{path}: not a shard file")
    version, domain_len = struct.unpack_from("<IH", blob, 4)
    if version != SHARD_VERSION:
        raise ShardFormatError(f"{path}: unsupported shard version {version}")
    off = 10
    domain = blob[off:off + domain_len].decode("utf-8")
    off += domain_len
    token_count, shuffle_seed, n_docs = struct.unpack_from("<QqQ", blob, off)
    off += 24
    ids_bytes = 4 * token_count
    bounds_bytes = 8 * n_docs
    if len(blob) != off + ids_bytes + bounds_bytes:
        raise ShardFormatError(f"{path}: truncated or oversized shard file")
    token_ids = np.frombuffer(blob, dtype="<u4", count=token_count, offset=off)
    boundaries = np.frombuffer(blob, dtype="<i8", count=n_docs, offset=off + ids_bytes)
    return TokenShard(domain=domain, token_ids=token_ids.astype(np.uint32),
                      doc_boundaries=boundaries.astype(np.int64),
                      shuffle_seed=shuffle_seed)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_shard_manifest(shard_paths: dict[str, str], out_path) -> dict:
    """Manifest listing shard files with content hashes."""
    entries = []
    base = os.path.dirname(os.path.abspath(out_path))
    for domain, path in sorted(shard_paths.items()):
        shard = read_shard(path)
        entries.append({
            "path": os.path.relpath(os.path.abspath(path), base),
            "domain": domain,
            "token_count": shard.token_count,
            "n_docs": shard.n_docs,
            "sha256": file_sha256(path),
        })
    doc = {"format": SHARD_VERSION, "shards": entries}
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def load_shard_manifest(path, verify: bool = True) -> dict[str, TokenShard]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    shards: dict[str, TokenShard] = {}
    for entry in doc["shards"]:
        shard_path = os.path.join(base, entry["path"])
        if verify and file_sha256(shard_path) != entry["sha256"]:
            raise ShardFormatError(f"{shard_path}: content hash mismatch")
        shards[entry["domain"]] = read_shard(shard_path)
    return shards


# ---------------------------------------------------------------------------
# Fill-in-the-middle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FimSentinels:
    prefix: int
    suffix: int
    middle: int

    @classmethod
    def from_tokenizer(cls, tokenizer: ByteTokenizer) -> "FimSentinels":
        return cls(prefix=tokenizer.special_id(FIM_PREFIX),
                   suffix=tokenizer.special_id(FIM_SUFFIX),
                   middle=tokenizer.special_id(FIM_MIDDLE))

    def as_set(self) -> frozenset:
        return frozenset((self.prefix, self.suffix, self.middle))


def apply_fim(doc_tokens: np.ndarray, rate: float, rng: np.random.Generator,
              sentinels: FimSentinels, mode: str = "psm") -> np.ndarray:
    """Fill-in-the-middle document transform.

    With probability ``rate`` the document splits at two uniform cut points
    into (prefix, middle, suffix) and is re-emitted with the three sentinels
    (PSM order by default: prefix sentinel, prefix, suffix sentinel, suffix,
    middle sentinel, middle). Documents shorter than 3 tokens pass through
    without consuming randomness. Output length is input length + 3 when
    transformed.
    """
    if sentinels is None:
        raise ConfigError("FIM sentinels are not registered")
    doc_tokens = np.asarray(doc_tokens, dtype=np.uint32)
    n = doc_tokens.size
    if n < 3:
        return doc_tokens
    if rate <= 0.0 or rng.random() >= rate:
        return doc_tokens
    i, j = sorted(rng.integers(0, n + 1, size=2).tolist())
    prefix, middle, suffix = doc_tokens[:i], doc_tokens[i:j], doc_tokens[j:]
    s = np.uint32
    if mode == "psm":
        pieces = [[s(sentinels.prefix)], prefix, [s(sentinels.suffix)], suffix,
                  [s(sentinels.middle)], middle]
    elif mode == "spm":
        pieces = [[s(sentinels.suffix)], suffix, [s(sentinels.prefix)], prefix,
                  [s(sentinels.middle)], middle]
    else:
        raise ConfigError(f"unknown FIM mode {mode!r}")
    return np.concatenate([np.asarray(p, dtype=np.uint32) for p in pieces])


# ---------------------------------------------------------------------------
# Mixture sampling with an exactly resumable cursor
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray        # int64 [B, T]
    targets: np.ndarray       # int64 [B, T]; last column ignored (-1)
    domain_tags: list[str]
    fim_applied: np.ndarray   # bool [B]: window contains a FIM sentinel

    @property
    def domain_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for tag in self.domain_tags:
            counts[tag] = counts.get(tag, 0) + 1
        return counts


@dataclass
class DataCursor:
    """Serializable sampling state: mixture RNG + per-domain stream position."""

    mix_state: dict
    positions: dict[str, list[int]]  # domain -> [epoch, offset]

    @classmethod
    def fresh(cls, seed: int, domains) -> "DataCursor":
        rng = np.random.default_rng(seed)
        return cls(mix_state=rng.bit_generator.state,
                   positions={d: [0, 0] for d in sorted(domains)})

    def to_json(self) -> str:
        return json.dumps({"mix_state": self.mix_state, "positions": self.positions})

    @classmethod
    def from_json(cls, text: str) -> "DataCursor":
        doc = json.loads(text)
        return cls(mix_state=doc["mix_state"], positions=doc["positions"])

    def copy(self) -> "DataCursor":
        return DataCursor.from_json(self.to_json())


def draw_domains(mix: MixtureSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Domain draws for n sequences; returns indices into mix.domains.

    Bernoulli mode draws i.i.d. by weight. Quota mode fixes the per-batch
    counts at floor(w*n), hands out the remainder by largest fractional
    part, and shuffles slot order with the same generator.
    """
    domains = mix.domains
    weights = np.array([mix.weights[d] for d in domains])
    if mix.sampling == "quota":
        counts = np.floor(weights * n).astype(int)
        remainder = n - counts.sum()
        if remainder:
            order = np.argsort(-(weights * n - counts), kind="stable")
            counts[order[:remainder]] += 1
        picks = np.repeat(np.arange(len(domains)), counts)
        rng.shuffle(picks)
        return picks
    u = rng.random(n)
    return np.minimum(np.searchsorted(np.cumsum(weights), u, side="right"),
                      len(domains) - 1)


class BatchSampler:
    """Draws mixture batches from per-domain shard streams.

    Sampling is a pure function of (shards, mixture, phase, cursor): epoch
    buffers are rebuilt deterministically from the shard's shuffle seed and the
    epoch index, so replaying from a checkpointed cursor reproduces the
    identical batch stream.
    """

    def __init__(self, shards: dict[str, TokenShard],
                 sentinels: FimSentinels | None = None):
        self.shards = dict(shards)
        self.sentinels = sentinels
        self._buffers: dict[tuple, np.ndarray] = {}

    def _epoch_buffer(self, domain: str, epoch: int, mix: MixtureSpec) -> np.ndarray:
        shard = self.shards[domain]
        fim_rate = mix.fim_rate if domain in CODE_DOMAINS else 0.0
        key = (domain, epoch, fim_rate, mix.fim_mode)
        buf = self._buffers.get(key)
        if buf is not None:
            return buf
        if epoch == 0:
            order = np.arange(shard.n_docs)  # ingest already shuffled epoch 0
        else:
            order = np.random.default_rng(
                np.random.SeedSequence((shard.shuffle_seed & 0x7FFFFFFF, epoch))
            ).permutation(shard.n_docs)
        if fim_rate > 0.0:
            if self.sentinels is None:
                raise ConfigError(
                    f"mixture requests FIM on {domain!r} but sentinels are not registered")
            fim_rng = np.random.default_rng(
                np.random.SeedSequence((shard.shuffle_seed & 0x7FFFFFFF, epoch, 1)))
            parts = []
            for doc_idx in order:
                doc = shard.document(int(doc_idx))
                # the separator stays outside the transform
                body, sep = doc[:-1], doc[-1:]
                parts.append(apply_fim(body, fim_rate, fim_rng, self.sentinels,
                                       mix.fim_mode))
                parts.append(sep)
            buf = np.concatenate(parts)
        elif epoch == 0:
            buf = shard.token_ids
        else:
            buf = np.concatenate([shard.document(int(i)) for i in order])
        # keep at most the two most recent epochs per domain
        stale = [k for k in self._buffers
                 if k[0] == domain and abs(k[1] - epoch) > 1]
        for k in stale:
            del self._buffers[k]
        self._buffers[key] = buf
        return buf

    def _take_window(self, domain: str, seq_len: int, pos: list[int],
                     mix: MixtureSpec) -> np.ndarray:
        epoch, offset = pos
        buf = self._epoch_buffer(domain, epoch, mix)
        if buf.size < seq_len:
            raise ConfigError(
                f"domain {domain!r} stream ({buf.size} tokens) shorter than one "
                f"window of {seq_len}")
        if offset + seq_len > buf.size:
            epoch += 1
            offset = 0
            buf = self._epoch_buffer(domain, epoch, mix)
        window = buf[offset:offset + seq_len]
        pos[0] = epoch
        pos[1] = offset + seq_len
        return window

    def sample(self, mix: MixtureSpec, phase: PhaseSpec,
               cursor: DataCursor) -> tuple[Batch, DataCursor]:
        missing = [d for d in mix.domains if d not in self.shards]
        if missing:
            raise ConfigError(f"mixture domains without shards: {missing}")
        cursor = cursor.copy()
        rng = np.random.default_rng()
        rng.bit_generator.state = cursor.mix_state
        picks = draw_domains(mix, rng, phase.batch_size)
        domains = mix.domains
        b, t = phase.batch_size, phase.seq_len
        tokens = np.empty((b, t), dtype=np.int64)
        tags = []
        fim_flags = np.zeros(b, dtype=bool)
        sentinel_ids = self.sentinels.as_set() if self.sentinels else frozenset()
        for row, pick in enumerate(picks):
            domain = domains[int(pick)]
            pos = cursor.positions.setdefault(domain, [0, 0])
            window = self._take_window(domain, t, pos, mix)
            tokens[row] = window.astype(np.int64)
            tags.append(domain)
            if sentinel_ids:
                fim_flags[row] = bool(np.isin(window, list(sentinel_ids)).any())
        targets = np.empty_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        targets[:, -1] = -1
        cursor.mix_state = rng.bit_generator.state
        return Batch(tokens=tokens, targets=targets, domain_tags=tags,
                     fim_applied=fim_flags), cursor


def sample_batch(shards: dict[str, TokenShard], mix: MixtureSpec, phase: PhaseSpec,
                 cursor: DataCursor,
                 sentinels: FimSentinels | None = None) -> tuple[Batch, DataCursor]:
    """One-shot batch draw (no buffer reuse across calls); see BatchSampler."""
    return BatchSampler(shards, sentinels).sample(mix, phase, cursor)


# ---------------------------------------------------------------------------
# Token accounting
# ---------------------------------------------------------------------------

class TokenLedger:
    """Per-phase, per-domain counters updated once per optimizer step."""

    def __init__(self):
        self.counts: dict[str, dict[str, int]] = {}

    def record(self, phase_id: str, domain_counts: dict[str, int], seq_len: int) -> None:
        if any(c < 0 for c in domain_counts.values()):
            raise AccountingError("negative sequence count")
        phase = self.counts.setdefault(phase_id, {})
        for domain, n_seq in domain_counts.items():
            phase[domain] = phase.get(domain, 0) + n_seq * seq_len

    def merge(self, other: "TokenLedger") -> None:
        for phase_id, per_domain in other.counts.items():
            mine = self.counts.setdefault(phase_id, {})
            for domain, tokens in per_domain.items():
                mine[domain] = mine.get(domain, 0) + tokens

    def report(self) -> dict:
        per_phase = {p: sum(d.values()) for p, d in self.counts.items()}
        per_domain: dict[str, int] = {}
        for d in self.counts.values():
            for domain, tokens in d.items():
                per_domain[domain] = per_domain.get(domain, 0) + tokens
        accumulated = sum(per_phase.values())
        if accumulated != sum(per_domain.values()):
            raise AccountingError("per-domain totals do not sum to accumulated total")
        return {"per_phase": per_phase, "per_domain": per_domain,
                "accumulated": accumulated}

    def to_json(self) -> str:
        return json.dumps(self.counts)

    @classmethod
    def from_json(cls, text: str) -> "TokenLedger":
        ledger = cls()
        ledger.counts = json.loads(text)
        return ledger


def phase_token_budget(phase: PhaseSpec) -> int:
    """Tokens consumed by a full phase: total_steps * batch_size * seq_len."""
    return phase.total_steps * phase.tokens_per_step
