"""Byte-level tokenizer with optional greedy pair merges, sequence packing and batch loading.

Token ids 0-255 are raw bytes, 256-258 are the specials, merged tokens follow
from 259 in merge order. Documents are separated by blank lines and each one
is followed by the end-of-document id in the packed stream.

Packed files (`train.bin`, `validation.bin`) are a small little-endian header
followed by int32 token ids:
    magic "PLDS" | u32 version | u32 vocab_size | u32 seq_len | u64 count | u8 split
"""
from __future__ import annotations

import json
import math
import queue
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from construct import Const, Enum, Int8ul, Int32ul, Int64ul, Struct
from construct import ConstructError
from torch import Tensor

from logging_service import get_logger

from .errors import CheckpointError, ConfigError, InputError

logger = get_logger('plaid.corpus')

BYTE_ALPHABET = 256
SPECIAL_TOKENS = ("<eod>", "<pad>", "<bos>")
EOD_ID = 256
BASE_VOCAB_SIZE = BYTE_ALPHABET + len(SPECIAL_TOKENS)   # 259
VOCAB_VERSION = 1
PACKED_VERSION = 1
DEFAULT_SEQ_LEN = 256
VALIDATION_FRAC = 0.05

_DOC_SPLIT = re.compile(rb"\n\s*\n")

PackedHeader = Struct(
    "magic" / Const(b"PLDS"),
    "version" / Int32ul,
    "vocab_size" / Int32ul,
    "seq_len" / Int32ul,
    "count" / Int64ul,
    "split" / Enum(Int8ul, train=0, validation=1),
)


@dataclass
class Vocabulary:
    """id <-> token bijection; tokens are byte strings, specials are named."""

    merges: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self._pieces: List[bytes] = [bytes([b]) for b in range(BYTE_ALPHABET)]
        self._pieces += [name.encode("ascii") for name in SPECIAL_TOKENS]
        for a, b in self.merges:
            self._pieces.append(self._pieces[a] + self._pieces[b])
        self._ranks = {pair: BASE_VOCAB_SIZE + i for i, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return BASE_VOCAB_SIZE + len(self.merges)

    @property
    def eod_id(self) -> int:
        return EOD_ID

    def is_special(self, token_id: int) -> bool:
        return BYTE_ALPHABET <= token_id < BASE_VOCAB_SIZE

    def piece(self, token_id: int) -> bytes:
        return self._pieces[token_id]

    def token_chars(self) -> Tensor:
        """Characters (bytes) each id decodes to; the end-of-document marker counts as one."""
        lengths = [0 if self.is_special(i) else len(p) for i, p in enumerate(self._pieces)]
        lengths[EOD_ID] = 1
        return torch.tensor(lengths, dtype=torch.long)

    # ---- serialization ----
    def to_dict(self) -> Dict:
        return {
            "version": VOCAB_VERSION,
            "specials": list(SPECIAL_TOKENS),
            "tokens": [p.hex() if not self.is_special(i) else SPECIAL_TOKENS[i - BYTE_ALPHABET]
                       for i, p in enumerate(self._pieces)],
            "merges": [list(m) for m in self.merges],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocabulary":
        if data.get("version") != VOCAB_VERSION:
            raise CheckpointError(f"unsupported vocabulary version {data.get('version')!r}")
        vocab = cls([(int(a), int(b)) for a, b in data.get("merges", [])])
        if "tokens" in data and len(data["tokens"]) != vocab.size:
            raise CheckpointError(
                f"vocabulary lists {len(data['tokens'])} tokens but its merges give {vocab.size}")
        return vocab

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ============================================================================
# Vocabulary construction and coding
# ============================================================================
def _as_bytes(text: Union[str, bytes]) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def split_documents(text: Union[str, bytes]) -> List[bytes]:
    docs = [d.strip(b"\n") for d in _DOC_SPLIT.split(_as_bytes(text))]
    return [d for d in docs if d]


def _merge(seq: List[int], pair: Tuple[int, int], new_id: int) -> List[int]:
    out, i, n = [], 0, len(seq)
    while i < n:
        if i + 1 < n and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def build_vocab(corpus: Union[str, bytes], target_size: int = BASE_VOCAB_SIZE) -> Vocabulary:
    """Byte-level base plus greedy merges of the most frequent adjacent pair up to target_size.

    Ties go to the numerically smallest pair; merges never cross document boundaries.
    """
    if target_size < BASE_VOCAB_SIZE:
        raise ConfigError(f"target vocabulary size {target_size} is below the base size {BASE_VOCAB_SIZE}",
                          [f"data.vocab_size must be >= {BASE_VOCAB_SIZE}"])
    docs = split_documents(corpus)
    if not docs:
        raise InputError("corpus is empty")
    seqs = [list(d) for d in docs]
    merges: List[Tuple[int, int]] = []
    while BASE_VOCAB_SIZE + len(merges) < target_size:
        counts: Counter = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            logger.warning(f"no pairs left to merge; vocabulary stops at {BASE_VOCAB_SIZE + len(merges)}")
            break
        top = max(counts.values())
        pair = min(p for p, c in counts.items() if c == top)
        new_id = BASE_VOCAB_SIZE + len(merges)
        merges.append(pair)
        seqs = [_merge(s, pair, new_id) for s in seqs]
    vocab = Vocabulary(merges)
    logger.info(f"built vocabulary: {vocab.size} tokens ({len(merges)} merges) from {len(docs)} documents")
    return vocab


def encode(text: Union[str, bytes], vocab: Vocabulary) -> List[int]:
    seq = list(_as_bytes(text))
    for i, pair in enumerate(vocab.merges):
        if len(seq) < 2:
            break
        seq = _merge(seq, pair, BASE_VOCAB_SIZE + i)
    return seq


def decode(ids: Sequence[int], vocab: Vocabulary) -> bytes:
    """Concatenate token bytes; specials decode to nothing except <eod>, which becomes a blank line."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if i == EOD_ID:
            out += b"\n\n"
        elif not vocab.is_special(i):
            out += vocab.piece(i)
    return bytes(out)


def decode_text(ids: Sequence[int], vocab: Vocabulary) -> str:
    return decode(ids, vocab).decode("utf-8", errors="replace")


def encode_documents(docs: Sequence[bytes], vocab: Vocabulary) -> List[int]:
    stream: List[int] = []
    for doc in docs:
        stream.extend(encode(doc, vocab))
        stream.append(EOD_ID)
    return stream


# ============================================================================
# Packing
# ============================================================================
@dataclass
class PackedDataset:
    sequences: Tensor     # (N, seq_len) long
    seq_len: int
    split: str = "train"
    dropped: int = 0

    def __len__(self) -> int:
        return int(self.sequences.shape[0])


def pack_sequences(stream: Sequence[int], seq_len: int, split: str = "train") -> PackedDataset:
    """Cut the stream into floor(len / seq_len) non-overlapping rows; the tail is dropped."""
    n = len(stream)
    if seq_len < 1 or n < seq_len:
        raise InputError(f"token stream of {n} is shorter than seq_len {seq_len}")
    rows = n // seq_len
    data = torch.as_tensor(np.asarray(stream[: rows * seq_len], dtype=np.int64)).reshape(rows, seq_len)
    return PackedDataset(sequences=data, seq_len=seq_len, split=split, dropped=n - rows * seq_len)


def prepare_corpus(text: Union[str, bytes], vocab: Vocabulary, seq_len: int = DEFAULT_SEQ_LEN,
                   val_frac: float = VALIDATION_FRAC) -> Tuple[PackedDataset, Optional[PackedDataset]]:
    """Train split from the leading documents, validation from the final val_frac of them."""
    docs = split_documents(text)
    if not docs:
        raise InputError("corpus is empty")
    n_val = int(math.ceil(val_frac * len(docs))) if len(docs) > 1 and val_frac > 0 else 0
    train_docs, val_docs = docs[: len(docs) - n_val], docs[len(docs) - n_val:]
    train = pack_sequences(encode_documents(train_docs, vocab), seq_len, "train")
    validation = None
    if val_docs:
        try:
            validation = pack_sequences(encode_documents(val_docs, vocab), seq_len, "validation")
        except InputError as exc:
            logger.warning(f"validation split too short to pack: {exc}")
    logger.info(f"packed {len(train)} train / {0 if validation is None else len(validation)} "
                f"validation sequences of {seq_len} tokens")
    return train, validation


def save_packed(dataset: PackedDataset, vocab_size: int, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = PackedHeader.build(dict(version=PACKED_VERSION, vocab_size=vocab_size,
                                     seq_len=dataset.seq_len, count=len(dataset),
                                     split=dataset.split))
    body = dataset.sequences.numpy().astype("<i4").tobytes()
    path.write_bytes(header + body)
    return path


def load_packed(path: Union[str, Path], vocab_size: Optional[int] = None) -> PackedDataset:
    raw = Path(path).read_bytes()
    try:
        header = PackedHeader.parse(raw)
    except ConstructError as exc:
        raise CheckpointError(f"{path}: not a packed dataset ({exc})") from exc
    if header.version != PACKED_VERSION:
        raise CheckpointError(f"{path}: unsupported packed dataset version {header.version}")
    if vocab_size is not None and header.vocab_size != vocab_size:
        raise CheckpointError(f"{path}: built for V={header.vocab_size}, expected {vocab_size}")
    offset = PackedHeader.sizeof()
    expected = header.count * header.seq_len
    body = np.frombuffer(raw, dtype="<i4", offset=offset)
    if body.size != expected:
        raise CheckpointError(f"{path}: expected {expected} tokens, found {body.size}")
    data = torch.from_numpy(body.astype(np.int64)).reshape(header.count, header.seq_len)
    return PackedDataset(sequences=data, seq_len=header.seq_len, split=str(header.split))


# ============================================================================
# Batch loading
# ============================================================================
class BatchLoader:
    """Seeded uniform row sampling, prepared ahead on a background thread.

    Batch k depends only on (seed, k); `start` skips the first batches so a
    resumed run sees the same sequence as an uninterrupted one.
    """

    def __init__(self, dataset: PackedDataset, batch_size: int, seed: int = 0, *,
                 start: int = 0, prefetch: int = 4):
        if len(dataset) == 0:
            raise InputError("cannot load batches from an empty dataset")
        self.dataset = dataset
        self.batch_size = batch_size
        self.generator = torch.Generator().manual_seed(seed)
        self.queue: "queue.Queue[Tensor]" = queue.Queue(maxsize=max(prefetch, 1))
        self.running = False
        self.thread = None
        for _ in range(start):
            self._draw()

    def _draw(self) -> Tensor:
        rows = torch.randint(0, len(self.dataset), (self.batch_size,), generator=self.generator)
        return self.dataset.sequences[rows].clone()

    def start(self) -> "BatchLoader":
        self.running = True
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()
        return self

    def stop(self):
        self.running = False
        if self.thread:
            try:
                while True:
                    self.queue.get_nowait()
            except queue.Empty:
                pass
            self.thread.join(timeout=2)

    def _run(self):
        while self.running:
            batch = self._draw()
            while self.running:
                try:
                    self.queue.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def __iter__(self) -> Iterator[Tensor]:
        if self.thread is None:
            self.start()
        while True:
            yield self.queue.get()

    def __enter__(self) -> "BatchLoader":
        return self.start()

    def __exit__(self, *exc):
        self.stop()
