"""
Tokenize Command

Builds the vocabulary from one or more UTF-8 text files and writes the data
directory the other commands read:
    <data>/vocab.json  <data>/train.bin  <data>/validation.bin
"""
from pathlib import Path
from typing import Optional, Tuple

from app.config import RunConfig
from logging_service import get_logger
from plaid.corpus import (PackedDataset, Vocabulary, build_vocab, load_packed, prepare_corpus,
                          save_packed)
from plaid.errors import InputError

logger = get_logger('plaid.cmd.tokenize')

VOCAB_FILE = 'vocab.json'
SPLIT_FILES = {'train': 'train.bin', 'validation': 'validation.bin'}


def load_vocab(data_dir: Path) -> Vocabulary:
    path = Path(data_dir) / VOCAB_FILE
    if not path.is_file():
        raise InputError(f"no vocabulary at {path}; run the tokenize command first")
    return Vocabulary.load(path)


def load_split(data_dir: Path, split: str, vocab: Vocabulary) -> Optional[PackedDataset]:
    path = Path(data_dir) / SPLIT_FILES[split]
    if not path.is_file():
        return None
    return load_packed(path, vocab.size)


def load_data(data_dir: Path) -> Tuple[Vocabulary, PackedDataset, Optional[PackedDataset]]:
    vocab = load_vocab(data_dir)
    train = load_split(data_dir, 'train', vocab)
    if train is None:
        raise InputError(f"no packed train split in {data_dir}")
    return vocab, train, load_split(data_dir, 'validation', vocab)


def run_tokenize(args, cfg: RunConfig) -> int:
    if not args.inputs:
        raise InputError("tokenize needs at least one corpus file")
    parts = []
    for name in args.inputs:
        path = Path(name)
        if not path.is_file():
            raise InputError(f"corpus file not found: {path}")
        parts.append(path.read_bytes())
    corpus = b'\n\n'.join(parts)

    out_dir = Path(cfg.paths.out or cfg.data.dir)
    vocab = build_vocab(corpus, cfg.data.vocab_size)
    train, validation = prepare_corpus(corpus, vocab, cfg.data.seq_len, cfg.data.val_frac)

    vocab.save(out_dir / VOCAB_FILE)
    save_packed(train, vocab.size, out_dir / SPLIT_FILES['train'])
    if validation is not None:
        save_packed(validation, vocab.size, out_dir / SPLIT_FILES['validation'])

    print(f"vocabulary: {vocab.size} tokens")
    print(f"train: {len(train)} x {train.seq_len} tokens ({train.dropped} dropped)")
    if validation is not None:
        print(f"validation: {len(validation)} x {validation.seq_len} tokens")
    print(f"wrote {out_dir}")
    return 0
