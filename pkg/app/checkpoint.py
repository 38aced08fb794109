"""
Checkpoint container.

A single little-endian file:
    magic "PLDK" | u32 version | u32-prefixed JSON metadata | u32-counted tensor blocks
Each tensor block is name, dtype tag, shape and raw bytes. Metadata holds the
model/train configs, step, moment tracker, optimizer groups and vocabulary.
Saving the state loaded from a checkpoint reproduces the file byte for byte.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from construct import (Const, ConstructError, Enum, GreedyBytes, Int8ul, Int16ul,
                       Int32ul, Int64ul, PascalString, Prefixed, PrefixedArray, Struct)

from logging_service import get_logger
from plaid.corpus import Vocabulary
from plaid.denoiser import DenoiserConfig
from plaid.embedding import assert_distinct_rows
from plaid.errors import CheckpointError
from plaid.trainer import TrainConfig, TrainState, build_train_state

logger = get_logger('plaid.checkpoint')

MAGIC = b"PLDK"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: ('float32', np.float32),
    torch.float64: ('float64', np.float64),
    torch.int64: ('int64', np.int64),
    torch.int32: ('int32', np.int32),
    torch.uint8: ('uint8', np.uint8),
}
_BY_TAG = {tag: (tdtype, ndtype) for tdtype, (tag, ndtype) in _DTYPES.items()}

Prelude = Struct(
    "magic" / Const(MAGIC),
    "version" / Int32ul,
)

TensorBlock = Struct(
    "name" / PascalString(Int16ul, "utf8"),
    "dtype" / Enum(Int8ul, float32=0, float64=1, int64=2, int32=3, uint8=4),
    "shape" / PrefixedArray(Int8ul, Int64ul),
    "data" / Prefixed(Int64ul, GreedyBytes),
)

CheckpointFile = Struct(
    "magic" / Const(MAGIC),
    "version" / Int32ul,
    "meta" / PascalString(Int32ul, "utf8"),
    "tensors" / PrefixedArray(Int32ul, TensorBlock),
)


@dataclass
class LoadedCheckpoint:
    state: TrainState
    vocab: Optional[Vocabulary]
    meta: Dict


# ==================== Tensor (de)serialisation ====================

def _block(name: str, tensor: torch.Tensor) -> Dict:
    t = tensor.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        raise CheckpointError(f"cannot store tensor {name} of dtype {t.dtype}")
    tag, ndtype = _DTYPES[t.dtype]
    return dict(name=name, dtype=tag, shape=list(t.shape), data=t.numpy().astype(ndtype).tobytes())


def _tensor(block) -> torch.Tensor:
    tdtype, ndtype = _BY_TAG[str(block.dtype)]
    arr = np.frombuffer(block.data, dtype=ndtype).copy()
    return torch.from_numpy(arr).reshape(tuple(block.shape)).to(tdtype)


def _collect(state: TrainState) -> Tuple[List[Dict], Dict]:
    blocks = []
    for name, t in state.model.state_dict().items():
        blocks.append(_block(f"denoiser.{name}", t))
    blocks.append(_block("embedding.weight", state.table.weight))
    for name, t in state.schedule.state_dict().items():
        blocks.append(_block(f"schedule.{name}", t))

    opt = state.optimizer.state_dict()
    for idx in sorted(opt['state']):
        for key in sorted(opt['state'][idx]):
            value = opt['state'][idx][key]
            if not torch.is_tensor(value):
                value = torch.tensor(value, dtype=torch.float64)
            blocks.append(_block(f"optimizer.{idx}.{key}", value))
    blocks.append(_block("rng.state", state.generator.get_state()))

    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
              for g in opt['param_groups']]
    return blocks, groups


# ==================== Save / load ====================

def save_checkpoint(path: Union[str, Path], state: TrainState,
                    vocab: Optional[Vocabulary] = None) -> Path:
    """Write the full training state; rejects tables with duplicate rows."""
    assert_distinct_rows(state.table)
    blocks, groups = _collect(state)
    meta = {
        'model_config': state.model.config.to_dict(),
        'train_config': state.config.to_dict(),
        'step': state.step,
        'tracker': state.tracker.state_dict(),
        'optimizer_groups': groups,
        'vocab': None if vocab is None else vocab.to_dict(),
    }
    raw = CheckpointFile.build(dict(
        version=FORMAT_VERSION,
        meta=json.dumps(meta, sort_keys=True),
        tensors=blocks,
    ))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(raw)
    tmp.replace(path)
    logger.info(f"saved checkpoint at step {state.step} to {path} ({len(raw) / 1e6:.1f} MB)")
    return path


def load_checkpoint(path: Union[str, Path]) -> LoadedCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    try:
        prelude = Prelude.parse(raw)
    except ConstructError as e:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)") from e
    if prelude.version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {prelude.version} is not supported "
            f"(expected {FORMAT_VERSION})")
    try:
        parsed = CheckpointFile.parse(raw)
        meta = json.loads(parsed.meta)
    except (ConstructError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e

    model_config = DenoiserConfig.from_dict(meta['model_config'])
    train_config = TrainConfig(**meta['train_config']).validate()
    state = build_train_state(model_config, train_config)
    tensors = {block.name: _tensor(block) for block in parsed.tensors}

    def section(prefix: str) -> Dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    try:
        state.model.load_state_dict(section("denoiser."))
        state.schedule.load_state_dict(section("schedule."))
        with torch.no_grad():
            state.table.weight.copy_(tensors["embedding.weight"])
        opt_state: Dict[int, Dict[str, torch.Tensor]] = {}
        for key, value in section("optimizer.").items():
            idx, name = key.split('.', 1)
            opt_state.setdefault(int(idx), {})[name] = value
        state.optimizer.load_state_dict({'state': opt_state, 'param_groups': meta['optimizer_groups']})
        state.generator.set_state(tensors["rng.state"])
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"{path}: checkpoint does not match its config ({e})") from e

    state.tracker.load_state_dict(meta['tracker'])
    state.step = int(meta['step'])
    vocab = None if meta.get('vocab') is None else Vocabulary.from_dict(meta['vocab'])
    logger.info(f"loaded checkpoint {path} at step {state.step}")
    return LoadedCheckpoint(state=state, vocab=vocab, meta=meta)
