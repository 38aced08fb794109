"""
Run Configuration
Process defaults come from environment variables (and a .env file); per-run
values come from flat `section.key = value` files, `--set` overrides and
dedicated CLI flags, validated by pydantic.
"""
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError

from plaid.corpus import BASE_VOCAB_SIZE, DEFAULT_SEQ_LEN, VALIDATION_FRAC
from plaid.denoiser import DenoiserConfig
from plaid.errors import ConfigError
from plaid.sampler import SamplerConfig
from plaid.trainer import TrainConfig

# Load .env file
load_dotenv()


class Config:
    """Process-wide defaults from the environment"""

    LOG_DIR = os.path.expanduser(os.getenv('PLAID_LOG_DIR', '~/plaid_logs'))
    RUN_DIR = os.path.expanduser(os.getenv('PLAID_RUN_DIR', 'runs'))
    THREADS = int(os.getenv('PLAID_THREADS', '0'))  # 0 keeps torch's default

    @classmethod
    def apply_threads(cls):
        if cls.THREADS > 0:
            import torch
            torch.set_num_threads(cls.THREADS)


# ==================== Schema ====================

class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ModelSection(_Section):
    depth: int = 16
    width: int = 384
    heads: int = 6
    embed_dim: int = 16
    max_len: int = 256
    time_dim: int = 64
    mlp_ratio: int = 4
    dtype: Literal['float32', 'float64'] = 'float64'
    anneal_steps: int = 5000
    self_cond: bool = True
    output_prior: bool = True
    learned_likelihood: bool = True
    learn_embeddings: bool = True
    learn_schedule: bool = True
    gamma_0: float = -3.0
    gamma_1: float = 6.0
    interior_width: int = 16


class TrainSection(_Section):
    base_lr: float = 1.4e-3
    warmup_steps: int = 2500
    total_steps: int = 10000
    batch_size: int = 64
    truncate_frac: float = 0.03
    seed: int = 0
    wd_coeff: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    log_every: int = 100
    eval_every: int = 0
    checkpoint_every: int = 0


class SampleSection(_Section):
    T: int = 4096
    tau: float = 0.9
    seq_len: int = DEFAULT_SEQ_LEN
    seed: int = 0
    guidance_weight: float = 0.0
    num_samples: int = 1


class EvalSection(_Section):
    mc_draws: int = 1
    batch_size: int = 32
    seed: int = 0
    split: Literal['train', 'validation'] = 'validation'


class DataSection(_Section):
    dir: str = 'data'
    vocab_size: int = BASE_VOCAB_SIZE
    seq_len: int = DEFAULT_SEQ_LEN
    val_frac: float = VALIDATION_FRAC
    prefetch: int = 4


class PathsSection(_Section):
    run_dir: str = Config.RUN_DIR
    checkpoint: Optional[str] = None
    out: Optional[str] = None


class RunConfig(_Section):
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    sample: SampleSection = SampleSection()
    eval: EvalSection = EvalSection()
    data: DataSection = DataSection()
    paths: PathsSection = PathsSection()

    def denoiser_config(self, vocab_size: int) -> DenoiserConfig:
        return DenoiserConfig(vocab_size=vocab_size, **self.model.model_dump()).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(seq_len=self.data.seq_len, **self.train.model_dump()).validate()

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.sample.model_dump()).validate()

    def flat(self) -> Dict[str, Any]:
        """Effective config as a sorted {section.key: value} dict."""
        out = {}
        for section, values in self.model_dump().items():
            for key, value in values.items():
                out[f'{section}.{key}'] = value
        return dict(sorted(out.items()))


# ==================== Loading ====================

def _set_key(tree: Dict[str, Dict[str, Any]], dotted: str, value: Any, origin: str) -> None:
    section, sep, key = dotted.strip().partition('.')
    if not sep or not section or not key:
        raise ConfigError(f"{origin}: expected section.key, got {dotted!r}",
                          [f"{origin}: malformed key {dotted!r}"])
    tree.setdefault(section, {})[key] = value


def parse_config_text(text: str, origin: str = '<config>') -> Dict[str, Dict[str, Any]]:
    """Parse flat `section.key = value` lines; '#' starts a comment."""
    tree: Dict[str, Dict[str, Any]] = {}
    for line_num, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{origin}:{line_num}: expected key = value",
                              [f"{origin}:{line_num}: {raw.strip()!r}"])
        key, value = line.split('=', 1)
        _set_key(tree, key, value.strip(), f"{origin}:{line_num}")
    return tree


def _merge(base: Dict[str, Dict[str, Any]], extra: Dict[str, Dict[str, Any]]) -> None:
    for section, values in extra.items():
        base.setdefault(section, {}).update(values)


def load_run_config(path: Optional[str] = None,
                    overrides: Iterable[str] = (),
                    flag_overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """defaults < config file < --set key=value < dedicated flags."""
    tree: Dict[str, Dict[str, Any]] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}", [f"missing file {path}"])
        _merge(tree, parse_config_text(p.read_text(encoding='utf-8'), str(p)))

    for item in overrides or ():
        if '=' not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", [f"--set {item!r}"])
        key, value = item.split('=', 1)
        _set_key(tree, key, value.strip(), '--set')

    for key, value in (flag_overrides or {}).items():
        if value is not None:
            _set_key(tree, key, value, 'flag')

    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        diagnostics = [f"{'.'.join(str(x) for x in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(diagnostics), diagnostics) from e
