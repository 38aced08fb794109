"""
Sample / Guide Commands

sample: unconditional ancestral sampling from a checkpoint.
guide:  the same sampler steered by token guidance given as
        --span "start:end:text" (end may be empty), --lexical "text",
        --negate (applies to every lexical term) or --spec FILE (JSON).
        Term weights are multiplied by --guidance-weight, which must be > 0.

Samples go to --out (default <run_dir>/samples.jsonl), one JSON document per
line, with a .meta.json sidecar holding seed, T, tau, spec and wallclock.
"""
import json
import time
from pathlib import Path
from typing import List

from app.checkpoint import load_checkpoint
from app.config import RunConfig
from logging_service import get_logger
from plaid.corpus import Vocabulary, decode_text, encode
from plaid.errors import ArgumentError, InputError, SpecError
from plaid.sampler import GuidanceSpec, GuidanceTerm, sample, write_samples

from .tokenize import load_vocab
from .train import checkpoint_path

logger = get_logger('plaid.cmd.sample')

SAMPLES_FILE = 'samples.jsonl'


def _tokens(text: str, vocab: Vocabulary) -> List[int]:
    ids = encode(text, vocab)
    if not ids:
        raise SpecError("guidance text encodes to no tokens")
    return ids


def parse_span(value: str, vocab: Vocabulary, weight: float = 1.0) -> GuidanceTerm:
    """'start:end:text' with end optional; text may itself contain ':'."""
    parts = value.split(':', 2)
    if len(parts) != 3:
        raise ArgumentError(f"--span expects start:end:text, got {value!r}")
    start_s, end_s, text = parts
    try:
        start = int(start_s)
        end = int(end_s) if end_s.strip() else None
    except ValueError as e:
        raise ArgumentError(f"--span positions must be integers: {value!r}") from e
    term = GuidanceTerm.span(start, _tokens(text, vocab), weight)
    if end is not None and end != term.end:
        raise SpecError(f"--span {value!r}: text covers [{start}, {term.end}), not [{start}, {end})")
    return term


def parse_lexical(value: str, vocab: Vocabulary, weight: float = 1.0,
                  negated: bool = False) -> GuidanceTerm:
    ids = _tokens(value, vocab)
    if len(ids) != 1:
        raise SpecError(f"--lexical {value!r} encodes to {len(ids)} tokens; it must be exactly one")
    return GuidanceTerm.lexical(ids[0], weight, negated)


def load_spec_file(path: Path, vocab: Vocabulary) -> GuidanceSpec:
    """JSON {"terms": [...]}; a term may give "text" instead of "tokens"."""
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise SpecError(f"cannot read guidance spec {path}: {e}") from e
    terms = []
    for raw in data.get('terms', []):
        raw = dict(raw)
        if 'text' in raw:
            raw['tokens'] = _tokens(raw.pop('text'), vocab)
            if raw.get('kind') == 'span':
                raw['end'] = raw.get('start', 0) + len(raw['tokens'])
        terms.append(raw)
    return GuidanceSpec.from_dict({'terms': terms})


def build_spec(args, vocab: Vocabulary) -> GuidanceSpec:
    spec = load_spec_file(args.spec, vocab) if getattr(args, 'spec', None) else GuidanceSpec()
    for value in getattr(args, 'span', None) or []:
        spec.terms.append(parse_span(value, vocab))
    for value in getattr(args, 'lexical', None) or []:
        spec.terms.append(parse_lexical(value, vocab, negated=bool(getattr(args, 'negate', False))))
    return spec


def _run(args, cfg: RunConfig, guided: bool) -> int:
    loaded = load_checkpoint(checkpoint_path(cfg))
    state = loaded.state
    vocab = loaded.vocab or load_vocab(Path(cfg.data.dir))
    spec = None
    sampler_cfg = cfg.sampler_config()
    if guided:
        spec = build_spec(args, vocab)
        if spec.empty:
            raise ArgumentError("guide needs at least one --span, --lexical or --spec term")
        # term weights are scaled by guidance_weight, so 0 would sample unguided
        if sampler_cfg.guidance_weight == 0.0:
            raise ArgumentError("guide needs --guidance-weight > 0 "
                                "(sample.guidance_weight is 0)")
    if sampler_cfg.seq_len > state.model.config.max_len:
        raise InputError(f"sample.seq_len {sampler_cfg.seq_len} exceeds model.max_len "
                         f"{state.model.config.max_len}")

    started = time.time()
    tokens = sample(state.model, state.schedule, state.table, sampler_cfg, spec,
                    anneal_step=state.anneal_step, progress=True)
    wallclock = time.time() - started

    records = [{'index': i, 'tokens': row, 'text': decode_text(row, vocab)}
               for i, row in enumerate(tokens.tolist())]
    out = Path(cfg.paths.out or Path(cfg.paths.run_dir) / SAMPLES_FILE)
    meta = {
        'seed': sampler_cfg.seed,
        'T': sampler_cfg.T,
        'tau': sampler_cfg.tau,
        'seq_len': sampler_cfg.seq_len,
        'num_samples': sampler_cfg.num_samples,
        'guidance_weight': sampler_cfg.guidance_weight,
        'spec': None if spec is None else spec.to_dict(),
        'checkpoint_step': state.step,
        'wallclock': wallclock,
    }
    write_samples(out, records, meta)
    for record in records:
        print(record['text'])
    return 0


def run_sample(args, cfg: RunConfig) -> int:
    return _run(args, cfg, guided=False)


def run_guide(args, cfg: RunConfig) -> int:
    return _run(args, cfg, guided=True)
