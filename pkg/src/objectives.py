"""
Training objectives.

Every objective is split in two stages. `prepare_*` draws all randomness for
the whole batch (times, masks) and returns a `LossInputs`; `loss_from_inputs`
is then a deterministic weighted cross-entropy that can be evaluated on any
contiguous shard of the batch. Per-position weights already carry the
per-example averaging and the 1/B batch average, so shard losses and shard
gradients simply add up.
"""
import logging
import math
import re
from dataclasses import dataclass, replace

import numpy as np

from src import diffusion
from src.ddp import distrib
from src.models.captioner import BIDIRECTIONAL, CAUSAL
from src.numerics import ops

logger = logging.getLogger(__name__)

MDC, ARC, BERT, PARALLEL, CMLM = 'mdc', 'arc', 'bert', 'parallel', 'cmlm'
VALID_FORMS = 'mdc | arc | bert:<ratio> | parallel | cmlm'
_BERT_RE = re.compile(r'^bert:(?P<ratio>[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)$')


@dataclass(frozen=True)
class Objective:
    kind: str
    ratio: float = None

    @property
    def attention_mode(self):
        return CAUSAL if self.kind == ARC else BIDIRECTIONAL

    @property
    def label(self):
        return f'{BERT}:{self.ratio:g}' if self.kind == BERT else self.kind

    @property
    def uses_schedule(self):
        return self.kind in (MDC, CMLM)


def parse_objective(text):
    text = str(text).strip().lower()
    if text in (MDC, ARC, CMLM):
        return Objective(text)
    if text == PARALLEL:
        return Objective(PARALLEL, 1.0)
    match = _BERT_RE.match(text)
    if match:
        ratio = float(match.group('ratio'))
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f'BERT masking ratio must lie in (0, 1], got {ratio}')
        return Objective(BERT, ratio)
    raise ValueError(f'invalid objective {text!r}; valid forms: {VALID_FORMS}')


@dataclass
class LossInputs:
    images: np.ndarray    # (B, H, W, 3)
    tokens: np.ndarray    # (B, N) decoder input
    targets: np.ndarray   # (B, N) supervised ids, 0 where unsupervised
    weights: np.ndarray   # (B, N) cross-entropy weights, batch average included
    mode: str
    t: np.ndarray = None  # (B,) corruption times, diffusion objectives only

    def __len__(self):
        return self.tokens.shape[0]

    def shard(self, lo, hi):
        return replace(self, images=self.images[lo:hi], tokens=self.tokens[lo:hi],
                       targets=self.targets[lo:hi], weights=self.weights[lo:hi],
                       t=None if self.t is None else self.t[lo:hi])


def prepare_mdc(images, captions, rng, sched, vocab, weighted=True, t=None):
    """Per-example t on the schedule window, independent masking at rate t, 1/t-weighted targets.

    Pass `t` to pin the corruption times (the rng then only draws masks).
    """
    captions = np.asarray(captions)
    B = captions.shape[0]
    t = diffusion.sample_time(rng, sched, size=B) if t is None else np.broadcast_to(np.asarray(t, float), (B,))
    tokens, masked = diffusion.corrupt_batch(captions, t, rng, vocab.mask_id, vocab.pad_id)
    weights = diffusion.mdc_weights(masked, t, weighted=weighted)
    return LossInputs(images=np.asarray(images), tokens=tokens, targets=np.where(masked, captions, 0),
                      weights=weights, mode=BIDIRECTIONAL, t=np.asarray(t, dtype=np.float64))


def bert_mask_count(ratio, length):
    """round-half-up(ratio * length)"""
    return int(math.floor(ratio * length + 0.5 + 1e-9))


def prepare_bert(images, captions, ratio, rng, vocab):
    """Mask exactly round(ratio * length) non-pad positions per example, uniformly without replacement."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f'BERT masking ratio must lie in (0, 1], got {ratio}')
    captions = np.asarray(captions)
    B = captions.shape[0]
    masked = np.zeros(captions.shape, dtype=bool)
    for b in range(B):
        positions = np.flatnonzero(captions[b] != vocab.pad_id)
        if positions.size == 0:
            logger.debug('example %d has no maskable positions, skipped', b)
            continue
        n = bert_mask_count(ratio, positions.size)
        masked[b, rng.choice(positions, size=n, replace=False)] = True
    tokens = np.where(masked, vocab.mask_id, captions)
    weights = diffusion.mdc_weights(masked, np.ones(B), weighted=False)
    return LossInputs(images=np.asarray(images), tokens=tokens, targets=np.where(masked, captions, 0),
                      weights=weights, mode=BIDIRECTIONAL)


def arc_sequences(captions, vocab):
    """Teacher-forcing sequences: caption + [eos], pads after.

    The causal decoder shifts bos in itself, so the same array is both the
    input and the target. Returns (sequences, supervised) where `supervised`
    covers the caption tokens and the eos, nothing past it.
    """
    captions = np.asarray(captions)
    B, N = captions.shape
    sequences = np.full((B, N), vocab.pad_id, dtype=captions.dtype)
    supervised = np.zeros((B, N), dtype=bool)
    for b in range(B):
        words = captions[b][captions[b] != vocab.pad_id]
        L = words.size
        if L + 1 > N:
            raise ValueError(f'caption of {L} tokens leaves no slot for eos in a {N}-slot window')
        sequences[b, :L] = words
        sequences[b, L] = vocab.eos_id
        supervised[b, :L + 1] = True
    return sequences, supervised


def prepare_arc(images, captions, vocab):
    sequences, supervised = arc_sequences(captions, vocab)
    weights = diffusion.mdc_weights(supervised, np.ones(len(sequences)), weighted=False)
    return LossInputs(images=np.asarray(images), tokens=sequences, targets=sequences, weights=weights, mode=CAUSAL)


def prepare(objective, images, captions, rng, sched, vocab):
    if objective.kind == MDC:
        return prepare_mdc(images, captions, rng, sched, vocab, weighted=True)
    if objective.kind == CMLM:
        return prepare_mdc(images, captions, rng, sched, vocab, weighted=False)
    if objective.kind in (BERT, PARALLEL):
        return prepare_bert(images, captions, objective.ratio, rng, vocab)
    if objective.kind == ARC:
        return prepare_arc(images, captions, vocab)
    raise ValueError(f'invalid objective {objective!r}; valid forms: {VALID_FORMS}')


def loss_from_inputs(model, inputs, rng=None):
    """Weighted cross-entropy of the decoder on `inputs`; a scalar Tensor."""
    V = model.encode(inputs.images, rng)
    logits = model.decode_logits(inputs.tokens, V, mode=inputs.mode, rng=rng)
    return ops.cross_entropy(logits, inputs.targets, inputs.weights)


@dataclass
class StepResult:
    loss: float
    grads: list
    inputs: LossInputs


def _run(model, inputs, workers, dropout_seed=None):
    loss, grads = distrib.compute_gradients(model, inputs, loss_from_inputs, workers=workers,
                                            dropout_seed=dropout_seed)
    return StepResult(loss=loss, grads=grads, inputs=inputs)


def mdc_step(model, images, captions, rng, sched, vocab, workers=None, dropout_seed=None):
    return _run(model, prepare_mdc(images, captions, rng, sched, vocab, weighted=True), workers, dropout_seed)


def cmlm_step(model, images, captions, rng, sched, vocab, workers=None, dropout_seed=None):
    return _run(model, prepare_mdc(images, captions, rng, sched, vocab, weighted=False), workers, dropout_seed)


def bert_step(model, images, captions, ratio, rng, vocab, workers=None, dropout_seed=None):
    return _run(model, prepare_bert(images, captions, ratio, rng, vocab), workers, dropout_seed)


def arc_step(model, images, captions, vocab, workers=None, dropout_seed=None):
    return _run(model, prepare_arc(images, captions, vocab), workers, dropout_seed)


def objective_step(objective, model, images, captions, rng, sched, vocab, workers=None, dropout_seed=None):
    return _run(model, prepare(objective, images, captions, rng, sched, vocab), workers, dropout_seed)
