"""
Caption generation.

Masked-diffusion captions are produced by confidence-based unmasking: start
from N' mask tokens, and on every iteration reveal the single still-masked
position whose most likely token has the highest probability, keeping every
revealed token fixed. Autoregressive checkpoints decode greedily left to right.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from src.models.captioner import CAUSAL, repeat_features
from src.numerics.ops import softmax_array

logger = logging.getLogger(__name__)

DECODE_CHUNK = 256


class InvariantViolation(RuntimeError):
    pass


def make_denoiser(model, V, mode=None, visual_ablation=False, chunk=DECODE_CHUNK):
    """Callable mapping (B, N) token ids to (B, N, K) logits, conditioned on the features V of one image."""

    def denoise(tokens):
        tokens = np.asarray(tokens)
        out = []
        for lo in range(0, tokens.shape[0], chunk):
            part = tokens[lo:lo + chunk]
            logits = model.decode_logits(part, repeat_features(V, part.shape[0]), mode=mode,
                                         visual_ablation=visual_ablation)
            out.append(logits.data)
        return np.concatenate(out, axis=0)

    return denoise


@dataclass
class DecodeState:
    tokens: np.ndarray
    revealed: np.ndarray
    step: int = 0
    confidence: np.ndarray = None
    order: list = field(default_factory=list)

    @classmethod
    def fully_masked(cls, length, mask_id):
        return cls(tokens=np.full(length, mask_id, dtype=np.int64), revealed=np.zeros(length, dtype=bool))

    def check(self, mask_id):
        if int(self.revealed.sum()) != self.step:
            raise InvariantViolation(f'{int(self.revealed.sum())} positions revealed after {self.step} steps')
        if np.any(self.tokens[self.revealed] == mask_id):
            raise InvariantViolation('a revealed position holds the mask token')
        if np.any(self.tokens[~self.revealed] != mask_id):
            raise InvariantViolation('an unrevealed position holds a token')


def pick_confident(probs, candidates, banned=()):
    """Most confident position among `candidates` and its argmax token.

    Confidence is the maximum probability over the vocabulary minus `banned`
    ids. Ties go to the lowest position (and the lowest token id).
    """
    probs = np.array(probs, copy=True)
    if banned:
        probs[:, list(banned)] = -np.inf
    best_token = probs.argmax(axis=-1)
    confidence = probs.max(axis=-1)
    masked_conf = np.where(candidates, confidence, -np.inf)
    pos = int(np.argmax(masked_conf))
    return pos, int(best_token[pos]), confidence


def generate(model=None, image=None, length=None, vocab=None, denoiser=None, mask_id=None, banned=None,
             trace=None):
    """Confidence-ordered unmasking of a length-`length` caption.

    Either give `model`, `image` and `vocab`, or an injected `denoiser`
    ((1, N) ids -> (1, N, K) logits) plus `mask_id`. Special tokens are never
    revealed. When `trace` is a list, a copy of the state after each step is
    appended to it.
    """
    if denoiser is None:
        N_max = model.decoder_cfg.max_len
        if length > N_max:
            raise ValueError(f'target length {length} exceeds max_len {N_max}')
        denoiser = make_denoiser(model, model.encode(image))
    if vocab is not None:
        mask_id = vocab.mask_id
        if banned is None:
            # rows past the word table exist only when decoder.vocab_size pads the embedding
            extra = range(vocab.size, model.decoder_cfg.vocab_size) if model is not None else ()
            banned = sorted(vocab.special_ids) + list(extra)
    banned = tuple(banned or (mask_id,))
    if length == 0:
        return np.zeros(0, dtype=np.int64)

    state = DecodeState.fully_masked(length, mask_id)
    for _ in range(length):
        probs = softmax_array(np.asarray(denoiser(state.tokens[None]), dtype=np.float64)[0])
        previous = state.tokens.copy()
        pos, token, confidence = pick_confident(probs, ~state.revealed, banned)
        if state.revealed[pos]:
            raise InvariantViolation(f'position {pos} revealed twice')
        state.tokens[pos] = token
        state.revealed[pos] = True
        state.step += 1
        state.confidence = np.where(state.revealed, np.nan, confidence)
        state.order.append(pos)
        if np.any(state.tokens[previous != mask_id] != previous[previous != mask_id]):
            raise InvariantViolation('a revealed token changed')
        state.check(mask_id)
        if trace is not None:
            trace.append(DecodeState(state.tokens.copy(), state.revealed.copy(), state.step,
                                     state.confidence.copy(), list(state.order)))
    if np.any(state.tokens == mask_id):
        raise InvariantViolation('generation finished with masked positions')
    return state.tokens


def generate_arc(model, image, vocab, max_len=None):
    """Greedy left-to-right decoding for causal checkpoints; returns caption ids without bos/eos."""
    if model.mode != CAUSAL:
        raise ValueError('autoregressive generation needs a causal checkpoint')
    N = model.decoder_cfg.max_len if max_len is None else max_len
    denoise = make_denoiser(model, model.encode(image), mode=CAUSAL)
    tokens = np.full(N, vocab.pad_id, dtype=np.int64)
    banned = [vocab.pad_id, vocab.mask_id, vocab.bos_id] + list(range(vocab.size, model.decoder_cfg.vocab_size))
    # the last slot is kept for eos
    for i in range(N - 1):
        logits = denoise(tokens[None])[0, i].copy()
        logits[banned] = -np.inf
        token = int(np.argmax(logits))
        if token == vocab.eos_id:
            return tokens[:i].copy()
        tokens[i] = token
    return tokens[:N - 1].copy()


def caption_for(model, image, vocab, length):
    """Dispatch on the checkpoint's self-attention mode."""
    if model.mode == CAUSAL:
        return generate_arc(model, image, vocab)
    return generate(model, image, length, vocab=vocab)
