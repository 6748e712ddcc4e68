"""
Caption scoring and matching.

Four scorers, all on a log-probability scale (higher is better):
    arc         sum of next-token log-probabilities under a causal decoder
    elbo_mc     Monte-Carlo estimate of the masked-diffusion lower bound
    elbo_exact  the same bound by enumerating every masking subset (N <= 10)
    heuristic   N confidence-ordered unmasking steps scoring the ground truth

For a caption with N non-pad tokens the bound is
    sum_{n=1..N} E_{|S|=n} [ (1/n) sum_{i in S} log p(c_i | c with S masked, image) ]
with S uniform over size-n subsets of the caption positions.
"""
import itertools
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from src.inference import make_denoiser, pick_confident
from src.models.captioner import BIDIRECTIONAL, CAUSAL
from src.numerics.ops import log_softmax_array, softmax_array
from src.objectives import arc_sequences

logger = logging.getLogger(__name__)

ARC_METHOD, ELBO_MC, ELBO_EXACT, HEURISTIC = 'arc', 'elbo_mc', 'elbo_exact', 'heuristic'
METHODS = (ARC_METHOD, ELBO_MC, ELBO_EXACT, HEURISTIC)
DEFAULT_SAMPLES = 1024
EXACT_MAX_TOKENS = 10
# draws per masked count at least, so every term has a spread estimate
MIN_GROUP_DRAWS = 2


class CostGuardError(ValueError):
    pass


@dataclass
class ScoreReport:
    method: str
    value: float
    samples: int = 0
    contributions: list = field(default_factory=list)
    stderr: float = None
    forward_passes: int = 0
    elapsed_ms: float = 0.0


def _positions(caption, vocab):
    caption = np.asarray(caption)
    return np.flatnonzero(caption != vocab.pad_id)


def _require_mode(model, mode, method):
    if model.mode != mode:
        raise ValueError(f'{method} scoring needs a {mode} checkpoint, got {model.mode}')


def _features(model, image, V):
    return model.encode(image) if V is None else V


def _masked_logprobs(denoise, caption, configs, vocab):
    """log p(c_i | caption masked at config) at every caption position, one row per boolean config."""
    configs = np.asarray(configs, dtype=bool)
    tokens = np.where(configs, vocab.mask_id, caption[None, :])
    logp = log_softmax_array(np.asarray(denoise(tokens), dtype=np.float64))
    return np.take_along_axis(logp, caption[None, :, None], axis=-1)[..., 0]


def arc_loglik(model, caption, image=None, vocab=None, V=None, include_eos=False):
    """sum_i log p(c_i | c_<i, image) over the caption's non-pad tokens (and eos when asked)."""
    _require_mode(model, CAUSAL, ARC_METHOD)
    start = time.time()
    caption = np.asarray(caption)
    sequences, supervised = arc_sequences(caption[None], vocab)
    if not include_eos:
        L = len(_positions(caption, vocab))
        supervised[0, L] = False
    denoise = make_denoiser(model, _features(model, image, V), mode=CAUSAL)
    logp = log_softmax_array(np.asarray(denoise(sequences), dtype=np.float64))[0]
    picked = np.take_along_axis(logp, sequences[0][:, None], axis=-1)[:, 0]
    contributions = np.where(supervised[0], picked, 0.0)
    return ScoreReport(ARC_METHOD, float(contributions.sum()), contributions=contributions.tolist(),
                       forward_passes=1, elapsed_ms=1000 * (time.time() - start))


def elbo_exact(model, caption, image=None, vocab=None, V=None):
    _require_mode(model, BIDIRECTIONAL, ELBO_EXACT)
    start = time.time()
    caption = np.asarray(caption)
    pos = _positions(caption, vocab)
    L = len(pos)
    if L > EXACT_MAX_TOKENS:
        raise CostGuardError(f'elbo_exact enumerates 2^N - 1 subsets and is capped at N <= {EXACT_MAX_TOKENS}; '
                             f'caption has N = {L}')
    if L == 0:
        raise ValueError('cannot score an empty caption')
    subsets = [s for n in range(1, L + 1) for s in itertools.combinations(range(L), n)]
    configs = np.zeros((len(subsets), caption.shape[0]), dtype=bool)
    for row, s in enumerate(subsets):
        configs[row, pos[list(s)]] = True
    logp = _masked_logprobs(make_denoiser(model, _features(model, image, V)), caption, configs, vocab)

    contributions = np.zeros(caption.shape[0])
    for row, s in enumerate(subsets):
        n = len(s)
        contributions[pos[list(s)]] += logp[row, pos[list(s)]] / (n * math.comb(L, n))
    return ScoreReport(ELBO_EXACT, float(contributions.sum()), samples=len(subsets),
                       contributions=contributions.tolist(), forward_passes=len(subsets),
                       elapsed_ms=1000 * (time.time() - start))


def _uniform_subset(rng, pos, n, width):
    config = np.zeros(width, dtype=bool)
    config[rng.choice(pos, size=n, replace=False)] = True
    return config


def elbo_mc(model, caption, image=None, vocab=None, samples=DEFAULT_SAMPLES, rng=None, V=None):
    """Monte-Carlo estimate of the bound under the training corruption law.

    Each draw takes t ~ U[0, 1] and masks every caption token with probability
    t; draws are grouped by their masked count n and each group estimates
    the size-n term. Draws masking nothing are discarded. A group with fewer
    than MIN_GROUP_DRAWS draws is topped up with uniform size-n subsets,
    which is the conditional law of a draw given its count, so the estimate
    stays unbiased and every group contributes to the standard error.
    Identical configurations are decoded once.
    """
    _require_mode(model, BIDIRECTIONAL, ELBO_MC)
    if samples < 1:
        raise ValueError(f'elbo_mc needs at least one sample, got {samples}')
    start = time.time()
    caption = np.asarray(caption)
    pos = _positions(caption, vocab)
    L, width = len(pos), caption.shape[0]
    if L == 0:
        raise ValueError('cannot score an empty caption')

    t = rng.random(samples)
    u = rng.random((samples, L))
    drawn = u < t[:, None]
    groups = defaultdict(list)
    for row in drawn:
        n = int(row.sum())
        if n:
            config = np.zeros(width, dtype=bool)
            config[pos[row]] = True
            groups[n].append(config)
    for n in range(1, L + 1):
        while len(groups[n]) < MIN_GROUP_DRAWS:
            groups[n].append(_uniform_subset(rng, pos, n, width))

    unique = {}
    for n in range(1, L + 1):
        for config in groups[n]:
            unique.setdefault(config.tobytes(), config)
    keys = list(unique)
    logp = _masked_logprobs(make_denoiser(model, _features(model, image, V)), caption,
                            np.stack([unique[k] for k in keys]), vocab)
    row_of = {k: i for i, k in enumerate(keys)}

    value, variance = 0.0, 0.0
    contributions = np.zeros(width)
    used = 0
    for n in range(1, L + 1):
        counts = defaultdict(int)
        for config in groups[n]:
            counts[config.tobytes()] += 1
        total = sum(counts.values())
        used += total
        per_config = {k: float(logp[row_of[k]][unique[k]].sum()) / n for k in counts}
        if len(counts) == 1:
            (k,) = counts
            group_mean = per_config[k]
        else:
            group_mean = sum(c * per_config[k] for k, c in counts.items()) / total
        if total > 1:
            sq = sum(c * (per_config[k] - group_mean) ** 2 for k, c in counts.items())
            variance += sq / (total - 1) / total
        value += group_mean
        for k, c in counts.items():
            contributions[unique[k]] += (c / total) * logp[row_of[k]][unique[k]] / n
    return ScoreReport(ELBO_MC, value, samples=used, contributions=contributions.tolist(),
                       stderr=math.sqrt(variance), forward_passes=len(keys),
                       elapsed_ms=1000 * (time.time() - start))


def heuristic_score(model, caption, image=None, vocab=None, V=None):
    """N steps from fully masked: score the ground truth at the most confident masked position, then reveal it."""
    _require_mode(model, BIDIRECTIONAL, HEURISTIC)
    start = time.time()
    caption = np.asarray(caption)
    pos = _positions(caption, vocab)
    tokens = np.where(caption != vocab.pad_id, vocab.mask_id, caption)
    masked = caption != vocab.pad_id
    denoise = make_denoiser(model, _features(model, image, V))
    contributions = np.zeros(caption.shape[0])
    for _ in range(len(pos)):
        logits = np.asarray(denoise(tokens[None]), dtype=np.float64)[0]
        p, _, _ = pick_confident(softmax_array(logits), masked)
        contributions[p] = log_softmax_array(logits)[p, caption[p]]
        tokens[p] = caption[p]
        masked[p] = False
    return ScoreReport(HEURISTIC, float(contributions.sum()), contributions=contributions.tolist(),
                       forward_passes=len(pos), elapsed_ms=1000 * (time.time() - start))


def score(model, caption, image, vocab, method, samples=DEFAULT_SAMPLES, rng=None, V=None):
    if method == ARC_METHOD:
        return arc_loglik(model, caption, image, vocab, V=V)
    if method == ELBO_MC:
        return elbo_mc(model, caption, image, vocab, samples=samples, rng=rng, V=V)
    if method == ELBO_EXACT:
        return elbo_exact(model, caption, image, vocab, V=V)
    if method == HEURISTIC:
        return heuristic_score(model, caption, image, vocab, V=V)
    raise ValueError(f'unknown scoring method {method!r}; expected one of {METHODS}')


def best_index(values):
    """Argmax with ties to the lowest index."""
    if not len(values):
        raise ValueError('no candidates to choose from')
    return int(np.argmax(np.asarray(values, dtype=np.float64)))


def match_captions(model, image, candidates, vocab, method, samples=DEFAULT_SAMPLES, rng=None):
    """Index of the best-scoring candidate caption for `image`, plus every score report."""
    if not len(candidates):
        raise ValueError('match_captions needs at least one candidate')
    V = model.encode(image)
    reports = [score(model, c, image, vocab, method, samples=samples, rng=rng, V=V) for c in candidates]
    return best_index([r.value for r in reports]), reports
