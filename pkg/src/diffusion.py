"""
Closed-form masked diffusion: the linear survival schedule, forward corruption,
forward kernel, posterior and the weighted cross-entropy objective.

Sign convention: the objective is written as a positive weight 1/t multiplying
the cross-entropy; the negative weight alpha'(t)/(1 - alpha(t)) of the bound is
absorbed into the negative log-likelihood.
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.numerics import ops

logger = logging.getLogger(__name__)

LINEAR = 'linear'
# Below this the 1/t weight is considered unbounded for training windows.
MIN_TRAINING_OMEGA = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    omega_lower: float = 0.5
    omega_upper: float = 1.0
    family: str = LINEAR

    def __post_init__(self):
        if self.family != LINEAR:
            raise ValueError(f'unsupported schedule family {self.family!r}; only {LINEAR!r} is implemented')
        if not (0.0 <= self.omega_lower < 1.0 and 0.0 < self.omega_upper <= 1.0):
            raise ValueError(f'schedule window [{self.omega_lower}, {self.omega_upper}] must lie in [0, 1]')
        if not self.omega_lower < self.omega_upper:
            raise ValueError(f'omega_lower ({self.omega_lower}) must be below omega_upper ({self.omega_upper})')

    def validate_for_training(self, clamp=False, allow_small=False):
        """Reject (or clamp) windows reaching into the t -> 0 singularity of the weight.

        `allow_small` keeps a window with 0 < omega_lower < MIN_TRAINING_OMEGA as given.
        """
        if self.omega_lower >= MIN_TRAINING_OMEGA:
            return self
        if allow_small and self.omega_lower > 0.0:
            logger.warning('training with omega_lower=%s; expect large loss weights', self.omega_lower)
            return self
        if not clamp:
            raise ValueError(f'omega_lower={self.omega_lower} admits unbounded loss weights; '
                             f'use omega_lower >= {MIN_TRAINING_OMEGA} or enable clamping')
        logger.warning('clamping omega_lower %s -> %s', self.omega_lower, MIN_TRAINING_OMEGA)
        return NoiseSchedule(MIN_TRAINING_OMEGA, max(self.omega_upper, MIN_TRAINING_OMEGA * 2), self.family)


def _check_time(t, name='t'):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or np.any(np.isnan(t)):
        raise ValueError(f'{name} must lie in [0, 1], got {t}')
    return t


def alpha(t, sched=None):
    """Survival probability alpha(t) = 1 - t."""
    t = _check_time(t)
    return 1.0 - t


def alpha_prime(t, sched=None):
    _check_time(t)
    return -np.ones_like(np.asarray(t, dtype=np.float64))


def loss_weight(t, sched=None):
    """|alpha'(t)| / (1 - alpha(t)) = 1/t."""
    t = _check_time(t)
    if np.any(t <= 0.0):
        raise ValueError('loss weight is unbounded at t = 0')
    return -alpha_prime(t) / (1.0 - alpha(t))


def sample_time(rng, sched, size=None):
    """t uniform on [omega_lower, omega_upper]."""
    return rng.uniform(sched.omega_lower, sched.omega_upper, size=size)


@dataclass
class MaskedCaption:
    tokens: np.ndarray     # (N,) with mask_id at masked positions
    masked: np.ndarray     # (N,) bool, never true at pads
    t: float
    originals: np.ndarray  # token ids at the masked positions, in position order


def corrupt_batch(captions, t, rng, mask_id, pad_id):
    """Mask every non-pad position of row b independently with probability t[b].

    Draws one U[0,1) per position (the full (B, N) grid, pads included, so the
    stream does not depend on caption lengths) and masks where u < t.
    """
    captions = np.asarray(captions)
    if captions.ndim != 2:
        raise ValueError(f'captions must be (batch, length), got shape {captions.shape}')
    if np.any(captions == mask_id):
        raise ValueError('clean caption already contains the mask token')
    t = _check_time(np.broadcast_to(np.asarray(t, dtype=np.float64), (captions.shape[0],)))
    u = rng.random(captions.shape)
    masked = (u < t[:, None]) & (captions != pad_id)
    tokens = np.where(masked, mask_id, captions)
    return tokens, masked


def corrupt(caption, t, rng, mask_id, pad_id):
    tokens, masked = corrupt_batch(np.asarray(caption)[None], np.array([t]), rng, mask_id, pad_id)
    tokens, masked = tokens[0], masked[0]
    return MaskedCaption(tokens=tokens, masked=masked, t=float(t), originals=np.asarray(caption)[masked])


def _check_interval(r, t):
    r, t = _check_time(r, 'r'), _check_time(t)
    if np.any(r >= t):
        raise ValueError(f'forward kernel and posterior need r < t, got r={r}, t={t}')
    return r, t


def forward_kernel(is_mask, r, t, sched=None):
    """q(x_t | x_r) over {keep, mask}; returns (p_keep, p_mask)."""
    r, t = _check_interval(r, t)
    if is_mask:
        return 0.0, 1.0
    keep = float(alpha(t) / alpha(r))
    return keep, 1.0 - keep


def posterior(x_t, x_0, r, t, mask_id, sched=None):
    """q(x_r | x_t, x_0) as a {token_id: probability} map."""
    r, t = _check_interval(r, t)
    if x_t != mask_id:
        return {int(x_t): 1.0}
    a_r, a_t = float(alpha(r)), float(alpha(t))
    p_clean = (a_r - a_t) / (1.0 - a_t)
    p_mask = (1.0 - a_r) / (1.0 - a_t)
    if x_0 == mask_id:
        return {int(mask_id): p_clean + p_mask}
    return {int(x_0): p_clean, int(mask_id): p_mask}


def mdc_weights(masked, t, weighted=True, denominator=None):
    """Per-position cross-entropy weights for the masked objective.

    Each example averages over its own masked positions and carries weight 1/t
    (or 1 when `weighted` is False); examples are then averaged over
    `denominator` (the batch size by default). Examples without masked
    positions get all-zero weights.
    """
    masked = np.asarray(masked, dtype=bool)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    counts = masked.sum(axis=1)
    denominator = masked.shape[0] if denominator is None else denominator
    per_example = np.zeros(masked.shape[0])
    has_mask = counts > 0
    per_example[has_mask] = 1.0 / counts[has_mask]
    if weighted:
        per_example[has_mask] *= loss_weight(t[has_mask])
    return masked * (per_example / denominator)[:, None]


def mdc_loss(logits, targets, masked, t, weighted=True, denominator=None):
    """loss_weight(t) x mean NLL over masked non-pad positions, averaged over examples."""
    weights = mdc_weights(masked, t, weighted=weighted, denominator=denominator)
    return ops.cross_entropy(logits, np.where(masked, targets, 0), weights)
