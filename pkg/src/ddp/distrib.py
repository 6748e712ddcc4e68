"""
Data-parallel gradient computation over worker threads.

The batch is cut into contiguous shards, one per worker. Each worker
records its shard on its own tape against the shared, read-only
parameters; shard losses and gradients are then summed in worker-index
order, so a given worker count always reduces in the same order.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from src.numerics import Tape
from src.seeding import rng_stream

logger = logging.getLogger(__name__)

THREADS_ENV = 'MDC_NUM_THREADS'


def num_workers():
    """Worker count from the environment; 1 when unset."""
    raw = os.environ.get(THREADS_ENV, '1')
    try:
        count = int(raw)
    except ValueError:
        raise ValueError(f'{THREADS_ENV} must be a positive integer, got {raw!r}') from None
    if count < 1:
        raise ValueError(f'{THREADS_ENV} must be a positive integer, got {count}')
    return count


def shard_bounds(size, workers):
    """Contiguous, non-empty (lo, hi) ranges covering range(size)."""
    workers = max(1, min(workers, size))
    edges = np.linspace(0, size, workers + 1).round().astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


def _shard_gradients(model, params, inputs, loss_fn, rng):
    with Tape() as tape:
        loss = loss_fn(model, inputs, rng)
    return loss.item(), tape.gradient(loss, params)


def compute_gradients(model, inputs, loss_fn, workers=None, dropout_seed=None):
    """Sum of `loss_fn` and of its parameter gradients over shards of `inputs`.

    `dropout_seed` is an optional (master_seed, step) pair; worker w then
    draws dropout masks from the `dropout` stream at counter (step, w).
    Returns (loss, [gradient per model.parameters() entry]).
    """
    workers = num_workers() if workers is None else workers
    params = model.parameters()
    bounds = shard_bounds(len(inputs), workers)

    def rng_for(w):
        if dropout_seed is None:
            return None
        master, step = dropout_seed
        return rng_stream(master, 'dropout', step, w)

    if len(bounds) == 1:
        results = [_shard_gradients(model, params, inputs, loss_fn, rng_for(0))]
    else:
        with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
            futures = [pool.submit(_shard_gradients, model, params, inputs.shard(lo, hi), loss_fn, rng_for(w))
                       for w, (lo, hi) in enumerate(bounds)]
            results = [f.result() for f in futures]

    loss, grads = results[0]
    grads = [g.copy() for g in grads]
    for shard_loss, shard_grads in results[1:]:
        loss += shard_loss
        for acc, g in zip(grads, shard_grads):
            acc += g
    logger.debug('reduced %d shard(s): loss %.6f', len(bounds), loss)
    return loss, grads
