import logging

import numpy as np

from src.numerics.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

# Gradients smaller than this are compared in absolute terms.
RELATIVE_ERROR_FLOOR = 1e-3


def relative_error(analytic, numeric, floor=RELATIVE_ERROR_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _evaluate(f):
    value = f()
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise ValueError(f'gradcheck: function value is not finite ({value})')
    return value


def gradcheck_tensors(f, tensors, epsilon=1e-6, coordinates=None):
    """Compare reverse-mode gradients of scalar `f()` with central differences.

    `f` takes no arguments and closes over `tensors`, whose data are perturbed
    in place and restored. `coordinates` is an optional list of
    (tensor_index, flat_index) pairs; by default every component is checked.
    Returns the worst relative error.
    """
    for t in tensors:
        # in-place perturbation below needs a flat view, not a copy
        t.data = np.ascontiguousarray(t.data)
    with Tape() as tape:
        out = f()
    _evaluate(lambda: out)
    analytic = tape.gradient(out, tensors)

    if coordinates is None:
        coordinates = [(i, j) for i, t in enumerate(tensors) for j in range(t.data.size)]

    worst = 0.0
    for i, j in coordinates:
        flat = tensors[i].data.reshape(-1)
        original = flat[j]
        flat[j] = original + epsilon
        plus = _evaluate(f)
        flat[j] = original - epsilon
        minus = _evaluate(f)
        flat[j] = original
        numeric = (plus - minus) / (2 * epsilon)
        err = float(relative_error(analytic[i].reshape(-1)[j], numeric))
        worst = max(worst, err)
    logger.debug('gradcheck over %d coordinates: worst relative error %.3e', len(coordinates), worst)
    return worst


def gradcheck(f, point, epsilon=1e-6):
    """Worst relative error between the reverse-mode and finite-difference gradient of f at point."""
    if not point.requires_grad:
        point.requires_grad = True
    if point.data.dtype != np.float64:
        logger.warning('gradcheck at %s precision; finite differences are unreliable below 64 bits',
                       point.data.dtype)
    return gradcheck_tensors(lambda: f(point), [point], epsilon=epsilon)


def random_coordinates(tensors, count, rng):
    """`count` distinct (tensor_index, flat_index) pairs drawn uniformly over all components."""
    sizes = np.array([t.data.size for t in tensors])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    coords = []
    for flat in np.sort(picks):
        i = int(np.searchsorted(offsets, flat, side='right') - 1)
        coords.append((i, int(flat - offsets[i])))
    return coords
