"""Finite-difference checks of every primitive and of an end-to-end captioning loss, at 64-bit."""
import logging

import numpy as np

from src.numerics import ops
from src.numerics.gradcheck import gradcheck_tensors, random_coordinates
from src.numerics.tensor import Tensor, precision

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
MODEL_COORDINATES = 100


def _param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _unary(op):
    def build(rng):
        x = _param(rng, 2, 3, 5)
        proj = rng.standard_normal(x.shape)
        return (lambda: ops.sum(ops.mul(op(x), Tensor(proj)))), [x]
    return build


def _binary(op, b_shape):
    def build(rng):
        a, b = _param(rng, 2, 3, 4), _param(rng, *b_shape)
        proj = rng.standard_normal((2, 3, 4))
        return (lambda: ops.sum(ops.mul(op(a, b), Tensor(proj)))), [a, b]
    return build


def _matmul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    proj = rng.standard_normal((2, 3, 5))
    return (lambda: ops.sum(ops.mul(ops.matmul(a, b), Tensor(proj)))), [a, b]


def _layer_norm(rng):
    x, gain, bias = _param(rng, 3, 6), _param(rng, 6), _param(rng, 6)
    proj = rng.standard_normal((3, 6))
    return (lambda: ops.sum(ops.mul(ops.layer_norm(x, gain, bias), Tensor(proj)))), [x, gain, bias]


def _embedding(rng):
    w = _param(rng, 7, 4)
    ids = rng.integers(0, 7, size=(2, 5))
    proj = rng.standard_normal((2, 5, 4))
    return (lambda: ops.sum(ops.mul(ops.embedding(w, ids), Tensor(proj)))), [w]


def _cross_entropy(rng):
    logits = _param(rng, 2, 5, 6)
    targets = rng.integers(0, 6, size=(2, 5))
    weights = rng.random((2, 5))
    return (lambda: ops.cross_entropy(logits, targets, weights)), [logits]


def _reductions(rng):
    x = _param(rng, 3, 4, 5)
    proj = rng.standard_normal((3, 5))
    return (lambda: ops.add(ops.sum(ops.mul(ops.mean(x, axis=1), Tensor(proj))),
                            ops.scale(ops.sum(x), 0.5))), [x]


def _reshape_transpose(rng):
    x = _param(rng, 2, 3, 4)
    proj = rng.standard_normal((4, 6))
    return (lambda: ops.sum(ops.mul(ops.transpose(ops.reshape(x, (6, 4))), Tensor(proj)))), [x]


def _attention(rng):
    q, k, v = _param(rng, 2, 2, 4, 3), _param(rng, 2, 2, 5, 3), _param(rng, 2, 2, 5, 3)
    keep = rng.random((2, 1, 1, 5)) > 0.3
    keep[..., 0] = True
    proj = rng.standard_normal((2, 2, 4, 3))
    return (lambda: ops.sum(ops.mul(ops.scaled_dot_product_attention(q, k, v, keep), Tensor(proj)))), [q, k, v]


PRIMITIVES = {
    'add': _binary(ops.add, (4,)),
    'sub': _binary(ops.sub, (3, 4)),
    'mul': _binary(ops.mul, (2, 3, 4)),
    'scale': _unary(lambda x: ops.scale(x, -1.7)),
    'matmul': _matmul,
    'softmax': _unary(ops.softmax),
    'gelu': _unary(ops.gelu),
    'layer_norm': _layer_norm,
    'embedding': _embedding,
    'cross_entropy': _cross_entropy,
    'sum_mean': _reductions,
    'reshape_transpose': _reshape_transpose,
    'attention': _attention,
}


def mdc_loss_check(seed):
    """Build a tiny captioner and MDC loss inputs; returns (f, tensors, coordinates)."""
    from src.data import synth
    from src.data.vocab import Vocabulary
    from src.diffusion import NoiseSchedule
    from src.models.captioner import Captioner
    from src.objectives import loss_from_inputs, prepare_mdc
    from src.seeding import rng_stream

    vocab = Vocabulary()
    model = Captioner(encoder={'image_size': 32, 'patch_size': 8, 'dim': 8, 'layers': 1, 'heads': 2},
                      decoder={'vocab_size': vocab.size, 'max_len': synth.CAPTION_SLOTS, 'dim': 8, 'layers': 1,
                               'heads': 2, 'pad_id': vocab.pad_id, 'mask_id': vocab.mask_id},
                      seed=seed)
    records = [synth.make_record(i, seed, vocab) for i in range(2)]
    images = np.stack([r.image for r in records])
    captions = np.stack([r.caption for r in records])
    inputs = prepare_mdc(images, captions, rng_stream(seed, 'corruption', 0), NoiseSchedule(0.5, 1.0), vocab)
    params = model.parameters()
    coords = random_coordinates(params, MODEL_COORDINATES, np.random.default_rng(seed))
    return (lambda: loss_from_inputs(model, inputs)), params, coords


def run_checks(seeds=20, tolerance=TOLERANCE):
    """Worst relative error per (check, seed); raises nothing, callers compare against `tolerance`."""
    rows = []
    with precision(64):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            for name, build in PRIMITIVES.items():
                f, tensors = build(rng)
                rows.append((name, seed, gradcheck_tensors(f, tensors)))
            f, tensors, coords = mdc_loss_check(seed)
            rows.append(('mdc_loss', seed, gradcheck_tensors(f, tensors, coordinates=coords)))
    worst = max(err for _, _, err in rows) if rows else 0.0
    logger.info('gradcheck: %d checks, worst relative error %.3e (tolerance %.0e)', len(rows), worst, tolerance)
    return rows, worst
