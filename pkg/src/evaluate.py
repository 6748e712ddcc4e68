import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from src import diffusion
from src.data.datasets import split_indices
from src.data.synth import NEGATIVE_KINDS
from src.inference import caption_for
from src.metrics import accuracy, mean_caption_metrics
from src.models.captioner import CAUSAL, pool_gap
from src.numerics import Tape, Tensor, ops
from src.scoring import match_captions
from src.seeding import rng_stream
from src.utils import LogProgress, bold

logger = logging.getLogger(__name__)

T_GRID = (0.15, 0.3, 0.5, 0.7, 0.9, 1.0)
RANDOM_METHOD = 'random'
FEATURE_BATCH = 64


@dataclass
class ProbeConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    num_train: int
    num_test: int


@dataclass
class EvalReport:
    probe_accuracy: float = float('nan')
    matching: dict = field(default_factory=dict)
    masked: dict = field(default_factory=dict)
    caption: dict = field(default_factory=dict)
    method: str = ''

    def rows(self):
        """(task, key, value) rows for the CSV report."""
        out = [('probe', 'accuracy', self.probe_accuracy)]
        out += [('matching', f'{self.method}:{kind}', acc) for kind, acc in self.matching.items()]
        for t, accs in self.masked.items():
            out += [('masked_accuracy', f't={t!r}:{variant}', acc) for variant, acc in accs.items()]
        out += [('caption', key, value) for key, value in self.caption.items()]
        return out

    def summary(self):
        lines = [f'probe accuracy: {self.probe_accuracy:.4f}']
        for kind, acc in self.matching.items():
            lines.append(f'matching ({self.method}) {kind}: {acc:.4f}')
        for t, accs in self.masked.items():
            lines.append(f'masked accuracy t={t}: ' + ', '.join(f'{k} {v:.4f}' for k, v in accs.items()))
        for key, value in self.caption.items():
            lines.append(f'caption {key}: {value:.4f}')
        return '\n'.join(lines)


def extract_features(model, images, batch_size=FEATURE_BATCH, progress=False):
    """GAP features of the frozen encoder, (count, d_v)."""
    images = np.asarray(images)
    starts = range(0, len(images), batch_size)
    if progress:
        starts = tqdm(starts, desc='features')
    feats = [pool_gap(model.encode(images[lo:lo + batch_size])).data for lo in starts]
    if not feats:
        return np.zeros((0, model.encoder_cfg.dim))
    return np.concatenate(feats, axis=0).astype(np.float64)


def train_probe(train_x, train_y, num_classes, config):
    """Softmax regression by minibatch SGD; returns (weight, bias) arrays."""
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if len(np.unique(train_y)) < 2:
        raise ValueError('linear probe needs at least two classes in the training split')
    W = Tensor(np.zeros((train_x.shape[1], num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    for epoch in LogProgress(logger, range(config.epochs), updates=config.epochs, name='Probe',
                             level=logging.DEBUG):
        order = rng_stream(config.seed, 'probe', epoch).permutation(len(train_x))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            weights = np.full(len(idx), 1.0 / len(idx))
            with Tape() as tape:
                logits = ops.add(ops.matmul(Tensor(train_x[idx]), W), b)
                loss = ops.cross_entropy(logits, train_y[idx], weights)
            gW, gb = tape.gradient(loss, [W, b])
            W.data -= config.lr * gW
            b.data -= config.lr * gb
    return W.data, b.data


def probe_predict(x, weight, bias):
    return (np.asarray(x, dtype=np.float64) @ weight + bias).argmax(axis=-1)


def linear_probe_features(train_x, train_y, test_x, test_y, num_classes, config=None):
    config = config or ProbeConfig()
    weight, bias = train_probe(train_x, train_y, num_classes, config)
    result = ProbeResult(accuracy=accuracy(probe_predict(test_x, weight, bias), test_y),
                         train_accuracy=accuracy(probe_predict(train_x, weight, bias), train_y),
                         num_train=len(train_y), num_test=len(test_y))
    logger.info(bold(f'Probe | train accuracy {result.train_accuracy:.4f} | '
                     f'held-out accuracy {result.accuracy:.4f}'))
    return result


def linear_probe(model, corpus, config=None, num_classes=16, features=None):
    """Held-out accuracy of a linear classifier on frozen GAP features, seeded split of `corpus`.

    `features` replaces the encoder output when given (one row per record).
    """
    config = config or ProbeConfig()
    arrays = corpus.arrays()
    feats = extract_features(model, arrays['images'], progress=True) if features is None else np.asarray(features)
    train, test = split_indices(len(corpus), config.seed, config.train_fraction)
    labels = arrays['labels']
    return linear_probe_features(feats[train], labels[train], feats[test], labels[test], num_classes, config)


def masked_accuracy(model, corpus, vocab, t_grid=T_GRID, seed=0, batch_size=FEATURE_BATCH):
    """Argmax accuracy at masked positions per corruption level, with and without visual features."""
    if model.mode == CAUSAL:
        raise ValueError('masked accuracy needs a bidirectional checkpoint')
    arrays = corpus.arrays()
    captions, images = arrays['captions'], arrays['images']
    out = {}
    for k, t in enumerate(t_grid):
        rng = rng_stream(seed, 'mc', k)
        tokens, masked = diffusion.corrupt_batch(captions, np.full(len(captions), t), rng,
                                                 vocab.mask_id, vocab.pad_id)
        hits = {'visual': 0, 'ablated': 0}
        for lo in range(0, len(captions), batch_size):
            V = model.encode(images[lo:lo + batch_size])
            for variant, ablate in (('visual', False), ('ablated', True)):
                logits = model.decode_logits(tokens[lo:lo + batch_size], V, visual_ablation=ablate).data
                pred = logits.argmax(axis=-1)
                sel = masked[lo:lo + batch_size]
                hits[variant] += int((pred[sel] == captions[lo:lo + batch_size][sel]).sum())
        total = int(masked.sum())
        out[float(t)] = {v: (h / total if total else float('nan')) for v, h in hits.items()}
        logger.debug('masked accuracy t=%s: %s', t, out[float(t)])
    return out


@dataclass
class MatchResult:
    accuracy: dict
    decisions: dict


def compositionality_eval(model, records, vocab, method, samples=1024, seed=0, limit=None):
    """Fraction of (true, negative) pairs where the true caption wins, per negative kind.

    `method` is a scorer name or 'random' for the coin-flip baseline.
    """
    records = list(records)[:limit] if limit else list(records)
    correct, totals, decisions = defaultdict(int), defaultdict(int), {}
    for record in LogProgress(logger, records, updates=5, name=f'Matching {method}'):
        for k, kind in enumerate(NEGATIVE_KINDS):
            if kind not in record.negatives:
                continue
            rng = rng_stream(seed, 'mc', record.index, k)
            if method == RANDOM_METHOD:
                chosen = int(rng.integers(2))
            else:
                chosen, _ = match_captions(model, record.image, [record.caption, record.negatives[kind]], vocab,
                                           method, samples=samples, rng=rng)
            decisions[(record.index, kind)] = chosen
            correct[kind] += int(chosen == 0)
            totals[kind] += 1
    acc = {kind: correct[kind] / totals[kind] for kind in NEGATIVE_KINDS if totals[kind]}
    return MatchResult(accuracy=acc, decisions=decisions)


def decision_agreement(a, b):
    """Fraction of shared pairs on which two matching runs chose the same caption."""
    shared = sorted(set(a) & set(b))
    if not shared:
        return float('nan')
    return float(np.mean([a[k] == b[k] for k in shared]))


def generation_metrics(model, records, vocab, limit=None):
    """Exact match and token F1 of generated captions against references of the same length."""
    pairs = []
    for record in list(records)[:limit] if limit else records:
        reference = vocab.strip(record.caption)
        predicted = caption_for(model, record.image, vocab, len(reference))
        pairs.append((vocab.strip(predicted), reference))
    return mean_caption_metrics(pairs)


def evaluate(model, corpus, vocab, method, probe_config, samples=1024, seed=0, limit=None, t_grid=T_GRID,
             num_classes=16):
    """Full report: probe, masked-token accuracy curves, matching per negative kind, generation metrics."""
    _, held = corpus.split(seed, probe_config.train_fraction)
    held_records = held.records()
    report = EvalReport(method=method)
    report.probe_accuracy = linear_probe(model, corpus, probe_config, num_classes).accuracy
    if model.mode != CAUSAL:
        report.masked = masked_accuracy(model, held, vocab, t_grid, seed)
    report.matching = compositionality_eval(model, held_records, vocab, method, samples, seed, limit).accuracy
    report.caption = generation_metrics(model, held_records, vocab, limit)
    logger.info(bold('Evaluation summary\n' + report.summary()))
    return report