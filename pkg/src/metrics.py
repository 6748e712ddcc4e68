import logging
import math
from collections import Counter

import numpy as np

logger = logging.getLogger(__name__)


def caption_metrics(predicted, reference):
    """Exact sequence match and bag-of-tokens F1 of two pad-free token sequences."""
    predicted = [int(t) for t in predicted]
    reference = [int(t) for t in reference]
    if not reference:
        raise ValueError('caption_metrics needs a non-empty reference')
    exact = float(predicted == reference)
    if not predicted:
        return {'exact': exact, 'f1': 0.0}
    overlap = sum((Counter(predicted) & Counter(reference)).values())
    if overlap == 0:
        return {'exact': exact, 'f1': 0.0}
    precision = overlap / len(predicted)
    recall = overlap / len(reference)
    return {'exact': exact, 'f1': 2 * precision * recall / (precision + recall)}


def mean_caption_metrics(pairs):
    scores = [caption_metrics(p, r) for p, r in pairs]
    if not scores:
        return {'exact': float('nan'), 'f1': float('nan')}
    return {k: float(np.mean([s[k] for s in scores])) for k in ('exact', 'f1')}


def accuracy(predictions, labels):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.size == 0:
        return float('nan')
    return float(np.mean(predictions == labels))


def binomial_stderr(p, n):
    return math.sqrt(p * (1.0 - p) / n) if n else float('nan')
