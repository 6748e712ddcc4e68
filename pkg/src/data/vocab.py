import hashlib
import json
import logging

import numpy as np

logger = logging.getLogger(__name__)

PAD, MASK, BOS, EOS = '[PAD]', '[MASK]', '[BOS]', '[EOS]'
SPECIALS = (PAD, MASK, BOS, EOS)

COLORS = ('red', 'green', 'blue', 'yellow')
SHAPES = ('circle', 'square', 'triangle', 'cross')
FUNCTION_WORDS = ('a', '.', 'above', 'beside', 'and')
RELATIONS = ('above', 'beside', 'and')


class Vocabulary:
    """Closed word-level vocabulary; ids are positions in `words`."""

    def __init__(self, words=None):
        words = list(words) if words is not None else list(SPECIALS + FUNCTION_WORDS + COLORS + SHAPES)
        if len(set(words)) != len(words):
            raise ValueError('vocabulary words must be distinct')
        missing = [s for s in SPECIALS if s not in words]
        if missing:
            raise ValueError(f'vocabulary lacks special tokens {missing}')
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        self.pad_id = self.index[PAD]
        self.mask_id = self.index[MASK]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]

    def __len__(self):
        return len(self.words)

    @property
    def size(self):
        return len(self.words)

    @property
    def special_ids(self):
        return frozenset((self.pad_id, self.mask_id, self.bos_id, self.eos_id))

    def encode(self, words, length=None):
        try:
            ids = [self.index[w] for w in words]
        except KeyError as e:
            raise ValueError(f'word {e.args[0]!r} is not in the vocabulary') from None
        if length is not None:
            if len(ids) > length:
                raise ValueError(f'caption of {len(ids)} tokens does not fit {length} slots')
            ids = ids + [self.pad_id] * (length - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids, strip_pad=True):
        words = []
        for i in np.asarray(ids).tolist():
            if not 0 <= i < len(self.words):
                raise ValueError(f'token id {i} out of range [0, {len(self.words)})')
            if strip_pad and i == self.pad_id:
                continue
            words.append(self.words[i])
        return words

    def to_text(self, ids):
        return ' '.join(self.decode(ids))

    def strip(self, ids):
        """Drop pads (and bos/eos) from an id sequence."""
        drop = (self.pad_id, self.bos_id, self.eos_id)
        return [int(i) for i in np.asarray(ids).tolist() if i not in drop]

    def to_json(self):
        return {'words': self.words}

    @classmethod
    def from_json(cls, payload):
        return cls(payload['words'])

    def hash(self):
        blob = json.dumps(self.words, separators=(',', ':')).encode('utf-8')
        return hashlib.sha256(blob).hexdigest()[:16]
