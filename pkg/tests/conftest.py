import numpy as np
import pytest

from src.data import synth
from src.data.datasets import CaptionSet
from src.data.vocab import Vocabulary
from src.models.captioner import BIDIRECTIONAL, CAUSAL, Captioner
from src.numerics import set_default_dtype

TINY_ENCODER = {'image_size': 32, 'patch_size': 8, 'dim': 16, 'layers': 1, 'heads': 2}


def tiny_captioner(vocab, mode=BIDIRECTIONAL, seed=0, dropout=0.0, vocab_size=None, layers=1):
    decoder = {'vocab_size': vocab_size or vocab.size, 'max_len': synth.CAPTION_SLOTS, 'dim': 16,
               'layers': layers, 'heads': 2, 'self_attention_mode': mode, 'pad_id': vocab.pad_id,
               'mask_id': vocab.mask_id, 'bos_id': vocab.bos_id}
    return Captioner(encoder=dict(TINY_ENCODER, layers=layers), decoder=decoder, dropout=dropout, seed=seed)


@pytest.fixture(autouse=True)
def float64():
    set_default_dtype(64)
    yield
    set_default_dtype(32)


@pytest.fixture
def vocab():
    return Vocabulary()


@pytest.fixture
def model(vocab):
    return tiny_captioner(vocab).eval()


@pytest.fixture
def causal_model(vocab):
    return tiny_captioner(vocab, mode=CAUSAL).eval()


@pytest.fixture
def records(vocab):
    return [synth.make_record(i, 7, vocab) for i in range(40)]


@pytest.fixture
def corpus(records):
    return CaptionSet(records=records)


@pytest.fixture
def batch(records):
    return np.stack([r.image for r in records[:4]]), np.stack([r.caption for r in records[:4]])


@pytest.fixture
def corpus_dir(tmp_path, vocab):
    out = tmp_path / 'corpus'
    synth.write_corpus(str(out), 30, 3, vocab, progress=False)
    return str(out)
