import numpy as np
import pytest

from src.data import synth
from src.model_serializer import build_model, decode_checkpoint, encode_checkpoint, load_checkpoint, serialize
from src.models.captioner import CAUSAL, Captioner, pool_gap
from src.models.modules import Dropout, Module
from src.numerics import Tape, Tensor, ops
from src.optim import AdamW

from tests.conftest import tiny_captioner


def test_encoder_output_shape():
    model = Captioner()
    V = model.encode(np.zeros((32, 32, 3), dtype=np.uint8))
    assert V.shape == (64, 64)


def test_encode_deterministic_and_sensitive(model):
    zero = np.zeros((32, 32, 3), dtype=np.uint8)
    a, b = model.encode(zero), model.encode(zero)
    assert np.all(np.isfinite(a.data))
    np.testing.assert_array_equal(a.data, b.data)
    other = zero.copy()
    other[:8, :8] = 255
    assert not np.allclose(model.encode(other).data, a.data)


def test_encode_rejects_wrong_size(model):
    with pytest.raises(ValueError):
        model.encode(np.zeros((16, 16, 3)))


def test_decode_logits_shapes_and_errors(model, vocab, batch):
    images, captions = batch
    V = model.encode(images)
    assert model.decode_logits(captions, V).shape == (4, 16, vocab.size)
    assert model.decode_logits(captions[0], model.encode(images[0])).shape == (16, vocab.size)
    bad = captions.copy()
    bad[0, 0] = vocab.size
    with pytest.raises(ValueError):
        model.decode_logits(bad, V)
    with pytest.raises(ValueError):
        model.decode_logits(captions[:2], V)


def test_pool_gap():
    v = np.arange(4.0)
    np.testing.assert_allclose(pool_gap(Tensor(np.tile(v, (5, 1)))).data, v)
    a, b = np.array([1.0, 2.0]), np.array([3.0, 6.0])
    np.testing.assert_allclose(pool_gap(Tensor(np.stack([a, b]))).data, (a + b) / 2)


def test_uniform_init_gives_log_k_loss(vocab, batch):
    model = tiny_captioner(vocab, vocab_size=40)
    images, captions = batch
    logits = model.decode_logits(np.full_like(captions, vocab.mask_id), model.encode(images))
    weights = np.full(captions.shape, 1.0 / captions.size)
    loss = ops.cross_entropy(logits, captions, weights).item()
    assert abs(loss - np.log(40)) < 0.2


def test_causal_logits_ignore_current_and_future(causal_model, vocab, batch):
    images, captions = batch
    V = causal_model.encode(images[:1])
    base = causal_model.decode_logits(captions[:1], V).data
    for j in range(captions.shape[1]):
        changed = captions[:1].copy()
        changed[0, j] = vocab.index['red'] if changed[0, j] != vocab.index['red'] else vocab.index['blue']
        after = causal_model.decode_logits(changed, V).data
        np.testing.assert_array_equal(after[0, :j + 1], base[0, :j + 1], err_msg=f'position {j}')
        if j + 1 < captions.shape[1] and captions[0, j] != vocab.pad_id:
            assert not np.allclose(after[0, j + 1], base[0, j + 1])


def test_causal_first_position_sees_only_the_image(causal_model, vocab, batch):
    images, captions = batch
    V = causal_model.encode(images[:1])
    a = causal_model.decode_logits(captions[:1], V).data
    b = causal_model.decode_logits(np.full_like(captions[:1], vocab.index['red']), V).data
    np.testing.assert_array_equal(a[0, 0], b[0, 0])


def test_visual_ablation_drops_image_dependence(model, batch):
    images, captions = batch
    a = model.decode_logits(captions[:1], model.encode(images[:1]), visual_ablation=True).data
    b = model.decode_logits(captions[:1], model.encode(images[1:2]), visual_ablation=True).data
    np.testing.assert_allclose(a, b)


def test_pad_embedding_gets_zero_gradient(model, vocab, batch):
    images, captions = batch
    masked = captions != vocab.pad_id
    weights = masked / masked.sum()
    with Tape() as tape:
        logits = model.decode_logits(captions, model.encode(images))
        loss = ops.cross_entropy(logits, captions, weights)
    grad = tape.gradient(loss, [model.decoder.token_embed])[0]
    np.testing.assert_array_equal(grad[vocab.pad_id], 0.0)


def test_checkpoint_round_trip(tmp_path, model, batch):
    images, captions = batch
    optimizer = AdamW(model.named_parameters())
    path = tmp_path / 'ckpt.mdc'
    serialize(path, model, optimizer, {'step': 3})
    checkpoint = load_checkpoint(path)
    assert checkpoint.extra['step'] == 3
    clone = build_model(checkpoint).eval()
    assert clone.mode == model.mode
    V = model.encode(images)
    np.testing.assert_array_equal(model.decode_logits(captions, V).data,
                                  clone.decode_logits(captions, clone.encode(images)).data)
    assert set(checkpoint.optimizer_state()) == set(optimizer.state_dict())


def test_checkpoint_rejects_bad_magic(model):
    payload = encode_checkpoint(model)
    with pytest.raises(ValueError):
        decode_checkpoint(b'XX' + payload[2:])
    with pytest.raises(ValueError):
        decode_checkpoint(payload[:-8])


def test_causal_mode_survives_checkpoint(tmp_path, vocab):
    model = tiny_captioner(vocab, mode=CAUSAL)
    serialize(tmp_path / 'c.mdc', model)
    assert build_model(load_checkpoint(tmp_path / 'c.mdc')).mode == CAUSAL


def test_init_depends_only_on_seed(vocab):
    a, b = tiny_captioner(vocab, seed=4), tiny_captioner(vocab, seed=4)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)
    c = tiny_captioner(vocab, seed=5)
    assert not np.array_equal(a.decoder.token_embed.data, c.decoder.token_embed.data)


def test_caption_slots_match_decoder(model):
    assert model.decoder_cfg.max_len == synth.CAPTION_SLOTS


def test_dropout_only_active_in_training():
    owner = Module()
    drop = Dropout(0.5)
    x = Tensor(np.ones((4, 8)))
    assert drop(x, owner, np.random.default_rng(0)) is x
    owner.train()
    assert drop(x, owner, None) is x
    y = drop(x, owner, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        Dropout(1.0)
