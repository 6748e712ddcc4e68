import filecmp
import json
import os

import numpy as np
import pytest

from src.data import synth
from src.data.datasets import CaptionSet
from src.data.synth import Scene, SceneObject
from src.data.vocab import COLORS, SHAPES, Vocabulary


def test_vocabulary_layout(vocab):
    assert vocab.size == 17
    assert (vocab.pad_id, vocab.mask_id, vocab.bos_id, vocab.eos_id) == (0, 1, 2, 3)
    assert vocab.decode(vocab.encode('a red circle .'.split(), length=6)) == ['a', 'red', 'circle', '.']
    with pytest.raises(ValueError):
        vocab.encode(['purple'])
    with pytest.raises(ValueError):
        vocab.encode('a red circle .'.split(), length=3)
    assert Vocabulary.from_json(vocab.to_json()).hash() == vocab.hash()
    assert Vocabulary(list(reversed(vocab.words))).hash() != vocab.hash()


def test_scene_is_pure_function_of_seed():
    assert synth.scene_from_seed(123) == synth.scene_from_seed(123)
    np.testing.assert_array_equal(synth.rasterize(synth.scene_from_seed(123)),
                                  synth.rasterize(synth.scene_from_seed(123)))


def test_scene_validation():
    with pytest.raises(ValueError):
        Scene(objects=())
    with pytest.raises(ValueError):
        Scene(objects=(SceneObject('circle', 'red', 1), SceneObject('cross', 'blue', 1)))
    with pytest.raises(ValueError):
        Scene(objects=(SceneObject('circle', 'red', 2), SceneObject('cross', 'blue', 0)))


def test_caption_relations():
    scene = Scene(objects=(SceneObject('circle', 'red', 0), SceneObject('square', 'blue', 1),
                           SceneObject('cross', 'green', 3)))
    assert synth.caption_words(scene) == 'a red circle beside a blue square above a green cross .'.split()
    diagonal = Scene(objects=(SceneObject('triangle', 'yellow', 0), SceneObject('circle', 'red', 3)))
    assert synth.caption_words(diagonal) == 'a yellow triangle and a red circle .'.split()


def test_render_draws_palette_colours():
    scene = Scene(objects=(SceneObject('square', 'blue', 0),))
    image = synth.rasterize(scene)
    assert image.dtype == np.uint8 and image.shape == (32, 32, 3)
    assert tuple(image[8, 8]) == synth.PALETTE['blue']
    assert tuple(image[24, 24]) == synth.BACKGROUND
    assert synth.render(scene).max() <= 1.0


@pytest.mark.parametrize('seed', range(50))
def test_captions_parse_and_fit(seed, vocab):
    scene = synth.scene_from_seed(seed)
    words = synth.caption_words(scene)
    assert len(words) <= 12
    objects, relations = synth.parse_caption(words)
    assert objects == [(o.color, o.shape) for o in scene.objects]
    assert len(relations) == len(objects) - 1
    assert synth.caption_of(scene, vocab).shape == (synth.CAPTION_SLOTS,)


def test_parse_caption_rejects_ungrammatical():
    for text in ('a red circle', 'red circle .', 'a red red .', 'a red circle near a blue square .',
                 'a red circle and a red circle and a red circle and a red circle .'):
        with pytest.raises(ValueError):
            synth.parse_caption(text.split())


@pytest.mark.parametrize('seed', range(50))
def test_negatives_differ_and_stay_in_vocabulary(seed, vocab):
    scene = synth.scene_from_seed(seed)
    truth = synth.caption_words(scene)
    negs = synth.negative_words(scene)
    assert {'replace', 'shuffle'} <= set(negs)
    for kind, words in negs.items():
        assert words != truth, kind
        assert len(words) == len(truth)
        vocab.encode(words)
    assert sorted(negs['shuffle']) == sorted(truth)
    if 'swap' in negs:
        assert synth.parse_caption(negs['swap'])[0] != synth.parse_caption(truth)[0]
    assert negs == synth.negative_words(scene)


def test_swap_needs_two_colours():
    same = Scene(objects=(SceneObject('circle', 'red', 0), SceneObject('cross', 'red', 1)))
    assert 'swap' not in synth.negative_words(same)


def test_probe_label_range_and_names():
    labels = {synth.probe_label(synth.scene_from_seed(s)) for s in range(400)}
    assert labels <= set(range(synth.NUM_CLASSES))
    assert len(labels) == synth.NUM_CLASSES
    scene = Scene(objects=(SceneObject('triangle', 'green', 2),))
    assert synth.label_name(synth.probe_label(scene)) == 'green triangle'
    assert synth.NUM_CLASSES == len(SHAPES) * len(COLORS) == 16


def test_records_are_deterministic(vocab):
    a, b = synth.make_record(5, 11, vocab), synth.make_record(5, 11, vocab)
    assert a.to_json() == b.to_json()
    assert synth.make_record(6, 11, vocab).seed != a.seed
    assert synth.Record.from_json(a.to_json()).to_json() == a.to_json()


def test_corpus_files_byte_identical(tmp_path, vocab):
    first = synth.write_corpus(str(tmp_path / 'a'), 12, 4, vocab, progress=False)
    second = synth.write_corpus(str(tmp_path / 'b'), 12, 4, vocab, progress=False)
    for name in first:
        assert filecmp.cmp(first[name], second[name], shallow=False), name


def test_corpus_manifest_and_loading(corpus_dir, vocab):
    manifest = synth.load_manifest(corpus_dir)
    assert manifest['count'] == 30
    assert manifest['master_seed'] == 3
    assert manifest['vocab_hash'] == vocab.hash()
    assert synth.load_vocab(corpus_dir).hash() == vocab.hash()
    dataset = CaptionSet(corpus_dir)
    assert len(dataset) == 30
    image, caption, label, index = dataset[4]
    assert image.shape == (32, 32, 3) and caption.shape == (16,)
    assert index == 4 and 0 <= label < 16


def test_empty_corpus(tmp_path, vocab):
    paths = synth.write_corpus(str(tmp_path), 0, 1, vocab, progress=False)
    assert os.path.getsize(paths[synth.CORPUS_FILE]) == 0
    with open(paths[synth.MANIFEST_FILE]) as f:
        assert json.load(f)['count'] == 0
    with pytest.raises(ValueError):
        synth.write_corpus(str(tmp_path / 'neg'), -1, 1, vocab, progress=False)


@pytest.fixture(scope='module')
def many_scenes():
    return [synth.scene_from_seed(s) for s in range(10_000)]


def test_colour_frequencies_are_uniform(many_scenes):
    colours = [o.color for scene in many_scenes for o in scene.objects]
    sigma = np.sqrt(0.25 * 0.75 / len(colours))
    for colour in COLORS:
        assert abs(colours.count(colour) / len(colours) - 0.25) < 3 * sigma, colour


def test_probe_labels_are_uniform(many_scenes):
    counts = np.bincount([synth.probe_label(scene) for scene in many_scenes], minlength=synth.NUM_CLASSES)
    p = 1 / synth.NUM_CLASSES
    sigma = np.sqrt(p * (1 - p) / len(many_scenes))
    assert np.all(np.abs(counts / len(many_scenes) - p) < 4 * sigma)


def test_render_separates_distinct_scenes(many_scenes):
    rng = np.random.default_rng(0)
    images = {}
    checked = 0
    for a, b in rng.integers(0, len(many_scenes), size=(10_000, 2)):
        first, second = many_scenes[a], many_scenes[b]
        if first.objects == second.objects:
            continue
        for i in (a, b):
            if i not in images:
                images[i] = synth.rasterize(many_scenes[i])
        assert not np.array_equal(images[a], images[b]), (first, second)
        checked += 1
    assert checked > 9_000


def test_empty_cells_are_pure_background(many_scenes):
    for scene in many_scenes[:500]:
        image = synth.rasterize(scene)
        occupied = {o.cell for o in scene.objects}
        for cell in set(range(synth.GRID * synth.GRID)) - occupied:
            y0, x0 = (cell // synth.GRID) * synth.CELL, (cell % synth.GRID) * synth.CELL
            region = image[y0:y0 + synth.CELL, x0:x0 + synth.CELL]
            assert np.all(region == np.array(synth.BACKGROUND, dtype=np.uint8))
