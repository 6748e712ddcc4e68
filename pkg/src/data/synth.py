"""
Procedural image-caption corpus.

Scenes place 1-3 coloured shapes on a 2x2 grid of 16x16 cells. Images,
captions, hard negatives and probe labels are all pure functions of the
scene, and the scene is a pure function of its seed.

Corpus directory layout:
    corpus.jsonl   one record per line, keys sorted, integers only:
                   {"caption": [...], "index": i, "label": c,
                    "negatives": {"replace": [...], "shuffle": [...], "swap": [...]},
                    "pixels": [r, g, b, r, g, b, ...], "seed": s}
    manifest.json  count, master seed, grammar version, image geometry, vocabulary hash
    vocab.json     {"words": [...]}, ids are list positions
"""
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from src.data.vocab import COLORS, SHAPES, Vocabulary
from src.seeding import derived_seed

logger = logging.getLogger(__name__)

GRAMMAR_VERSION = 1
IMAGE_SIZE = 32
CELL = 16
GRID = 2
MAX_OBJECTS = 3
CAPTION_SLOTS = 16
BACKGROUND = (16, 16, 16)
PALETTE = {
    'red': (230, 40, 40),
    'green': (40, 200, 60),
    'blue': (40, 80, 230),
    'yellow': (230, 220, 40),
}
NEGATIVE_KINDS = ('swap', 'replace', 'shuffle')
NUM_CLASSES = len(SHAPES) * len(COLORS)

CORPUS_FILE = 'corpus.jsonl'
MANIFEST_FILE = 'manifest.json'
VOCAB_FILE = 'vocab.json'


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int

    @property
    def row(self):
        return self.cell // GRID

    @property
    def col(self):
        return self.cell % GRID


@dataclass(frozen=True)
class Scene:
    objects: tuple
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f'scene must hold 1-{MAX_OBJECTS} objects, got {len(self.objects)}')
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError(f'objects share a cell: {cells}')
        if cells != sorted(cells):
            raise ValueError('objects must be listed in row-major cell order')
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or not 0 <= o.cell < GRID * GRID:
                raise ValueError(f'invalid scene object {o}')


def scene_rng(seed, purpose=0):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(purpose,))))


def gen_scene(rng, seed=0):
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = np.sort(rng.choice(GRID * GRID, size=count, replace=False))
    shapes = rng.integers(0, len(SHAPES), size=count)
    colors = rng.integers(0, len(COLORS), size=count)
    objects = tuple(SceneObject(SHAPES[s], COLORS[c], int(cell)) for s, c, cell in zip(shapes, colors, cells))
    return Scene(objects=objects, seed=int(seed))


def scene_from_seed(seed):
    return gen_scene(scene_rng(seed), seed=seed)


def _shape_mask(shape):
    # pixel centres in half-pixel units relative to the cell centre: odd values in [-15, 15]
    d = 2 * np.arange(CELL) + 1 - CELL
    dy, dx = np.meshgrid(d, d, indexing='ij')
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == 'circle':
        return dx * dx + dy * dy <= 144
    if shape == 'square':
        return (ax <= 10) & (ay <= 10)
    if shape == 'triangle':
        return (2 * ax <= dy + 12) & (dy <= 10)
    if shape == 'cross':
        return ((ax <= 3) & (ay <= 12)) | ((ay <= 3) & (ax <= 12))
    raise ValueError(f'unknown shape {shape!r}')


_MASKS = {shape: _shape_mask(shape) for shape in SHAPES}


def rasterize(scene):
    """uint8 (32, 32, 3) image, integer arithmetic only."""
    image = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    image[...] = BACKGROUND
    for o in scene.objects:
        y0, x0 = o.row * CELL, o.col * CELL
        region = image[y0:y0 + CELL, x0:x0 + CELL]
        region[_MASKS[o.shape]] = PALETTE[o.color]
    return image


def render(scene):
    """Float (32, 32, 3) image in [0, 1]."""
    return rasterize(scene).astype(np.float64) / 255.0


def relation(first, second):
    if first.row == second.row:
        return 'beside'
    if first.col == second.col:
        return 'above'
    return 'and'


def caption_words(scene):
    words = []
    for i, o in enumerate(scene.objects):
        if i:
            words.append(relation(scene.objects[i - 1], o))
        words += ['a', o.color, o.shape]
    words.append('.')
    return words


def caption_of(scene, vocab, length=CAPTION_SLOTS):
    return vocab.encode(caption_words(scene), length=length)


def parse_caption(words):
    """Inverse of the grammar: list of (color, shape) pairs and the relations between them.

    Raises ValueError on anything the grammar cannot emit.
    """
    words = list(words)
    if not words or words[-1] != '.':
        raise ValueError('caption must end with "."')
    body = words[:-1]
    objects, relations = [], []
    i = 0
    while True:
        if body[i:i + 1] != ['a'] or i + 3 > len(body):
            raise ValueError(f'expected "a <color> <shape>" at word {i} of {words}')
        color, shape = body[i + 1], body[i + 2]
        if color not in COLORS or shape not in SHAPES:
            raise ValueError(f'expected "a <color> <shape>" at word {i} of {words}')
        objects.append((color, shape))
        i += 3
        if i == len(body):
            break
        if body[i] not in ('above', 'beside', 'and'):
            raise ValueError(f'expected a relation at word {i} of {words}')
        relations.append(body[i])
        i += 1
    if len(objects) > MAX_OBJECTS:
        raise ValueError(f'caption names {len(objects)} objects, at most {MAX_OBJECTS} allowed')
    return objects, relations


def probe_label(scene):
    first = scene.objects[0]
    return SHAPES.index(first.shape) * len(COLORS) + COLORS.index(first.color)


def label_name(label):
    return f'{COLORS[label % len(COLORS)]} {SHAPES[label // len(COLORS)]}'


def _swap(scene):
    objs = scene.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            if objs[i].color != objs[j].color:
                swapped = list(objs)
                swapped[i] = SceneObject(objs[i].shape, objs[j].color, objs[i].cell)
                swapped[j] = SceneObject(objs[j].shape, objs[i].color, objs[j].cell)
                return caption_words(Scene(tuple(swapped), scene.seed))
    return None


def _replace(scene, rng):
    words = caption_words(scene)
    # attribute word positions: colour at 1 + 4k, shape at 2 + 4k
    slots = [(4 * k + 1, COLORS) for k in range(len(scene.objects))]
    slots += [(4 * k + 2, SHAPES) for k in range(len(scene.objects))]
    pos, domain = slots[int(rng.integers(len(slots)))]
    choices = [w for w in domain if w != words[pos]]
    words[pos] = choices[int(rng.integers(len(choices)))]
    return words


def _shuffle(words, rng, attempts=32):
    for _ in range(attempts):
        out = [words[i] for i in rng.permutation(len(words))]
        if out != words:
            return out
    # captions hold at least two distinct words, so this transposition changes it
    out = list(words)
    i = next(k for k in range(1, len(out)) if out[k] != out[0])
    out[0], out[i] = out[i], out[0]
    return out


def negative_words(scene, rng=None):
    rng = scene_rng(scene.seed, purpose=1) if rng is None else rng
    out = {}
    swapped = _swap(scene)
    if swapped is not None:
        out['swap'] = swapped
    out['replace'] = _replace(scene, rng)
    out['shuffle'] = _shuffle(caption_words(scene), rng)
    return out


def negatives(scene, vocab, length=CAPTION_SLOTS, rng=None):
    """{kind: token ids} for the kinds that exist for this scene."""
    return {kind: vocab.encode(words, length=length) for kind, words in negative_words(scene, rng).items()}


@dataclass
class Record:
    index: int
    seed: int
    image: np.ndarray       # uint8 (32, 32, 3)
    caption: np.ndarray     # int64 (16,)
    negatives: dict
    label: int

    def to_json(self):
        return {
            'index': int(self.index),
            'seed': int(self.seed),
            'pixels': self.image.reshape(-1).astype(int).tolist(),
            'caption': self.caption.astype(int).tolist(),
            'negatives': {k: v.astype(int).tolist() for k, v in self.negatives.items()},
            'label': int(self.label),
        }

    @classmethod
    def from_json(cls, payload):
        return cls(
            index=payload['index'],
            seed=payload['seed'],
            image=np.asarray(payload['pixels'], dtype=np.uint8).reshape(IMAGE_SIZE, IMAGE_SIZE, 3),
            caption=np.asarray(payload['caption'], dtype=np.int64),
            negatives={k: np.asarray(v, dtype=np.int64) for k, v in payload['negatives'].items()},
            label=payload['label'],
        )


def make_record(index, master_seed, vocab):
    seed = derived_seed(master_seed, 'data', index)
    scene = scene_from_seed(seed)
    return Record(index=index, seed=seed, image=rasterize(scene), caption=caption_of(scene, vocab),
                  negatives=negatives(scene, vocab), label=probe_label(scene))


def generate_records(count, master_seed, vocab):
    for index in range(count):
        yield make_record(index, master_seed, vocab)


def _dumps(payload):
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


def write_corpus(out_dir, count, master_seed, vocab=None, progress=True):
    """Write corpus, manifest and vocabulary sidecar; returns the written paths."""
    if count < 0:
        raise ValueError(f'record count must be non-negative, got {count}')
    vocab = vocab or Vocabulary()
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in (CORPUS_FILE, MANIFEST_FILE, VOCAB_FILE)}

    records = generate_records(count, master_seed, vocab)
    if progress:
        records = tqdm(records, total=count, desc='gen-data')
    with open(paths[CORPUS_FILE], 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(_dumps(record.to_json()) + '\n')

    manifest = {
        'count': int(count),
        'master_seed': int(master_seed),
        'grammar_version': GRAMMAR_VERSION,
        'image_size': IMAGE_SIZE,
        'caption_slots': CAPTION_SLOTS,
        'num_classes': NUM_CLASSES,
        'vocab_hash': vocab.hash(),
    }
    with open(paths[MANIFEST_FILE], 'w', encoding='utf-8', newline='\n') as f:
        f.write(_dumps(manifest) + '\n')
    with open(paths[VOCAB_FILE], 'w', encoding='utf-8', newline='\n') as f:
        f.write(_dumps(vocab.to_json()) + '\n')
    logger.info('wrote %d records to %s', count, out_dir)
    return paths


def load_manifest(corpus_dir):
    with open(os.path.join(corpus_dir, MANIFEST_FILE), encoding='utf-8') as f:
        return json.load(f)


def load_vocab(corpus_dir):
    with open(os.path.join(corpus_dir, VOCAB_FILE), encoding='utf-8') as f:
        return Vocabulary.from_json(json.load(f))


def load_records(corpus_dir):
    records = []
    with open(os.path.join(corpus_dir, CORPUS_FILE), encoding='utf-8') as f:
        for line in f:
            if line.strip():
                records.append(Record.from_json(json.loads(line)))
    return records
