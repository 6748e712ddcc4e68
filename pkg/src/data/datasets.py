import logging

import numpy as np
from torch.utils.data import DataLoader, Dataset, Sampler

from src.data import synth
from src.seeding import rng_stream

logger = logging.getLogger(__name__)

TRAIN_FRACTION = 0.8


def split_indices(count, master_seed, train_fraction=TRAIN_FRACTION):
    """Seeded train/held-out split of range(count); both parts sorted."""
    order = rng_stream(master_seed, 'split').permutation(count)
    cut = int(round(train_fraction * count))
    return np.sort(order[:cut]), np.sort(order[cut:])


class CaptionSet(Dataset):
    """Records of a generated corpus, optionally restricted to `indices`."""

    def __init__(self, corpus_dir=None, records=None, indices=None):
        if records is None:
            if corpus_dir is None:
                raise ValueError('CaptionSet needs a corpus directory or a list of records')
            records = synth.load_records(corpus_dir)
        self.all_records = records
        self.indices = np.arange(len(records)) if indices is None else np.asarray(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        r = self.all_records[int(self.indices[i])]
        return r.image, r.caption, r.label, r.index

    def record(self, i):
        return self.all_records[int(self.indices[i])]

    def records(self):
        return [self.record(i) for i in range(len(self))]

    def subset(self, indices):
        return CaptionSet(records=self.all_records, indices=self.indices[np.asarray(indices, dtype=int)])

    def split(self, master_seed, train_fraction=TRAIN_FRACTION):
        train, held = split_indices(len(self), master_seed, train_fraction)
        return self.subset(train), self.subset(held)

    def arrays(self):
        """All images (uint8), captions and labels stacked."""
        if not len(self):
            raise ValueError('empty caption set')
        return collate([self[i] for i in range(len(self))])


def collate(items):
    images, captions, labels, indices = zip(*items)
    return {
        'images': np.stack(images),
        'captions': np.stack(captions),
        'labels': np.asarray(labels, dtype=np.int64),
        'indices': np.asarray(indices, dtype=np.int64),
    }


class StepBatchSampler(Sampler):
    """Batch indices addressed by step: batch s is drawn from the `batch` stream at counter s.

    Resuming at `start_step` yields exactly the batches an uninterrupted run would.
    """

    def __init__(self, num_items, batch_size, master_seed, total_steps, start_step=0):
        if num_items < 1:
            raise ValueError('cannot sample batches from an empty dataset')
        self.num_items = num_items
        self.batch_size = batch_size
        self.master_seed = master_seed
        self.total_steps = total_steps
        self.start_step = start_step

    def batch(self, step):
        rng = rng_stream(self.master_seed, 'batch', step)
        replace = self.num_items < self.batch_size
        return rng.choice(self.num_items, size=self.batch_size, replace=replace).tolist()

    def __iter__(self):
        for step in range(self.start_step, self.total_steps):
            yield self.batch(step)

    def __len__(self):
        return max(0, self.total_steps - self.start_step)


def loader(dataset, batch_size, master_seed, total_steps, start_step=0):
    sampler = StepBatchSampler(len(dataset), batch_size, master_seed, total_steps, start_step)
    return DataLoader(dataset, batch_sampler=sampler, collate_fn=collate, num_workers=0)
