import logging
import os

import numpy as np
from PIL import Image

from src.inference import InvariantViolation, caption_for
from src.utils import LogProgress, write_csv

logger = logging.getLogger(__name__)

SAMPLES_COLUMNS = ('index', 'length', 'caption', 'reference', 'image')
UPSCALE = 4


def save_image(pixels, filename, upscale=UPSCALE):
    img = Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode='RGB')
    if upscale > 1:
        img = img.resize((img.width * upscale, img.height * upscale), resample=Image.NEAREST)
    img.save(filename)


def sample(model, records, vocab, length, out_dir, write_images=True):
    """Caption every record; writes samples.csv and one PNG per image under `out_dir`.

    Returns the generated token id arrays in record order.
    """
    model.eval()
    os.makedirs(out_dir, exist_ok=True)
    rows, captions = [], []
    for record in LogProgress(logger, records, name='Generate captions'):
        ids = caption_for(model, record.image, vocab, length)
        if np.any(ids == vocab.mask_id):
            raise InvariantViolation(f'caption for record {record.index} still holds masks')
        filename = os.path.join(out_dir, f'{record.index:06d}.png')
        if write_images:
            save_image(record.image, filename)
        text = vocab.to_text(ids)
        logger.info('%06d: %s', record.index, text)
        rows.append([record.index, len(ids), text, vocab.to_text(record.caption),
                     os.path.basename(filename) if write_images else ''])
        captions.append(ids)
    write_csv(os.path.join(out_dir, 'samples.csv'), SAMPLES_COLUMNS, rows)
    return captions
