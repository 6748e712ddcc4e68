"""
Checkpoint files.

Layout:
    b'MDCKPT 1\\n'
    b'<header byte length>\\n'
    header: UTF-8 JSON {format_version, class, kwargs, tensors: [{name, shape, dtype, offset, nbytes}], extra}
    raw little-endian IEEE-754 tensor bytes in manifest order, offsets relative to the end of the header

Model tensors come first under their parameter names, then optimizer moments
under `optim.m.<name>` and `optim.v.<name>`.
"""
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.models.captioner import Captioner

logger = logging.getLogger(__name__)

MAGIC = b'MDCKPT'
FORMAT_VERSION = 1
MODEL_CLASSES = {'Captioner': Captioner}

SERIALIZE_KEY_CLASS = 'class'
SERIALIZE_KEY_KWARGS = 'kwargs'
SERIALIZE_KEY_TENSORS = 'tensors'
SERIALIZE_KEY_EXTRA = 'extra'
SERIALIZE_KEY_HISTORY = 'history'


@dataclass
class Checkpoint:
    header: dict
    tensors: dict

    @property
    def extra(self):
        return self.header[SERIALIZE_KEY_EXTRA]

    def model_state(self):
        return {k: v for k, v in self.tensors.items() if not k.startswith('optim.')}

    def optimizer_state(self):
        return {k: v for k, v in self.tensors.items() if k.startswith('optim.')}


def serialize_model(model):
    args, kwargs = model._init_args_kwargs
    if args:
        raise ValueError('models must be constructed with keyword arguments to be serialized')
    return {SERIALIZE_KEY_CLASS: model.__class__.__name__, SERIALIZE_KEY_KWARGS: kwargs}


def _little_endian(array):
    array = np.ascontiguousarray(array)
    return array.astype(array.dtype.newbyteorder('<'), copy=False)


def encode_checkpoint(model, optimizer=None, extra=None):
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
    manifest, blobs, offset = [], [], 0
    for name, array in tensors.items():
        array = _little_endian(array)
        blob = array.tobytes()
        manifest.append({'name': name, 'shape': list(array.shape), 'dtype': array.dtype.str,
                         'offset': offset, 'nbytes': len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {'format_version': FORMAT_VERSION, **serialize_model(model),
              SERIALIZE_KEY_TENSORS: manifest, SERIALIZE_KEY_EXTRA: extra or {}}
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    return b''.join([MAGIC, b' %d\n' % FORMAT_VERSION, b'%d\n' % len(header_bytes), header_bytes] + blobs)


def serialize(path, model, optimizer=None, extra=None):
    """Write a checkpoint atomically."""
    path = Path(path)
    tmp_path = str(path) + '.tmp'
    with open(tmp_path, 'wb') as f:
        f.write(encode_checkpoint(model, optimizer, extra))
    # renaming is sort of atomic on UNIX (not really true on NFS)
    # but still less chances of leaving a half written checkpoint behind.
    os.rename(tmp_path, path)
    logger.debug('checkpoint saved to %s', path.resolve())


def decode_checkpoint(payload):
    first, rest = payload.split(b'\n', 1)
    magic, _, version = first.partition(b' ')
    if magic != MAGIC:
        raise ValueError('not a checkpoint file (bad magic)')
    if int(version) != FORMAT_VERSION:
        raise ValueError(f'unsupported checkpoint format version {int(version)}, expected {FORMAT_VERSION}')
    length, rest = rest.split(b'\n', 1)
    length = int(length)
    header = json.loads(rest[:length].decode('utf-8'))
    data = rest[length:]
    tensors = {}
    for entry in header[SERIALIZE_KEY_TENSORS]:
        lo, hi = entry['offset'], entry['offset'] + entry['nbytes']
        if hi > len(data):
            raise ValueError(f'checkpoint truncated inside tensor {entry["name"]}')
        dtype = np.dtype(entry['dtype'])
        array = np.frombuffer(data[lo:hi], dtype=dtype).reshape(entry['shape'])
        tensors[entry['name']] = array.astype(dtype.newbyteorder('='), copy=True)
    return Checkpoint(header=header, tensors=tensors)


def load_checkpoint(path):
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())


def build_model(checkpoint):
    """Instantiate the checkpointed model class with its constructor kwargs and load its weights."""
    name = checkpoint.header[SERIALIZE_KEY_CLASS]
    if name not in MODEL_CLASSES:
        raise ValueError(f'unknown model class {name!r} in checkpoint')
    model = MODEL_CLASSES[name](**checkpoint.header[SERIALIZE_KEY_KWARGS])
    state = checkpoint.model_state()
    dtype = next(iter(state.values())).dtype if state else None
    if dtype is not None:
        model.astype(dtype)
    model.load_state_dict(state)
    return model
