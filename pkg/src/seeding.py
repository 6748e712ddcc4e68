"""
Named random streams derived from one master seed.

Each consumer gets `SeedSequence(master, spawn_key=(stream_id, *counter))`.
Stream ids are fixed integers, so registering a new stream never shifts an
existing one, and a counter (step index, record index, replicate index)
addresses a sub-stream without consuming state from its siblings.
"""
import numpy as np

STREAMS = {
    'data': 0,
    'init': 1,
    'corruption': 2,
    'mc': 3,
    'batch': 4,
    'split': 5,
    'probe': 6,
    'dropout': 7,
    'sample': 8,
}


def seed_sequence(master_seed, name, *counter):
    if name not in STREAMS:
        raise ValueError(f'unknown seed stream {name!r}; known streams: {sorted(STREAMS)}')
    return np.random.SeedSequence(int(master_seed), spawn_key=(STREAMS[name],) + tuple(int(c) for c in counter))


def rng_stream(master_seed, name, *counter):
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, name, *counter)))


def derived_seed(master_seed, name, *counter):
    """A 32-bit integer seed for consumers that store a plain seed (e.g. scenes)."""
    return int(seed_sequence(master_seed, name, *counter).generate_state(1)[0])
