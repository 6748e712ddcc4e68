import functools

import numpy as np


def capture_init(init):
    """capture_init.

    Decorate `__init__` with this, and you can then
    recover the *args and **kwargs passed to it in `self._init_args_kwargs`
    """

    @functools.wraps(init)
    def __init__(self, *args, **kwargs):
        self._init_args_kwargs = (args, kwargs)
        init(self, *args, **kwargs)

    return __init__


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) resampled until every draw lies within +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def get_network_description(model):
    n = sum(p.data.size for p in model.parameters())
    return f'{model.__class__.__name__}', n


def print_network(network_name, model, logger):
    name, n = get_network_description(model)
    logger.info('{} structure: {}, with parameters: {:,d}'.format(network_name, name, n))
