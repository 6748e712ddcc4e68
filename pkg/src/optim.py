import logging
import math

import numpy as np

logger = logging.getLogger(__name__)

MOMENT_PREFIXES = ('optim.m.', 'optim.v.')


class AdamW:
    """Adam with decoupled weight decay over named numerics parameters.

    One-dimensional parameters (biases, layer-norm gains) are not decayed.
    """

    def __init__(self, named_params, lr=3e-4, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.1):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def decays(self, param):
        return param.ndim > 1

    def step(self, grads, lr=None):
        """Apply one update given gradients aligned with `named_params`."""
        lr = self.lr if lr is None else lr
        if len(grads) != len(self.named_params):
            raise ValueError(f'{len(grads)} gradients for {len(self.named_params)} parameters')
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for (name, p), g in zip(self.named_params, grads):
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decays(p):
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= (lr * update).astype(p.dtype, copy=False)

    def state_dict(self):
        state = {f'optim.m.{name}': m.copy() for name, m in self.m.items()}
        state.update({f'optim.v.{name}': v.copy() for name, v in self.v.items()})
        return state

    def load_state_dict(self, state, step_count):
        for name, _ in self.named_params:
            self.m[name] = np.array(state[f'optim.m.{name}'], dtype=self.m[name].dtype)
            self.v[name] = np.array(state[f'optim.v.{name}'], dtype=self.v[name].dtype)
        self.step_count = int(step_count)


def cosine_lr(step, total_steps, base_lr, warmup_steps=0, min_lr=0.0):
    """Linear warmup from 0 to `base_lr`, then a half-cosine down to `min_lr` at `total_steps`."""
    if warmup_steps > total_steps:
        raise ValueError(f'warmup ({warmup_steps}) exceeds total steps ({total_steps})')
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = min(1.0, (step - warmup_steps) / max(1, total_steps - warmup_steps))
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grads, max_norm):
    """Scale gradients so their global L2 norm is at most `max_norm`; returns (grads, norm before clipping)."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        grads = [g * scale for g in grads]
    return grads, norm
