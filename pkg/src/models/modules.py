"""
Transformer building blocks on the numerics engine.

`Module` mirrors the parts of `torch.nn.Module` the captioner needs:
attribute-registered parameters and submodules, dotted parameter names in
registration order, state dicts of plain arrays, and a training flag that
gates dropout.
"""
import numpy as np

from src.models.utils import trunc_normal
from src.numerics import Tensor, default_dtype, ops

INIT_STD = 0.02


class Module:
    def __init__(self):
        object.__setattr__(self, '_parameters', {})
        object.__setattr__(self, '_modules', {})
        object.__setattr__(self, 'training', False)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def param(self, name, data):
        t = Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix=''):
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + '.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f'state dict mismatch: missing {missing}, unexpected {unexpected}')
        for name, value in state.items():
            if name not in params:
                continue
            value = np.asarray(value)
            if value.shape != params[name].shape:
                raise ValueError(f'{name}: checkpoint shape {value.shape} != parameter shape {params[name].shape}')
            params[name].data = value.astype(params[name].dtype, copy=True)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else default_dtype()

    def train(self, mode=True):
        object.__setattr__(self, 'training', mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, dim_in, dim_out, rng, bias=True):
        super().__init__()
        self.param('weight', trunc_normal(rng, (dim_in, dim_out), INIT_STD))
        self.use_bias = bias
        if bias:
            self.param('bias', np.zeros(dim_out))

    def __call__(self, x):
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.use_bias else y


class LayerNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.param('gain', np.ones(dim))
        self.param('bias', np.zeros(dim))

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias)


class Dropout:
    """Global-rate dropout; inactive unless the owner is training and an rng is supplied."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f'dropout rate must lie in [0, 1), got {rate}')
        self.rate = rate

    def __call__(self, x, owner, rng):
        if not owner.training or rng is None or self.rate == 0.0:
            return x
        return ops.dropout(x, self.rate, rng)


class MultiHeadAttention(Module):
    """Multi-head attention; keys/values may come from a different stream of width `dim_kv`."""

    def __init__(self, dim, heads, rng, dim_kv=None):
        super().__init__()
        assert dim % heads == 0, (dim, heads)
        dim_kv = dim if dim_kv is None else dim_kv
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim_kv, dim, rng)
        self.v = Linear(dim_kv, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x):
        B, N, _ = x.shape
        return ops.transpose(ops.reshape(x, (B, N, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x, context=None, keep=None):
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        y = ops.scaled_dot_product_attention(q, k, v, keep)
        B, _, N, _ = y.shape
        y = ops.reshape(ops.transpose(y, (0, 2, 1, 3)), (B, N, self.heads * self.head_dim))
        return self.o(y)


class MLP(Module):
    def __init__(self, dim, rng, expansion=4):
        super().__init__()
        self.fc1 = Linear(dim, expansion * dim, rng)
        self.fc2 = Linear(expansion * dim, dim, rng)

    def __call__(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class EncoderBlock(Module):
    def __init__(self, dim, heads, rng, dropout=0.0):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)
        self.drop = Dropout(dropout)

    def __call__(self, x, rng=None):
        x = ops.add(x, self.drop(self.attn(self.norm1(x)), self, rng))
        return ops.add(x, self.drop(self.mlp(self.norm2(x)), self, rng))


class DecoderBlock(Module):
    """Self-attention, then image-text cross-attention, then MLP; pre-norm residuals."""

    def __init__(self, dim, heads, dim_visual, rng, dropout=0.0):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, dim_kv=dim_visual)
        self.norm3 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)
        self.drop = Dropout(dropout)

    def __call__(self, x, visual, keep, visual_ablation=False, rng=None):
        x = ops.add(x, self.drop(self.self_attn(self.norm1(x), keep=keep), self, rng))
        if not visual_ablation:
            x = ops.add(x, self.drop(self.cross_attn(self.norm2(x), context=visual), self, rng))
        return ops.add(x, self.drop(self.mlp(self.norm3(x)), self, rng))


def causal_keep(n):
    return np.tril(np.ones((n, n), dtype=bool))
