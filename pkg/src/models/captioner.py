import logging
from dataclasses import asdict, dataclass

import numpy as np

from src.models.modules import (DecoderBlock, EncoderBlock, LayerNorm, Linear, Module, ModuleList,
                                causal_keep)
from src.models.utils import capture_init, trunc_normal
from src.numerics import Tensor, ops
from src.seeding import rng_stream

logger = logging.getLogger(__name__)

BIDIRECTIONAL = 'bidirectional'
CAUSAL = 'causal'
MODES = (BIDIRECTIONAL, CAUSAL)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 64
    layers: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f'image size {self.image_size} is not divisible by patch size {self.patch_size}')
        if self.dim % self.heads:
            raise ValueError(f'encoder dim {self.dim} is not divisible by {self.heads} heads')

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 17
    max_len: int = 16
    dim: int = 64
    layers: int = 4
    heads: int = 4
    self_attention_mode: str = BIDIRECTIONAL
    pad_id: int = 0
    mask_id: int = 1
    bos_id: int = 2

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f'decoder dim {self.dim} is not divisible by {self.heads} heads')
        if self.self_attention_mode not in MODES:
            raise ValueError(f'self_attention_mode must be one of {MODES}, got {self.self_attention_mode!r}')
        if not all(0 <= i < self.vocab_size for i in (self.mask_id, self.pad_id, self.bos_id)):
            raise ValueError(f'mask id {self.mask_id}, pad id {self.pad_id} and bos id {self.bos_id} need rows '
                             f'in a {self.vocab_size}-token embedding')


def patchify(images, patch_size):
    """(B, H, W, 3) -> (B, M, P*P*3), patches in row-major order."""
    B, H, W, C = images.shape
    P = patch_size
    x = images.reshape(B, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // P) * (W // P), P * P * C)


class Encoder(Module):
    def __init__(self, cfg, rng, dropout=0.0):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.dim, rng)
        self.param('pos_embed', trunc_normal(rng, (cfg.num_patches, cfg.dim)))
        self.blocks = ModuleList([EncoderBlock(cfg.dim, cfg.heads, rng, dropout) for _ in range(cfg.layers)])
        self.norm = LayerNorm(cfg.dim)

    def __call__(self, images, rng=None):
        x = ops.add(self.patch_embed(patchify(images, self.cfg.patch_size)), self.pos_embed)
        for block in self.blocks:
            x = block(x, rng)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, cfg, dim_visual, rng, dropout=0.0):
        super().__init__()
        self.cfg = cfg
        self.param('token_embed', trunc_normal(rng, (cfg.vocab_size, cfg.dim)))
        self.param('pos_embed', trunc_normal(rng, (cfg.max_len, cfg.dim)))
        self.blocks = ModuleList([DecoderBlock(cfg.dim, cfg.heads, dim_visual, rng, dropout)
                                  for _ in range(cfg.layers)])
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.vocab_size, rng)

    def keep_mask(self, tokens, mode):
        """(B, 1, N, N) boolean: keys that are not padding, and not in the future in causal mode."""
        B, N = tokens.shape
        keep = (tokens != self.cfg.pad_id)[:, None, None, :]
        if mode == CAUSAL:
            keep = keep & causal_keep(N)[None, None]
        return np.broadcast_to(keep, (B, 1, N, N))

    def shift_right(self, tokens):
        """[bos] + tokens[:-1]; row i of a causal pass then sees only tokens < i."""
        shifted = np.empty_like(tokens)
        shifted[:, 0] = self.cfg.bos_id
        shifted[:, 1:] = tokens[:, :-1]
        return shifted

    def __call__(self, tokens, visual, mode, visual_ablation=False, rng=None):
        N = tokens.shape[1]
        if mode == CAUSAL and N:
            tokens = self.shift_right(tokens)
        x = ops.embedding(self.token_embed, tokens)
        x = ops.add(x, ops.embedding(self.pos_embed, np.arange(N)))
        keep = self.keep_mask(tokens, mode)
        for block in self.blocks:
            x = block(x, visual, keep, visual_ablation, rng)
        return self.head(self.norm(x))


class Captioner(Module):
    """Patch-embedding vision encoder plus a text decoder with cross-attention.

    The decoder takes no time input: the same (tokens, visual features)
    always produce the same logits, whatever corruption level produced them.
    """

    @capture_init
    def __init__(self, encoder=None, decoder=None, dropout=0.0, seed=0):
        super().__init__()
        self.encoder_cfg = EncoderConfig(**(encoder or {}))
        self.decoder_cfg = DecoderConfig(**(decoder or {}))
        self.dropout = dropout
        rng = rng_stream(seed, 'init')
        self.encoder = Encoder(self.encoder_cfg, rng, dropout)
        self.decoder = Decoder(self.decoder_cfg, self.encoder_cfg.dim, rng, dropout)

    @property
    def mode(self):
        return self.decoder_cfg.self_attention_mode

    def config_dict(self):
        return {'encoder': asdict(self.encoder_cfg), 'decoder': asdict(self.decoder_cfg), 'dropout': self.dropout}

    def _check_images(self, images):
        images = np.asarray(images)
        S = self.encoder_cfg.image_size
        if images.shape[-3:] != (S, S, 3):
            raise ValueError(f'image must be ({S}, {S}, 3), got {images.shape}')
        if images.dtype == np.uint8:
            images = images / 255.0
        return images.astype(self.dtype, copy=False)

    def encode(self, images, rng=None):
        """(B, H, W, 3) or (H, W, 3) pixels in [0, 1] -> (B, M, d_v) or (M, d_v) visual features."""
        images = self._check_images(images)
        single = images.ndim == 3
        V = self.encoder(images[None] if single else images, rng)
        return ops.reshape(V, V.shape[1:]) if single else V

    def decode_logits(self, tokens, V, mode=None, visual_ablation=False, rng=None):
        """(B, N) or (N,) token ids and matching visual features -> (B, N, K) or (N, K) logits.

        In causal mode the logits at position i depend only on tokens < i and V:
        row i predicts token i.
        """
        mode = self.mode if mode is None else mode
        if mode not in MODES:
            raise ValueError(f'mode must be one of {MODES}, got {mode!r}')
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        if V.ndim == 2:
            V = ops.reshape(V, (1,) + V.shape)
        K, N_max = self.decoder_cfg.vocab_size, self.decoder_cfg.max_len
        if tokens.size and (tokens.min() < 0 or tokens.max() >= K):
            raise ValueError(f'token ids must lie in [0, {K}), got range [{tokens.min()}, {tokens.max()}]')
        if tokens.shape[1] > N_max:
            raise ValueError(f'sequence of {tokens.shape[1]} tokens exceeds max_len {N_max}')
        if V.shape[0] != tokens.shape[0]:
            raise ValueError(f'{tokens.shape[0]} token rows but {V.shape[0]} visual feature rows')
        logits = self.decoder(tokens, V, mode, visual_ablation, rng)
        return ops.reshape(logits, logits.shape[1:]) if single else logits


def pool_gap(V):
    """Global average pooling over the M visual positions (axis -2)."""
    if V.shape[-2] < 1:
        raise ValueError('pool_gap needs at least one visual position')
    return ops.mean(V, axis=-2)


def repeat_features(V, count):
    """Tile (M, d) or (1, M, d) features to (count, M, d) for inference-only batched decoding."""
    data = V.data if isinstance(V, Tensor) else np.asarray(V)
    if data.ndim == 2:
        data = data[None]
    return Tensor(np.broadcast_to(data, (count,) + data.shape[1:]))
