"""Patch embedding, fixed sin-cos positions and pre-norm transformer stacks."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, concat, gelu, matmul, softmax
from .autodiff.nn import LayerNorm, Linear, Module
from .autodiff.tensor import _make
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 48
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    in_chans: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be a multiple of 4 for 2-d sin-cos positions")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid_size ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.in_chans

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "t-big": ViTConfig(embed_dim=128, depth=6, num_heads=4),
    "s-tiny": ViTConfig(embed_dim=48, depth=4, num_heads=4),
    "s-small": ViTConfig(embed_dim=64, depth=6, num_heads=4),
}


def preset(name):
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown encoder preset '{name}' (have {', '.join(PRESETS)})") from None


def block_param_count(dim, mlp_ratio):
    hidden = dim * mlp_ratio
    norms = 4 * dim
    attn = 4 * dim * dim + 4 * dim
    mlp = 2 * dim * hidden + hidden + dim
    return norms + attn + mlp


def encoder_param_count(cfg):
    """Closed-form parameter count of :class:`ViTEncoder` for ``cfg``."""
    d = cfg.embed_dim
    patch = cfg.patch_dim * d + d
    return patch + cfg.depth * block_param_count(d, cfg.mlp_ratio) + 2 * d


# -- positions --------------------------------------------------------------

def _sincos_1d(dim, pos):
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(np.asarray(pos, dtype=np.float64).ravel(), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_at(coords, dim):
    """Sin-cos embedding of continuous ``(row, col)`` coordinates in patch-grid units.

    Half the channels encode the column and half the row, as in MAE.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return np.concatenate([_sincos_1d(dim // 2, coords[:, 1]),
                           _sincos_1d(dim // 2, coords[:, 0])], axis=1)


def grid_positions(grid, dim):
    rr, cc = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return sincos_at(np.stack([rr.ravel(), cc.ravel()], axis=1), dim)


def pixel_to_grid(rows, cols, patch_size):
    """Map pixel coordinates to patch-grid coordinates (patch centres land on integers)."""
    rows = (np.asarray(rows, dtype=np.float64) + 0.5) / patch_size - 0.5
    cols = (np.asarray(cols, dtype=np.float64) + 0.5) / patch_size - 0.5
    return np.stack([rows, cols], axis=-1)


def extract_patches(images, patch_size):
    """``B x H x W x C`` pixels -> ``B x N x (p*p*C)`` row-major patches."""
    b, h, w, c = images.shape
    g, p = h // patch_size, patch_size
    x = images.reshape(b, g, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * (w // p), p * p * c)


def unpatchify(patches, patch_size, chans):
    b, n, _ = patches.shape
    g = int(round(np.sqrt(n)))
    p = patch_size
    x = patches.reshape(b, g, g, p, p, chans).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * p, g * p, chans)


# -- gathering tokens -------------------------------------------------------

def take_tokens(x, idx):
    """``x[b, idx[b, j]]`` for a ``B x N x D`` tensor and ``B x k`` index rows.

    Rows of ``idx`` must not repeat an index (a plan subset or a permutation),
    which lets the backward pass scatter without accumulation.
    """
    idx = np.asarray(idx)
    shape = x.shape
    sel = idx[:, :, None]
    out = np.take_along_axis(x.data, sel, axis=1)

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, sel, g, axis=1)
        return (full,)

    return _make(out, (x,), back)


@dataclass
class TokenBatch:
    tokens: Tensor
    positions: np.ndarray

    @property
    def num_tokens(self):
        return self.tokens.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.ndim == 1:
            idx = np.broadcast_to(idx, (self.tokens.shape[0], idx.size))
        return TokenBatch(take_tokens(self.tokens, idx), np.take_along_axis(self.positions, idx, axis=1))


# -- layers -------------------------------------------------------------------

class Attention(Module):
    def __init__(self, dim, num_heads, rng, kv_dim=None):
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        kv_dim = kv_dim or dim
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(kv_dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.num_heads = num_heads
        self.dim = dim

    def _split(self, x):
        b, n, _ = x.shape
        h = self.num_heads
        return x.reshape(b, n, h, self.dim // h).transpose(0, 2, 1, 3)

    def __call__(self, x, kv=None, bias=None, k_extra=None):
        """Multi-head attention; ``bias`` is added to the logits (``-inf`` masks).

        ``k_extra`` is added to keys only (positional encodings on the key side).
        """
        if kv is None:
            kv = x
        b, nq, _ = x.shape
        q = self._split(self.q(x))
        kvp = self.kv(kv)
        k_in = kvp[:, :, : self.dim]
        v_in = kvp[:, :, self.dim:]
        if k_extra is not None:
            k_in = k_in + k_extra
        k, v = self._split(k_in), self._split(v_in)
        scale = 1.0 / np.sqrt(self.dim // self.num_heads)
        logits = matmul(q, k.transpose(0, 1, 3, 2)) * scale
        if bias is not None:
            logits = logits + bias
        att = softmax(logits, axis=-1)
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, nq, self.dim)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim, hidden, rng, out_dim=None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block (self-attention + MLP, both residual)."""

    def __init__(self, dim, num_heads, mlp_ratio, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossBlock(Module):
    """Block whose queries attend to an external key/value set plus themselves."""

    def __init__(self, dim, num_heads, mlp_ratio, rng):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def __call__(self, x, context):
        kv = self.norm_kv(concat([context, x], axis=1))
        x = x + self.attn(self.norm_q(x), kv=kv)
        return x + self.mlp(self.norm2(x))


class PatchEmbed(Module):
    def __init__(self, cfg, rng):
        self.proj = Linear(cfg.patch_dim, cfg.embed_dim, rng)
        self._cfg = cfg
        self._pos = grid_positions(cfg.grid_size, cfg.embed_dim)

    def patchify(self, images):
        """Pixels (``H x W x C`` or ``B x H x W x C``) -> :class:`TokenBatch` of all N tokens."""
        cfg = self._cfg
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:3] != (cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"image of shape {images.shape[1:]} does not match configured size {cfg.image_size}")
        if images.shape[3] != cfg.in_chans:
            raise ConfigError(f"expected {cfg.in_chans} channels, got {images.shape[3]}")
        dtype = self.proj.weight.dtype
        patches = Tensor(extract_patches(images, cfg.patch_size), dtype=dtype)
        tokens = self.proj(patches) + Tensor(self._pos, dtype=dtype)
        b = images.shape[0]
        return TokenBatch(tokens, np.tile(np.arange(cfg.num_tokens), (b, 1)))


class ViTEncoder(Module):
    """Patch embedding followed by ``depth`` pre-norm blocks and a final norm.

    There is no class token; all consumers are dense.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.blocks = [Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim)

    @property
    def pos_embed(self):
        return self.patch_embed._pos

    def patchify(self, images):
        return self.patch_embed.patchify(images)

    def encode(self, tokens):
        if isinstance(tokens, TokenBatch):
            tokens = tokens.tokens
        if tokens.ndim != 3 or tokens.shape[1] == 0:
            raise ContractError("encode needs a non-empty B x k x D token subset")
        if tokens.shape[2] != self.cfg.embed_dim:
            raise DimensionError(
                f"token width {tokens.shape[2]} does not match embed_dim {self.cfg.embed_dim}")
        x = tokens
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def __call__(self, images, keep_idx=None):
        tb = self.patchify(images)
        if keep_idx is not None:
            tb = tb.subset(keep_idx)
        return self.encode(tb)
