"""Masked feature-reconstruction pretraining against a frozen teacher encoder.

The student encoder sees only the unmasked tokens. A cross-attention decoder
turns learned mask-token queries into features for the masked positions,
attending over the encoder outputs and the queries themselves. Encoder and
decoder outputs are concatenated, put back into patch order, mapped to the
teacher's width by a linear head and regressed onto the teacher's full-image
features over all N tokens.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, layer_norm, no_grad, sqrt, tsum
from .autodiff.nn import LayerNorm, Linear, Module, parameter, xavier_uniform
from .autodiff.optim import ScheduleConfig, lr_at
from .errors import ConfigError, ContractError, NumericError
from .vit import Block, CrossBlock, ViTConfig, ViTEncoder, block_param_count, take_tokens

log = logging.getLogger(__name__)

DECODE_MODES = ("masked-only", "all-tokens")
LOSS_KINDS = ("mse", "cosine")


# -- mask plans -------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    n_tokens: int
    ratio: float
    unmasked_idx: np.ndarray
    masked_idx: np.ndarray
    rng_seed: int

    @property
    def order(self):
        """Token index held by each slot of ``unmasked ++ masked``."""
        return np.concatenate([self.unmasked_idx, self.masked_idx])


def num_masked(n_tokens, ratio):
    """round(ratio * N), halves rounded up."""
    return int(math.floor(ratio * n_tokens + 0.5))


def make_mask_plan(n_tokens, ratio, rng):
    """Uniformly random split of ``range(n_tokens)`` into unmasked/masked sets.

    ``rng`` is a seed or a ``numpy.random.Generator``; in the latter case a
    seed is drawn from it so that the plan can be rebuilt from ``rng_seed``.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    if n_tokens < 1:
        raise ConfigError("a mask plan needs at least one token")
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2 ** 63 - 1))
    else:
        seed = int(rng)
    perm = np.random.default_rng(seed).permutation(n_tokens)
    k = num_masked(n_tokens, ratio)
    return MaskPlan(n_tokens, float(ratio), np.sort(perm[k:]), np.sort(perm[:k]), seed)


def _plan_rows(plans, attr):
    return np.stack([getattr(p, attr) for p in plans])


# -- teacher ------------------------------------------------------------------

class TeacherModel:
    """A frozen encoder whose full-image features are the reconstruction target."""

    def __init__(self, encoder, tag="teacher"):
        self.encoder = encoder.freeze()
        self.tag = tag

    @property
    def cfg(self):
        return self.encoder.cfg

    def param_hash(self):
        h = hashlib.sha256()
        for name, p in self.encoder.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def teacher_features(images, teacher):
    """f_teacher over all N tokens; the result carries no graph."""
    cfg = teacher.cfg
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:3] != (cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"image size {images.shape[1:3]} does not match teacher size {cfg.image_size}")
    with no_grad():
        feats = teacher.encoder(images)
    return feats.detach()


# -- decoder ------------------------------------------------------------------

class MaskedDecoder(Module):
    """Decoder producing features for masked slots.

    ``masked-only``: queries are mask tokens at the masked positions; keys and
    values are the encoder outputs plus the queries. Encoder outputs pass
    through untouched. ``all-tokens``: the MAE layout; the merged sequence goes
    through self-attention blocks and every slot is rewritten.
    """

    def __init__(self, dim, depth, num_heads, rng, mode="masked-only", mlp_ratio=4):
        if mode not in DECODE_MODES:
            raise ConfigError(f"unknown decode mode '{mode}' (have {', '.join(DECODE_MODES)})")
        self.mode = mode
        self.mask_token = parameter(rng.normal(0.0, 0.02, size=dim))
        block = CrossBlock if mode == "masked-only" else Block
        self.blocks = [block(dim, num_heads, mlp_ratio, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.dim = dim

    def masked_queries(self, pos_embed, plans):
        """Mask-token embedding plus the sin-cos position of each masked slot."""
        m_idx = _plan_rows(plans, "masked_idx")
        pos = Tensor(pos_embed[m_idx], dtype=self.mask_token.dtype)
        return self.mask_token + pos


def cross_attention_decode(masked_queries, encoder_out, plans, decoder):
    """Transform only the masked queries; output order follows each plan's masked_idx."""
    n_masked = len(plans[0].masked_idx)
    b = encoder_out.shape[0]
    if n_masked == 0:
        return Tensor(np.zeros((b, 0, decoder.dim)), dtype=encoder_out.dtype)
    if masked_queries.shape[1] != n_masked:
        raise ContractError(f"{masked_queries.shape[1]} queries for {n_masked} masked tokens")
    x = masked_queries
    for blk in decoder.blocks:
        x = blk(x, encoder_out)
    return decoder.norm(x)


def merge_and_reorder(encoder_out, decoder_out, plans):
    """Concatenate encoder and decoder features and restore patch order.

    Slot ``i`` of the result holds the encoder feature of token ``i`` when
    ``i`` is unmasked, else its decoder feature.
    """
    if isinstance(plans, MaskPlan):
        plans = [plans]
    nu, nm = len(plans[0].unmasked_idx), len(plans[0].masked_idx)
    if encoder_out.shape[1] != nu or decoder_out.shape[1] != nm:
        raise ContractError(
            f"plan has {nu} unmasked / {nm} masked tokens, got encoder {encoder_out.shape[1]}"
            f" and decoder {decoder_out.shape[1]} rows")
    if encoder_out.shape[0] != len(plans) and len(plans) != 1:
        raise ContractError(f"{len(plans)} plans for a batch of {encoder_out.shape[0]}")
    merged = concat([encoder_out, decoder_out], axis=1) if nm else encoder_out
    inv = np.stack([np.argsort(p.order) for p in plans])
    if inv.shape[0] != merged.shape[0]:
        inv = np.broadcast_to(inv, (merged.shape[0], inv.shape[1]))
    return take_tokens(merged, inv)


def decode_all_tokens(encoder_out, plans, decoder, pos_embed):
    """MAE-style decoding: merged sequence (mask tokens at M) through every block."""
    b = encoder_out.shape[0]
    nm = len(plans[0].masked_idx)
    mask_rows = decoder.mask_token + Tensor(np.zeros((b, nm, decoder.dim)), dtype=encoder_out.dtype)
    x = merge_and_reorder(encoder_out, mask_rows, plans)
    x = x + Tensor(pos_embed, dtype=x.dtype)
    for blk in decoder.blocks:
        x = blk(x)
    return decoder.norm(x)


# -- projection head and loss -----------------------------------------------

class ProjectionHead(Module):
    def __init__(self, in_dim, out_dim, rng):
        self.weight = parameter(xavier_uniform(rng, in_dim, out_dim))
        self.bias = parameter(np.zeros(out_dim))

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


def project(features, head):
    if features.shape[-1] != head.in_dim:
        raise ConfigError(
            f"feature width {features.shape[-1]} does not match projection input {head.in_dim}")
    return features @ head.weight + head.bias


def reconstruction_loss(student_out, target, kind="mse"):
    """Per-token reconstruction error averaged over tokens and batch.

    ``mse``: squared l2 norm of each token's difference vector.
    ``cosine``: one minus the cosine similarity of each token pair.
    """
    if student_out.shape != target.shape:
        raise ContractError(f"loss inputs differ in shape: {student_out.shape} vs {target.shape}")
    if student_out.ndim == 2:
        n_rows = student_out.shape[0]
    else:
        n_rows = int(np.prod(student_out.shape[:-1]))
    if kind == "mse":
        d = student_out - target
        return tsum(d * d) * (1.0 / n_rows)
    if kind == "cosine":
        dot = tsum(student_out * target, axis=-1)
        ns = sqrt(tsum(student_out * student_out, axis=-1) + 1e-12)
        nt = sqrt(tsum(target * target, axis=-1) + 1e-12)
        return tsum(1.0 - dot / (ns * nt)) * (1.0 / n_rows)
    raise ConfigError(f"unknown loss kind '{kind}' (have {', '.join(LOSS_KINDS)})")


# -- assembled model -------------------------------------------------------------

class SAMIModel(Module):
    """Student encoder + masked decoder + linear head (the trainable side)."""

    def __init__(self, student_cfg, teacher_dim, rng, decoder_depth=2, decoder_heads=4,
                 decode_mode="masked-only"):
        self.encoder = ViTEncoder(student_cfg, rng)
        self.decoder = MaskedDecoder(student_cfg.embed_dim, decoder_depth, decoder_heads, rng,
                                     mode=decode_mode)
        self.head = ProjectionHead(student_cfg.embed_dim, teacher_dim, rng)
        self.cfg = student_cfg

    @property
    def decode_mode(self):
        return self.decoder.mode

    def __call__(self, images, plans):
        tb = self.encoder.patchify(images)
        keep = _plan_rows(plans, "unmasked_idx")
        if keep.shape[1] == 0:
            raise ContractError("mask plan leaves no token for the encoder")
        enc = self.encoder.encode(tb.subset(keep))
        pos = self.encoder.pos_embed
        if self.decoder.mode == "all-tokens":
            merged = decode_all_tokens(enc, plans, self.decoder, pos)
        else:
            queries = self.decoder.masked_queries(pos, plans)
            dec = cross_attention_decode(queries, enc, plans, self.decoder)
            merged = merge_and_reorder(enc, dec, plans)
        return project(merged, self.head)


def sami_param_count(student_cfg, teacher_dim, decoder_depth, decode_mode="masked-only"):
    d = student_cfg.embed_dim
    from .vit import encoder_param_count

    per_block = block_param_count(d, student_cfg.mlp_ratio)
    if decode_mode == "masked-only":
        per_block += 2 * d
    decoder = d + decoder_depth * per_block + 2 * d
    return encoder_param_count(student_cfg) + decoder + d * teacher_dim + teacher_dim


def normalize_tokens(x):
    d = x.shape[-1]
    return layer_norm(x, Tensor(np.ones(d), dtype=x.dtype), Tensor(np.zeros(d), dtype=x.dtype), 1e-6)


def pretrain_step(images, model, target, plan_rng, optimizer, lr, mask_ratio=0.75,
                  loss_kind="mse", step=None):
    """One forward/backward/AdamW update. Returns the loss as a float.

    ``target`` holds the teacher features for ``images`` (see
    :func:`teacher_features`); a fresh mask plan is drawn per image.
    """
    n = model.cfg.num_tokens
    plans = [make_mask_plan(n, mask_ratio, plan_rng) for _ in range(len(images))]
    optimizer.zero_grad()
    pred = model(images, plans)
    loss = reconstruction_loss(pred, target, loss_kind)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step} (lr={lr:.3g})")
    loss.backward()
    gnorm = optimizer.grad_norm()
    if not math.isfinite(gnorm):
        raise NumericError(
            f"non-finite gradient at step {step} (lr={lr:.3g}, grad-norm={gnorm}, loss={value:.4g})")
    optimizer.step(lr)
    return value


@dataclass
class PretrainConfig:
    encoder: str = "s-tiny"
    mask_ratio: float = 0.75
    loss: str = "mse"
    decode: str = "masked-only"
    decoder_depth: int = 2
    decoder_heads: int = 4
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    normalize_target: bool = False
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss '{self.loss}' (have {', '.join(LOSS_KINDS)})")
        if self.decode not in DECODE_MODES:
            raise ConfigError(f"unknown decode mode '{self.decode}'")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")


def run_pretraining(images, teacher, cfg, callback=None):
    """Train a :class:`SAMIModel` on ``images`` (``S x H x W x C``).

    Returns ``(model, optimizer, history)`` where history rows are
    ``(step, lr, loss)``. Teacher features are computed once per image.
    """
    from .autodiff.optim import AdamW
    from .vit import preset

    cfg.validate()
    student_cfg = preset(cfg.encoder) if isinstance(cfg.encoder, str) else cfg.encoder
    if student_cfg.image_size != teacher.cfg.image_size:
        raise ConfigError("student and teacher image sizes differ")
    rng = np.random.default_rng(cfg.seed)
    model = SAMIModel(student_cfg, teacher.cfg.embed_dim, rng, cfg.decoder_depth,
                      cfg.decoder_heads, cfg.decode)
    targets = np.concatenate([teacher_features(images[i:i + 32], teacher).data
                              for i in range(0, len(images), 32)])
    if cfg.normalize_target:
        targets = normalize_tokens(Tensor(targets)).data
    opt = AdamW(model.trainable_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay, skip_missing=True)
    sched = ScheduleConfig(cfg.lr, int(cfg.warmup_frac * cfg.steps), cfg.steps)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    plan_rng = np.random.default_rng([cfg.seed, 2])
    history = []
    for step in range(cfg.steps):
        idx = batch_rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        lr = lr_at(step, sched)
        loss = pretrain_step(images[idx], model, Tensor(targets[idx]), plan_rng, opt, lr,
                             cfg.mask_ratio, cfg.loss, step)
        history.append((step, lr, loss))
        if callback is not None:
            callback(step, lr, loss)
    return model, opt, history
