"""Training the frozen teacher: a larger ViT pretrained by pixel-reconstruction MAE.

The teacher stands in for a strong foundation-model image encoder. Any frozen
encoder can be used as a reconstruction target, so teachers are addressed by
a checkpoint path or ``random:<seed>`` (an untrained, frozen encoder).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import AdamW, Tensor, tsum
from .autodiff.nn import Linear, Module
from .autodiff.optim import ScheduleConfig, lr_at
from .checkpoint import Checkpoint, load_checkpoint
from .errors import ConfigError, InputError
from .pretrain import MaskedDecoder, TeacherModel, decode_all_tokens, make_mask_plan
from .vit import ViTConfig, ViTEncoder, extract_patches, grid_positions, preset


class PixelMAE(Module):
    def __init__(self, cfg, rng, decoder_dim=64, decoder_depth=2, decoder_heads=4):
        self.encoder = ViTEncoder(cfg, rng)
        self.decoder_embed = Linear(cfg.embed_dim, decoder_dim, rng)
        self.decoder = MaskedDecoder(decoder_dim, decoder_depth, decoder_heads, rng, mode="all-tokens")
        self.pred = Linear(decoder_dim, cfg.patch_dim, rng)
        self.cfg = cfg
        self._dec_pos = grid_positions(cfg.grid_size, decoder_dim)

    def loss(self, images, plans):
        """Mean squared pixel error over the masked patches."""
        keep = np.stack([p.unmasked_idx for p in plans])
        enc = self.encoder(images, keep)
        dec = decode_all_tokens(self.decoder_embed(enc), plans, self.decoder, self._dec_pos)
        pred = self.pred(dec)
        target = extract_patches(np.asarray(images), self.cfg.patch_size)
        weight = np.zeros(target.shape[:2])
        for i, p in enumerate(plans):
            weight[i, p.masked_idx] = 1.0
        d = pred - Tensor(target, dtype=pred.dtype)
        per_tok = tsum(d * d, axis=-1) * (1.0 / target.shape[-1])
        return tsum(per_tok * Tensor(weight, dtype=pred.dtype)) * (1.0 / max(weight.sum(), 1.0))


@dataclass
class TeacherTrainConfig:
    encoder: str = "t-big"
    steps: int = 300
    batch_size: int = 16
    lr: float = 1.5e-3
    warmup_frac: float = 0.1
    mask_ratio: float = 0.75
    decoder_dim: int = 64
    decoder_depth: int = 2
    weight_decay: float = 0.05
    seed: int = 0


def train_teacher(images, cfg, callback=None):
    """Pixel-MAE pretraining; returns ``(encoder, history)``."""
    enc_cfg = preset(cfg.encoder) if isinstance(cfg.encoder, str) else cfg.encoder
    if images.shape[1] != enc_cfg.image_size:
        raise ConfigError(f"corpus image size {images.shape[1]} != encoder size {enc_cfg.image_size}")
    rng = np.random.default_rng(cfg.seed)
    mae = PixelMAE(enc_cfg, rng, cfg.decoder_dim, cfg.decoder_depth)
    opt = AdamW(mae.trainable_parameters(), lr=cfg.lr, betas=(0.9, 0.95), weight_decay=cfg.weight_decay)
    sched = ScheduleConfig(cfg.lr, int(cfg.warmup_frac * cfg.steps), cfg.steps)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    plan_rng = np.random.default_rng([cfg.seed, 2])
    history = []
    for step in range(cfg.steps):
        idx = batch_rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        plans = [make_mask_plan(enc_cfg.num_tokens, cfg.mask_ratio, plan_rng) for _ in idx]
        opt.zero_grad()
        loss = mae.loss(images[idx], plans)
        loss.backward()
        lr = lr_at(step, sched)
        opt.step(lr)
        history.append((step, lr, float(loss.data)))
        if callback is not None:
            callback(step, lr, float(loss.data))
    return mae.encoder, history


def teacher_checkpoint(encoder, tag, extra=None):
    config = {"kind": "teacher", "tag": tag, "encoder": encoder.cfg.to_dict()}
    config.update(extra or {})
    return Checkpoint(config, {f"encoder.{k}": v for k, v in encoder.state_dict().items()})


def encoder_from_checkpoint(ckpt, key="encoder"):
    cfg = ViTConfig(**ckpt.config[key])
    enc = ViTEncoder(cfg, np.random.default_rng(0))
    prefix = key + "."
    enc.load_state_dict({k[len(prefix):]: v for k, v in ckpt.params().items() if k.startswith(prefix)})
    return enc


def load_teacher(spec):
    """Resolve a teacher from a checkpoint path or ``random:<seed>[:<preset>]``."""
    if spec.startswith("random:"):
        parts = spec.split(":")
        try:
            seed = int(parts[1])
        except ValueError:
            raise ConfigError(f"bad random teacher spec '{spec}'") from None
        name = parts[2] if len(parts) > 2 else "t-big"
        return TeacherModel(ViTEncoder(preset(name), np.random.default_rng(seed)), tag=spec)
    try:
        ckpt = load_checkpoint(spec)
    except FileNotFoundError:
        raise InputError(f"teacher checkpoint '{spec}' not found") from None
    if ckpt.config.get("kind") != "teacher":
        raise ConfigError(f"'{spec}' is not a teacher checkpoint")
    return TeacherModel(encoder_from_checkpoint(ckpt), tag=ckpt.config.get("tag", spec))
