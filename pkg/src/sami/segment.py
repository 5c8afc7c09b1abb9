"""Promptable segmentation: pretrained encoder, prompt encoder and a
two-way-attention mask decoder producing K candidate masks with confidences.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, gelu, matmul, no_grad, relu, sigmoid, softmax, softplus, tsum
from .autodiff.nn import Embedding, LayerNorm, Linear, Module, parameter, xavier_uniform
from .autodiff.tensor import one_hot_select
from .errors import ConfigError, ContractError, InputError
from .metrics import box_to_mask, iou
from .vit import ViTConfig, ViTEncoder, encoder_param_count, grid_positions, pixel_to_grid, sincos_at

log = logging.getLogger(__name__)

FG, BG = 1, 0
TYPE_BG, TYPE_FG, TYPE_TL, TYPE_BR, TYPE_PAD = range(5)


# -- prompts -------------------------------------------------------------------

@dataclass
class Prompt:
    kind: str                                   # "points" | "box"
    points: list = field(default_factory=list)  # (row, col, label) with label 1=fg, 0=bg
    box: tuple = None                           # inclusive (r0, c0, r1, c1)

    @classmethod
    def from_points(cls, pts, label=FG):
        return cls("points", [(int(r), int(c), label) for r, c in pts])

    @classmethod
    def from_box(cls, box):
        return cls("box", box=tuple(int(v) for v in box))

    def validate(self, image_size):
        if self.kind == "points":
            if not self.points:
                raise InputError("point prompt needs at least one point")
            for r, c, lab in self.points:
                if not (0 <= r < image_size and 0 <= c < image_size):
                    raise InputError(f"point ({r}, {c}) outside a {image_size}x{image_size} image")
                if lab not in (FG, BG):
                    raise InputError(f"point label must be 0 (bg) or 1 (fg), got {lab}")
        elif self.kind == "box":
            if self.box is None or len(self.box) != 4:
                raise InputError("box prompt needs (r0, c0, r1, c1)")
            r0, c0, r1, c1 = self.box
            if r0 > r1 or c0 > c1:
                raise InputError(f"box {self.box} has r0 > r1 or c0 > c1")
            if min(self.box) < 0 or max(self.box) >= image_size:
                raise InputError(f"box {self.box} outside a {image_size}x{image_size} image")
        else:
            raise InputError(f"unknown prompt kind '{self.kind}'")

    def coords_and_types(self):
        if self.kind == "box":
            r0, c0, r1, c1 = self.box
            return [(r0, c0), (r1, c1)], [TYPE_TL, TYPE_BR]
        return [(r, c) for r, c, _ in self.points], [TYPE_FG if lab == FG else TYPE_BG
                                                     for _, _, lab in self.points]


@dataclass
class MaskPrediction:
    logits: np.ndarray   # K x H x W
    scores: np.ndarray   # K

    @property
    def num_masks(self):
        return len(self.scores)

    def binary(self, k):
        return self.logits[k] > 0


# -- layers ----------------------------------------------------------------------

class PromptEncoder(Module):
    """Point/box corners -> sin-cos position of the coordinate + learned type vector."""

    def __init__(self, dim, image_size, patch_size, rng):
        self.type_embed = Embedding(5, dim, rng, std=1.0)
        self.dim = dim
        self.image_size = image_size
        self.patch_size = patch_size

    def positional(self, coords):
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        return sincos_at(pixel_to_grid(coords[:, 0], coords[:, 1], self.patch_size), self.dim)

    def encode(self, prompt):
        """One token per point, two per box (``n x dim``)."""
        prompt.validate(self.image_size)
        coords, types = prompt.coords_and_types()
        pe = Tensor(self.positional(coords), dtype=self.type_embed.weight.dtype)
        return pe + self.type_embed(types)

    def encode_batch(self, prompts):
        """Stack prompts into ``B x T x dim``, padding with not-a-point tokens.

        Sequences are padded to ``max(2, longest)`` so a lone point looks the
        same in a batch as on its own.
        """
        width = max(2, max(len(p.coords_and_types()[1]) for p in prompts))
        pe = np.zeros((len(prompts), width, self.dim))
        types = np.full((len(prompts), width), TYPE_PAD)
        for i, p in enumerate(prompts):
            p.validate(self.image_size)
            coords, tys = p.coords_and_types()
            pe[i, :len(tys)] = self.positional(coords)
            types[i, :len(tys)] = tys
        return Tensor(pe, dtype=self.type_embed.weight.dtype) + self.type_embed(types)


class TokenAttention(Module):
    """Attention with separate q/k/v inputs and an optional narrower internal width."""

    def __init__(self, dim, num_heads, rng, downsample=1):
        inner = dim // downsample
        if inner % num_heads:
            raise ConfigError(f"internal width {inner} not divisible by {num_heads} heads")
        self.q = Linear(dim, inner, rng)
        self.k = Linear(dim, inner, rng)
        self.v = Linear(dim, inner, rng)
        self.out = Linear(inner, dim, rng)
        self.heads = num_heads
        self.inner = inner

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.inner // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, q, k, v):
        b, nq, _ = q.shape
        qh, kh, vh = self._split(self.q(q)), self._split(self.k(k)), self._split(self.v(v))
        logits = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.inner // self.heads))
        att = softmax(logits, axis=-1)
        return self.out(matmul(att, vh).transpose(0, 2, 1, 3).reshape(b, nq, self.inner))


class MLP(Module):
    def __init__(self, dims, rng, act=relu):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self._act = act

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x


class TwoWayBlock(Module):
    """Token self-attention, token->image, MLP, image->token (post-norm)."""

    def __init__(self, dim, num_heads, mlp_dim, rng, skip_first_pe=False):
        self.self_attn = TokenAttention(dim, num_heads, rng)
        self.norm1 = LayerNorm(dim, eps=1e-5)
        self.cross_t2i = TokenAttention(dim, num_heads, rng, downsample=2)
        self.norm2 = LayerNorm(dim, eps=1e-5)
        self.mlp = MLP([dim, mlp_dim, dim], rng)
        self.norm3 = LayerNorm(dim, eps=1e-5)
        self.cross_i2t = TokenAttention(dim, num_heads, rng, downsample=2)
        self.norm4 = LayerNorm(dim, eps=1e-5)
        self._skip_first_pe = skip_first_pe

    def __call__(self, queries, keys, query_pe, key_pe):
        if self._skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_t2i(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_i2t(k, q, queries))
        return queries, keys


class ConvTranspose2x2(Module):
    """Stride-2, kernel-2 transposed convolution on ``B x h x w x C`` maps."""

    def __init__(self, cin, cout, rng):
        self.weight = parameter(xavier_uniform(rng, cin, 4 * cout))
        self.bias = parameter(np.zeros(cout))
        self.cout = cout

    def __call__(self, x):
        b, h, w, _ = x.shape
        y = matmul(x, self.weight).reshape(b, h, w, 2, 2, self.cout)
        y = y.transpose(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, self.cout)
        return y + self.bias


def bilinear_matrix(n_out, n_in):
    """Row-interpolation matrix of half-pixel-centred bilinear resizing."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_dim: int = 128
    num_masks: int = 3

    def to_dict(self):
        return dict(dim=self.dim, depth=self.depth, num_heads=self.num_heads,
                    mlp_dim=self.mlp_dim, num_masks=self.num_masks)


class MaskDecoder(Module):
    def __init__(self, cfg, grid, rng):
        c = cfg.dim
        self.iou_token = parameter(rng.normal(0.0, 1.0, size=(1, c)))
        self.mask_tokens = parameter(rng.normal(0.0, 1.0, size=(cfg.num_masks, c)))
        self.no_mask_embed = parameter(rng.normal(0.0, 0.02, size=c))
        self.blocks = [TwoWayBlock(c, cfg.num_heads, cfg.mlp_dim, rng, skip_first_pe=(i == 0))
                       for i in range(cfg.depth)]
        self.final_attn = TokenAttention(c, cfg.num_heads, rng, downsample=2)
        self.final_norm = LayerNorm(c, eps=1e-5)
        self.up1 = ConvTranspose2x2(c, c // 4, rng)
        self.up_norm = LayerNorm(c // 4)
        self.up2 = ConvTranspose2x2(c // 4, c // 8, rng)
        self.hyper = [MLP([c, c, c, c // 8], rng) for _ in range(cfg.num_masks)]
        self.iou_head = MLP([c, c, c, cfg.num_masks], rng)
        self.cfg = cfg
        self.grid = grid
        self._image_pe = grid_positions(grid, c)

    def __call__(self, image_embed, prompt_tokens):
        """``B x N x C`` image features + ``B x T x C`` prompts -> (low-res logits, confidences)."""
        b = image_embed.shape[0]
        k = self.cfg.num_masks
        c = self.cfg.dim
        dtype = image_embed.dtype
        out_tokens = concat([self.iou_token, self.mask_tokens], axis=0)
        out_tokens = out_tokens + Tensor(np.zeros((b, 1 + k, c)), dtype=dtype)
        tokens = concat([out_tokens, prompt_tokens], axis=1)
        keys = image_embed + self.no_mask_embed
        key_pe = Tensor(self._image_pe, dtype=dtype)
        queries = tokens
        for blk in self.blocks:
            queries, keys = blk(queries, keys, tokens, key_pe)
        q, kk = queries + tokens, keys + key_pe
        queries = self.final_norm(queries + self.final_attn(q, kk, keys))

        g = self.grid
        fmap = keys.reshape(b, g, g, c)
        up = gelu(self.up_norm(self.up1(fmap)))
        up = gelu(self.up2(up))                        # B x 4g x 4g x c/8
        side = 4 * g
        up = up.reshape(b, side * side, c // 8)
        hyper = concat([self.hyper[i](queries[:, 1 + i:2 + i, :]) for i in range(k)], axis=1)
        low = matmul(hyper, up.transpose(0, 2, 1)).reshape(b, k, side, side)
        conf = sigmoid(self.iou_head(queries[:, 0, :]))
        return low, conf


@dataclass
class SegConfig:
    encoder: ViTConfig
    decoder: DecoderConfig = DecoderConfig()

    def to_dict(self):
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(ViTConfig(**d["encoder"]), DecoderConfig(**d["decoder"]))


class EfficientSAM(Module):
    """Image encoder + neck + prompt encoder + mask decoder."""

    def __init__(self, cfg, rng):
        enc = cfg.encoder
        dec = cfg.decoder
        self.image_encoder = ViTEncoder(enc, rng)
        self.neck = Linear(enc.embed_dim, dec.dim, rng)
        self.neck_norm = LayerNorm(dec.dim)
        self.prompt_encoder = PromptEncoder(dec.dim, enc.image_size, enc.patch_size, rng)
        self.mask_decoder = MaskDecoder(dec, enc.grid_size, rng)
        self.cfg = cfg
        side = 4 * enc.grid_size
        self._up = bilinear_matrix(enc.image_size, side)
        self._cache = None

    def invalidate_cache(self):
        self._cache = None

    def embed_images(self, images):
        return self.neck_norm(self.neck(self.image_encoder(images)))

    def upsample(self, low):
        up = Tensor(self._up, dtype=low.dtype)
        return matmul(matmul(up, low), up.transpose())

    def __call__(self, images, prompts):
        """Batched forward: full-resolution logits ``B x K x H x W`` and confidences ``B x K``."""
        emb = self.embed_images(images)
        return self.decode(emb, prompts)

    def decode(self, emb, prompts):
        tokens = self.prompt_encoder.encode_batch(prompts)
        low, conf = self.mask_decoder(emb, tokens)
        return self.upsample(low), conf

    def predict(self, image, prompt):
        """Single-image inference with a one-entry embedding cache."""
        image = np.asarray(image, dtype=np.float32)
        key = hash(image.tobytes())
        with no_grad():
            if self._cache is None or self._cache[0] != key:
                self._cache = (key, self.embed_images(image[None]))
            logits, conf = self.decode(self._cache[1], [prompt])
        return MaskPrediction(logits.data[0].astype(np.float32), conf.data[0].astype(np.float32))


def decode_masks(model, image_embedding, prompt_tokens):
    """Decode an already-computed ``N x C`` embedding against ``T x C`` prompt tokens."""
    emb = image_embedding if image_embedding.ndim == 3 else image_embedding.reshape(1, *image_embedding.shape)
    tok = prompt_tokens if prompt_tokens.ndim == 3 else prompt_tokens.reshape(1, *prompt_tokens.shape)
    with no_grad():
        low, conf = model.mask_decoder(emb, tok)
        logits = model.upsample(low)
    return MaskPrediction(logits.data[0], conf.data[0])


def decoder_param_count(cfg, in_dim):
    """Closed-form count for neck + prompt encoder + mask decoder."""
    c, k, m = cfg.dim, cfg.num_masks, cfg.mlp_dim
    half = c // 2

    def lin(a, b):
        return a * b + b

    neck = lin(in_dim, c) + 2 * c
    prompt = 5 * c
    self_attn = 3 * lin(c, c) + lin(c, c)
    cross = 3 * lin(c, half) + lin(half, c)
    block = self_attn + cross * 2 + lin(c, m) + lin(m, c) + 4 * 2 * c
    tokens = (1 + k) * c + c
    up = (c * 4 * (c // 4) + c // 4) + 2 * (c // 4) + ((c // 4) * 4 * (c // 8) + c // 8)
    hyper = k * (2 * lin(c, c) + lin(c, c // 8))
    iou_head = 2 * lin(c, c) + lin(c, k)
    return neck + prompt + tokens + cfg.depth * block + cross + 2 * c + up + hyper + iou_head


def efficientsam_param_count(cfg):
    return encoder_param_count(cfg.encoder) + decoder_param_count(cfg.decoder, cfg.encoder.embed_dim)


# -- selection ---------------------------------------------------------------------

def select_most_confident(pred):
    """Index and binary mask of the highest-confidence candidate (ties -> lowest index)."""
    k = int(np.argmax(pred.scores))
    return k, pred.binary(k)


def select_best_iou_with_box(pred, box):
    """Candidate whose binarisation best overlaps the filled box; ties -> lowest index.

    Returns ``(index, mask, iou)``; when every candidate is empty the result
    is index 0 with IoU 0.
    """
    shape = pred.logits.shape[1:]
    region = box_to_mask(box, shape)
    masks = [pred.binary(k) for k in range(pred.num_masks)]
    if not any(m.any() for m in masks):
        return 0, masks[0], 0.0
    scores = [iou(m, region) for m in masks]
    k = int(np.argmax(scores))
    return k, masks[k], float(scores[k])


# -- finetuning loss ---------------------------------------------------------------------

LOSS_RECIPES = ("dice-bce", "focal-dice")


def _seg_terms(logits, gt, recipe):
    """Per-(sample, mask) segmentation loss, ``B x K``. ``gt`` is ``B x 1 x H x W`` float."""
    gt_t = Tensor(gt, dtype=logits.dtype)
    p = sigmoid(logits)
    inter = tsum(tsum(p * gt_t, axis=-1), axis=-1)
    denom = tsum(tsum(p, axis=-1), axis=-1) + Tensor(gt.sum(axis=(-1, -2)), dtype=logits.dtype)
    dice = 1.0 - (2.0 * inter + 1.0) / (denom + 1.0)
    # elementwise BCE with logits: softplus(x) - y * x
    ce = softplus(logits) - logits * gt_t
    if recipe == "dice-bce":
        pos = gt.sum(axis=(-1, -2), keepdims=True)
        neg = gt.shape[-1] * gt.shape[-2] - pos
        w = np.where(gt > 0, 0.5 / np.maximum(pos, 1), 0.5 / np.maximum(neg, 1))
        bce = tsum(tsum(ce * Tensor(w, dtype=logits.dtype), axis=-1), axis=-1)
        return dice + bce
    if recipe == "focal-dice":
        pt = p * gt_t + (1.0 - p) * (1.0 - gt_t)
        alpha = Tensor(np.where(gt > 0, 0.25, 0.75), dtype=logits.dtype)
        focal = ce * alpha * (1.0 - pt) * (1.0 - pt)
        npx = gt.shape[-1] * gt.shape[-2]
        return 20.0 * tsum(tsum(focal, axis=-1), axis=-1) * (1.0 / npx) + dice
    raise ConfigError(f"unknown loss recipe '{recipe}' (have {', '.join(LOSS_RECIPES)})")


def segmentation_loss(logits, conf, gt_masks, recipe="dice-bce", iou_weight=1.0):
    """min over K of the mask loss, plus confidence-vs-realised-IoU regression.

    Returns ``(loss, parts)`` where ``parts`` has the per-sample seg term,
    chosen index and realised IoUs for logging.
    """
    gt = np.asarray(gt_masks, dtype=np.float64)[:, None]
    seg = _seg_terms(logits, gt, recipe)
    best = np.argmin(seg.data, axis=1)
    seg_min = one_hot_select(seg, best, axis=1)
    pred_bin = logits.data > 0
    gtb = gt > 0.5
    inter = (pred_bin & gtb).sum(axis=(-1, -2))
    union = (pred_bin | gtb).sum(axis=(-1, -2))
    real_iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    d = conf - Tensor(real_iou, dtype=conf.dtype)
    conf_term = tsum(d * d, axis=1) * (1.0 / conf.shape[1])
    b = logits.shape[0]
    loss = tsum(seg_min + conf_term * iou_weight) * (1.0 / b)
    return loss, {"seg": seg_min.data, "best": best, "iou": real_iou}


# -- finetuning -------------------------------------------------------------------------

def sample_training_prompt(mask, rng, point_prob=0.5):
    """A single foreground point or the tightest box of ``mask``, 50/50 by default."""
    from .metrics import sample_points_in_mask, tightest_box

    if rng.random() < point_prob:
        return Prompt.from_points(sample_points_in_mask(mask, 1, rng))
    return Prompt.from_box(tightest_box(mask))


def finetune_step(images, gt_masks, prompts, model, optimizer, lr, recipe="dice-bce", step=None):
    """One end-to-end update of encoder and decoder; returns the loss value.

    Samples whose ground-truth mask is empty are dropped with a warning.
    """
    keep = [i for i, m in enumerate(gt_masks) if np.any(m)]
    if len(keep) < len(gt_masks):
        log.warning("skipping %d sample(s) with empty ground truth", len(gt_masks) - len(keep))
    if not keep:
        return float("nan")
    images = np.asarray(images)[keep]
    gt = np.asarray(gt_masks)[keep]
    prompts = [prompts[i] for i in keep]
    model.invalidate_cache()
    optimizer.zero_grad()
    logits, conf = model(images, prompts)
    loss, _ = segmentation_loss(logits, conf, gt, recipe)
    value = float(loss.data)
    if not math.isfinite(value):
        from .errors import NumericError
        raise NumericError(f"non-finite finetune loss at step {step} (lr={lr:.3g})")
    loss.backward()
    optimizer.step(lr)
    return value


@dataclass
class FinetuneConfig:
    steps: int = 8000
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    loss_recipe: str = "focal-dice"
    point_prob: float = 0.5
    decoder: DecoderConfig = DecoderConfig()
    seed: int = 0

    def validate(self):
        if self.loss_recipe not in LOSS_RECIPES:
            raise ConfigError(f"unknown loss recipe '{self.loss_recipe}'")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not 0.0 <= self.point_prob <= 1.0:
            raise ConfigError("point_prob must lie in [0, 1]")


def build_model(encoder_cfg, cfg, rng, encoder_state=None):
    model = EfficientSAM(SegConfig(encoder_cfg, cfg.decoder), rng)
    if encoder_state is not None:
        model.image_encoder.load_state_dict(encoder_state)
    return model


def run_finetuning(corpus, model, cfg, callback=None):
    """Train ``model`` on every instance of ``corpus``; returns ``(optimizer, history)``.

    The learning rate warms up linearly and then decays linearly to zero.
    """
    from .autodiff.optim import AdamW, ScheduleConfig, lr_at

    cfg.validate()
    pairs = [(si, ii) for si, ii, _ in corpus.instances()]
    if not pairs:
        raise InputError("corpus has no instances to finetune on")
    rng = np.random.default_rng([cfg.seed, 3])
    opt = AdamW(model.trainable_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)
    sched = ScheduleConfig(cfg.lr, min(cfg.warmup_steps, cfg.steps), cfg.steps, kind="linear")
    history = []
    for step in range(cfg.steps):
        pick = rng.choice(len(pairs), size=cfg.batch_size, replace=len(pairs) < cfg.batch_size)
        images, masks, prompts = [], [], []
        for j in pick:
            si, ii = pairs[j]
            mask = corpus.scenes[si].masks[ii]
            images.append(corpus.images[si])
            masks.append(mask)
            prompts.append(sample_training_prompt(mask, rng, cfg.point_prob))
        lr = lr_at(step, sched)
        loss = finetune_step(images, masks, prompts, model, opt, lr, cfg.loss_recipe, step)
        history.append((step, lr, loss))
        if callback is not None:
            callback(step, lr, loss)
    return opt, history
