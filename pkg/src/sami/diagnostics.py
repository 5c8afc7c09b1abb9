"""Randomized gradient audits over the full training graphs."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, precision
from .autodiff.gradcheck import check_gradients
from .pretrain import SAMIModel, make_mask_plan, reconstruction_loss
from .segment import DecoderConfig, EfficientSAM, Prompt, SegConfig, segmentation_loss
from .vit import ViTConfig


def _random_vit(rng):
    dim = int(rng.choice([8, 12, 16]))
    return ViTConfig(image_size=16, patch_size=int(rng.choice([4, 8])), embed_dim=dim,
                     depth=int(rng.integers(1, 3)), num_heads=2, mlp_ratio=2)


def sami_graph(rng):
    """Student encoder + masked decoder + projection head against random targets."""
    cfg = _random_vit(rng)
    teacher_dim = int(rng.integers(3, 10))
    mode = str(rng.choice(["masked-only", "all-tokens"]))
    kind = str(rng.choice(["mse", "cosine"]))
    model = SAMIModel(cfg, teacher_dim, rng, decoder_depth=1, decoder_heads=2, decode_mode=mode)
    images = rng.random((2, 16, 16, 3))
    target = Tensor(rng.normal(size=(2, cfg.num_tokens, teacher_dim)))
    ratio = float(rng.choice([0.25, 0.5, 0.75]))
    plans = [make_mask_plan(cfg.num_tokens, ratio, rng) for _ in range(2)]

    def loss_fn():
        return reconstruction_loss(model(images, plans), target, kind)

    return f"sami[{mode},{kind},d={cfg.embed_dim}]", model, loss_fn


def segment_graph(rng):
    """Encoder + neck + prompt encoder + mask decoder under the finetune loss."""
    cfg = _random_vit(rng)
    dec = DecoderConfig(dim=8, depth=int(rng.integers(1, 3)), num_heads=2, mlp_dim=8,
                        num_masks=int(rng.integers(1, 4)))
    model = EfficientSAM(SegConfig(cfg, dec), rng)
    images = rng.random((2, 16, 16, 3))
    gt = np.zeros((2, 16, 16))
    gt[0, 2:9, 3:12] = 1
    gt[1, 8:15, 1:6] = 1
    prompts = [Prompt.from_box((2, 3, 8, 11)), Prompt.from_points([(10, 3)])]
    recipe = str(rng.choice(["dice-bce", "focal-dice"]))

    def loss_fn():
        logits, conf = model(images, prompts)
        return segmentation_loss(logits, conf, gt, recipe)[0]

    return f"segment[{recipe},k={dec.num_masks}]", model, loss_fn


def randomized_grad_check(seed=0, max_coords=6):
    """Worst relative error per graph, probing ``max_coords`` entries of every tensor.

    Finite differences use Richardson-extrapolated central differences
    (step 1e-4), whose truncation and round-off errors both sit far below
    the 1e-4 acceptance level.

    Returns ``(max_error, {graph: {param: error}})``; runs entirely in float64.
    """
    rng = np.random.default_rng(seed)
    out = {}
    with precision(np.float64):
        for build in (sami_graph, segment_graph):
            name, model, loss_fn = build(rng)
            params = list(model.trainable_parameters())
            out[name] = check_gradients(loss_fn, params, h=1e-4, max_coords=max_coords, rng=rng,
                                        richardson=True)
    worst = max(max(r.values()) for r in out.values())
    return worst, out
