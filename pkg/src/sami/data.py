"""Synthetic segmentation scenes and the on-disk corpus layout.

A corpus directory holds ``scene_%06d.ppm`` images, one
``scene_%06d.inst_%02d.pgm`` per visible instance and ``manifest.csv``
(``scene,instance,shape_kind``).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .imageio import load_image, load_mask, save_image, save_mask, to_float, to_uint8

SHAPE_KINDS = ("circle", "rectangle", "triangle")
SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class SceneConfig:
    size: int = 64
    n_shapes: tuple = (2, 5)
    kinds: tuple = SHAPE_KINDS
    noise: float = 0.05
    channels: int = 3
    min_area: int = 24
    min_color_gap: float = 0.25

    def validate(self):
        lo, hi = self.n_shapes
        if lo < 1 or hi < lo:
            raise ConfigError(f"n_shapes range {self.n_shapes} must satisfy 1 <= lo <= hi")
        if not self.kinds or any(k not in SHAPE_KINDS for k in self.kinds):
            raise ConfigError(f"shape kinds must be drawn from {SHAPE_KINDS}")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")


@dataclass
class Scene:
    image: np.ndarray                    # H x W x C float32 in [0, 1], 8-bit quantised
    masks: list = field(default_factory=list)   # visible-region bool masks, paint order
    kinds: list = field(default_factory=list)

    @property
    def num_instances(self):
        return len(self.masks)


# -- rendering ------------------------------------------------------------------

def _grid(size):
    rr, cc = np.mgrid[0:size, 0:size]
    return rr + 0.5, cc + 0.5


def render_shape(kind, rng, size):
    """Random support mask of one shape kind (before occlusion)."""
    rr, cc = _grid(size)
    if kind == "circle":
        rad = rng.uniform(5, 15)
        r, c = rng.uniform(0, size, 2)
        return (rr - r) ** 2 + (cc - c) ** 2 <= rad * rad
    if kind == "rectangle":
        h, w = rng.integers(8, 31, 2)
        r0 = rng.integers(-h // 3, size - 2 * h // 3)
        c0 = rng.integers(-w // 3, size - 2 * w // 3)
        return (rr >= r0) & (rr < r0 + h) & (cc >= c0) & (cc < c0 + w)
    if kind == "triangle":
        centre = rng.uniform(4, size - 4, 2)
        span = rng.uniform(10, 32)
        pts = centre + rng.uniform(-span / 2, span / 2, (3, 2))
        (r1, c1), (r2, c2), (r3, c3) = pts

        def side(ra, ca, rb, cb):
            return (cc - ca) * (rb - ra) - (rr - ra) * (cb - ca)

        d1, d2, d3 = side(r1, c1, r2, c2), side(r2, c2, r3, c3), side(r3, c3, r1, c1)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    raise ConfigError(f"unknown shape kind '{kind}'")


def _pick_color(rng, used, channels, gap, tries=200):
    for _ in range(tries):
        col = rng.uniform(0.05, 0.95, channels)
        if all(np.max(np.abs(col - u)) >= gap for u in used):
            return col
    raise ConfigError("could not find a distinct colour; lower min_color_gap")


def generate_scene(rng, cfg=None):
    """Render one scene; later shapes occlude earlier ones.

    A candidate shape is redrawn when it would be smaller than
    ``min_area`` or would shrink any earlier instance below it, so the
    instance count always equals the drawn shape count.
    """
    cfg = cfg or SceneConfig()
    cfg.validate()
    size = cfg.size
    lo, hi = cfg.n_shapes
    n = int(rng.integers(lo, hi + 1))
    bg = _pick_color(rng, [], cfg.channels, cfg.min_color_gap)
    colors = [bg]
    label = np.full((size, size), -1, dtype=np.int32)
    kinds = []
    for k in range(n):
        for _ in range(500):
            kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
            support = render_shape(kind, rng, size)
            if support.sum() < cfg.min_area:
                continue
            trial = np.where(support, k, label)
            if all((trial == j).sum() >= cfg.min_area for j in range(k)):
                break
        else:
            raise ConfigError("scene generation failed to place a shape; relax min_area")
        label = trial
        kinds.append(kind)
        colors.append(_pick_color(rng, colors, cfg.channels, cfg.min_color_gap))
    img = np.empty((size, size, cfg.channels))
    img[:] = bg
    for k in range(n):
        img[label == k] = colors[k + 1]
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, img.shape)
    img = to_float(to_uint8(img))
    masks = [label == k for k in range(n)]
    return Scene(img, masks, kinds)


def scene_rng(seed, split, index):
    return np.random.default_rng([int(seed), SPLITS[split], int(index)])


def generate_split(seed, split, count, cfg=None):
    return [generate_scene(scene_rng(seed, split, i), cfg) for i in range(count)]


# -- corpus on disk ----------------------------------------------------------------

@dataclass
class Corpus:
    images: np.ndarray          # S x H x W x C float32
    scenes: list
    scene_ids: list

    def __len__(self):
        return len(self.scenes)

    def instances(self):
        """Iterate ``(scene_index, instance_index, mask)``."""
        for si, sc in enumerate(self.scenes):
            for ii, m in enumerate(sc.masks):
                yield si, ii, m

    @classmethod
    def from_scenes(cls, scenes, ids=None):
        images = np.stack([s.image for s in scenes]).astype(np.float32)
        return cls(images, list(scenes), list(ids if ids is not None else range(len(scenes))))


def write_corpus(directory, scenes, start=0):
    os.makedirs(directory, exist_ok=True)
    rows = []
    for i, sc in enumerate(scenes):
        sid = start + i
        img = to_uint8(sc.image)
        save_image(os.path.join(directory, f"scene_{sid:06d}.ppm"),
                   img if sc.image.shape[2] == 3 else np.repeat(img, 3, axis=2))
        for j, (m, kind) in enumerate(zip(sc.masks, sc.kinds)):
            save_mask(os.path.join(directory, f"scene_{sid:06d}.inst_{j:02d}.pgm"), m)
            rows.append((sid, j, kind))
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scene", "instance", "shape_kind"])
        w.writerows(rows)


def read_manifest(directory):
    path = os.path.join(directory, "manifest.csv")
    if not os.path.exists(path):
        raise InputError(f"no manifest.csv in corpus directory {directory}")
    table = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            table.setdefault(int(row["scene"]), []).append((int(row["instance"]), row["shape_kind"]))
    return table


def load_corpus(directory, limit=None):
    table = read_manifest(directory)
    ids = sorted(table)[:limit] if limit else sorted(table)
    scenes = []
    for sid in ids:
        img = to_float(load_image(os.path.join(directory, f"scene_{sid:06d}.ppm")))
        entries = sorted(table[sid])
        masks = [load_mask(os.path.join(directory, f"scene_{sid:06d}.inst_{j:02d}.pgm"))
                 for j, _ in entries]
        scenes.append(Scene(img, masks, [k for _, k in entries]))
    return Corpus.from_scenes(scenes, ids)
