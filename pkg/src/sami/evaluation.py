"""Evaluation protocols: point and box prompting, mIoU, COCO-style AP,
throughput benchmarking and pretraining ablations.

Reports hold one record per prompt. Aggregates are always recomputed from
the records by :func:`aggregate`, so a report read back from disk can be
checked for self-consistency.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ContractError, InputError
from .imageio import save_image, to_uint8
from .metrics import iou, sample_points_in_mask, tightest_box
from .segment import MaskPrediction, Prompt, select_best_iou_with_box, select_most_confident

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
# bucket edges as fractions of the image area: small < 0.7 %, medium < 6.7 %
SMALL_FRAC, MEDIUM_FRAC = 0.007, 0.067


# -- records -----------------------------------------------------------------------------

@dataclass
class EvalRecord:
    scene: int
    instance: int           # GT instance the prompt targets (or best-overlap GT; -1 if none)
    prompt: str
    mask_index: int
    confidence: float
    iou: float
    gt_area: int
    det_area: int
    overlaps: dict = field(default_factory=dict)   # instance -> IoU with every GT in the scene


def prompt_to_str(prompt):
    if prompt.kind == "box":
        return "box:" + ",".join(str(v) for v in prompt.box)
    return "points:" + ";".join(f"{r},{c},{lab}" for r, c, lab in prompt.points)


def _overlaps_to_str(ov):
    return "|".join(f"{k}:{v!r}" for k, v in sorted(ov.items()))


def _overlaps_from_str(s):
    if not s:
        return {}
    out = {}
    for part in s.split("|"):
        k, v = part.split(":")
        out[int(k)] = float(v)
    return out


# -- average precision --------------------------------------------------------------------

def _match(dets, gts, thr, in_range):
    """COCO greedy matching at one IoU threshold.

    ``dets`` are already sorted by descending confidence. Returns the list of
    ``(is_tp, ignored)`` flags per detection and the number of counted GTs.
    """
    ignored_gt = {g: not in_range(a) for g, a in gts.items()}
    taken = set()
    flags = []
    for d in dets:
        cand = [((d["scene"], i), v) for i, v in d["overlaps"].items()
                if (d["scene"], i) in gts and (d["scene"], i) not in taken and v >= thr]
        if cand:
            # counted GTs take precedence over ignored ones; then highest IoU, then lowest id
            pool = [c for c in cand if not ignored_gt[c[0]]] or cand
            g, _ = max(pool, key=lambda c: (c[1], -c[0][1]))
            taken.add(g)
            flags.append((True, ignored_gt[g]))
        else:
            flags.append((False, not in_range(d["area"])))
    n_gt = sum(1 for g in gts if not ignored_gt[g])
    return flags, n_gt


def _interpolated_ap(flags, n_gt):
    if n_gt == 0:
        return float("nan")
    tp = np.array([t for t, ign in flags if not ign], dtype=float)
    if tp.size == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def average_precision(detections, gt_areas, image_area, thresholds=IOU_THRESHOLDS):
    """COCO-style mask AP overall and per size bucket.

    ``detections`` are dicts with ``scene``, ``confidence``, ``area``,
    ``overlaps`` (instance -> IoU against each GT in that scene) and an
    optional ``key`` used only to order exact confidence ties. ``gt_areas``
    maps ``(scene, instance)`` to pixel area. Returns a dict with ``ap``,
    ``ap_s``, ``ap_m``, ``ap_l``; an empty record set yields NaN.
    """
    nan = float("nan")
    if not detections or not gt_areas:
        log.warning("average precision undefined for an empty record set")
        return {"ap": nan, "ap_s": nan, "ap_m": nan, "ap_l": nan}
    dets = sorted(detections, key=lambda d: (-d["confidence"], d.get("key", ())))
    small, medium = SMALL_FRAC * image_area, MEDIUM_FRAC * image_area
    ranges = {
        "ap": lambda a: True,
        "ap_s": lambda a: a < small,
        "ap_m": lambda a: small <= a < medium,
        "ap_l": lambda a: a >= medium,
    }
    out = {}
    for name, rng_fn in ranges.items():
        per_t = []
        for t in thresholds:
            flags, n_gt = _match(dets, gt_areas, t, rng_fn)
            per_t.append(_interpolated_ap(flags, n_gt))
        out[name] = nan if any(math.isnan(v) for v in per_t) else float(np.mean(per_t))
    return out


# -- reports -------------------------------------------------------------------------------

AGG_KEYS = ("n", "miou", "ap", "ap_s", "ap_m", "ap_l")


def aggregate(records, gt_areas, image_area):
    dets = [{"scene": r.scene, "confidence": r.confidence, "area": r.det_area,
             "overlaps": r.overlaps, "key": (r.scene, r.instance, r.prompt)} for r in records]
    ap = average_precision(dets, gt_areas, image_area)
    miou = float(np.mean([r.iou for r in records])) if records else float("nan")
    return {"n": len(records), "miou": miou, **ap}


@dataclass
class EvalReport:
    protocol: str
    records: list
    gt_areas: dict
    image_area: int
    aggregates: dict = None
    timing: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.aggregates is None:
            self.aggregates = aggregate(self.records, self.gt_areas, self.image_area)

    @property
    def miou(self):
        return self.aggregates["miou"]

    @property
    def ap(self):
        return self.aggregates["ap"]

    def check_consistency(self):
        fresh = aggregate(self.records, self.gt_areas, self.image_area)
        for k in AGG_KEYS:
            a, b = fresh[k], self.aggregates[k]
            if not (a == b or (isinstance(a, float) and math.isnan(a) and math.isnan(b))):
                raise ContractError(f"report aggregate '{k}' is {b!r}, records give {a!r}")

    def metric_rows(self):
        return [("protocol", self.protocol), ("image_area", self.image_area)] + \
               [(k, self.aggregates[k]) for k in AGG_KEYS]

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        write_metrics(os.path.join(directory, "metrics.csv"), self.metric_rows())
        with open(os.path.join(directory, "records.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([fl.name for fl in fields(EvalRecord)])
            for r in self.records:
                w.writerow([r.scene, r.instance, r.prompt, r.mask_index, repr(r.confidence),
                            repr(r.iou), r.gt_area, r.det_area, _overlaps_to_str(r.overlaps)])
        with open(os.path.join(directory, "gts.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["scene", "instance", "area"])
            for (s, i), a in sorted(self.gt_areas.items()):
                w.writerow([s, i, a])

    @classmethod
    def read(cls, directory):
        """Load a written report and verify its aggregates against its records."""
        metrics = dict(read_metrics(os.path.join(directory, "metrics.csv")))
        records = []
        with open(os.path.join(directory, "records.csv"), newline="") as f:
            for row in csv.DictReader(f):
                records.append(EvalRecord(
                    int(row["scene"]), int(row["instance"]), row["prompt"], int(row["mask_index"]),
                    float(row["confidence"]), float(row["iou"]), int(row["gt_area"]),
                    int(row["det_area"]), _overlaps_from_str(row["overlaps"])))
        gts = {}
        with open(os.path.join(directory, "gts.csv"), newline="") as f:
            for row in csv.DictReader(f):
                gts[(int(row["scene"]), int(row["instance"]))] = int(row["area"])
        aggs = {k: (int(metrics[k]) if k == "n" else float(metrics[k])) for k in AGG_KEYS}
        rep = cls(metrics["protocol"], records, gts, int(metrics["image_area"]), aggs)
        rep.check_consistency()
        return rep


def write_metrics(path, rows):
    """``key,value`` CSV; floats use ``repr`` so values round-trip exactly."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in rows:
            w.writerow([k, repr(v) if isinstance(v, float) else v])


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return [(k, v) for k, v in rows[1:]]


# -- protocols ----------------------------------------------------------------------------

def instance_rng(seed, scene_id, instance):
    """Independent stream per GT instance, so evaluation order never matters."""
    return np.random.default_rng([seed, scene_id, instance])


def _record(scene_idx, scene_id, instance, prompt, k, pred, mask, corpus, target_iou=None):
    gts = corpus.scenes[scene_idx].masks
    overlaps = {j: float(iou(mask, g)) for j, g in enumerate(gts)}
    if instance < 0 and overlaps:
        best = max(overlaps, key=lambda j: (overlaps[j], -j))
        instance = best if overlaps[best] > 0 else -1
    value = overlaps.get(instance, 0.0) if target_iou is None else target_iou
    gt_area = int(gts[instance].sum()) if instance >= 0 else 0
    return EvalRecord(scene_id, instance, prompt_to_str(prompt), int(k), float(pred.scores[k]),
                      float(value), gt_area, int(mask.sum()), overlaps)


def _gt_areas(corpus):
    return {(corpus.scene_ids[si], ii): int(m.sum()) for si, ii, m in corpus.instances()}


def eval_point_protocol(model, corpus, clicks=1, seed=0, replace=True, overlay_dir=None, overlays=0):
    """Prompt each GT instance with ``clicks`` simultaneous foreground points
    sampled uniformly inside it; score the most confident candidate."""
    if clicks < 1:
        raise ConfigError("clicks must be >= 1")
    t0 = time.perf_counter()
    records = []
    for si, ii, m in corpus.instances():
        sid = corpus.scene_ids[si]
        pts = sample_points_in_mask(m, clicks, instance_rng(seed, sid, ii), replace=replace)
        prompt = Prompt.from_points(pts)
        pred = model.predict(corpus.images[si], prompt)
        k, mask = select_most_confident(pred)
        records.append(_record(si, sid, ii, prompt, k, pred, mask, corpus))
        if overlay_dir and len(records) <= overlays:
            save_overlay(overlay_dir, f"point_{sid:06d}_{ii:02d}.ppm", corpus.images[si], mask, prompt)
    img_area = int(np.prod(corpus.images.shape[1:3]))
    rep = EvalReport(f"point-{clicks}", records, _gt_areas(corpus), img_area)
    rep.timing = {"seconds": time.perf_counter() - t0}
    return rep


def read_detections(path, corpus):
    """Parse ``scene,r0,c0,r1,c1,score`` rows; unknown scenes are an input error."""
    known = set(corpus.scene_ids)
    dets = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for lineno, row in enumerate(reader, 1):
            if not row or row[0].strip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "scene":
                continue
            if len(row) != 6:
                raise InputError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                scene = int(row[0])
                box = tuple(int(v) for v in row[1:5])
                score = float(row[5])
            except ValueError:
                raise InputError(f"{path}:{lineno}: malformed detection row {row}") from None
            if scene not in known:
                raise InputError(f"{path}:{lineno}: detection references unknown scene {scene}")
            dets.append((scene, box, score))
    return dets


def eval_box_protocol(model, corpus, detections=None, overlay_dir=None, overlays=0):
    """Box-prompted instance segmentation.

    With ``detections=None`` every GT is prompted with its tightest box and
    the record confidence is the model's score for the chosen candidate.
    Otherwise ``detections`` is a list of ``(scene_id, box, score)`` and the
    detector score ranks the masks, as a detector-driven pipeline would.
    The candidate that best overlaps its prompt box is kept in both cases.
    """
    t0 = time.perf_counter()
    index = {sid: si for si, sid in enumerate(corpus.scene_ids)}
    img_area = int(np.prod(corpus.images.shape[1:3]))
    size = corpus.images.shape[1]
    records = []
    if detections is None:
        jobs = [(si, ii, tightest_box(m), None) for si, ii, m in corpus.instances()]
        tag = "box-gt"
    else:
        jobs = []
        for sid, box, score in detections:
            if sid not in index:
                raise InputError(f"detection references unknown scene {sid}")
            jobs.append((index[sid], -1, box, score))
        tag = "box-det"
    for si, ii, box, score in jobs:
        prompt = Prompt.from_box(box)
        prompt.validate(size)
        pred = model.predict(corpus.images[si], prompt)
        k, mask, _ = select_best_iou_with_box(pred, box)
        rec = _record(si, corpus.scene_ids[si], ii, prompt, k, pred, mask, corpus)
        if score is not None:
            rec.confidence = float(score)
        records.append(rec)
        if overlay_dir and len(records) <= overlays:
            save_overlay(overlay_dir, f"box_{rec.scene:06d}_{len(records):03d}.ppm",
                         corpus.images[si], mask, prompt)
    rep = EvalReport(tag, records, _gt_areas(corpus), img_area)
    rep.timing = {"seconds": time.perf_counter() - t0}
    return rep


# -- reference models -----------------------------------------------------------------------

class OracleModel:
    """Returns the exact GT mask of the prompted instance with confidence 1."""

    def __init__(self, corpus, num_masks=3):
        self._lookup = {np.asarray(img, np.float32).tobytes(): si for si, img in enumerate(corpus.images)}
        self.corpus = corpus
        self.num_masks = num_masks

    def _instance(self, masks, prompt):
        if prompt.kind == "points":
            r, c, _ = prompt.points[0]
            hits = [j for j, m in enumerate(masks) if m[r, c]]
            return hits[0] if hits else None
        scores = [(tightest_box(m) == tuple(prompt.box), iou(m, _box_region(prompt.box, m.shape)))
                  for m in masks]
        return max(range(len(masks)), key=lambda j: scores[j]) if masks else None

    def predict(self, image, prompt):
        si = self._lookup[np.asarray(image, np.float32).tobytes()]
        masks = self.corpus.scenes[si].masks
        j = self._instance(masks, prompt)
        shape = self.corpus.images.shape[1:3]
        gt = masks[j] if j is not None else np.zeros(shape, bool)
        logits = np.where(gt, 10.0, -10.0).astype(np.float32)
        return MaskPrediction(np.repeat(logits[None], self.num_masks, 0),
                              np.ones(self.num_masks, np.float32))


class EmptyModel:
    """Always predicts empty masks."""

    def __init__(self, num_masks=3):
        self.num_masks = num_masks

    def predict(self, image, prompt):
        h, w = np.asarray(image).shape[:2]
        return MaskPrediction(np.full((self.num_masks, h, w), -10.0, np.float32),
                              np.full(self.num_masks, 0.5, np.float32))


def _box_region(box, shape):
    from .metrics import box_to_mask
    return box_to_mask(box, shape)


# -- overlays --------------------------------------------------------------------------------

def render_overlay(image, mask, prompt=None, color=(255, 40, 40), alpha=0.5):
    """Blend ``mask`` over ``image`` and mark the prompt (green points or box outline)."""
    img = to_uint8(image).astype(np.float64)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    m = np.asarray(mask, bool)
    img[m] = (1 - alpha) * img[m] + alpha * np.asarray(color, float)
    out = np.clip(np.round(img), 0, 255).astype(np.uint8)
    mark = np.array([40, 255, 40], np.uint8)
    if prompt is not None and prompt.kind == "box":
        r0, c0, r1, c1 = prompt.box
        out[r0, c0:c1 + 1] = mark
        out[r1, c0:c1 + 1] = mark
        out[r0:r1 + 1, c0] = mark
        out[r0:r1 + 1, c1] = mark
    elif prompt is not None:
        for r, c, lab in prompt.points:
            out[r, c] = mark if lab else np.array([40, 40, 255], np.uint8)
    return out


def save_overlay(directory, name, image, mask, prompt=None):
    os.makedirs(directory, exist_ok=True)
    save_image(os.path.join(directory, name), render_overlay(image, mask, prompt))


# -- throughput ------------------------------------------------------------------------------

def bench_throughput(model, corpus, warmup=2, iters=10):
    """Single-request latency with one box prompt per image (embedding not cached)."""
    from .segment import efficientsam_param_count

    if iters < 1:
        raise ConfigError("iters must be >= 1")
    inst = [(si, m) for si, _, m in corpus.instances()]
    if not inst:
        raise InputError("bench corpus has no instances")
    times = []
    for i in range(warmup + iters):
        si, m = inst[i % len(inst)]
        model.invalidate_cache()
        t = time.perf_counter()
        model.predict(corpus.images[si], Prompt.from_box(tightest_box(m)))
        if i >= warmup:
            times.append(time.perf_counter() - t)
    med = float(np.median(times))
    return {
        "params": model.num_parameters(),
        "params_analytic": efficientsam_param_count(model.cfg),
        "median_s": med,
        "p95_s": float(np.percentile(times, 95)),
        "images_per_s": 1.0 / med,
    }


# -- ablations --------------------------------------------------------------------------------

ABLATION_AXES = {
    "mask-ratio": ("mask_ratio", float, ("0.5", "0.75", "0.85")),
    "loss": ("loss", str, ("mse", "cosine")),
    "decode-mode": ("decode", str, ("masked-only", "all-tokens")),
    "teacher": (None, str, ()),
}


def _heldout_scores(model, images, targets, seed, ratio=0.75):
    """Feature-reconstruction MSE and cosine on held-out images with a fixed mask."""
    from .autodiff import no_grad
    from .pretrain import make_mask_plan, reconstruction_loss

    rng = np.random.default_rng([seed, 9])
    plans = [make_mask_plan(model.cfg.num_tokens, ratio, rng) for _ in range(len(images))]
    from .autodiff import Tensor
    with no_grad():
        pred = model(images, plans)
        t = Tensor(targets, dtype=pred.dtype)
        mse = float(reconstruction_loss(pred, t, "mse").data)
        cos = float(reconstruction_loss(pred, t, "cosine").data)
    return mse, cos


def ablate(axis, values, images, heldout, base_cfg, teacher=None, teacher_loader=None):
    """Pretrain once per value of ``axis`` and tabulate the outcome.

    Rows hold the final training loss (mean of the last 10 steps) and the
    held-out feature-reconstruction MSE / cosine loss, which are comparable
    across rows regardless of the training objective.
    """
    from dataclasses import replace

    from .pretrain import run_pretraining, teacher_features

    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis '{axis}' (have {', '.join(ABLATION_AXES)})")
    attr, conv, defaults = ABLATION_AXES[axis]
    values = list(values) if values else list(defaults)
    if not values:
        raise ConfigError(f"axis '{axis}' needs explicit values")
    rows = []
    for v in values:
        if axis == "teacher":
            if teacher_loader is None:
                raise ConfigError("teacher axis needs a teacher loader")
            t = teacher_loader(v)
            cfg = base_cfg
        else:
            t = teacher
            try:
                cfg = replace(base_cfg, **{attr: conv(v)})
            except ValueError:
                raise ConfigError(f"bad value '{v}' for axis '{axis}'") from None
        model, _, hist = run_pretraining(images, t, cfg)
        targets = teacher_features(heldout, t).data
        mse, cos = _heldout_scores(model, heldout, targets, cfg.seed)
        tail = [h[2] for h in hist[-10:]]
        rows.append({"axis": axis, "value": str(v), "steps": cfg.steps,
                     "final_loss": float(np.mean(tail)), "heldout_mse": mse, "heldout_cosine": cos})
    return rows


ABLATION_COLUMNS = ("axis", "value", "steps", "final_loss", "heldout_mse", "heldout_cosine")


def write_table(path, rows, columns=ABLATION_COLUMNS):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
