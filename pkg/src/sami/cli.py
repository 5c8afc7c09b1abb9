"""Command-line entry point: ``sami <subcommand> [--config FILE] [flags]``.

Every option has a default; values from ``--config`` (flat ``key = value``
lines, ``#`` comments) override the defaults, and explicit flags override
the file. The resolved settings are echoed to ``<run-dir>/config.resolved``
next to ``metrics.csv``, so ``sami <cmd> --config <run-dir>/config.resolved``
repeats a run. Logs go to standard error; data goes to files.

Exit codes: 0 success, 1 bad input or configuration, 2 internal failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptionError, InputError, SamiError

log = logging.getLogger("sami")


@dataclass(frozen=True)
class Opt:
    key: str
    type: type
    default: object
    help: str = ""


def _data_opts(split, count):
    return [
        Opt("data", str, "", "corpus directory; empty synthesizes scenes in memory"),
        Opt("split", str, split, "split to synthesize (train, val, test)"),
        Opt("count", int, count, "scenes to synthesize, or max scenes to load (0 = all)"),
        Opt("data_seed", int, 0, "seed of the synthetic corpus"),
    ]


COMMON = [
    Opt("seed", int, 0, "master seed"),
    Opt("threads", int, 1, "BLAS worker threads (1 = deterministic)"),
    Opt("run_dir", str, "", "output directory (default runs/<subcommand>)"),
    Opt("log_level", str, "info", "debug, info, warning or error"),
]

PRETRAIN_OPTS = [
    Opt("teacher", str, "random:0", "teacher checkpoint path or random:<seed>[:<preset>]"),
    Opt("encoder", str, "s-tiny", "student preset"),
    Opt("mask_ratio", float, 0.75),
    Opt("loss", str, "mse", "mse or cosine"),
    Opt("decode", str, "masked-only", "masked-only or all-tokens"),
    Opt("decoder_depth", int, 2),
    Opt("decoder_heads", int, 4),
    Opt("steps", int, 200),
    Opt("batch_size", int, 16),
    Opt("lr", float, 1e-3),
    Opt("warmup_frac", float, 0.1),
    Opt("weight_decay", float, 0.05),
    Opt("normalize_target", bool, False, "layer-normalize teacher features"),
]

SCHEMAS = {
    "gen-data": _data_opts("train", 256) + [
        Opt("out", str, "", "corpus directory to write (default <run-dir>/corpus)"),
        Opt("size", int, 64),
        Opt("min_shapes", int, 2),
        Opt("max_shapes", int, 5),
        Opt("noise", float, 0.05),
    ],
    "teacher-train": _data_opts("train", 256) + [
        Opt("encoder", str, "t-big", "teacher preset"),
        Opt("steps", int, 300),
        Opt("batch_size", int, 16),
        Opt("lr", float, 1.5e-3),
        Opt("mask_ratio", float, 0.75),
        Opt("warmup_frac", float, 0.1),
        Opt("weight_decay", float, 0.05),
        Opt("out", str, "", "checkpoint path (default <run-dir>/teacher.ckpt)"),
    ],
    "pretrain": _data_opts("train", 64) + PRETRAIN_OPTS + [
        Opt("out", str, "", "checkpoint path (default <run-dir>/sami.ckpt)"),
    ],
    "finetune": _data_opts("train", 2048) + [
        Opt("init", str, "", "SAMI/teacher/EfficientSAM checkpoint to start from; empty = random"),
        Opt("encoder", str, "s-tiny", "encoder preset when starting from scratch"),
        Opt("steps", int, 8000),
        Opt("batch_size", int, 8),
        Opt("lr", float, 1e-3),
        Opt("warmup_steps", int, 50),
        Opt("weight_decay", float, 0.1),
        Opt("loss_recipe", str, "focal-dice", "focal-dice or dice-bce"),
        Opt("point_prob", float, 0.5, "share of point prompts (rest are boxes)"),
        Opt("decoder_dim", int, 64),
        Opt("decoder_depth", int, 2),
        Opt("out", str, "", "checkpoint path (default <run-dir>/model.ckpt)"),
    ],
    "eval-point": _data_opts("test", 128) + [
        Opt("model", str, "", "EfficientSAM checkpoint, or 'oracle'"),
        Opt("clicks", int, 1),
        Opt("replace", bool, True, "sample clicks with replacement"),
        Opt("overlays", int, 4, "overlay images to render"),
    ],
    "eval-box": _data_opts("test", 128) + [
        Opt("model", str, "", "EfficientSAM checkpoint, or 'oracle'"),
        Opt("detections", str, "", "CSV scene,r0,c0,r1,c1,score; empty = GT tightest boxes"),
        Opt("overlays", int, 4),
    ],
    "segment": [
        Opt("model", str, "", "EfficientSAM checkpoint"),
        Opt("image", str, "", "input PPM/PGM"),
        Opt("points", str, "", "';'-separated r,c[,fg|bg] (also via repeated --point)"),
        Opt("box", str, "", "r0,c0,r1,c1"),
        Opt("grid", int, 0, "k: segment a k x k grid of single-point prompts"),
        Opt("out", str, "", "mask PGM (default <run-dir>/mask.pgm)"),
        Opt("overlay", str, "", "optional overlay PPM"),
    ],
    "ablate": _data_opts("train", 64) + PRETRAIN_OPTS + [
        Opt("axis", str, "mask-ratio", "mask-ratio, loss, decode-mode or teacher"),
        Opt("values", str, "", "comma-separated values (default: the axis' standard set)"),
        Opt("heldout", int, 16, "held-out scenes for the comparable reconstruction scores"),
    ],
    "bench": [
        Opt("encoders", str, "s-tiny,s-small", "presets to benchmark"),
        Opt("model", str, "", "benchmark this checkpoint instead of fresh presets"),
        Opt("count", int, 8),
        Opt("warmup", int, 2),
        Opt("iters", int, 10),
    ],
    "grad-check": [
        Opt("max_coords", int, 6, "entries probed per tensor"),
        Opt("tolerance", float, 1e-4),
    ],
}

HELP = {
    "gen-data": "write a synthetic corpus (PPM images, PGM instance masks, manifest.csv)",
    "teacher-train": "pretrain the frozen teacher encoder with pixel MAE",
    "pretrain": "SAMI masked feature-reconstruction pretraining of a student encoder",
    "finetune": "train the promptable segmentation model end to end",
    "eval-point": "point-prompt evaluation (1 or 3 clicks, most confident mask)",
    "eval-box": "box-prompt evaluation (GT boxes or a detection file) with mIoU and AP",
    "segment": "segment one image from points, a box or a point grid",
    "ablate": "pretraining ablation over one axis",
    "bench": "parameter counts and single-request throughput",
    "grad-check": "finite-difference audit of the training graphs",
}


# -- configuration -----------------------------------------------------------------------

def _flag(key):
    return "--" + key.replace("_", "-")


def _convert(opt, raw):
    if opt.type is bool:
        if isinstance(raw, bool):
            return raw
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"'{opt.key}' expects true/false, got '{raw}'")
    try:
        return opt.type(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"'{opt.key}' expects {opt.type.__name__}, got '{raw}'") from None


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` pairs; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def resolve_config(command, file_values, flag_values):
    schema = COMMON + SCHEMAS[command]
    by_key = {o.key: o for o in schema}
    file_values = dict(file_values)
    cmd = file_values.pop("command", command)
    if cmd != command:
        raise ConfigError(f"config file is for '{cmd}', not '{command}'")
    unknown = sorted(set(file_values) - set(by_key))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {o.key: o.default for o in schema}
    for k, v in file_values.items():
        cfg[k] = _convert(by_key[k], v)
    for k, v in flag_values.items():
        if v is not None:
            cfg[k] = _convert(by_key[k], v)
    if not cfg["run_dir"]:
        cfg["run_dir"] = os.path.join("runs", command)
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(command, cfg):
    lines = [f"# resolved settings for 'sami {command}'", f"command = {command}"]
    for o in COMMON + SCHEMAS[command]:
        lines.append(f"{o.key} = {_format_value(cfg[o.key])}")
    return "\n".join(lines) + "\n"


class Namespace(dict):
    __getattr__ = dict.__getitem__


# -- shared helpers ------------------------------------------------------------------------

def write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_format_value(v) for v in r])


def write_kv(run_dir, rows):
    write_rows(os.path.join(run_dir, "metrics.csv"), ["key", "value"], rows)


def load_data(cfg):
    from .data import SPLITS, Corpus, generate_split, load_corpus

    if cfg.data:
        if not os.path.isdir(cfg.data):
            raise InputError(f"corpus directory '{cfg.data}' does not exist")
        return load_corpus(cfg.data, limit=cfg.count or None)
    if cfg.split not in SPLITS:
        raise ConfigError(f"unknown split '{cfg.split}' (have {', '.join(SPLITS)})")
    if cfg.count < 1:
        raise ConfigError("count must be >= 1 when synthesizing")
    return Corpus.from_scenes(generate_split(cfg.data_seed, cfg.split, cfg.count))


def _read_checkpoint(path):
    from .checkpoint import load_checkpoint

    if not path:
        raise InputError("a checkpoint path is required")
    if not os.path.isfile(path):
        raise InputError(f"checkpoint '{path}' not found")
    return load_checkpoint(path)


def load_segmenter(path):
    from .segment import EfficientSAM, SegConfig

    ckpt = _read_checkpoint(path)
    if ckpt.config.get("kind") != "efficientsam":
        raise ConfigError(f"'{path}' is a {ckpt.config.get('kind')} checkpoint, not an EfficientSAM model")
    model = EfficientSAM(SegConfig.from_dict(ckpt.config["seg"]), np.random.default_rng(0))
    model.load_state_dict(ckpt.params())
    return model


def _history_rows(history):
    return [(s, lr, loss) for s, lr, loss in history]


# -- subcommands -------------------------------------------------------------------------------

def cmd_gen_data(cfg):
    from .data import SPLITS, SceneConfig, generate_split, write_corpus

    if cfg.split not in SPLITS:
        raise ConfigError(f"unknown split '{cfg.split}'")
    scfg = SceneConfig(size=cfg.size, n_shapes=(cfg.min_shapes, cfg.max_shapes), noise=cfg.noise)
    scenes = generate_split(cfg.data_seed, cfg.split, cfg.count, scfg)
    out = cfg.out or os.path.join(cfg.run_dir, "corpus")
    write_corpus(out, scenes)
    n_inst = sum(s.num_instances for s in scenes)
    checksum = float(sum(float(np.sum(s.image, dtype=np.float64)) for s in scenes))
    log.info("wrote %d scenes / %d instances to %s", len(scenes), n_inst, out)
    write_kv(cfg.run_dir, [("scenes", len(scenes)), ("instances", n_inst),
                           ("mean_instances", n_inst / max(len(scenes), 1)), ("pixel_sum", checksum)])


def cmd_teacher_train(cfg):
    from .checkpoint import save_checkpoint
    from .teacher import TeacherTrainConfig, teacher_checkpoint, train_teacher

    corpus = load_data(cfg)
    tcfg = TeacherTrainConfig(encoder=cfg.encoder, steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr,
                              warmup_frac=cfg.warmup_frac, mask_ratio=cfg.mask_ratio,
                              weight_decay=cfg.weight_decay, seed=cfg.seed)
    if not 0.0 <= tcfg.mask_ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {tcfg.mask_ratio}")
    encoder, hist = train_teacher(corpus.images, tcfg, _progress("teacher", cfg.steps))
    out = cfg.out or os.path.join(cfg.run_dir, "teacher.ckpt")
    save_checkpoint(out, teacher_checkpoint(encoder, f"mae-{cfg.encoder}-seed{cfg.seed}"))
    write_rows(os.path.join(cfg.run_dir, "train_log.csv"), ["step", "lr", "loss"], _history_rows(hist))
    write_kv(cfg.run_dir, [("steps", cfg.steps), ("first_loss", hist[0][2]), ("final_loss", hist[-1][2]),
                           ("final_loss_ma10", float(np.mean([h[2] for h in hist[-10:]]))),
                           ("params", encoder.num_parameters())])


def _progress(tag, total):
    every = max(1, total // 10)

    def cb(step, lr, loss):
        if step % every == 0 or step == total - 1:
            log.info("%s step %d/%d lr=%.3g loss=%.4f", tag, step + 1, total, lr, loss)

    return cb


def _pretrain_config(cfg):
    from .pretrain import PretrainConfig

    return PretrainConfig(encoder=cfg.encoder, mask_ratio=cfg.mask_ratio, loss=cfg.loss, decode=cfg.decode,
                          decoder_depth=cfg.decoder_depth, decoder_heads=cfg.decoder_heads, steps=cfg.steps,
                          batch_size=cfg.batch_size, lr=cfg.lr, warmup_frac=cfg.warmup_frac,
                          weight_decay=cfg.weight_decay, normalize_target=cfg.normalize_target, seed=cfg.seed)


def _teacher(spec):
    from .teacher import load_teacher

    if spec.startswith("random:"):
        log.warning("using an untrained teacher (%s); train one with 'sami teacher-train'", spec)
    return load_teacher(spec)


def cmd_pretrain(cfg):
    from .checkpoint import Checkpoint, save_checkpoint
    from .pretrain import run_pretraining

    pcfg = _pretrain_config(cfg)
    pcfg.validate()
    corpus = load_data(cfg)
    teacher = _teacher(cfg.teacher)
    model, _, hist = run_pretraining(corpus.images, teacher, pcfg, _progress("pretrain", cfg.steps))
    out = cfg.out or os.path.join(cfg.run_dir, "sami.ckpt")
    config = {"kind": "sami", "encoder": model.cfg.to_dict(), "teacher": teacher.tag,
              "teacher_dim": teacher.cfg.embed_dim, "decode": pcfg.decode, "decoder_depth": pcfg.decoder_depth}
    save_checkpoint(out, Checkpoint(config, model.state_dict()))
    write_rows(os.path.join(cfg.run_dir, "loss.csv"), ["step", "lr", "loss"], _history_rows(hist))
    losses = [h[2] for h in hist]
    early = float(np.mean(losses[:10]))
    late = float(np.mean(losses[-10:]))
    write_kv(cfg.run_dir, [("steps", cfg.steps), ("first_loss", losses[0]), ("loss_ma10_at_step10", early),
                           ("final_loss_ma10", late), ("final_over_early", late / early),
                           ("params", model.encoder.num_parameters())])


def cmd_finetune(cfg):
    from .checkpoint import Checkpoint, save_checkpoint
    from .segment import DecoderConfig, EfficientSAM, FinetuneConfig, SegConfig, build_model, run_finetuning
    from .teacher import encoder_from_checkpoint
    from .vit import preset

    dec = DecoderConfig(dim=cfg.decoder_dim, depth=cfg.decoder_depth)
    fcfg = FinetuneConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, warmup_steps=cfg.warmup_steps,
                          weight_decay=cfg.weight_decay, loss_recipe=cfg.loss_recipe, point_prob=cfg.point_prob,
                          decoder=dec, seed=cfg.seed)
    fcfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.init:
        ckpt = _read_checkpoint(cfg.init)
        kind = ckpt.config.get("kind")
        if kind == "efficientsam":
            model = EfficientSAM(SegConfig.from_dict(ckpt.config["seg"]), rng)
            model.load_state_dict(ckpt.params())
        elif kind in ("sami", "teacher"):
            enc = encoder_from_checkpoint(ckpt)
            model = build_model(enc.cfg, fcfg, rng, enc.state_dict())
        else:
            raise ConfigError(f"cannot initialise from a '{kind}' checkpoint")
    else:
        model = build_model(preset(cfg.encoder), fcfg, rng)
    corpus = load_data(cfg)
    _, hist = run_finetuning(corpus, model, fcfg, _progress("finetune", cfg.steps))
    out = cfg.out or os.path.join(cfg.run_dir, "model.ckpt")
    save_checkpoint(out, Checkpoint({"kind": "efficientsam", "seg": model.cfg.to_dict(),
                                     "init": cfg.init or "random"}, model.state_dict()))
    write_rows(os.path.join(cfg.run_dir, "train_log.csv"), ["step", "lr", "loss"], _history_rows(hist))
    tail = [h[2] for h in hist[-50:] if np.isfinite(h[2])]
    write_kv(cfg.run_dir, [("steps", cfg.steps), ("final_loss_ma50", float(np.mean(tail))),
                           ("params", model.num_parameters())])


def _eval_model(cfg, corpus):
    from .evaluation import OracleModel

    if cfg.model == "oracle":
        return OracleModel(corpus)
    return load_segmenter(cfg.model)


def cmd_eval_point(cfg):
    from .evaluation import eval_point_protocol

    if cfg.clicks not in (1, 3):
        raise ConfigError("clicks must be 1 or 3")
    corpus = load_data(cfg)
    model = _eval_model(cfg, corpus)
    rep = eval_point_protocol(model, corpus, clicks=cfg.clicks, seed=cfg.seed, replace=cfg.replace,
                              overlay_dir=os.path.join(cfg.run_dir, "overlays"), overlays=cfg.overlays)
    rep.write(cfg.run_dir)
    log.info("%s: mIoU %.4f  AP %.4f over %d prompts", rep.protocol, rep.miou, rep.ap, len(rep.records))


def cmd_eval_box(cfg):
    from .evaluation import eval_box_protocol, read_detections

    corpus = load_data(cfg)
    model = _eval_model(cfg, corpus)
    dets = None
    if cfg.detections:
        if not os.path.isfile(cfg.detections):
            raise InputError(f"detection file '{cfg.detections}' not found")
        dets = read_detections(cfg.detections, corpus)
    rep = eval_box_protocol(model, corpus, dets, overlay_dir=os.path.join(cfg.run_dir, "overlays"),
                            overlays=cfg.overlays)
    rep.write(cfg.run_dir)
    log.info("%s: mIoU %.4f  AP %.4f over %d prompts", rep.protocol, rep.miou, rep.ap, len(rep.records))


def _parse_ints(text, n, what):
    parts = [p.strip() for p in text.split(",")]
    try:
        vals = [int(p) for p in parts[:n]]
    except ValueError:
        raise InputError(f"bad {what} '{text}'") from None
    if len(vals) != n:
        raise InputError(f"{what} '{text}' needs {n} integers")
    return vals, parts[n:]


def parse_points(text):
    from .segment import BG, FG, Prompt

    pts = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        (r, c), rest = _parse_ints(item, 2, "point")
        label = FG
        if rest:
            if len(rest) > 1 or rest[0].lower() not in ("fg", "bg", "1", "0"):
                raise InputError(f"bad point label in '{item}' (use fg or bg)")
            label = FG if rest[0].lower() in ("fg", "1") else BG
        pts.append((r, c, label))
    return Prompt("points", pts)


def cmd_segment(cfg):
    from .evaluation import render_overlay
    from .imageio import load_image, save_image, save_mask, to_float
    from .segment import Prompt, select_best_iou_with_box, select_most_confident

    modes = [bool(cfg.points), bool(cfg.box), cfg.grid > 0]
    if sum(modes) != 1:
        raise InputError("give exactly one of --point, --box or --grid")
    if not cfg.image or not os.path.isfile(cfg.image):
        raise InputError(f"image '{cfg.image}' not found")
    model = load_segmenter(cfg.model)
    img = load_image(cfg.image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    image = to_float(img)
    size = model.cfg.encoder.image_size
    if image.shape[:2] != (size, size):
        raise InputError(f"image is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
    rows = []
    if cfg.grid:
        k = cfg.grid
        for i in range(k):
            for j in range(k):
                r, c = int((i + 0.5) * size / k), int((j + 0.5) * size / k)
                prompt = Prompt.from_points([(r, c)])
                pred = model.predict(image, prompt)
                idx, mask = select_most_confident(pred)
                save_mask(os.path.join(cfg.run_dir, f"grid_{i:02d}_{j:02d}.pgm"), mask)
                rows.append((f"{r},{c}", idx, float(pred.scores[idx]), int(mask.sum())))
        write_rows(os.path.join(cfg.run_dir, "metrics.csv"), ["prompt", "mask_index", "confidence", "area"], rows)
        return
    if cfg.box:
        box, _ = _parse_ints(cfg.box, 4, "box")
        prompt = Prompt.from_box(box)
        prompt.validate(size)
        pred = model.predict(image, prompt)
        idx, mask, _ = select_best_iou_with_box(pred, prompt.box)
    else:
        prompt = parse_points(cfg.points)
        prompt.validate(size)
        pred = model.predict(image, prompt)
        idx, mask = select_most_confident(pred)
    save_mask(cfg.out or os.path.join(cfg.run_dir, "mask.pgm"), mask)
    if cfg.overlay:
        save_image(cfg.overlay, render_overlay(image, mask, prompt))
    write_kv(cfg.run_dir, [("mask_index", idx), ("confidence", float(pred.scores[idx])),
                           ("area", int(mask.sum()))])


def cmd_ablate(cfg):
    from .data import Corpus, generate_split
    from .evaluation import ABLATION_AXES, ABLATION_COLUMNS, ablate

    if cfg.axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis '{cfg.axis}' (have {', '.join(ABLATION_AXES)})")
    values = [v.strip() for v in cfg["values"].split(",") if v.strip()]
    base = _pretrain_config(cfg)
    base.validate()
    corpus = load_data(cfg)
    heldout = Corpus.from_scenes(generate_split(cfg.data_seed, "val", cfg.heldout)).images
    teacher = None if cfg.axis == "teacher" else _teacher(cfg.teacher)
    rows = ablate(cfg.axis, values, corpus.images, heldout, base, teacher=teacher, teacher_loader=_teacher)
    write_rows(os.path.join(cfg.run_dir, "metrics.csv"), ABLATION_COLUMNS,
               [[r[c] for c in ABLATION_COLUMNS] for r in rows])
    for r in rows:
        log.info("%s=%s final=%.4f heldout_mse=%.4f heldout_cos=%.4f", r["axis"], r["value"],
                 r["final_loss"], r["heldout_mse"], r["heldout_cosine"])


def cmd_bench(cfg):
    from .data import Corpus, generate_split
    from .evaluation import bench_throughput
    from .segment import DecoderConfig, EfficientSAM, SegConfig
    from .vit import preset

    corpus = Corpus.from_scenes(generate_split(cfg.seed, "test", cfg.count))
    if cfg.model:
        models = [(os.path.basename(cfg.model), load_segmenter(cfg.model))]
    else:
        names = [n.strip() for n in cfg.encoders.split(",") if n.strip()]
        models = [(n, EfficientSAM(SegConfig(preset(n), DecoderConfig()), np.random.default_rng(cfg.seed)))
                  for n in names]
    kv, timing = [], []
    for name, model in models:
        res = bench_throughput(model, corpus, warmup=cfg.warmup, iters=cfg.iters)
        kv += [(f"{name}.params", res["params"]), (f"{name}.params_analytic", res["params_analytic"])]
        timing.append((name, res["params"], res["median_s"], res["p95_s"], res["images_per_s"]))
        log.info("%s: %d params, %.1f images/s (median %.2f ms)", name, res["params"],
                 res["images_per_s"], 1e3 * res["median_s"])
    write_kv(cfg.run_dir, kv)
    write_rows(os.path.join(cfg.run_dir, "bench.csv"),
               ["model", "params", "median_s", "p95_s", "images_per_s"], timing)


def cmd_grad_check(cfg):
    from .diagnostics import randomized_grad_check

    worst, report = randomized_grad_check(cfg.seed, cfg.max_coords)
    rows = [(g, n, e) for g, r in report.items() for n, e in r.items()]
    write_rows(os.path.join(cfg.run_dir, "gradcheck.csv"), ["graph", "tensor", "rel_error"], rows)
    write_kv(cfg.run_dir, [("max_rel_error", worst), ("tensors", len(rows)), ("tolerance", cfg.tolerance)])
    print(f"max relative error: {worst:.3e}")
    if not worst < cfg.tolerance:
        raise _CheckFailed(f"max relative error {worst:.3e} exceeds {cfg.tolerance:g}")


class _CheckFailed(SamiError):
    pass


HANDLERS = {
    "gen-data": cmd_gen_data,
    "teacher-train": cmd_teacher_train,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval-point": cmd_eval_point,
    "eval-box": cmd_eval_box,
    "segment": cmd_segment,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
}


# -- argument parsing -----------------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def build_parser():
    parser = _Parser(prog="sami", description="SAMI pretraining and promptable segmentation at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>")
    for name in SCHEMAS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="flat key = value settings file")
        for o in COMMON + SCHEMAS[name]:
            kw = {"dest": o.key, "default": None, "help": f"{o.help} (default: {_format_value(o.default)})".strip()}
            if name == "segment" and o.key == "points":
                p.add_argument("--point", action="append", dest="point_list", default=None,
                               help="r,c[,fg|bg]; repeat for several points")
            p.add_argument(_flag(o.key), **kw)
    return parser


def _setup_logging(level):
    lvl = getattr(logging, str(level).upper(), None)
    if not isinstance(lvl, int):
        raise ConfigError(f"unknown log level '{level}'")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(lvl)


def run(argv):
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        sys.stderr.write("sami: error: a subcommand is required\n")
        return 1
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    if command is None:
        parser.print_usage(sys.stderr)
        return 1
    config_path = args.pop("config")
    point_list = args.pop("point_list", None)
    if point_list:
        args["points"] = ";".join(([args["points"]] if args.get("points") else []) + point_list)
    file_values = {}
    if config_path:
        if not os.path.isfile(config_path):
            raise InputError(f"config file '{config_path}' not found")
        with open(config_path) as f:
            file_values = parse_config_text(f.read(), config_path)
    cfg = Namespace(resolve_config(command, file_values, args))
    _setup_logging(cfg.log_level)
    os.makedirs(cfg.run_dir, exist_ok=True)
    with open(os.path.join(cfg.run_dir, "config.resolved"), "w") as f:
        f.write(format_config(command, cfg))
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=cfg.threads):
        HANDLERS[command](cfg)
    return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run(argv)
    except _UsageError:
        return 1
    except (InputError, ConfigError, CorruptionError, FileNotFoundError) as e:
        sys.stderr.write(f"sami: error: {e}\n")
        return 1
    except SystemExit as e:          # --help
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - last-resort mapping to the internal-failure code
        sys.stderr.write(f"sami: internal error: {type(e).__name__}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
