"""Command-line entry point.

Subcommands: `gen-data` (synthetic dataset), `train` (four ablation modes),
`eval` (detection AP + segmentation IoU report), `infer` (single image), and
`gradcheck` (finite-difference verification of every differentiable op).
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import autograd as ag
from . import data_io as dio
from . import det_head as dh
from . import ltd as ltd_mod
from . import metrics as mt
from . import seg_head as sh
from . import train as tr
from .backbone import BackboneConfig, ConfigError


# ---------------------------------------------------------------------------
# config files

_INT_LIST = ("level_channels", "blocks_per_level")
_FLOAT_LIST = ("aspect_ratios", "scales")
_INT = ("stem_channels", "input_size", "base_stride", "out_channels",
        "fuse_kernel", "num_classes", "top_k", "mid_channels",
        "batch_size", "max_steps", "seed")
_FLOAT = ("iou_threshold", "neg_ratio", "nms_threshold", "score_threshold",
          "w_seg", "lr0", "beta1", "beta2", "adam_eps")

_BACKBONE_KEYS = ("stem_channels", "level_channels", "blocks_per_level",
                  "input_size", "base_stride")
_LTD_KEYS = ("out_channels", "fuse_kernel")
_ANCHOR_KEYS = ("num_classes", "aspect_ratios", "scales", "extra_scale_anchor",
                "variances", "iou_threshold", "neg_ratio", "nms_threshold",
                "score_threshold", "top_k")
_PCM_KEYS = ("target_size", "mid_channels")
_TRAIN_KEYS = ("w_seg", "lr0", "decay_milestones", "batch_size", "max_steps",
               "beta1", "beta2", "adam_eps", "seed", "mode")


def _coerce(key: str, value: str):
    if key in _INT:
        return int(value)
    if key in _FLOAT:
        return float(value)
    if key in _INT_LIST:
        return [int(v) for v in value.split(",")]
    if key in _FLOAT_LIST:
        return [float(v) for v in value.split(",")]
    if key == "decay_milestones":
        return tuple(int(v) for v in value.split(","))
    if key == "variances":
        return tuple(float(v) for v in value.split(","))
    if key == "target_size":
        return tuple(int(v) for v in value.split(","))
    if key == "extra_scale_anchor":
        return value.lower() in ("1", "true", "yes")
    return value


def build_configs(raw: dict, size: int, num_classes: int,
                  mode: str, seed: int):
    """Split flat config keys into (ModelConfig, TrainConfig).

    Keys mirror the config dataclass field names; dataset size and class
    count provide defaults, explicit keys override them.
    """
    known = set(_BACKBONE_KEYS) | set(_LTD_KEYS) | set(_ANCHOR_KEYS) \
        | set(_PCM_KEYS) | set(_TRAIN_KEYS)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    vals = {k: _coerce(k, v) for k, v in raw.items()}
    vals.setdefault("input_size", size)
    vals.setdefault("num_classes", num_classes)
    backbone = BackboneConfig(**{k: vals[k] for k in _BACKBONE_KEYS if k in vals})
    n_levels = backbone.num_levels
    anchor_kw = {k: vals[k] for k in _ANCHOR_KEYS if k in vals}
    if "scales" not in anchor_kw:
        # one scale per pyramid level, spread across typical object sizes
        anchor_kw["scales"] = list(np.linspace(0.1, 0.7, n_levels))
    anchors = dh.AnchorConfig(**anchor_kw)
    if len(anchors.scales) != n_levels:
        raise ConfigError(
            f"{len(anchors.scales)} anchor scales for {n_levels} pyramid levels")
    pcm = None
    if any(k in vals for k in _PCM_KEYS):
        t = backbone.input_size // backbone.base_stride
        pcm = sh.PcmConfig(
            target_size=vals.get("target_size", (t, t)),
            mid_channels=vals.get("mid_channels",
                                  sh.PcmConfig().mid_channels))
    model_cfg = tr.ModelConfig(
        backbone=backbone,
        ltd=ltd_mod.LtdConfig(**{k: vals[k] for k in _LTD_KEYS if k in vals}),
        anchors=anchors, pcm=pcm)
    train_kw = {k: vals[k] for k in _TRAIN_KEYS if k in vals}
    train_kw["mode"] = mode
    train_kw.setdefault("seed", seed)
    train_cfg = tr.TrainConfig(**train_kw)
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    dio.generate_shapes_dataset(args.num, args.size, args.classes,
                                seed=args.seed, out_dir=args.out)
    print(f"wrote {args.num} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    samples, meta = dio.load_dataset(args.data)
    raw = {}
    if args.config:
        with open(args.config, "r", encoding="ascii") as f:
            raw = dio.parse_config_text(f.read())
    mode = args.mode.replace("-", "_")
    model_cfg, train_cfg = build_configs(
        raw, int(meta["size"]), int(meta["classes"]), mode,
        0 if args.seed is None else args.seed)
    if args.seed is not None:
        train_cfg.seed = args.seed  # the flag wins over a config-file seed
    params, _, _ = tr.train_loop(samples, model_cfg, train_cfg,
                                 log_fn=print)
    ckpt = tr.train_checkpoint(params, train_cfg.max_steps, model_cfg,
                               train_cfg)
    dio.save_checkpoint(ckpt, args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def checkpoint_predict_fn(ckpt: dio.Checkpoint):
    """Build evaluate_dataset's predict_fn from a trained checkpoint."""
    model_cfg, mode = tr.model_config_from_checkpoint(ckpt)
    with_det = mode != "seg_only"
    with_seg = mode != "det_only"

    def predict_fn(sample):
        return tr.predict(ckpt.params, sample.image, model_cfg, mode,
                          with_det=with_det, with_seg=with_seg)

    return predict_fn


def cmd_eval(args, predict_fn=None) -> int:
    samples, meta = dio.load_dataset(args.data)
    num_classes = int(meta["classes"])
    if predict_fn is None:
        ckpt = dio.load_checkpoint(args.ckpt)
        predict_fn = checkpoint_predict_fn(ckpt)
    report = mt.evaluate_dataset(samples, predict_fn, num_classes)
    print(report.to_text())
    return 0


def cmd_infer(args) -> int:
    ckpt = dio.load_checkpoint(args.ckpt)
    model_cfg, mode = tr.model_config_from_checkpoint(ckpt)
    raw, _, _ = dio._read_netpbm(args.image, b"P6")
    image = raw.astype(np.float64).transpose(2, 0, 1) / 255.0
    dets, mask = tr.predict(ckpt.params, image, model_cfg, mode,
                            with_det=mode != "seg_only",
                            with_seg=mode != "det_only")
    if args.out_boxes:
        lines = []
        if dets is not None:
            for d in dets:
                x0, y0, x1, y1 = d.box
                lines.append(f"{d.class_id} {d.score:.6f} "
                             f"{x0:.6f} {y0:.6f} {x1:.6f} {y1:.6f}")
        dio._atomic_write(args.out_boxes,
                          ("\n".join(lines) + "\n").encode("ascii"))
        print(f"wrote {len(lines)} boxes to {args.out_boxes}")
    if args.out_mask:
        if mask is None:
            print("checkpoint has no segmentation head; skipping mask",
                  file=sys.stderr)
        else:
            dio._atomic_write(args.out_mask,
                              dio._pgm_bytes(mask.astype(np.uint8)))
            print(f"wrote mask to {args.out_mask}")
    return 0


def gradcheck_suite(seed: int = 0):
    """Finite-difference check for every differentiable op.

    Returns [(op name, max relative error)] on small random instances.
    """
    rng = np.random.default_rng(seed)

    def t(*shape):
        return ag.Tensor(rng.standard_normal(shape))

    checks = []

    checks.append(("add", lambda l: ag.sum_all(ag.add(l[0], l[1])),
                   [t(3, 4), t(3, 4)]))
    checks.append(("mul", lambda l: ag.sum_all(ag.mul(l[0], l[1])),
                   [t(3, 4), t(3, 4)]))
    checks.append(("scale", lambda l: ag.sum_all(ag.scale(l[0], -1.7)),
                   [t(5)]))
    checks.append(("sub", lambda l: ag.sum_all(ag.mul(ag.sub(l[0], l[1]),
                                                      ag.sub(l[0], l[1]))),
                   [t(4), t(4)]))
    checks.append(("relu", lambda l: ag.sum_all(ag.mul(ag.relu(l[0]), l[1])),
                   [t(4, 4), t(4, 4)]))
    checks.append(("reshape", lambda l: ag.sum_all(
        ag.mul(ag.reshape(l[0], (6,)), l[1])), [t(2, 3), t(6)]))
    checks.append(("transpose", lambda l: ag.sum_all(
        ag.mul(ag.transpose(l[0], (1, 0)), l[1])), [t(2, 3), t(3, 2)]))
    checks.append(("concat", lambda l: ag.sum_all(
        ag.mul(ag.concat([l[0], l[1]], axis=1), l[2])),
        [t(2, 2), t(2, 3), t(2, 5)]))
    checks.append(("gather_rows", lambda l: ag.sum_all(
        ag.mul(ag.gather_rows(l[0], np.array([0, 2, 2, 1])), l[1])),
        [t(4, 3), t(4, 3)]))
    checks.append(("smooth_l1", lambda l: ag.sum_all(ag.smooth_l1(l[0])),
                   [ag.Tensor(rng.uniform(-2, 2, (8,)))]))
    checks.append(("softmax", lambda l: ag.sum_all(
        ag.mul(ag.softmax(l[0]), l[1])), [t(3, 5), t(3, 5)]))
    checks.append(("log_softmax", lambda l: ag.sum_all(
        ag.mul(ag.log_softmax(l[0]), l[1])), [t(3, 5), t(3, 5)]))
    checks.append(("conv2d", lambda l: ag.sum_all(
        ag.conv2d(l[0], l[1], l[2], stride=2, padding=1)),
        [t(2, 3, 5, 5), t(4, 3, 3, 3), t(4)]))
    checks.append(("bilinear_upsample", lambda l: ag.sum_all(
        ag.mul(ag.bilinear_upsample(l[0], 7, 6), l[1])),
        [t(1, 2, 3, 3), t(1, 2, 7, 6)]))

    results = []
    for name, builder, leaves in checks:
        results.append((name, ag.grad_check(builder, leaves)))
    return results


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(seed=args.seed)
    worst = 0.0
    for name, err in results:
        print(f"{name}\t{err:.3e}")
        worst = max(worst, err)
    ok = worst < 1e-6
    print(f"worst\t{worst:.3e}\t{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltdnet",
        description="Joint object detection and semantic segmentation "
                    "on synthetic shapes.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", default="joint",
                   choices=["joint", "det-only", "seg-only", "no-ltd"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run a checkpoint on one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-boxes", default=None)
    p.add_argument("--out-mask", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OSError, ValueError, tr.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
