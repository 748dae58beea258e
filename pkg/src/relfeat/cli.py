"""Command-line entry points: synth, train, eval, ablate, dump-signals, match.

Exit codes: 0 success, 2 usage or input error, 3 runtime or model error.
Log verbosity comes from the ``RELFEAT_LOG`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import evaluation as ev
from . import geometry as geo
from . import network as nw
from . import pnm
from . import teacher as tch
from . import trainer as tr
from . import tsg

log = logging.getLogger("relfeat")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
LOG_ENV = "RELFEAT_LOG"


class UsageError(Exception):
    pass


INPUT_ERRORS = (UsageError, FileNotFoundError, NotADirectoryError, PermissionError, geo.HomographyParseError,
                pnm.ImageFormatError, tsg.FormatError, dg.SequenceError, json.JSONDecodeError)


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise argparse.ArgumentTypeError(f"size {h}x{w} must be positive and divisible by 8")
    return h, w


def echo_config(command: str, cfg: dict) -> None:
    print(json.dumps({"command": command, "config": cfg}, sort_keys=True, default=str))


def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise UsageError(f"output directory {p} is not writable")
    return p


def _check_parent(path) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise UsageError(f"output directory {parent} is not writable")
    return p


def _data_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"dataset directory {p} does not exist")
    return p


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    h, w = args.size
    echo_config("synth", {"out": args.out, "scenes": args.scenes, "size": [h, w], "seed": args.seed,
                          "shapes": args.shapes})
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    out = _ensure_dir(args.out)
    manifest = dg.write_synthetic_dataset(out, args.scenes, h, w, args.seed, args.shapes)
    print(f"wrote {len(manifest['sequences'])} sequences to {out}")
    return EXIT_OK


TRAIN_FLAGS = ("lr", "weight_decay", "batch", "epochs", "steps", "seed", "width_factor", "margin", "temperature",
               "train_pairs", "eval_pairs", "checkpoint_every")


def resolve_train_config(args) -> tr.TrainConfig:
    """Defaults < config file < explicit flags."""
    base = tr.TrainConfig.from_file(args.config).to_dict() if args.config else tr.TrainConfig().to_dict()
    for k in TRAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            base[k] = v
    for k in ("psrd", "eag", "wsc"):
        if getattr(args, f"no_{k}", False):
            base[k] = False
    return tr.TrainConfig.from_dict(base)


def _training_pairs(data: Path, cfg: tr.TrainConfig) -> list[dg.TrainingPair]:
    pairs = dg.load_training_pairs(data)
    if not pairs:
        raise UsageError(f"{data}: no training pairs found")
    size = pairs[0].scene1.image.shape
    if size != (cfg.height, cfg.width):
        raise UsageError(f"{data}: images are {size[0]}x{size[1]}, config expects {cfg.height}x{cfg.width}")
    return pairs


def _sized(cfg: tr.TrainConfig, data: Path) -> tr.TrainConfig:
    manifest = data / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        return tr.TrainConfig.from_dict({**cfg.to_dict(), "height": m["height"], "width": m["width"]})
    return cfg


def cmd_train(args) -> int:
    data = _data_dir(args.data)
    cfg = _sized(resolve_train_config(args), data)
    echo_config("train", {**cfg.to_dict(), "data": str(data), "out": args.out, "resume": args.resume})
    out = _ensure_dir(args.out)
    pairs = _training_pairs(data, cfg)
    res = tr.run_training(cfg, out, pairs=pairs, resume=args.resume)
    if res.report is not None:
        print(json.dumps({"heldout": res.report.summary()}, sort_keys=True))
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def _extractor(args, extract: ev.ExtractConfig):
    if args.features:
        return ev.DumpedFeatures(args.features)
    if args.detector == "patch":
        return ev.PatchExtractor(max_k=extract.max_k, nms_radius=extract.nms_radius)
    if not args.ckpt:
        raise UsageError("one of --ckpt, --features or --detector patch is required")
    params, cfg = nw.load_checkpoint(args.ckpt)
    return ev.ModelExtractor(params, cfg, extract)


def cmd_eval(args) -> int:
    extract = ev.ExtractConfig(args.threshold, args.nms_radius, args.max_k)
    echo_config("eval", {"ckpt": args.ckpt, "data": args.data, "out": args.out, "plot": args.plot,
                         "ablate": args.ablate, "features": args.features, "detector": args.detector,
                         "exclude": args.exclude, "extract": extract.__dict__})
    data = _data_dir(args.data)
    out = _check_parent(args.out)
    seqs = dg.load_hpatches(data, exclude=args.exclude)
    if not seqs:
        raise UsageError(f"{data}: no usable sequences")
    if args.ablate:
        return _eval_ablation(Path(args.ablate), seqs, extract, out, args.plot)
    report = ev.run_benchmark(_extractor(args, extract), seqs)
    report.write_csv(out)
    if args.plot:
        Path(_check_parent(args.plot)).write_text(ev.svg_curve({"aggregate": report.mma}))
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def _eval_ablation(root: Path, seqs, extract, out: Path, plot) -> int:
    rows, curves = [], {}
    for name, toggles in tr.ABLATION_ROWS:
        ckpt = root / tr.ablation_dirname(name) / "final.tsg"
        if not ckpt.exists():
            raise UsageError(f"ablation checkpoint {ckpt} not found")
        params, cfg = nw.load_checkpoint(ckpt)
        rep = ev.run_benchmark(ev.ModelExtractor(params, cfg, extract), seqs)
        rows.append(tr.AblationRow(name, cfg.psrd, cfg.eag, toggles["wsc"], rep.mma_at(3), rep.auc5,
                                   rep.mean_matches))
        curves[name] = rep.mma
    table = tr.ablation_table(rows)
    out.write_text(table)
    if plot:
        Path(_check_parent(plot)).write_text(ev.svg_curve(curves))
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data = _data_dir(args.data)
    cfg = _sized(resolve_train_config(args), data)
    echo_config("ablate", {**cfg.to_dict(), "data": str(data), "out": args.out})
    out = _ensure_dir(args.out)
    pairs = _training_pairs(data, cfg)
    rows = tr.run_ablation(cfg, out, pairs=pairs)
    table = tr.ablation_table(rows)
    (out / "ablation.md").write_text(table)
    print(table, end="")
    return EXIT_OK


def _gray_ids(labels: np.ndarray) -> np.ndarray:
    top = max(int(labels.max(initial=0)), 1)
    return labels.astype(np.float64) / top


def cmd_dump_signals(args) -> int:
    echo_config("dump-signals", {"data": args.data, "sequence": args.sequence, "image": args.image,
                                 "seed": args.seed, "size": args.size, "out": args.out})
    out = _ensure_dir(args.out)
    if args.data:
        seq_dir = _data_dir(args.data) / args.sequence
        img = pnm.read_gray(dg.find_image(seq_dir, args.image))
        scene = dg.load_scene_signals(seq_dir, args.image, img)
    else:
        h, w = args.size
        scene = dg.generate_scene(args.seed, h, w)
    pnm.write_pgm(out / "image.pgm", scene.image)
    tch.write_edge_pgm(out / "edge.pgm", scene.edge)
    pnm.write_pgm(out / "grouping.pgm", _gray_ids(scene.grouping))
    pnm.write_pgm(out / "keypoints.pgm", scene.keypoint_labels)
    rel = tch.relation_matrix(scene.teacher_F)
    pnm.write_pgm(out / "relation.pgm", (rel + 1.0) / 2.0)
    f, g, e = scene.signals()
    tch.write_signal(out / "feat.tsg", f)
    tch.write_signal(out / "group.tsg", g)
    tch.write_signal(out / "edge.tsg", e)
    summary = {"groups": sorted(int(v) for v in np.unique(scene.grouping)), "edge_pixels": int(scene.edge.sum()),
               "keypoints": int(scene.keypoint_labels.sum()), "teacher_shape": list(scene.teacher_F.shape)}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def draw_line(img: np.ndarray, p, q, color) -> None:
    n = int(np.ceil(max(abs(q[0] - p[0]), abs(q[1] - p[1])))) + 1
    xs = np.rint(np.linspace(p[0], q[0], n)).astype(int)
    ys = np.rint(np.linspace(p[1], q[1], n)).astype(int)
    ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = color


def match_visualization(img1, img2, kp1, kp2, matches) -> np.ndarray:
    h = max(img1.shape[0], img2.shape[0])
    canvas = np.zeros((h, img1.shape[1] + img2.shape[1], 3))
    canvas[:img1.shape[0], :img1.shape[1]] = img1[..., None]
    canvas[:img2.shape[0], img1.shape[1]:] = img2[..., None]
    off = img1.shape[1]
    for i, j, _ in matches:
        draw_line(canvas, kp1[i, :2], kp2[j, :2] + [off, 0], (0.0, 1.0, 0.0))
    return canvas


def cmd_match(args) -> int:
    echo_config("match", {"ckpt": args.ckpt, "img1": args.img1, "img2": args.img2, "out": args.out,
                          "matches": args.matches})
    img1, img2 = pnm.read_gray(args.img1), pnm.read_gray(args.img2)
    out = _check_parent(args.out)
    params, cfg = nw.load_checkpoint(args.ckpt)
    ext = ev.ModelExtractor(params, cfg, ev.ExtractConfig(args.threshold, args.nms_radius, args.max_k))
    kp1, d1 = ext(img1)
    kp2, d2 = ext(img2)
    matches = ev.mutual_nn_match(d1, d2)
    if not matches:
        print("warning: no matches (empty keypoint or descriptor set)", file=sys.stderr)
    pnm.write_ppm(out, match_visualization(img1, img2, kp1, kp2, matches))
    txt = Path(args.matches) if args.matches else out.with_suffix(".txt")
    lines = [f"{kp1[i, 0]:.0f} {kp1[i, 1]:.0f} {kp2[j, 0]:.0f} {kp2[j, 1]:.0f} {d:.6f}" for i, j, d in matches]
    txt.write_text("# x1 y1 x2 y2 distance\n" + "".join(line + "\n" for line in lines))
    print(f"{len(matches)} matches -> {out}, {txt}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_train_flags(p) -> None:
    p.add_argument("--data", required=True, help="dataset written by `synth`")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of TrainConfig fields; explicit flags win")
    p.add_argument("--no-psrd", action="store_true", help="disable relation distillation")
    p.add_argument("--no-eag", action="store_true", help="disable edge attention guidance")
    p.add_argument("--no-wsc", action="store_true", help="disable the grouping contrastive loss")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--width-factor", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-pairs", type=int)
    p.add_argument("--eval-pairs", type=int)
    p.add_argument("--checkpoint-every", type=int)


def _add_extract_flags(p) -> None:
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--nms-radius", type=int, default=2)
    p.add_argument("--max-k", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relfeat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic HPatches-layout dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--size", type=parse_size, default=(64, 64), help="HxW, both divisible by 8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MMA benchmark on an HPatches-layout directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV report (or ablation table with --ablate)")
    p.add_argument("--ckpt")
    p.add_argument("--features", help="directory of dumped <seq>/<k>.feat.tsg files")
    p.add_argument("--detector", choices=["patch"], help="classical corner + patch baseline instead of a model")
    p.add_argument("--ablate", help="directory written by `ablate`; emits the four-row table")
    p.add_argument("--plot", help="SVG of the MMA curve")
    p.add_argument("--exclude", nargs="*", default=[], help="sequence names to skip")
    _add_extract_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the four toggle configurations and tabulate them")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-signals", help="write teacher signals of one image as PGM + TSG1")
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--sequence", default="s_00000")
    p.add_argument("--image", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="generate a scene when --data is absent")
    p.add_argument("--size", type=parse_size, default=(64, 64))
    p.set_defaults(func=cmd_dump_signals)

    p = sub.add_parser("match", help="match two images and draw the result")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--img1", required=True)
    p.add_argument("--img2", required=True)
    p.add_argument("--out", required=True, help="side-by-side PPM")
    p.add_argument("--matches", help="text list of matches (default: next to --out)")
    _add_extract_flags(p)
    p.set_defaults(func=cmd_match)
    return ap


def setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # model / runtime failures
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
