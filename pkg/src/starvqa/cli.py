"""Command-line entry point: ``starvqa <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .anchors import AnchorCodec, encode_mos
from .config import LOSSES, TrainConfig
from .errors import ConfigError, StarVQAError
from .io import load_checkpoint, load_manifest, read_container, save_checkpoint

log = logging.getLogger("starvqa")


def _load_config(path: str | None, seed: int | None) -> TrainConfig:
    cfg = TrainConfig.load(path) if path else TrainConfig()
    return cfg.replace(seed=seed) if seed is not None else cfg


def cmd_train(args) -> int:
    from .training import state_from_checkpoint, train_stage_image, train_stage_video, transfer_weights

    manifest = load_manifest(args.manifest)
    cfg = _load_config(args.config, args.seed)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    if args.loss is not None:
        cfg = cfg.replace(loss=args.loss)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    if args.mode == "image":
        if args.init:
            raise ConfigError("--init is only meaningful for --mode video")
        ckpt = train_stage_image(manifest, cfg, log_path=log_path)
    else:
        init = None
        if args.init:
            src = load_checkpoint(args.init)
            init = transfer_weights(src, cfg) if src.stage == "image" else state_from_checkpoint(src, "video")
        ckpt = train_stage_video(manifest, cfg, init=init, log_path=log_path)
    save_checkpoint(ckpt, out)
    print(f"wrote {out} ({ckpt.stage} stage, {ckpt.meta['epoch']} epochs); log {log_path}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, write_csv

    ckpt = load_checkpoint(args.checkpoint)
    rows = evaluate(ckpt, load_manifest(args.manifest), decoder=args.decoder, sampling=args.sampling)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
    else:
        write_csv(rows, sys.stdout)
    return 0


def cmd_infer(args) -> int:
    from .training import infer_video

    ckpt = load_checkpoint(args.checkpoint)
    pred = infer_video(ckpt, read_container(args.video), args.dataset, args.decoder, args.sampling)
    if args.json:
        print(json.dumps({"score": pred.score, "scaled_score": pred.scaled_score,
                          "crop_scores": pred.crop_scores,
                          "probabilities": pred.probabilities.tolist()}))
    else:
        print(f"{pred.score!r}")
    return 0


def cmd_encode_mos(args) -> int:
    y = encode_mos(args.mos, AnchorCodec(args.anchors, args.lo, args.hi))
    print(" ".join(f"{v:.10f}" for v in y))
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import TINY, TOLERANCE, check_model, op_suite

    ok = True
    for name, err in op_suite().items():
        status = "ok" if err < TOLERANCE else "FAIL"
        ok &= err < TOLERANCE
        print(f"op {name:<12} {err:.3e} {status}")
    if not args.ops_only:
        report = check_model(TINY, seed=args.seed or 0)
        for name, err in report.errors.items():
            if args.verbose or err >= TOLERANCE:
                print(f"param {name:<28} {err:.3e}")
        ok &= report.passed()
        print(f"model worst {report.worst:.3e} over {report.n_entries} entries in {report.seconds:.1f}s "
              f"{'ok' if report.passed() else 'FAIL'}")
    return 0 if ok else 1


def cmd_make_synth(args) -> int:
    from .synth import make_synthetic_dataset

    lo, hi = args.mos_range
    manifest = make_synthetic_dataset(args.out, count=args.count, frames=args.frames, size=args.size,
                                      seed=args.seed or 0, dataset=args.dataset, mos_range=(lo, hi),
                                      degradation=args.degradation)
    print(f"wrote {len(manifest.items)} videos and manifest.json to {args.out}")
    return 0


def cmd_flops(args) -> int:
    from .training import estimate_flops, flops_breakdown

    cfg = _load_config(args.config, None).model
    if args.mode:
        cfg = cfg.replace(mode=args.mode, n_frames=1 if args.mode == "image" else cfg.n_frames)
    source = tuple(args.source) if args.source else None
    total = estimate_flops(cfg, source)
    if args.breakdown:
        for k, v in flops_breakdown(cfg).items():
            print(f"{k} {v}")
    else:
        print(total)
    return 0


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="starvqa", description="Space-time transformer video quality model.")
    parser.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    parser.add_argument("--deterministic", action="store_true", help="suppress timestamps in logs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train an image- or video-stage model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--mode", choices=("image", "video"), default="video")
    p.add_argument("--init", help="image checkpoint to transfer from, or video checkpoint to resume")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log (default: OUT with .csv suffix)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=LOSSES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-dataset SROCC/PLCC as CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--decoder", choices=("svr", "expectation"), default="svr")
    p.add_argument("--sampling", choices=("uniform", "middle"), default="uniform")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score one container video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--dataset", help="report on this dataset's raw MOS scale")
    p.add_argument("--decoder", choices=("svr", "expectation"), default="svr")
    p.add_argument("--sampling", choices=("uniform", "middle"), default="uniform")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("encode-mos", help="print the soft anchor encoding of a score")
    p.add_argument("--mos", type=float, required=True)
    p.add_argument("--anchors", type=int, default=6)
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=5.0)
    p.set_defaults(func=cmd_encode_mos)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite on a tiny config")
    p.add_argument("--ops-only", action="store_true", help="skip the full-network check")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("make-synth", help="write a synthetic fixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=80)
    p.add_argument("--dataset", default="synth")
    p.add_argument("--mos-range", type=_pair, default=(1.0, 5.0), metavar="LO,HI")
    p.add_argument("--degradation", choices=("noise", "blur", "both"), default="noise")
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("flops", help="multiply-accumulate count of one forward pass")
    p.add_argument("--config", help="JSON training config (default: full-size model)")
    p.add_argument("--mode", choices=("image", "video"))
    p.add_argument("--source", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--breakdown", action="store_true")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    fmt = "%(levelname)s %(message)s" if args.deterministic else "%(asctime)s %(levelname)s %(message)s"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format=fmt)
    if args.seed is not None:
        np.random.seed(args.seed)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (StarVQAError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"starvqa {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
