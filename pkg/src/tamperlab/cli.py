"""``tamperlab`` command line: gen, train, eval, infer, attack, gradcheck, srm-debug."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import srm
from .config import RunConfig, load_run_config

log = logging.getLogger("tamperlab")


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=d, metavar="KEY=VALUE",
                   help="override one config key (repeatable, wins over --config)")
    p.add_argument("--seed", type=int, default=d, help="master seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=d, help="worker processes for gen/eval")
    p.add_argument("--verbose", action="store_true", default=d)
    p.add_argument("--dump-config", default=d, metavar="PATH", help="write the effective config ('-' = stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tamperlab", description=__doc__)
    _add_globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic tamper dataset")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="source corpus directory with index.json")
    src.add_argument("--toy", type=int, metavar="N", help="build a procedural corpus of N images first")
    g.add_argument("--toy-size", type=int, default=128)
    g.add_argument("--count", type=int, required=True, help="number of tampered samples")
    g.add_argument("--techniques", help="comma list (default: config)")
    g.add_argument("--test-frac", type=float, help="held-out fraction, 0 disables the split")
    g.add_argument("--no-authentic", action="store_true", help="omit the authentic counterparts")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a detector on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss CSV (default: checkpoint path with .csv)")
    t.add_argument("--steps", type=int)
    t.add_argument("--split", default="train", choices=["train", "test", "all"])

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--attacks", default="", help="comma list, e.g. jpeg70,resize0.5")
    e.add_argument("--report", help="JSON report path (default: stdout)")
    e.add_argument("--split", choices=["train", "test", "all"], help="default: test if present, else all")

    i = sub.add_parser("infer", parents=[common], help="detect on images and render overlays")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True, nargs="+")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--heatmap", action="store_true", help="also write a score heatmap overlay")

    a = sub.add_parser("attack", parents=[common], help="write an attacked copy of a manifest")
    a.add_argument("--manifest", required=True)
    a.add_argument("--attack", required=True, help="jpegQ or resizeS")
    a.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--ops-only", action="store_true")

    s = sub.add_parser("srm-debug", parents=[common], help="write the SRM noise map of an image as PNG")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    return parser


def effective_config(args) -> RunConfig:
    overrides = list(args.overrides or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    if getattr(args, "steps", None) is not None:
        overrides.append(f"steps={args.steps}")
    if getattr(args, "techniques", None):
        overrides.append(f"techniques={args.techniques}")
    if getattr(args, "test_frac", None) is not None:
        overrides.append(f"test_frac={args.test_frac}")
    return load_run_config(args.config, overrides)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig) -> int:
    from .tamper_synth import (
        generate_samples, load_corpus, make_toy_corpus, split_train_test, write_manifest,
    )
    out = Path(args.out)
    if args.count < 0:
        raise ValueError("--count must be nonnegative")
    if args.toy is not None:
        records = make_toy_corpus(out / "corpus", args.toy, seed=cfg.seed, size=args.toy_size)
    else:
        records = load_corpus(args.corpus)
    samples = generate_samples(records, args.count, cfg.techniques, seed=cfg.seed,
                               with_authentic=not args.no_authentic, min_fraction=cfg.min_fraction,
                               jobs=cfg.jobs) if args.count else []
    if samples and cfg.test_frac > 0:
        train, test = split_train_test(samples, cfg.test_frac, np.random.default_rng(cfg.seed))
        samples = train + test
        log.info("split: %d train / %d test", len(train), len(test))
    path = write_manifest(samples, out / "manifest.jsonl")
    print(f"wrote {len(samples)} records to {path}")
    return 0


def _select(samples, split: str):
    return samples if split == "all" else [s for s in samples if s.split == split]


def cmd_train(args, cfg: RunConfig) -> int:
    from .detector import build_two_stream, save_model
    from .detector.train import tampered_only, train_model
    from .tamper_synth import read_manifest
    samples = tampered_only(_select(read_manifest(args.manifest), args.split))
    if not samples:
        raise ValueError(f"{args.manifest}: no tampered samples in split {args.split!r}")
    model = build_two_stream(cfg.model, seed=cfg.seed)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".csv")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    history = train_model(model, samples, cfg.steps, cfg.sgd, seed=cfg.seed, augmentations=cfg.augment,
                          log_path=log_path, images_per_step=cfg.images_per_step)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    last = history[-1].l_total if history else float("nan")
    print(f"trained {cfg.steps} steps on {len(samples)} images; final l_total {last:.4f}; "
          f"checkpoint {args.out}; log {log_path}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .detector import load_model
    from .forensic_eval import evaluate_manifest
    from .tamper_synth import read_manifest
    samples = read_manifest(args.manifest)
    split = args.split or ("test" if any(s.split == "test" for s in samples) else "all")
    samples = _select(samples, split)
    attacks = [a.strip() for a in args.attacks.split(",") if a.strip()]
    report = evaluate_manifest(load_model(args.ckpt), samples, attacks, jobs=cfg.jobs)
    if args.report:
        report.write(args.report)
        print(f"mAP@0.5 {report.mean_ap50:.4f}  mAP {report.mean_ap:.4f}  report {args.report}")
    else:
        sys.stdout.write(report.to_json())
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    from .detector import detect, load_model
    from .render import render_overlay
    model = load_model(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in args.image:
        with Image.open(name) as im:
            image = np.asarray(im.convert("RGB"))
        dets = detect(model, image)
        stem = Path(name).stem
        (out / f"{stem}.json").write_text(json.dumps([d.as_dict() for d in dets], indent=2) + "\n")
        render_overlay(image, dets, out / f"{stem}_overlay.png")
        if args.heatmap:
            render_overlay(image, dets, out / f"{stem}_heatmap.png", heatmap=True)
        print(f"{name}: {len(dets)} detections")
    return 0


def cmd_attack(args, cfg: RunConfig) -> int:
    from .tamper_synth import attack_sample, read_manifest, write_manifest
    samples = [attack_sample(s, args.attack) for s in read_manifest(args.manifest)]
    path = write_manifest(samples, Path(args.out) / "manifest.jsonl")
    print(f"wrote {len(samples)} attacked records to {path}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from . import gradcheck
    ops = gradcheck.check_ops(seed=cfg.seed)
    for name, err in ops.items():
        print(f"{name:24s} {err:.3e}")
    worst_op = max(ops.values())
    ok = worst_op < gradcheck.OP_TOLERANCE
    print(f"max relative error (ops): {worst_op:.3e}")
    if not args.ops_only:
        graph = gradcheck.check_full_graph(seed=cfg.seed)
        print(f"max relative error (full graph): {graph:.3e}")
        ok = ok and graph < gradcheck.GRAPH_TOLERANCE
    return 0 if ok else 1


def cmd_srm_debug(args, cfg: RunConfig) -> int:
    with Image.open(args.image) as im:
        image = np.asarray(im.convert("RGB"))
    srm.noise_map_to_png(srm.cached_apply_srm(image), args.out)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "attack": cmd_attack,
    "gradcheck": cmd_gradcheck, "srm-debug": cmd_srm_debug,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(list(argv) if argv is not None else None)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        if args.dump_config:
            text = cfg.dump()
            if args.dump_config == "-":
                sys.stdout.write(text)
            else:
                Path(args.dump_config).write_text(text)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"tamperlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
