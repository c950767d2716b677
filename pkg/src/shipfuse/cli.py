"""Command line: ``shipfuse <verb> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from . import dataio, detecthead, fusemetrics
from .model import ABLATIONS
from .trainer import (LOG_FIELDS, TrainConfig, detect_pairs, format_config, fuse_pairs, load_checkpoint, load_config,
                      train)

log = logging.getLogger("shipfuse")


def _overrides(args) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for key, attr in (("lr", "lr"), ("total_iters", "iters"), ("warmup_iters", "warmup"), ("seed", "seed"),
                      ("batch_size", "batch_size"), ("crop", "crop")):
        v = getattr(args, attr)
        if v is not None:
            out[key] = v
    if args.ablation:
        out.update(ABLATIONS[args.ablation].as_dict())
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _usage_error(msg: str) -> int:
    print(f"shipfuse: error: {msg}", file=sys.stderr)
    return 2


def _config(args) -> TrainConfig:
    base = load_config(args.config) if args.config else TrainConfig()
    over = _overrides(args)
    if over.get("warmup_iters") is None and "total_iters" in over and base.warmup_iters > int(over["total_iters"]):
        over["warmup_iters"] = int(over["total_iters"]) // 10
    return base.replace(**over)


def cmd_train(args) -> int:
    try:
        cfg = _config(args)
    except ValueError as exc:
        return _usage_error(f"bad configuration: {exc}")
    pairs = dataio.load_dataset(args.data)
    res = train(pairs, cfg, out_dir=args.out)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    if not args.no_figures:
        from .figures import loss_curve
        cols = {k: [getattr(h, k) for h in res.history] for k in ("total", "l_f", "l_det")}
        loss_curve(os.path.join(args.out, "loss_curve.png"), cols, list(range(len(res.history))))
    print(res.log_lines[-1] if len(res.log_lines) > 1 else "\t".join(LOG_FIELDS))
    print(f"checkpoint\t{res.checkpoints[-1]}")
    return 0


def _load_model(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _, _ = load_checkpoint(path)
    return model


def cmd_fuse(args) -> int:
    model = _load_model(args.ckpt)
    pairs = dataio.load_dataset(args.data)
    for p, f in zip(pairs, fuse_pairs(model, pairs)):
        dataio.write_png(os.path.join(args.out, f"{p.id}.png"), f * 255.0)
    print(f"fused\t{len(pairs)}\t{args.out}")
    return 0


def cmd_detect(args) -> int:
    model = _load_model(args.ckpt)
    pairs = dataio.load_dataset(args.data)
    dets = detect_pairs(model, pairs, conf_thresh=args.conf, iou_thresh=args.iou)
    for p in pairs:
        detecthead.write_detections(os.path.join(args.out, f"{p.id}.txt"), p.id, dets[p.id])
    print(f"detections\t{sum(len(v) for v in dets.values())}\t{args.out}")
    return 0


def cmd_eval_fusion(args) -> int:
    pairs = dataio.load_dataset(args.data)
    triples = []
    for p in pairs:
        fused = dataio.read_png(os.path.join(args.fused, f"{p.id}.png"))
        triples.append((p.id, fused, p.swir, p.lwir))
    report = fusemetrics.evaluate_fusion(triples)
    text = report.as_text()
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "fusion_metrics.tsv"), "w", encoding="utf-8") as fh:
            fh.write(text)
        from .figures import metric_bars
        metric_bars(os.path.join(args.out, "fusion_metrics.png"), report.mean)
    return 0


def _read_det_dir(path: str) -> Dict[str, List[detecthead.Detection]]:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"detections directory not found: {path}")
    out: Dict[str, List[detecthead.Detection]] = {}
    for name in sorted(os.listdir(path)):
        if name.endswith(".txt"):
            for k, v in detecthead.read_detections(os.path.join(path, name)).items():
                out.setdefault(k, []).extend(v)
    return out


def cmd_eval_detect(args) -> int:
    pairs = dataio.load_dataset(args.data)
    dets = _read_det_dir(args.dets)
    report = detecthead.evaluate(dets, {p.id: p.boxes for p in pairs}, conf=args.conf)
    sys.stdout.write(report.as_text())
    return 0


def cmd_synth(args) -> int:
    ids = dataio.synth_dataset(args.out, args.n, args.seed, size=(args.size, args.size),
                               ships=(args.min_ships, args.max_ships))
    print(f"synth\t{len(ids)}\t{args.out}")
    return 0


def cmd_panel(args) -> int:
    from .figures import panel_strip
    pairs = dataio.load_dataset(args.data)
    dets = _read_det_dir(args.dets) if args.dets else {}
    for p in pairs:
        fused = dataio.read_png(os.path.join(args.fused, f"{p.id}.png"))
        kept = [d for d in dets.get(p.id, []) if d.score >= args.conf]
        out = panel_strip(os.path.join(args.out, f"{p.id}_panel.png"), p.swir, p.lwir, fused, kept, p.boxes, p.id)
        print(f"panel\t{p.id}\t{out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shipfuse", description="SWIR/LWIR fusion and ship detection")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True, metavar="verb")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int, help="total optimizer steps")
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="write fused PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("detect", help="write per-image detection files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conf", type=float, default=0.001)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval-fusion", help="print the fusion metric report")
    p.add_argument("--fused", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write fusion_metrics.tsv and a bar figure here")
    p.set_defaults(func=cmd_eval_fusion)

    p = sub.add_parser("eval-detect", help="print precision, recall and mAP")
    p.add_argument("--dets", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.set_defaults(func=cmd_eval_detect)

    p = sub.add_parser("synth", help="write a synthetic SWIR/LWIR dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--min-ships", type=int, default=1)
    p.add_argument("--max-ships", type=int, default=3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("panel", help="render SWIR | LWIR | fused comparison strips")
    p.add_argument("--data", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--dets")
    p.add_argument("--out", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.set_defaults(func=cmd_panel)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError, RuntimeError, dataio.DataError) as exc:
        print(f"shipfuse: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
