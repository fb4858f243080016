"""Command-line entry point: ``talnet <subcommand> ...``.

Exit codes: 0 success, 2 bad usage, 3 missing input file, 4 malformed input
file, 5 config digest mismatch on resume, 6 invalid configuration value.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import io
from .head import SoIConfig
from .metrics import AN_GRID, DETECTION_TIOUS, ar_an_curve, map_table
from .pipeline import (
    TrainConfig,
    build_detector,
    ground_truth,
    load_detector,
    model_digest,
    new_train_state,
    run_inference,
    save_detector,
    train,
)
from .receptive_field import format_tower_table, tower_table
from .spn import DEFAULT_SCALES, SPNConfig
from .synth import SynthConfig, generate

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_DIGEST = 5
EXIT_CONFIG = 6


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _need(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"no such file or directory: {p}", EXIT_MISSING)
    return p


def _manifest(out: Path, args: argparse.Namespace, started: float, digest: str | None, metrics: dict) -> Path:
    path = out.with_name(out.name + ".manifest.json")
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "config_digest": digest,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "metrics": metrics,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _load_split(path: str, split: str):
    _need(path)
    try:
        return io.read_split(io.resolve_split(path, split))
    except FileNotFoundError as exc:
        raise CLIError(str(exc), EXIT_MISSING) from None


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(_need(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise CLIError(f"{args.config}: {exc}", EXIT_FORMAT) from None
    config = SynthConfig.from_dict(cfg)
    io.write_dataset(args.out, generate(config))
    print(f"wrote {config.num_train} train / {config.num_test} test videos to {args.out}")


def cmd_train(args) -> None:
    started = time.time()
    videos = _load_split(args.data, "train")
    if not videos:
        raise CLIError("training split is empty", EXIT_FORMAT)
    d_stream = videos[0].stream_a.D
    num_classes = max((int(l) for v in videos for l in v.gt_labels), default=1)
    if args.classes:
        num_classes = args.classes
    spn_config = SPNConfig(
        anchor_scales=args.scales, hidden_width=args.hidden, context=args.context, variant=args.variant
    )
    soi_config = SoIConfig(num_classes=num_classes, context=args.context, hidden_width=args.hidden)
    train_config = TrainConfig(lr=args.lr, steps=args.steps, seed=args.seed)
    detector = build_detector(spn_config, soi_config, d_stream, args.mode, args.seed, args.precision)
    digest = model_digest(detector, train_config)
    state = None
    if args.resume:
        try:
            detector_r, meta, state = load_detector(_need(args.resume))
        except io.FormatError as exc:
            raise CLIError(str(exc), EXIT_FORMAT) from None
        if meta.get("digest") != digest:
            raise CLIError(
                f"config digest mismatch: checkpoint {meta.get('digest')} vs requested {digest}", EXIT_DIGEST
            )
        detector = detector_r
    state = state or new_train_state(train_config)
    remaining = max(args.steps - state.step, 0)
    train(detector, videos, train_config, state, steps=remaining, log_every=args.log_every)
    out = Path(args.out)
    save_detector(out, detector, train_config, state)
    tail = state.history[-min(len(state.history), 50):]
    metrics = {
        "steps": state.step,
        "final_proposal_loss": sum(h.proposal for h in tail) / max(len(tail), 1),
        "final_classification_loss": sum(h.classification for h in tail) / max(len(tail), 1),
    }
    _manifest(out, args, started, digest, metrics)
    print(f"saved checkpoint to {out} after {state.step} steps")


def _records(args, kind: str):
    started = time.time()
    try:
        detector, meta, _ = load_detector(_need(args.ckpt))
    except io.FormatError as exc:
        raise CLIError(str(exc), EXIT_FORMAT) from None
    videos = _load_split(args.data, args.split)
    proposals, detections = run_inference(detector, videos)
    out = []
    if kind == "proposals":
        for v in videos:
            rows, scores = proposals[v.id]
            out.extend(
                {"video": v.id, "start": float(a), "end": float(b), "score": float(s)} for (a, b), s in zip(rows, scores)
            )
    else:
        for v in videos:
            for rows, label, scores in detections[v.id]:
                out.extend(
                    {"video": v.id, "start": float(a), "end": float(b), "score": float(s), "label": int(label)}
                    for (a, b), s in zip(rows, scores)
                )
    io.write_jsonl(args.out, out)
    _manifest(Path(args.out), args, started, meta.get("digest"), {"records": len(out), "videos": len(videos)})
    print(f"wrote {len(out)} {kind} to {args.out}")


def cmd_propose(args) -> None:
    _records(args, "proposals")


def cmd_detect(args) -> None:
    _records(args, "detections")


def _read_records(path: str, need_label: bool):
    try:
        return io.read_jsonl(_need(path), need_label)
    except io.FormatError as exc:
        raise CLIError(str(exc), EXIT_FORMAT) from None


def cmd_eval_proposals(args) -> None:
    import numpy as np

    started = time.time()
    videos = _load_split(args.data, args.split)
    recs = _read_records(args.proposals, False)
    grouped: dict[str, list] = {}
    for r in recs:
        grouped.setdefault(r["video"], []).append((r["start"], r["end"], r["score"]))
    proposals = {
        vid: (np.array([x[:2] for x in items]).reshape(-1, 2), np.array([x[2] for x in items]))
        for vid, items in grouped.items()
    }
    rows, ar = ar_an_curve(proposals, ground_truth(videos), args.an)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["an", "tiou", "recall"])
        for an, t, r in rows:
            w.writerow([an, f"{t:.2f}", repr(r)])
    _manifest(Path(args.out), args, started, None, {f"AR@{k}": v for k, v in ar.items()})
    for an, v in ar.items():
        print(f"AR@{an} = {v:.4f}")


def cmd_eval_detections(args) -> None:
    started = time.time()
    videos = _load_split(args.data, args.split)
    recs = _read_records(args.detections, True)
    flat = [(r["video"], float(r["start"]), float(r["end"]), float(r["score"]), int(r["label"])) for r in recs]
    rows = map_table(flat, ground_truth(videos), DETECTION_TIOUS)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "tiou", "ap"])
        for c, t, ap in rows:
            w.writerow([c, f"{t:.2f}", repr(ap)])
    summary = {f"mAP@{t:.1f}": ap for c, t, ap in rows if c == "mean"}
    _manifest(Path(args.out), args, started, None, summary)
    for k, v in summary.items():
        print(f"{k} = {v:.4f}")


def cmd_rf(args) -> None:
    print(format_tower_table(tower_table(args.scales, args.context)))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-stream dataset")
    p.add_argument("--config", help="JSON file with synthetic data settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["single", "early", "late"], default="late")
    p.add_argument("--variant", choices=["multi-dilated", "single", "single-tconv", "multi-tconv"], default="multi-dilated")
    p.add_argument("--context", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--hidden", type=int, default=64, help="filters per layer (256 in the full-size model)")
    p.add_argument("--scales", type=_int_list, default=DEFAULT_SCALES)
    p.add_argument("--classes", type=int, default=0, help="number of action classes (default: max label in data)")
    p.add_argument("--precision", choices=["standard", "wide"], default="standard")
    p.add_argument("--resume", help="checkpoint to continue from; its config digest must match")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func in (("propose", cmd_propose), ("detect", cmd_detect)):
        p = sub.add_parser(name, help=f"write {name} output as JSON Lines")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("eval-proposals", help="AR-AN table from a proposals file")
    p.add_argument("--proposals", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--an", type=_int_list, default=AN_GRID)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_proposals)

    p = sub.add_parser("eval-detections", help="per-class AP and mAP table from a detections file")
    p.add_argument("--detections", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_detections)

    p = sub.add_parser("rf", help="print per-scale tower hyperparameters and receptive fields")
    p.add_argument("--scales", type=_int_list, default=DEFAULT_SCALES)
    p.add_argument("--context", type=_on_off, default=False, metavar="on|off")
    p.set_defaults(func=cmd_rf)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(1):
            args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except io.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
