"""Command-line entry point: ``grainedvad {synth,train,eval,metrics,export-scores}``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from . import data
from .evaluate import (ScoreFileError, compute_metrics, read_scores_csv, score_manifest,
                       write_scores_csv)
from .trainer import MODALITIES, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("grainedvad")

EXIT_USAGE = 1
EXIT_DATA = 2


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _window(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:END, got {text!r}") from None


def _dilations(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grainedvad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--normal", type=int, default=50, help="normal training videos")
    p.add_argument("--abnormal", type=int, default=50, help="abnormal training videos")
    p.add_argument("--test-normal", type=int, default=20, help="normal test videos")
    p.add_argument("--test-abnormal", type=int, default=20, help="abnormal test videos")
    p.add_argument("--T", type=int, default=32, help="snippets per video")
    p.add_argument("--D", type=int, default=16, help="visual feature dimension")
    p.add_argument("--Dt", type=int, default=8, help="text feature dimension")
    p.add_argument("--crops", type=int, default=2, help="crops per snippet")
    p.add_argument("--window", type=_window, default=(8, 16), help="anomalous snippets START:END")
    p.add_argument("--channel", choices=("visual", "text", "both"), default="both",
                   help="which features carry the anomaly")
    p.add_argument("--shift", type=float, default=2.0, help="mean shift inside the window")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-snippets", action="store_true",
                   help="every video ends on a full 16-frame snippet")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    d = TrainConfig()
    p = sub.add_parser("train", help="train on a manifest and write a checkpoint")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate, help="Adam learning rate")
    p.add_argument("--wd", type=float, default=d.weight_decay, help="weight decay (L2)")
    p.add_argument("--batch-size", type=int, default=d.batch_size,
                   help="videos per step, half normal and half abnormal")
    p.add_argument("--alpha", type=float, default=d.alpha, help="margin-loss weight")
    p.add_argument("--margin", type=float, default=d.margin, help="magnitude margin c")
    p.add_argument("--k", type=int, default=d.k, help="top-k snippets per video")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--focus-dim", type=int, default=None, help="glance-focus output channels")
    p.add_argument("--hidden1", type=int, default=d.hidden1)
    p.add_argument("--hidden2", type=int, default=d.hidden2)
    p.add_argument("--radius", type=int, default=d.radius, help="focus attention radius")
    p.add_argument("--dilations", type=_dilations, default=d.dilations, help="e.g. 1,2,4")
    p.add_argument("--modality", choices=MODALITIES, default=d.modality,
                   help="'visual' drops text features, 'text' blanks visual features")
    p.add_argument("--log", type=Path, default=None, help="write the epoch CSV here, not stdout")
    p.add_argument("--resume", type=Path, default=None, help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a labelled manifest and report AUC/AP")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--scores-out", type=Path, default=None, help="per-frame score CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="recompute AUC/AP from a score CSV")
    p.add_argument("--scores", required=True, type=Path)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export-scores", help="write per-frame scores (labels optional)")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="score CSV path")
    p.set_defaults(func=cmd_export_scores)
    return parser


# --------------------------------------------------------------------------- #

def cmd_synth(args) -> int:
    out: Path = args.out
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DataError(f"{out} is not empty (use --force to overwrite)")
        for sub in ("features", "text"):
            shutil.rmtree(out / sub, ignore_errors=True)
    try:
        spec = data.SyntheticSpec(
            n_normal=args.normal, n_abnormal=args.abnormal, T=args.T, D=args.D, D_t=args.Dt,
            n_crops=args.crops, anomaly_window=args.window, anomaly_channel=args.channel,
            shift_magnitude=args.shift, seed=args.seed, n_test_normal=args.test_normal,
            n_test_abnormal=args.test_abnormal, partial_last_snippet=not args.full_snippets,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if args.normal + args.abnormal + args.test_normal + args.test_abnormal == 0:
        log.warning("no videos requested; writing empty manifests")
    train_m, test_m = data.generate_synthetic_dataset(spec, out)
    print(json.dumps({"out": str(out), "train": data.describe(train_m),
                      "test": data.describe(test_m)}))
    return 0


def _infer_dims(manifest: data.Manifest) -> tuple[int, int]:
    if not manifest.records:
        raise DataError("manifest is empty")
    first = manifest.records[0]
    return first.load_features().shape[-1], first.load_text().shape[-1]


def cmd_train(args) -> int:
    manifest = data.load_manifest(args.manifest, split="train")
    feature_dim, text_dim = _infer_dims(manifest)
    config = TrainConfig(
        learning_rate=args.lr, weight_decay=args.wd, batch_size=args.batch_size,
        epochs=args.epochs, alpha=args.alpha, margin=args.margin, k=args.k, seed=args.seed,
        feature_dim=feature_dim, focus_dim=args.focus_dim, text_dim=text_dim,
        hidden1=args.hidden1, hidden2=args.hidden2, radius=args.radius,
        dilations=args.dilations, modality=args.modality,
    )
    resume = load_checkpoint(args.resume) if args.resume else None

    sink = open(args.log, "w", encoding="utf-8", newline="") if args.log else sys.stdout
    try:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(("epoch", "L", "L_v", "L_s"))
        if resume is not None:
            for row in resume.history:
                writer.writerow((row["epoch"], repr(row["loss"]), repr(row["margin_loss"]),
                                 repr(row["ce_loss"])))

        def on_epoch(row):
            writer.writerow((row["epoch"], repr(row["loss"]), repr(row["margin_loss"]),
                             repr(row["ce_loss"])))
            sink.flush()

        ckpt = train(config, manifest, resume=resume, on_epoch=on_epoch)
    finally:
        if sink is not sys.stdout:
            sink.close()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, args.out)
    log.info("wrote %s after %d epochs", args.out, ckpt.epoch)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = data.load_manifest(args.manifest, split="test")
    records = score_manifest(ckpt.model, manifest, ckpt.config, require_labels=True)
    if args.scores_out is not None:
        write_scores_csv(records, args.scores_out)
    print(json.dumps(compute_metrics(records).to_dict()))
    return 0


def cmd_metrics(args) -> int:
    try:
        records = read_scores_csv(args.scores)
    except ScoreFileError as exc:
        raise DataError(str(exc)) from None
    print(json.dumps(compute_metrics(records).to_dict()))
    return 0


def cmd_export_scores(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = data.load_manifest(args.manifest)
    records = score_manifest(ckpt.model, manifest, ckpt.config, require_labels=False)
    write_scores_csv(records, args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (DataError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
