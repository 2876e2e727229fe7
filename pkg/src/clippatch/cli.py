"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing backend
or capability.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .core import PatchSpec, preprocess
from .encoders import embed_images, embed_texts, load_encoder, load_registry, rank_labels
from .errors import CapabilityError, ClipPatchError, ParameterError
from .evaluation import EvalRecord, evaluate_patch
from .io import (load_image_dataset, load_patch, load_video_dir, save_patch, write_json,
                 write_records)
from .objectives import AttackBudget, patch_loss, pgd_attack

log = logging.getLogger("clippatch")

# flags each subcommand cannot run without; checked after config-file merge
REQUIRED = {
    "train": ("model", "data", "target", "out"),
    "eval": ("patch", "data", "out"),
    "baseline-pgd": ("model", "data", "target", "out"),
    "attack-video": ("patch", "videos", "captions", "out"),
    "report": ("inputs", "out"),
    "synth": ("out",),
}


def _int_list(s):
    return [int(v) for v in str(s).split(",") if v.strip()]


def _float_list(s):
    return [float(v) for v in str(s).split(",") if v.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys mirror the command's flags")
    common.add_argument("--registry", help="backend registry JSON")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="clippatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a universal patch")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--target", help="label name or index")
    p.add_argument("--kind", choices=("square", "frame"), default="square")
    p.add_argument("--size", type=int, default=64, help="square patch side")
    p.add_argument("--frame-width", type=int, default=4)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--crop-aug", action="store_true")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--val-fraction", type=float, default=0.3)
    p.add_argument("--prompt-template", default="{}")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--validate", action="store_true", help="report validation ASR every epoch")
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="evaluate a patch on the validation split")
    p.add_argument("--patch")
    p.add_argument("--data")
    p.add_argument("--model", help="defaults to the model the patch was trained for")
    p.add_argument("--topk", type=_int_list, default=[1, 5])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--split-seed", type=int, help="defaults to the seed stored in the patch")
    p.add_argument("--prompt-template")
    p.add_argument("--summary", help="write metric summary JSON here")
    p.add_argument("--out")

    p = sub.add_parser("baseline-pgd", parents=[common], help="per-image targeted PGD baseline")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--target")
    p.add_argument("--epsilon", type=float, default=8 / 255)
    p.add_argument("--alpha", type=float, default=2 / 255)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--topk", type=_int_list, default=[1, 5])
    p.add_argument("--val-fraction", type=float, default=0.3)
    p.add_argument("--prompt-template", default="{}")
    p.add_argument("--out")

    p = sub.add_parser("attack-video", parents=[common], help="ASR curve over infected keyframes")
    p.add_argument("--patch")
    p.add_argument("--videos")
    p.add_argument("--captions")
    p.add_argument("--model")
    p.add_argument("--fractions", type=_float_list, default=[i / 10 for i in range(11)])
    p.add_argument("--keyframes", type=int, default=10)
    p.add_argument("--mode", choices=("random", "prefix"), default="random")
    p.add_argument("--target-caption")
    p.add_argument("--out")

    p = sub.add_parser("report", parents=[common], help="tables and plots from result files")
    p.add_argument("--in", dest="inputs", action="append")
    p.add_argument("--topk", type=_int_list, default=[1, 5])
    p.add_argument("--out")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset for the toy backends")
    p.add_argument("--out")
    p.add_argument("--labels", default=None, help="comma-separated class names")
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--image-size", type=int, default=80)
    p.add_argument("--videos", type=int, default=0, help="also write this many videos")
    p.add_argument("--frames", type=int, default=30)
    return parser


def _apply_config(parser, argv):
    """Use ``--config`` JSON values as defaults for the chosen subcommand."""
    if not argv or argv[0] not in REQUIRED:
        return
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv[1:])
    if not known.config:
        return
    subparser = parser._subparsers._group_actions[0].choices[argv[0]]
    with open(known.config) as fh:
        values = json.load(fh)
    cfg = {}
    for key, val in values.items():
        flag = "--" + key.replace("_", "-")
        action = next((a for a in subparser._actions
                       if flag in a.option_strings or a.dest == key.replace("-", "_")), None)
        if action is None or action.dest == "help":
            subparser.error(f"unknown config key {key!r}")
        if action.type and isinstance(val, str):
            val = action.type(val)
        if isinstance(action, argparse._AppendAction) and not isinstance(val, list):
            val = [val]
        cfg[action.dest] = val
    subparser.set_defaults(**cfg)


def _resolve_target(vocab, target):
    if target is None:
        raise ParameterError("no target label given")
    if str(target) in vocab.labels:
        return vocab.index(str(target))
    try:
        idx = int(target)
    except ValueError:
        raise ParameterError(f"target {target!r} is not a dataset class") from None
    if not 0 <= idx < len(vocab):
        raise ParameterError(f"target index {idx} outside {len(vocab)} classes")
    return idx


def cmd_train(args):
    from .training import TrainConfig, train_patch

    registry = load_registry(args.registry)
    enc = load_encoder(args.model, registry)
    manifest = load_image_dataset(args.data, args.val_fraction, args.seed)
    vocab = manifest.vocabulary(args.prompt_template)
    target = _resolve_target(vocab, args.target)
    train_set = manifest.load_split("train")
    val_set = manifest.load_split("val") if args.validate else None
    meta = {"labels": list(vocab.labels), "target_label": vocab.labels[target],
            "prompt_template": args.prompt_template, "split_seed": args.seed,
            "val_fraction": args.val_fraction}
    if args.kind == "square":
        init = PatchSpec.square(args.size, target_label_id=target, seed=args.seed, metadata=meta)
    else:
        h, w = train_set[0].image.shape[:2]
        init = PatchSpec.frame(args.frame_width, (h, w), target_label_id=target, seed=args.seed,
                               metadata=meta)
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                      beta=args.beta, crop_enabled=args.crop_aug, seed=args.seed,
                      checkpoint_dir=args.checkpoint_dir)
    patch, history = train_patch(train_set, enc, vocab, target, init, cfg, val_set=val_set)
    save_patch(patch, args.out)
    print(json.dumps({"out": str(args.out), "epoch_mean_loss": history.epoch_mean_losses(),
                      "val": history.epoch_metrics}))
    return 0


def cmd_eval(args):
    patch = load_patch(args.patch)
    meta = patch.metadata
    registry = load_registry(args.registry)
    enc = load_encoder(args.model or meta.get("model_id"), registry)
    val_fraction = args.val_fraction if args.val_fraction is not None else meta.get("val_fraction", 0.3)
    split_seed = args.split_seed if args.split_seed is not None else meta.get("split_seed", args.seed)
    manifest = load_image_dataset(args.data, val_fraction, split_seed)
    template = args.prompt_template or meta.get("prompt_template", "{}")
    vocab = manifest.vocabulary(template)
    if "labels" in meta and list(meta["labels"]) != list(vocab.labels):
        raise ParameterError("dataset classes differ from those the patch was trained on")
    val_set = manifest.load_split("val")
    res = evaluate_patch(val_set, enc, vocab, patch, patch.target_label_id, repeats=args.repeats,
                         k_list=args.topk, seed=args.seed)
    write_records(args.out, res.clean_records + res.records)
    summary = {"model": enc.model_id, "target": vocab.labels[patch.target_label_id],
               "repeats": args.repeats, "n_images": len(val_set), **res.metrics}
    if args.summary:
        write_json(args.summary, summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_baseline_pgd(args):
    registry = load_registry(args.registry)
    enc = load_encoder(args.model, registry)
    if not enc.supports_grad:
        raise CapabilityError(f"backend {enc.model_id!r} does not provide gradients")
    manifest = load_image_dataset(args.data, args.val_fraction, args.seed)
    vocab = manifest.vocabulary(args.prompt_template)
    target = _resolve_target(vocab, args.target)
    budget = AttackBudget(args.epsilon, args.alpha, args.steps)
    txt = embed_texts(enc, vocab)
    kmax = min(max(args.topk), len(vocab))
    records = []
    for s in manifest.load_split("val"):
        def loss_fn(x):
            emb = embed_images(enc, preprocess(x, enc.preprocess)[None])
            return patch_loss(emb, txt.to(emb.dtype), target, enc.temperature)

        with enc.grad_lock:
            adv = pgd_attack(s.image, loss_fn, budget, targeted=True)
        with torch.no_grad():
            emb = embed_images(enc, preprocess(adv, enc.preprocess)[None])
        pred = rank_labels(emb, txt.to(emb.dtype), kmax)[0].tolist()
        records.append(EvalRecord(s.image_id, s.label, target, tuple(pred), 0, "pgd"))
    write_records(args.out, records)
    from .evaluation import asr
    print(json.dumps({f"asr@{k}": asr(records, k) for k in args.topk}))
    return 0


def cmd_attack_video(args):
    from .video import video_asr

    patch = load_patch(args.patch)
    registry = load_registry(args.registry)
    enc = load_encoder(args.model or patch.metadata.get("model_id"), registry)
    videos = load_video_dir(args.videos, args.captions)
    caption = args.target_caption or patch.metadata.get("target_label")
    if not caption:
        raise ParameterError("no target caption: pass --target-caption")
    curve = video_asr(videos, patch, args.fractions, enc, caption, t_prime=args.keyframes,
                      seed=args.seed, mode=args.mode)
    rhos = list(curve)
    write_json(args.out, {
        "model": enc.model_id,
        "target_caption": caption,
        "video_ids": [v.id for v in videos],
        "fractions": rhos,
        "asr_1_4": [curve[r]["asr_1_4"] for r in rhos],
        "asr_1_2": [curve[r]["asr_1_2"] for r in rhos],
        "mean_scores": [curve[r]["mean_scores"] for r in rhos],
        "quads": [curve[r]["quads"] for r in rhos],
    })
    return 0


def cmd_report(args):
    from .report import write_report

    for f in write_report(args.inputs, args.out, args.topk):
        print(Path(args.out) / f)
    return 0


def cmd_synth(args):
    from .synthetic import DEFAULT_LABELS, make_image_dataset, make_video_dataset

    labels = tuple(args.labels.split(",")) if args.labels else DEFAULT_LABELS
    out = Path(args.out)
    make_image_dataset(out / "images", labels, args.per_class, args.image_size, args.seed)
    if args.videos:
        make_video_dataset(out, labels, args.videos, args.frames, args.image_size, args.seed)
    print(out)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "baseline-pgd": cmd_baseline_pgd,
            "attack-video": cmd_attack_video, "report": cmd_report, "synth": cmd_synth}


def run_cli(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        missing = [f"--{name.replace('_', '-')}" for name in REQUIRED[args.command]
                   if getattr(args, name) in (None, [])]
        if missing:
            parser._subparsers._group_actions[0].choices[args.command].error(
                f"missing required option(s): {', '.join(missing)}")
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CapabilityError as exc:
        print(f"clippatch: capability error: {exc}", file=sys.stderr)
        return 3
    except (ClipPatchError, OSError, KeyError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"clippatch: error: {msg}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
