"""Command-line entry point: ``cattle-interaction <command> [options]``.

Every command accepts ``--seed``, ``--threads``, ``--config`` (a flat ``key = value``
file whose keys are option names; explicit flags win) and ``--runs`` (the
append-only JSON-lines run manifest).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from ._records import FormatError
from .network import (
    FUSION_MODES,
    STREAMS,
    EncoderConfig,
    NetworkConfig,
    load_encoder,
    load_network,
    save_encoder,
    save_network,
)
from .pipeline import evaluate_frames, run_inference
from .pretrain import AugmentationConfig, PretrainConfig, run_pretraining, write_loss_curve
from .proposal import (
    crop_resize,
    extract_slices,
    filter_detections,
    generate_proposals,
    load_frame,
    read_detections,
)
from .semantic_prior import fit_prior, load_prior, save_prior
from .synth_data import SceneConfig, generate_frames, hash_directory, read_dataset, write_split
from .train_eval import (
    TRANSFER_MODES,
    TrainConfig,
    build_interaction_samples,
    gradcam_heatmap,
    render_overlay,
    run_ablation,
    train_supervised,
)

class RunError(Exception):
    """A failure worth a one-line diagnostic rather than a traceback."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- config files -------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# -- commands -------------------------------------------------------------------

def _train_catalog_prior(frames, catalog):
    samples = build_interaction_samples(frames, catalog)
    return fit_prior(samples.action_label_triples(catalog), catalog=catalog)


def cmd_synth(args):
    cfg = SceneConfig(frame_size=(args.frame_size, args.frame_size), n_pairs=args.pairs,
                      n_singles=args.singles, n_distractors=args.distractors,
                      color_mode=args.color_mode, seed=args.seed)
    frames = generate_frames(cfg, args.frames)
    out = Path(args.out)
    train_dir, test_dir = write_split(frames, out, cfg.catalog, args.test_fraction, args.seed)
    print(f"wrote {len(frames)} frames to {out}")
    return {"outputs": {"train": str(train_dir), "test": str(test_dir)},
            "hashes": {"dataset": hash_directory(out)}}


def _unlabeled_crops(directory, size: int, min_confidence: float):
    """Crops of confident detections; the label files are never opened."""
    directory = Path(directory)
    detections = read_detections(directory / "detections.jsonl")
    crops = [crop_resize(load_frame(directory / "frames", fid), d.box, size)
             for fid in sorted(detections) for d in filter_detections(detections[fid], min_confidence)]
    if len(crops) < 2:
        raise RunError(f"{directory}: fewer than two confident detections to pretrain on")
    return crops


def cmd_pretrain(args):
    images = _unlabeled_crops(args.data, args.input_size, args.min_confidence)
    cfg = PretrainConfig(batch_size=args.batch_size, temperature=args.temperature, lr=args.lr,
                         weight_decay=args.weight_decay, steps=args.steps, seed=args.seed,
                         augment=AugmentationConfig(output_size=args.input_size))
    result = run_pretraining(images, cfg, EncoderConfig.tiny(args.input_size), log_every=args.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_encoder(result.encoder, out / "encoder.safetensors")
    write_loss_curve(out / "pretrain_loss.tsv", result.losses, "nt_xent")
    print(f"pretrained on {len(images)} crops; final loss {result.losses[-1]:.4f}")
    return {"inputs": {"data": args.data},
            "outputs": {"encoder": str(out / "encoder.safetensors"), "loss": str(out / "pretrain_loss.tsv")},
            "hashes": {"data": hash_directory(args.data),
                       "encoder": sha256_file(out / "encoder.safetensors")}}


def _net_config(args, catalog) -> NetworkConfig:
    return NetworkConfig(n_actions=catalog.n_actions, n_interactions=catalog.n_interactions,
                         encoder=EncoderConfig.tiny(args.input_size), map_resolution=args.map_resolution,
                         fusion=args.fusion, activation=args.activation, streams=tuple(args.streams))


def _train_config(args) -> TrainConfig:
    return TrainConfig(mode=args.mode, steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                       weight_decay=args.weight_decay, teacher_forcing=not args.no_teacher_forcing,
                       interaction_loss=args.interaction_loss, seed=args.seed)


def cmd_train(args):
    frames, catalog = read_dataset(args.data)
    prior = _train_catalog_prior(frames, catalog)
    net_cfg = _net_config(args, catalog)
    samples = build_interaction_samples(frames, catalog, args.input_size, args.map_resolution)
    init = load_encoder(args.checkpoint) if args.checkpoint else None
    result = train_supervised(samples, prior, net_cfg, _train_config(args), init, log_every=args.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_network(result.net, out / "network.safetensors")
    save_prior(prior, out / "prior.json")
    result.report.write(out / "train_report.json")
    print(f"trained {args.mode} for {len(result.losses)} steps; final l_entire {result.losses[-1]:.4f}; "
          f"training mAP {result.report.mAP:.4f}")
    hashes = {"data": hash_directory(args.data), "network": sha256_file(out / "network.safetensors")}
    if args.checkpoint:
        hashes["checkpoint"] = sha256_file(args.checkpoint)
    return {"inputs": {"data": args.data, "checkpoint": args.checkpoint},
            "outputs": {"network": str(out / "network.safetensors"), "prior": str(out / "prior.json"),
                        "report": str(out / "train_report.json")},
            "hashes": hashes}


def _load_model(args, catalog=None):
    net = load_network(args.weights)
    prior = load_prior(args.prior, expected_catalog=catalog)
    return net, prior


def cmd_eval(args):
    frames, catalog = read_dataset(args.data)
    net, prior = _load_model(args, catalog)
    report = evaluate_frames(net, prior, frames, args.min_confidence)
    report.write(args.out)
    for name, ap in report.per_class_ap.items():
        print(f"AP[{name}] = {ap:.4f}")
    print(f"mAP = {report.mAP:.4f}; interaction accuracy {report.interaction_accuracy:.4f}; "
          f"individual accuracy {report.individual_accuracy:.4f}")
    return {"inputs": {"data": args.data, "weights": args.weights, "prior": args.prior},
            "outputs": {"report": args.out},
            "hashes": {"data": hash_directory(args.data), "weights": sha256_file(args.weights)}}


def cmd_infer(args):
    net, prior = _load_model(args)
    summary = run_inference(net, prior, args.frames, args.detections, args.out, args.stride, args.min_confidence)
    print(f"processed {len(summary.frame_ids)} frames ({summary.n_pairs} pairs) at {summary.fps:.1f} fps")
    return {"inputs": {"frames": args.frames, "detections": args.detections, "weights": args.weights},
            "outputs": {"interactions": args.out},
            "hashes": {"weights": sha256_file(args.weights), "interactions": sha256_file(args.out)},
            "fps": summary.fps, "frames_processed": summary.frame_ids}


def cmd_viz(args):
    frames, catalog = read_dataset(args.data)
    net, prior = _load_model(args, catalog)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in frames:
        labelled = {tuple(sorted((p.a, p.b))): p.interaction for p in f.interactions}
        for p in generate_proposals(filter_detections(f.detections, args.min_confidence)):
            if len(written) >= args.count:
                break
            key = (p.a.detection_id, p.b.detection_id)
            target = catalog.interaction_index(labelled[key]) if key in labelled else 0
            slices = extract_slices(f.image, p, net.cfg.encoder.input_size, net.cfg.map_resolution)
            heat = gradcam_heatmap(net, slices, target, prior)
            path = out / f"gradcam_{f.frame_id:06d}_{key[0]}_{key[1]}.png"
            render_overlay(slices, heat, path)
            written.append(str(path))
    print(f"wrote {len(written)} overlays to {out}")
    return {"inputs": {"data": args.data, "weights": args.weights}, "outputs": {"overlays": written},
            "hashes": {"weights": sha256_file(args.weights), "overlays": hash_directory(out)}}


def cmd_ablate(args):
    train_frames, catalog = read_dataset(args.data)
    test_frames, _ = read_dataset(args.test)
    prior = _train_catalog_prior(train_frames, catalog)
    train = build_interaction_samples(train_frames, catalog, args.input_size, args.map_resolution)
    test = build_interaction_samples(test_frames, catalog, args.input_size, args.map_resolution)
    init = load_encoder(args.checkpoint) if args.checkpoint else None
    rows = run_ablation(train, test, prior, _net_config(args, catalog), _train_config(args), init)
    cols = ["aspect", "variant", "streams", "fusion", "mAP", "accuracy", "final_loss"]
    lines = ["\t".join(cols)] + ["\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols)
                                 for r in rows]
    Path(args.out).write_text("\n".join(lines) + "\n")
    for r in rows:
        print(f"{r['aspect']:<15}{r['variant']:<10}mAP {r['mAP']:.4f}")
    return {"inputs": {"train": args.data, "test": args.test}, "outputs": {"table": args.out},
            "hashes": {"train": hash_directory(args.data), "test": hash_directory(args.test),
                       "table": sha256_file(args.out)}}


# -- parser -----------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op thread cap")
    p.add_argument("--config", help="flat key = value file; explicit flags take precedence")
    p.add_argument("--runs", default="runs.jsonl", help="append-only run manifest")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _model_opts(p):
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("--map-resolution", type=int, default=32)
    p.add_argument("--fusion", choices=FUSION_MODES, default="paper")
    p.add_argument("--activation", choices=("sigmoid", "relu"), default="sigmoid")
    p.add_argument("--streams", default="sgv", help="subset of 'sgv' (semantic, geometric, visual)")
    p.add_argument("--mode", choices=TRANSFER_MODES, default="random")
    p.add_argument("--checkpoint", help="pretrained encoder (required for linear and finetune)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--interaction-loss", choices=("bce", "softmax"), default="bce")
    p.add_argument("--no-teacher-forcing", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cattle-interaction", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--frame-size", type=int, default=160)
    p.add_argument("--pairs", type=int, default=2)
    p.add_argument("--singles", type=int, default=1)
    p.add_argument("--distractors", type=int, default=1)
    p.add_argument("--color-mode", choices=("action", "random"), default="action")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pretraining on unlabeled detection crops")
    p.add_argument("--data", required=True, help="dataset directory (frames and detections only)")
    p.add_argument("--out", required=True)
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32, help="source images per step")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--min-confidence", type=float, default=0.7)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised training in linear, finetune or random mode")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _model_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="end-to-end mAP and accuracies on an annotated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--min-confidence", type=float, default=0.7)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score interactions on a clip of frames plus detections")
    p.add_argument("--frames", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--min-confidence", type=float, default=0.7)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz", help="Grad-CAM overlays for proposals in a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--min-confidence", type=float, default=0.7)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="representation and fusion ablation table")
    p.add_argument("--data", required=True, help="training split")
    p.add_argument("--test", required=True, help="test split")
    p.add_argument("--out", required=True, help="TSV table path")
    _model_opts(p)
    p.set_defaults(func=cmd_ablate)

    for p in sub.choices.values():
        _common(p)
    parser.commands = sub.choices
    return parser


def _apply_config(parser, argv):
    """Re-parse with config-file values installed as defaults (flags still win)."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        values = read_config(args.config)
    except OSError as exc:
        parser.error(f"cannot read --config: {exc}")
    known = vars(args)
    for key, value in values.items():
        if key not in known or key in ("command", "config", "func"):
            parser.error(f"unknown config key {key!r}")
        if isinstance(known[key], bool):
            values[key] = value.lower() in ("1", "true", "yes", "on")
    parser.commands[args.command].set_defaults(**values)
    return parser.parse_args(argv)


def _validate(parser, args):
    if getattr(args, "mode", None) in ("linear", "finetune") and not args.checkpoint:
        parser.error(f"--mode {args.mode} requires --checkpoint")
    if hasattr(args, "streams"):
        if not args.streams or set(args.streams) - set(STREAMS):
            parser.error("--streams must be a non-empty subset of 'sgv'")
    if getattr(args, "stride", 1) < 1:
        parser.error("--stride must be >= 1")
    if args.threads < 1:
        parser.error("--threads must be >= 1")


def append_manifest(path, entry: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = _apply_config(parser, argv)
    _validate(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)

    start = time.perf_counter()
    try:
        extra = args.func(args)
    except (RunError, FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"cattle-interaction {args.command}: error: {exc}", file=sys.stderr)
        return 1
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "runs")}
    entry = {"command": args.command, "argv": argv, "config": config, "seed": args.seed,
             "seconds": round(time.perf_counter() - start, 3), **extra}
    append_manifest(args.runs, entry)
    return 0


if __name__ == "__main__":
    sys.exit(main())
