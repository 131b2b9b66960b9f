"""Command line: ``odoc <command> --out DIR ...``.

Exit codes: 0 ok, 2 usage or configuration error, 3 data error, 4 internal
error.  Every file a command writes lands under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import torch
import yaml
from PIL import Image

from . import config as cfgmod
from .adapt import PRESETS, TrainConfig, TrainLog, adversarial_train, pretrain_segmenter
from .core import decode_mask
from .data import (
    FULL_IMAGE_CONFIG,
    DatasetManifest,
    SynthConfig,
    load_dataset,
    save_dataset,
    synth_sample,
    write_registry,
)
from .errors import ConfigError, DataError, EmptyDataset, IdMismatch, MissingMask, OdocError
from .metrics import (
    challenge_score,
    evaluate_dataset,
    read_records,
    read_team_table,
    screening_auc,
    summarize,
    write_leaderboard,
    write_records,
)
from .models import build_discriminator, build_extractor, build_segmenter, init_state, load_state, save_state
from .pipeline import ROI_SIDE, predict, prepare_rois, write_masks
from .roi import train_extractor, write_roi_manifest

log = logging.getLogger("odoc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

TRAIN_FLAGS = ("epochs", "batch_size", "lr_S", "lr_D", "adv_weight", "seed")
GLOBAL_DEFAULTS = {"scale": "desk", "roi_side": None, "threshold": 0.5, "glaucoma_cdr": 0.6}


# ---------------------------------------------------------------- helpers


def _under(out, name):
    """Resolve ``name`` relative to ``out`` and refuse paths that leave it."""
    path = os.path.abspath(os.path.join(out, name))
    root = os.path.abspath(out)
    if os.path.commonpath([path, root]) != root:
        raise ConfigError(f"{name} lies outside --out {out}")
    return path


def _fresh(path):
    if os.path.exists(path):
        os.remove(path)
    return path


def _settings(args, file_cfg, section):
    flags = {k: getattr(args, k, None) for k in GLOBAL_DEFAULTS}
    file_vals = {k: v for k, v in cfgmod.section(file_cfg, section).items() if k in GLOBAL_DEFAULTS}
    top = {k: v for k, v in file_cfg.items() if k in GLOBAL_DEFAULTS}
    s = cfgmod.resolve(GLOBAL_DEFAULTS, cfgmod.merge(top, file_vals), cfgmod.env_values(GLOBAL_DEFAULTS), flags)
    if s["scale"] not in ROI_SIDE:
        raise ConfigError(f"unknown scale {s['scale']!r}")
    return s


def _train_config(args, file_cfg, section, phase, scale):
    defaults = PRESETS[(scale, phase)].to_dict()
    file_vals = {k: v for k, v in cfgmod.section(file_cfg, section).items() if k not in GLOBAL_DEFAULTS}
    env = cfgmod.env_values(TrainConfig.__dataclass_fields__)
    flags = {k: getattr(args, k, None) for k in TRAIN_FLAGS}
    return TrainConfig.from_dict(cfgmod.resolve(defaults, file_vals, env, flags))


def _load(path):
    m = DatasetManifest.read(path)
    return m, load_dataset(m)


def _side(settings, samples, out_size):
    if settings["roi_side"] is not None:
        return int(settings["roi_side"])
    if all(s.shape == (out_size, out_size) for s in samples):
        return None
    return ROI_SIDE[settings["scale"]]


def _checkpoint(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"{what} checkpoint not found: {path}")
    return load_state(path)


def _dump(path, obj):
    with open(path, "w") as fh:
        yaml.safe_dump(obj, fh, sort_keys=False)


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    file_cfg = cfgmod.load_file(args.config)
    base = FULL_IMAGE_CONFIG if args.kind == "full" else SynthConfig()
    d = cfgmod.resolve(base.to_dict(), cfgmod.section(file_cfg, "synth"),
                       cfgmod.env_values(["seed"]), {"seed": args.seed})
    cfg = SynthConfig.from_dict(d)
    n = {"source": args.n_source, "target": args.n_target, "test": args.n_test, "val": args.n_val}
    if n["source"] < 1 or n["target"] < 1:
        raise ConfigError("--n-source and --n-target must be at least 1")
    if n["test"] < 0 or n["val"] < 0:
        raise ConfigError("--n-test and --n-val must be non-negative")
    registry = {}

    def draw(domain, start, count):
        out = []
        for i in range(start, start + count):
            s, t = synth_sample(cfg, domain, i)
            out.append(s)
            registry[s.id] = t
        return out

    trees = [
        ("source", "train", draw("source", 0, n["source"]), True),
        ("source_val", "val", draw("source", n["source"], n["val"]), True),
        ("target", "train", draw("target", 0, n["target"]), False),
        ("target_test", "test", draw("target", n["target"], n["test"]), True),
    ]
    for name, split, samples, labelled in trees:
        if samples:
            save_dataset(samples, _under(args.out, name), name, split, with_labels=labelled)
    write_registry(_under(args.out, "registry.json"), registry)
    _dump(_under(args.out, "synth_config.yaml"), cfg.to_dict())
    print(f"wrote {sum(n.values())} images to {args.out}")


def cmd_train_extractor(args):
    file_cfg = cfgmod.load_file(args.config)
    st = _settings(args, file_cfg, "extractor")
    cfg = _train_config(args, file_cfg, "extractor", "extractor", st["scale"])
    _, source = _load(args.source_manifest)
    val = _load(args.val_manifest)[1] if args.val_manifest else None
    state = init_state(build_extractor(st["scale"]), cfg.seed)
    tlog = TrainLog(_fresh(_under(args.out, "extractor_log.jsonl")))
    state = train_extractor(state, source, cfg, val=val, train_log=tlog)
    path = _under(args.out, args.checkpoint_out or "extractor.npz")
    save_state(path, state)
    _dump(_under(args.out, "extractor_config.yaml"), cfg.to_dict())
    print(f"extractor checkpoint: {path}")


def cmd_pretrain(args):
    file_cfg = cfgmod.load_file(args.config)
    st = _settings(args, file_cfg, "pretrain")
    cfg = _train_config(args, file_cfg, "pretrain", "pretrain", st["scale"])
    spec = build_segmenter(st["scale"])
    size = spec.input_shape[0]
    _, source = _load(args.source_manifest)
    rois, _ = prepare_rois(source, size, _side(st, source, size))
    val = None
    if args.val_manifest:
        v = _load(args.val_manifest)[1]
        val = prepare_rois(v, size, _side(st, v, size))[0]
    tlog = TrainLog(_fresh(_under(args.out, "pretrain_log.jsonl")))
    state = pretrain_segmenter(init_state(spec, cfg.seed), rois, cfg, val=val, train_log=tlog)
    path = _under(args.out, args.checkpoint_out or "segmenter.npz")
    save_state(path, state)
    _dump(_under(args.out, "pretrain_config.yaml"), cfg.to_dict())
    print(f"segmenter checkpoint: {path}")


def cmd_adapt(args):
    file_cfg = cfgmod.load_file(args.config)
    st = _settings(args, file_cfg, "adapt")
    cfg = _train_config(args, file_cfg, "adapt", "adversarial", st["scale"])
    tm = DatasetManifest.read(args.target_manifest)
    if tm.has_labels and not args.ignore_target_labels:
        raise ConfigError(f"target manifest {args.target_manifest} declares labels; adaptation is unsupervised "
                          "(pass --ignore-target-labels to drop them)")
    out_path = _under(args.out, args.checkpoint_out or "adapted.npz")
    d_path = _under(args.out, "discriminator.npz")
    if args.resume:
        S = _checkpoint(out_path, "adapted segmenter (--resume)")
        D = _checkpoint(d_path, "discriminator (--resume)")
    else:
        S = _checkpoint(args.pretrained or _under(args.out, "segmenter.npz"), "pretrained segmenter")
        D = init_state(build_discriminator(st["scale"]).with_input(*S.spec.input_shape[:2]), cfg.seed)
    size = S.spec.input_shape[0]

    # labels are never decoded for the target domain
    target = load_dataset(replace(tm, mask_glob=None))
    _, source = _load(args.source_manifest)
    src_rois, _ = prepare_rois(source, size, _side(st, source, size))
    side = _side(st, target, size)
    extractor = _checkpoint(args.extractor, "extractor") if args.extractor else None
    if side is not None and extractor is None:
        raise ConfigError(f"target images are not {size}x{size}; pass --extractor to locate the disc")
    tgt_rois, boxes = prepare_rois(target, size, side, extractor)
    if side is not None:
        write_roi_manifest(_under(args.out, "target_rois.jsonl"), [s.id for s in target], boxes)
    val = None
    if args.val_manifest:
        v = _load(args.val_manifest)[1]
        val = prepare_rois(v, size, _side(st, v, size))[0]

    log_path = _under(args.out, "adapt_log.jsonl")
    tlog = TrainLog(log_path if args.resume else _fresh(log_path))
    res = adversarial_train(S, D, src_rois, tgt_rois, cfg, val=val, train_log=tlog)
    save_state(out_path, res.segmenter)
    save_state(d_path, res.discriminator)
    _dump(_under(args.out, "adapt_config.yaml"), cfg.to_dict())
    print(f"adapted checkpoint: {out_path} (step {res.segmenter.training_step})")


def cmd_predict(args):
    file_cfg = cfgmod.load_file(args.config)
    st = _settings(args, file_cfg, "predict")
    S = _checkpoint(args.segmenter, "segmenter")
    E = _checkpoint(args.extractor, "extractor") if args.extractor else None
    m = DatasetManifest.read(args.manifest)
    samples = load_dataset(replace(m, mask_glob=None))
    size = S.spec.input_shape[0]
    side = _side(st, samples, size)
    if side is not None and E is None:
        raise ConfigError(f"images are not {size}x{size}; pass --extractor to locate the disc")
    masks, boxes = predict(S, samples, side, E, st["threshold"])
    write_masks(_under(args.out, "masks"), masks, m.encoding)
    write_roi_manifest(_under(args.out, "rois.jsonl"), [s.id for s in samples], boxes)
    _dump(_under(args.out, "predictions.yaml"),
          {"source_manifest": os.path.abspath(args.manifest), "mask_glob": "masks/*.png",
           "encoding": {"background": m.encoding.background, "disc": m.encoding.disc, "cup": m.encoding.cup}})
    n_warn = sum(b.warning for b in boxes)
    print(f"wrote {len(masks)} masks to {os.path.join(args.out, 'masks')}" + (f" ({n_warn} ROI fallbacks)" if n_warn else ""))


def _read_masks(folder, encoding):
    """Masks keyed by id from a prediction folder, dataset tree or plain folder."""
    mglob = "*.png"
    pred_meta = os.path.join(folder, "predictions.yaml")
    manifest = os.path.join(folder, "manifest.yaml")
    if os.path.exists(pred_meta):
        meta = cfgmod.load_file(pred_meta)
        mglob = meta.get("mask_glob", "masks/*.png")
        encoding = type(encoding).from_dict(meta.get("encoding"))
    elif os.path.exists(manifest):
        m = DatasetManifest.read(manifest)
        if not m.has_labels:
            raise MissingMask(f"{manifest} declares no masks")
        folder, mglob, encoding = m.root, m.mask_glob, m.encoding
    out = {}
    for p in sorted(glob.glob(os.path.join(folder, mglob))):
        with Image.open(p) as im:
            out[os.path.splitext(os.path.basename(p))[0]] = decode_mask(np.asarray(im), encoding)
    if not out:
        raise EmptyDataset(f"no mask files under {folder}")
    return out


def cmd_evaluate(args):
    gm = DatasetManifest.read(args.gt_manifest)
    if not gm.has_labels:
        raise MissingMask(f"{args.gt_manifest} declares no ground-truth masks")
    gts = {s.id: s.labels for s in load_dataset(gm)}
    preds = _read_masks(args.pred, gm.encoding)
    records, (di_cup, di_disc, delta) = evaluate_dataset(preds, gts)
    write_records(_under(args.out, "records.csv"), records)
    summary = {"n": len(records), "DI_cup": di_cup, "DI_disc": di_disc, "delta": delta}
    with open(_under(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    print(f"n={len(records)} DI_cup={di_cup:.4f} DI_disc={di_disc:.4f} delta={delta:.4f}")


def _glaucoma_labels(args, records, threshold):
    if args.registry:
        with open(args.registry) as fh:
            reg = json.load(fh)
        missing = [r.id for r in records if r.id not in reg]
        if missing:
            raise IdMismatch("records without a registry entry", missing)
        return np.array([bool(reg[r.id]["glaucoma"]) for r in records]), "registry"
    if args.glaucoma:
        with open(args.glaucoma) as fh:
            rows = {row["id"]: row["label"] for row in csv.DictReader(fh)}
        missing = [r.id for r in records if r.id not in rows]
        if missing:
            raise IdMismatch("records without a glaucoma label", missing)
        return np.array([str(rows[r.id]).strip().lower() in ("1", "true", "yes", "glaucoma") for r in records]), "csv"
    return np.array([r.CDR_g > threshold for r in records]), f"CDR_g > {threshold}"


def cmd_report(args):
    from . import plotting

    file_cfg = cfgmod.load_file(args.config)
    st = _settings(args, file_cfg, "report")
    records = read_records(args.records)
    if not records:
        raise EmptyDataset(f"{args.records} holds no records")
    di_cup, di_disc, delta = summarize(records)
    report = {"n": len(records), "DI_cup": di_cup, "DI_disc": di_disc, "delta": delta, "figures": []}

    labels, origin = _glaucoma_labels(args, records, st["glaucoma_cdr"])
    report["glaucoma_labels"] = origin
    try:
        curve, auc = screening_auc([r.CDR_p for r in records], labels)
    except DataError as e:
        log.warning("ROC skipped: %s", e)
    else:
        report["AUC"] = auc
        with open(_under(args.out, "roc.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            w.writerows(zip(curve.thresholds.tolist(), curve.fpr.tolist(), curve.tpr.tolist()))
        report["figures"].append(plotting.roc_figure([("CDR", curve, auc)], _under(args.out, "roc.png")))
    report["figures"].append(plotting.delta_histogram(records, _under(args.out, "delta_hist.png")))

    if args.manifest and args.pred:
        m = DatasetManifest.read(args.manifest)
        samples = {s.id: s for s in load_dataset(m)}
        preds = _read_masks(args.pred, m.encoding)
        by_delta = sorted(records, key=lambda r: r.delta)
        pick = by_delta[: args.n_overlays // 2] + by_delta[-(args.n_overlays - args.n_overlays // 2):]
        items = []
        for r in dict.fromkeys(pick):
            if r.id in samples and r.id in preds:
                s = samples[r.id]
                items.append((f"{r.id} DI_c {r.DI_cup:.2f}", s.pixels, preds[r.id], s.labels))
        if items:
            report["figures"].append(plotting.overlay_figure(items, _under(args.out, "overlays.png")))
    for lp in args.train_log or []:
        with open(lp) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        name = os.path.splitext(os.path.basename(lp))[0]
        report["figures"].append(plotting.training_curves(recs, _under(args.out, f"{name}.png")))
    report["figures"] = [os.path.relpath(f, args.out) for f in report["figures"]]
    with open(_under(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    auc_txt = f" AUC={report['AUC']:.4f}" if "AUC" in report else ""
    print(f"n={len(records)} DI_cup={di_cup:.4f} DI_disc={di_disc:.4f} delta={delta:.4f}{auc_txt}")


def cmd_rank(args):
    table = read_team_table(args.table)
    if not table:
        raise EmptyDataset(f"{args.table} lists no teams")
    entries = challenge_score(table)
    write_leaderboard(_under(args.out, "leaderboard.csv"), entries)
    for i, e in enumerate(entries, 1):
        print(f"{i:2d}  {e.team:<16s} S_f={e.S_f:.2f}  (R_cup {e.R_cup}, R_disc {e.R_disc}, R_delta {e.R_delta})")


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="odoc", description="Joint optic disc and cup segmentation with "
                                "output-space adversarial domain adaptation.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--threads", type=int, default=1, help="torch CPU threads (1 keeps runs bitwise reproducible)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train=False):
        sp.add_argument("--out", required=True, help="output directory; every file written goes here")
        sp.add_argument("--config", help="YAML/JSON config file")
        sp.add_argument("--seed", type=int)
        if train:
            sp.add_argument("--scale", choices=sorted(ROI_SIDE))
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", dest="batch_size", type=int)
            sp.add_argument("--lr-s", dest="lr_S", type=float)
            sp.add_argument("--checkpoint-out", help="checkpoint file name inside --out")
            sp.add_argument("--roi-side", dest="roi_side", type=int,
                            help="ROI side in original pixels (default: per scale, or the whole image "
                                 "when it already has the segmenter input size)")

    sp = sub.add_parser("synth", help="write synthetic source/target dataset trees")
    common(sp)
    sp.add_argument("--n-source", type=int, default=200)
    sp.add_argument("--n-target", type=int, default=100, help="unlabelled target training images")
    sp.add_argument("--n-test", type=int, default=100, help="labelled target test images")
    sp.add_argument("--n-val", type=int, default=20, help="labelled source validation images")
    sp.add_argument("--kind", choices=["roi", "full"], default="full",
                    help="'roi': 128x128 disc-centred crops, 'full': 160x160 fundus images")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train-extractor", help="train the disc localisation network")
    common(sp, train=True)
    sp.add_argument("--source-manifest", required=True)
    sp.add_argument("--val-manifest")
    sp.set_defaults(func=cmd_train_extractor)

    sp = sub.add_parser("pretrain", help="supervised segmenter training on source ROIs")
    common(sp, train=True)
    sp.add_argument("--source-manifest", required=True)
    sp.add_argument("--val-manifest")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="adversarial adaptation to an unlabelled target domain")
    common(sp, train=True)
    sp.add_argument("--source-manifest", required=True)
    sp.add_argument("--target-manifest", required=True)
    sp.add_argument("--val-manifest")
    sp.add_argument("--pretrained", help="pretrained segmenter (default: OUT/segmenter.npz)")
    sp.add_argument("--extractor", help="extractor checkpoint for locating target discs")
    sp.add_argument("--lr-d", dest="lr_D", type=float)
    sp.add_argument("--adv-weight", dest="adv_weight", type=float)
    sp.add_argument("--ignore-target-labels", action="store_true")
    sp.add_argument("--resume", action="store_true", help="continue from OUT's adapted and discriminator checkpoints")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("predict", help="write predicted masks for a dataset")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--segmenter", required=True)
    sp.add_argument("--extractor")
    sp.add_argument("--scale", choices=sorted(ROI_SIDE))
    sp.add_argument("--roi-side", dest="roi_side", type=int)
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="dice, CDR and delta against ground truth")
    common(sp)
    sp.add_argument("--gt-manifest", required=True)
    sp.add_argument("--pred", required=True, help="prediction folder, dataset tree or folder of mask PNGs")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="ROC curve, contour overlays and summary figures")
    common(sp)
    sp.add_argument("--records", required=True, help="records.csv written by evaluate")
    sp.add_argument("--registry", help="synthetic registry with glaucoma bits")
    sp.add_argument("--glaucoma", help="CSV with columns id,label")
    sp.add_argument("--glaucoma-cdr", dest="glaucoma_cdr", type=float,
                    help="CDR_g threshold used when no labels are given")
    sp.add_argument("--manifest", help="dataset with images and ground truth, for overlays")
    sp.add_argument("--pred", help="prediction folder, for overlays")
    sp.add_argument("--n-overlays", type=int, default=8)
    sp.add_argument("--train-log", action="append", help="JSON-lines training log to plot (repeatable)")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("rank", help="challenge leaderboard from a team metric table")
    common(sp)
    sp.add_argument("--table", required=True, help="CSV with columns team,DI_cup,DI_disc,delta")
    sp.set_defaults(func=cmd_rank)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        os.makedirs(args.out, exist_ok=True)
        args.func(args)
    except ConfigError as e:
        print(f"odoc {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IdMismatch as e:
        print(f"odoc {args.command}: {e}", file=sys.stderr)
        for sid in e.offenders:
            print(f"  {sid}", file=sys.stderr)
        return EXIT_DATA
    except DataError as e:
        print(f"odoc {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OdocError, Exception) as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"odoc {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
