"""Command line entry point: preprocess, train, eval, predict, budget.

Exit codes: 0 success, 2 input error, 3 config error, 4 artifact mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import evaluation as E
from .errors import RecgError, RegistryMismatch, VersionMismatch
from .model import FUSIONS, ArchConfig, count_flops, format_budget, normalize_fusion
from .preprocess import (balanced_subset, class_counts, get_scheme, preprocess_record, read_cache,
                         split_indices, write_cache)
from .training import TrainConfig, fit_arrays, infer, load_checkpoint, save_checkpoint
from .wfdb_io import list_records, load_record

log = logging.getLogger("recgnition")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_MISMATCH = 0, 2, 3, 4

PREPROCESS_DEFAULTS = {
    "data_dir": "data/mitdb",
    "cache_dir": None,
    "output_dir": "runs/default",
    "delta_n": 128,
    "smoothing_window": 14,
    "channel": 0,
    "image_size": 128,
    "train_fraction": 0.9,
    "subset_classes": None,
    "subset_per_class": None,
    "arch": "small",
}
TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def default_config():
    cfg = dict(PREPROCESS_DEFAULTS)
    cfg.update(TrainConfig().to_dict())
    cfg["cache_dir"] = os.environ.get("RECG_CACHE_DIR") or "cache"
    return cfg


def load_config(args):
    """Defaults <- JSON file <- command-line flags; unknown keys are rejected."""
    cfg = default_config()
    user = {}
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_INPUT)
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config} is not valid JSON: {exc}", EXIT_CONFIG)
        if not isinstance(user, dict):
            raise CliError("config must be a JSON object", EXIT_CONFIG)
        unknown = sorted(set(user) - set(cfg))
        if unknown:
            raise CliError(f"unknown config keys: {unknown}", EXIT_CONFIG)
        cfg.update(user)
    for flag, key in (("data_dir", "data_dir"), ("cache_dir", "cache_dir"), ("scheme", "scheme"),
                      ("fusion", "fusion"), ("epochs", "epochs"), ("seed", "seed"), ("out", "output_dir")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    try:
        if "warmup_steps" not in user and int(cfg["epochs"]) <= int(cfg["warmup_steps"]):
            # default warmup longer than a short run: shorten it rather than refuse
            log.warning("warmup_steps %s >= epochs %s; using %s", cfg["warmup_steps"], cfg["epochs"],
                        max(int(cfg["epochs"]) - 1, 0))
            cfg["warmup_steps"] = max(int(cfg["epochs"]) - 1, 0)
        get_scheme(cfg["scheme"])
        cfg["fusion"] = normalize_fusion(cfg["fusion"])
        train_config(cfg)
        if cfg["arch"] not in ("small", "medium", "tiny"):
            raise ValueError(f"unknown arch {cfg['arch']!r}")
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG)
    return cfg


def train_config(cfg):
    return TrainConfig.from_dict({k: cfg[k] for k in TRAIN_KEYS})


def arch_config(cfg):
    arch = {"small": ArchConfig, "medium": ArchConfig.medium, "tiny": ArchConfig.tiny}[cfg["arch"]]()
    if arch.image_size != cfg["image_size"]:
        raise CliError(f"arch {cfg['arch']} expects {arch.image_size}px images, config has {cfg['image_size']}",
                       EXIT_CONFIG)
    return arch


def preprocess_settings(cfg):
    return {k: cfg[k] for k in ("scheme", "delta_n", "smoothing_window", "channel", "image_size")}


# ---------------------------------------------------------------------------
# subcommands

def cmd_preprocess(args, cfg):
    data_dir = cfg["data_dir"]
    if not os.path.isdir(data_dir):
        raise CliError(f"data directory {data_dir} does not exist", EXIT_INPUT)
    stems = list_records(data_dir)
    if not stems:
        raise CliError(f"no WFDB records (*.hea) in {data_dir}", EXIT_INPUT)
    scheme = get_scheme(cfg["scheme"])
    images, per_record = [], []
    for stem in stems:
        try:
            rec = load_record(stem)
            beats = preprocess_record(rec, scheme, cfg["delta_n"], cfg["smoothing_window"], cfg["channel"],
                                      cfg["image_size"])
        except (RecgError, OSError, ValueError) as exc:
            raise CliError(f"record {os.path.basename(stem)}: {exc}", EXIT_INPUT)
        per_record.append({"record": os.path.basename(stem), "beats": len(beats)})
        images.extend(beats)
    if cfg["subset_classes"]:
        labels = np.array([b.label for b in images])
        wanted = [scheme.index(s) for s in cfg["subset_classes"]]
        if None in wanted:
            raise CliError(f"subset_classes {cfg['subset_classes']} not all in scheme {scheme.name}", EXIT_CONFIG)
        keep = balanced_subset(labels, wanted, int(cfg["subset_per_class"] or len(labels)), cfg["seed"])
        images = [images[i] for i in keep]
    if not images:
        raise CliError("no beats survived preprocessing", EXIT_INPUT)
    counts = class_counts([b.label for b in images], scheme)
    manifest = {
        "scheme": scheme.name,
        "class_names": list(scheme.class_names),
        "counts": counts,
        "seed": cfg["seed"],
        "preprocess": preprocess_settings(cfg),
        "subset": {"classes": cfg["subset_classes"], "per_class": cfg["subset_per_class"]},
        "records": per_record,
        "config": cfg,
    }
    manifest = write_cache(cfg["cache_dir"], images, manifest)
    print(f"{'class':<8}{'beats':>8}")
    for name, c in counts.items():
        print(f"{name:<8}{c:>8}")
    print(f"{'total':<8}{manifest['total']:>8}")
    print(f"cache: {cfg['cache_dir']} (beats sha256 {manifest['beats_sha256'][:16]})")
    return EXIT_OK


def _load_cache(cfg):
    path = cfg["cache_dir"]
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise CliError(f"no dataset cache at {path}; run `recgnition preprocess` first", EXIT_INPUT)
    try:
        return read_cache(path)
    except (RecgError, OSError, ValueError) as exc:
        raise CliError(f"unreadable cache {path}: {exc}", EXIT_INPUT)


def _split(cfg, n):
    return split_indices(n, cfg["train_fraction"], cfg["seed"])


def cmd_train(args, cfg):
    pixels, labels, meta, manifest = _load_cache(cfg)
    if manifest["scheme"] != get_scheme(cfg["scheme"]).name:
        raise CliError(f"cache was built for scheme {manifest['scheme']}, config says {cfg['scheme']}", EXIT_CONFIG)
    tr, te = _split(cfg, labels.size)
    tc = train_config(cfg)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    params, history = fit_arrays((pixels[tr], meta[tr], labels[tr]),
                                 (pixels[te], meta[te], labels[te]) if te.size else None,
                                 tc, num_classes=len(manifest["class_names"]), arch=arch_config(cfg),
                                 class_names=manifest["class_names"])
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(params, tc, ckpt, extra={"preprocess": manifest["preprocess"]})
    history.to_csv(os.path.join(out, "history.csv"))
    summary = {"config": cfg, "train_size": int(tr.size), "test_size": int(te.size),
               "param_checksum": params.checksum(), "cache_sha256": manifest["beats_sha256"]}
    with open(os.path.join(out, "train_manifest.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    last = history.rows[-1]
    print(f"epochs {len(history.rows)}  train_loss {last[2]:.5f}  eval_loss {last[3]:.5f}  eval_accuracy {last[4]:.4f}")
    print(f"checkpoint: {ckpt}  params sha256 {params.checksum()[:16]}")
    return EXIT_OK


def _load_model(cfg, args, class_names=None):
    ckpt = args.checkpoint or os.path.join(cfg["output_dir"], "model.ckpt")
    if not os.path.exists(ckpt):
        raise CliError(f"checkpoint {ckpt} not found", EXIT_INPUT)
    try:
        return load_checkpoint(ckpt, expect_classes=class_names)
    except (RegistryMismatch, VersionMismatch) as exc:
        raise CliError(f"{ckpt}: {exc}", EXIT_MISMATCH)


def cmd_eval(args, cfg):
    pixels, labels, meta, manifest = _load_cache(cfg)
    params, _ = _load_model(cfg, args, manifest["class_names"])
    _, te = _split(cfg, labels.size)
    idx = np.arange(labels.size) if args.all or te.size == 0 else te
    keep = ("probabilities", "f_img", "fused")
    res = infer(params, pixels[idx], meta[idx], keep=keep)
    report = E.evaluate_predictions(res["probabilities"], labels[idx], params.class_names)
    report["subset"] = "all" if idx is not te else "test"
    report["config"] = cfg
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    if args.dump_embeddings:
        if idx.size < 2:
            raise CliError("need at least two beats to dump embeddings", EXIT_INPUT)
        dump = E.embedding_dump(labels[idx], res["f_img"], res["fused"])
        E.write_embeddings(dump, os.path.join(out, "embeddings.csv"), os.path.join(out, "embeddings.bin"))
        report["pca_eigenvalues"] = dump.eigenvalues.tolist()
    if args.saliency:
        probe = E.fit_probe(res["f_img"], labels[idx], params.num_classes)
        sal_dir = os.path.join(out, "saliency")
        os.makedirs(sal_dir, exist_ok=True)
        n = min(int(args.saliency), idx.size)
        for j in range(n):
            i = idx[j]
            target = int(res["probabilities"][j].argmax())
            maps = E.saliency(pixels[i], meta[i], params, target, probe)
            E.write_pgm(os.path.join(sal_dir, f"beat{j:04d}_input.pgm"), pixels[i])
            E.write_pgm(os.path.join(sal_dir, f"beat{j:04d}_before_fusion.pgm"), maps.before_fusion)
            E.write_pgm(os.path.join(sal_dir, f"beat{j:04d}_after_fusion.pgm"), maps.after_fusion)
        if n:
            fm_dir = os.path.join(out, "feature_maps")
            os.makedirs(fm_dir, exist_ok=True)
            for branch, maps in E.feature_map_dump(pixels[idx[0]], params).items():
                for k, m in enumerate(maps):
                    E.write_pgm(os.path.join(fm_dir, f"{branch}_{k:02d}.pgm"), m)
        report["saliency"] = {"count": n, "note": E.SALIENCY_NOTE}
    E.write_report(os.path.join(out, "report.json"), report)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(f"{'class':<8}{'P':>8}{'R':>8}{'F1':>8}{'AUC':>8}{'n':>7}")
        for name, m in report["per_class"].items():
            auc = report["auc"][name]
            auc_s = f"{auc:8.4f}" if auc is not None else f"{'-':>8}"
            print(f"{name:<8}{m['precision']:8.4f}{m['recall']:8.4f}{m['f1']:8.4f}{auc_s}{m['support']:7d}")
        print(f"accuracy {report['accuracy']:.4f}  macro-F1 {report['macro']['f1']:.4f}")
    return EXIT_OK


def cmd_predict(args, cfg):
    if not args.record:
        raise CliError("--record is required", EXIT_INPUT)
    params, _ = _load_model(cfg, args)
    from .training import read_checkpoint_metadata
    meta_blob, _ = read_checkpoint_metadata(args.checkpoint or os.path.join(cfg["output_dir"], "model.ckpt"))
    pp = (meta_blob.get("extra") or {}).get("preprocess") or preprocess_settings(cfg)
    try:
        rec = load_record(args.record)
        beats = preprocess_record(rec, pp["scheme"], pp["delta_n"], pp["smoothing_window"], pp["channel"],
                                  pp["image_size"])
    except (RecgError, OSError, ValueError) as exc:
        raise CliError(f"record {args.record}: {exc}", EXIT_INPUT)
    k = args.beat_index
    if not 0 <= k < len(beats):
        raise CliError(f"beat index {k} out of range (record has {len(beats)} classifiable beats)", EXIT_INPUT)
    b = beats[k]
    probs = infer(params, b.pixels[None], b.meta_vector[None])["probabilities"][0].astype(np.float64)
    out = {
        "record": rec.name,
        "beat_index": k,
        "r_peak_index": b.r_peak_index,
        "class": params.class_names[int(probs.argmax())],
        "probabilities": {n: float(p) for n, p in zip(params.class_names, probs)},
    }
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_budget(args, cfg):
    arch = arch_config(cfg)
    report = count_flops(arch, get_scheme(cfg["scheme"]).num_classes, cfg["fusion"])
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(format_budget(report))
        print(f"params {report.total_params:,}  MACs {report.total_macs:,}  FLOPs {report.total_flops:,} (2 per MAC)")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="recgnition", description="Beat-image ECG arrhythmia classifier.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--data-dir", dest="data_dir")
        sp.add_argument("--cache-dir", dest="cache_dir")
        sp.add_argument("--scheme", choices=["mitbih10", "aami"])
        sp.add_argument("--fusion", choices=list(FUSIONS) + ["simple_concat", "classical_cca"])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        return sp

    common(sub.add_parser("preprocess", help="records -> dataset cache"))
    common(sub.add_parser("train", help="train and write checkpoint + history.csv"))
    ev = common(sub.add_parser("eval", help="metrics report for a checkpoint"))
    ev.add_argument("--checkpoint")
    ev.add_argument("--dump-embeddings", action="store_true")
    ev.add_argument("--saliency", type=int, default=0, metavar="N")
    ev.add_argument("--all", action="store_true", help="evaluate every cached beat, not just the test split")
    pr = common(sub.add_parser("predict", help="classify one beat of one record"))
    pr.add_argument("--checkpoint")
    pr.add_argument("--record", help="record path without extension")
    pr.add_argument("--beat-index", type=int, default=0)
    common(sub.add_parser("budget", help="parameter and FLOP audit"))
    return p


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "budget": cmd_budget}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
