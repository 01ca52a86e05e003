"""``lret`` command line: synth | train | eval | explain | features | bench.

Every command takes ``--config run.json --out DIR --seed N --verbose``;
flags override the config.  Outputs go to a fresh directory that only
appears once the command has succeeded, next to a ``run.json``
provenance record.  Failures print one JSON line on stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ExplainConfig,
    RunConfig,
    build,
    load_config,
    resolve_model_spec,
)
from .data import (
    DataLoader,
    ManifestError,
    SynthSpec,
    benchmark,
    load_manifest,
    synth_generate,
)
from .data.images import read_image, to_float
from .embed import average_by_k, extract_from_loader, FeatureSet, tsne, write_features_csv, write_tsne_csv
from .explain import explain, save_overlay, write_grid_csv
from .metrics import (
    compute_metrics,
    group_scores,
    load_group_map,
    threshold_report,
    write_confusion_csv,
    write_pr_csv,
    write_report_json,
    write_roc_csv,
)
from .model import build_model
from .train import CHECKPOINT_NAME, predict, train, write_epoch_csv

log = logging.getLogger("lret")

COMMANDS = ("synth", "train", "eval", "explain", "features", "bench")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line errors instead of argparse's usage dump
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random choice")
    g.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="lret", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic patch dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--style")
    p.add_argument("--format", dest="image_format")

    p = sub.add_parser("train", parents=[common], help="train a classifier and keep the best checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resizer", choices=["hfe", "glr", "static", "none"])
    p.add_argument("--target", type=int, help="resizer output size")
    p.add_argument("--workers", type=int)
    p.add_argument("--cache", type=_on_off)

    p = sub.add_parser("eval", parents=[common], help="metrics, curves and confusion matrix for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--tau", type=float)
    p.add_argument("--group-map")

    p = sub.add_parser("explain", parents=[common], help="class activation maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="*")
    p.add_argument("--manifest", help="explain test-split images when --images is not given")
    p.add_argument("--limit", type=int)
    p.add_argument("--method")
    p.add_argument("--layer", type=int, dest="layer_res")
    p.add_argument("--class", dest="target_class", help="class name; default is the predicted class")

    p = sub.add_parser("features", parents=[common], help="GAP feature vectors, class averaging and t-SNE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--avg-k", type=int)
    p.add_argument("--tsne", action="store_true", default=None)
    p.add_argument("--perplexity", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--splits", nargs="+")

    p = sub.add_parser("bench", parents=[common], help="time the data pipeline under loader variants")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--latency-ms", type=float)
    p.add_argument("--consumer-ms", type=float)
    p.add_argument("--cache", nargs="+", type=_on_off)
    p.add_argument("--workers", nargs="+", type=int)
    p.add_argument("--prefetch", nargs="+", type=int)
    return parser


# --- helpers ------------------------------------------------------------------------------------------


@contextmanager
def output_dir(target: Path):
    """Work in a hidden sibling directory and rename it into place on success.

    An existing target is written into directly.
    """
    if target.exists():
        if not target.is_dir():
            raise UsageError(f"output path {target} exists and is not a directory")
        yield target
        return
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _override(obj, **values):
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return obj
    try:
        return dataclasses.replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _dataset(cfg: RunConfig, args, work: Path, seed: int):
    """Manifest from --manifest, the config's manifest, or a synth spec generated under ``work/data``."""
    path = getattr(args, "manifest", None) or cfg.dataset.manifest
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"manifest {path} does not exist")
        return load_manifest(path)
    if cfg.dataset.synth is not None:
        spec = cfg.dataset.synth
        if args.seed_given:
            spec = dataclasses.replace(spec, seed=seed)
        return load_manifest(synth_generate(spec, work / "data"))
    raise UsageError("no dataset: pass --manifest or set dataset.manifest / dataset.synth in the config")


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    ckpt = load_checkpoint(path)
    return ckpt, model_from_checkpoint(ckpt)


def _check_classes(ckpt, manifest):
    classes = ckpt.meta.get("classes")
    if classes is not None and list(classes) != list(manifest.classes):
        raise UsageError(f"checkpoint classes {classes} differ from manifest classes {list(manifest.classes)}")


def _input_size(manifest, split="train"):
    records = manifest.subset(split) or manifest.records
    if not records:
        raise ManifestError("manifest is empty")
    return read_image(manifest.resolve(records[0])).shape


# --- commands (each returns a short summary dict) ----------------------------------------------------------


def cmd_synth(cfg: RunConfig, args, work: Path, seed: int) -> dict:
    base = cfg.dataset.synth or SynthSpec()
    spec = _override(base, classes=args.classes, per_class=args.per_class, patch=args.patch, style=args.style,
                     image_format=args.image_format)
    if args.seed_given:
        spec = dataclasses.replace(spec, seed=seed)
    cfg.dataset.synth = spec
    manifest = synth_generate(spec, work)
    return {"manifest": str(Path(cfg.outputs) / Path(manifest).name), "images": spec.classes * spec.per_class}


def cmd_train(cfg: RunConfig, args, work: Path, seed: int) -> dict:
    tcfg = _override(cfg.train, epochs=args.epochs, batch_size=args.batch_size)
    if args.lr is not None:
        tcfg = _override(tcfg, optimizer=_override(tcfg.optimizer, lr=args.lr))
    tcfg = dataclasses.replace(tcfg, seed=seed, checkpoint_dir=None)  # keeps paths out of the checkpoint meta
    lcfg = _override(cfg.loader, decode_workers=args.workers, cache=args.cache)
    lcfg = dataclasses.replace(lcfg, shuffle_seed=seed)
    cfg.train, cfg.loader = tcfg, lcfg
    manifest = _dataset(cfg, args, work, seed)
    spec = resolve_model_spec(cfg.model, _input_size(manifest), manifest.num_classes, args.resizer, args.target)
    cfg.model = spec.to_dict()
    model = build_model(spec, seed=seed)
    log.info("model: resizer=%s backbone input=%s fen=%s", spec.resizer_name, model.backbone_input_shape,
             model.fen_shape)

    def report(e):
        log.info("epoch %d: loss %.4f acc %.4f | val loss %.4f acc %.4f | %.1fs%s", e.epoch, e.train_loss,
                 e.train_acc, e.val_loss, e.val_acc, e.wall_s, " *" if e.improved else "")

    best, logs = train(model, manifest, lcfg, tcfg, on_epoch=report)
    save_checkpoint(work / CHECKPOINT_NAME, best)
    write_epoch_csv(work / "epochs.csv", logs)
    (work / "model.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"checkpoint": CHECKPOINT_NAME, "best_epoch": best.epoch, "best_val_acc": best.best_val_acc,
            "resizer": spec.resizer_name, "fen_shape": list(model.fen_shape)}


def cmd_eval(cfg: RunConfig, args, work: Path, seed: int) -> dict:
    ecfg = _override(cfg.eval, split=args.split, tau=args.tau, group_map=args.group_map)
    cfg.eval = ecfg
    ckpt, model = _load_model(args.checkpoint)
    manifest = _dataset(cfg, args, work, seed)
    _check_classes(ckpt, manifest)
    if ecfg.group_map is not None and not Path(ecfg.group_map).is_file():
        raise UsageError(f"group map {ecfg.group_map} does not exist")
    loader = DataLoader(manifest, ecfg.split, dataclasses.replace(cfg.loader, shuffle=False))
    ev = predict(model, loader)
    names = list(manifest.classes)
    report = compute_metrics(ev.probs, ev.labels, names)
    if ecfg.tau is not None:
        report.threshold = threshold_report(ev.probs, ev.labels, ecfg.tau)
    if ecfg.group_map is not None:
        g = group_scores(ev.probs, load_group_map(ecfg.group_map, names), ev.labels)
        report.groups = {"names": g.group_names, **g.report.to_dict()}
    write_report_json(work / "metrics.json", report)
    write_roc_csv(work / "roc.csv", report)
    write_pr_csv(work / "pr.csv", report)
    write_confusion_csv(work / "confusion.csv", report.confusion, names)
    summary = {"split": ecfg.split, "n": report.n, "accuracy": report.accuracy, "f1_score": report.weighted_f1}
    if report.threshold is not None:
        summary["thresholded_accuracy"] = report.threshold.accuracy
    return summary


def cmd_explain(cfg: RunConfig, args, work: Path, seed: int) -> dict:
    xcfg = cfg.explain
    values = {k: getattr(args, k) for k in ("method", "layer_res", "limit") if getattr(args, k) is not None}
    if args.images:
        values["images"] = list(args.images)
    try:
        xcfg = build(ExplainConfig, {**dataclasses.asdict(xcfg), **values}, "$.explain")
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    cfg.explain = xcfg
    ckpt, model = _load_model(args.checkpoint)
    classes = ckpt.meta.get("classes") or [str(i) for i in range(model.spec.num_classes)]
    if xcfg.images:
        paths = [Path(p) for p in xcfg.images]
    else:
        manifest = _dataset(cfg, args, work, seed)
        paths = [manifest.resolve(r) for r in manifest.subset("test")[:xcfg.limit]]
    if args.target_class is not None and args.target_class not in classes:
        raise UsageError(f"unknown class {args.target_class!r}; expected one of {classes}")
    rows = []
    for i, path in enumerate(paths):
        if not path.is_file():
            raise UsageError(f"image {path} does not exist")
        image = to_float(read_image(path))
        if args.target_class is not None:
            c = classes.index(args.target_class)
        else:
            c = int(np.argmax(model.forward(image[None], training=False).probs[0]))
        hm = explain(model, image, c, xcfg.layer_res, xcfg.method)
        stem = f"{i:04d}_{path.stem}_{xcfg.method}_L{xcfg.layer_res}"
        save_overlay(work / f"{stem}.png", image, hm)
        write_grid_csv(work / f"{stem}.csv", hm.values)
        rows.append([str(path), classes[c], xcfg.method, xcfg.layer_res, hm.tap, "x".join(map(str, hm.values.shape)),
                     int(hm.all_zero), stem])
    with open(work / "heatmaps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "class", "method", "layer_res", "tap", "grid", "all_zero", "stem"])
        w.writerows(rows)
    return {"images": len(rows), "method": xcfg.method, "layer_res": xcfg.layer_res}


def cmd_features(cfg: RunConfig, args, work: Path, seed: int) -> dict:
    values = {"avg_k": args.avg_k, "tsne": args.tsne, "perplexity": args.perplexity, "iterations": args.iterations,
              "splits": args.splits}
    fcfg = _override(cfg.features, **values)
    cfg.features = fcfg
    ckpt, model = _load_model(args.checkpoint)
    manifest = _dataset(cfg, args, work, seed)
    _check_classes(ckpt, manifest)
    names = list(manifest.classes)
    lcfg = dataclasses.replace(cfg.loader, shuffle=False)
    sets = []
    for split in fcfg.splits:
        if not manifest.subset(split):
            raise UsageError(f"split {split!r} is empty")
        sets.append(extract_from_loader(model, DataLoader(manifest, split, lcfg), origin=split))
    fs = average_by_k(FeatureSet.concat(sets), fcfg.avg_k, seed=seed, class_names=names)
    write_features_csv(work / "features.csv", fs, names)
    summary = {"vectors": len(fs.vectors), "dim": int(fs.vectors.shape[1]), "avg_k": fcfg.avg_k}
    if fcfg.tsne:
        r = tsne(fs.vectors, perplexity=fcfg.perplexity, iterations=fcfg.iterations, seed=seed)
        write_tsne_csv(work / "tsne.csv", fs, r.embedding, names)
        summary.update(perplexity=r.perplexity, final_kl=float(r.kl[-1]), tsne_flags=r.flags)
    return summary


BENCH_HEADER = ["cache", "workers", "prefetch", "epoch", "wall_ms", "decode_ms", "wait_ms", "cache_hits",
                "order_digest"]


def cmd_bench(cfg: RunConfig, args, work: Path, seed: int) -> dict:
    values = {"split": args.split, "epochs": args.epochs, "latency_ms": args.latency_ms,
              "consumer_ms": args.consumer_ms, "cache": args.cache, "workers": args.workers,
              "prefetch": args.prefetch}
    bcfg = _override(cfg.bench, **values)
    cfg.bench = bcfg
    lbase = _override(cfg.loader, batch_size=args.batch_size)
    lbase = dataclasses.replace(lbase, shuffle_seed=seed, simulated_io_latency_ms=bcfg.latency_ms)
    cfg.loader = lbase
    manifest = _dataset(cfg, args, work, seed)
    rows, orders, walls = [], set(), {}
    for cache, workers, prefetch in itertools.product(bcfg.cache, bcfg.workers, bcfg.prefetch):
        lcfg = dataclasses.replace(lbase, cache=cache, decode_workers=workers, prefetch_depth=prefetch)
        stats, order = benchmark(manifest, bcfg.split, lcfg, bcfg.epochs, bcfg.consumer_ms)
        orders.add(tuple(order))
        walls[(cache, workers, prefetch)] = [s.wall_ms for s in stats]
        for s, d in zip(stats, order):
            rows.append(["on" if cache else "off", workers, prefetch, s.epoch, f"{s.wall_ms:.3f}",
                         f"{s.decode_ms:.3f}", f"{s.wait_ms:.3f}", s.cache_hits, d])
            log.info("cache=%s workers=%d prefetch=%d epoch %d: %.1f ms", cache, workers, prefetch, s.epoch,
                     s.wall_ms)
    with open(work / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        w.writerows(rows)
    summary = {"variants": len(walls), "order_identical": len(orders) == 1}
    if bcfg.epochs >= 2:
        summary["epoch2_speedup"] = {f"cache={'on' if k[0] else 'off'},workers={k[1]},prefetch={k[2]}":
                                     round(v[0] / v[1], 3) if v[1] > 0 else None for k, v in walls.items()}
    return summary


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain,
            "features": cmd_features, "bench": cmd_bench}


def _list_outputs(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file() and p.name != "run.json")


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    args.seed_given = seed is not None
    if seed is None:
        seed = cfg.train.seed
    if seed < 0 or seed >= 2 ** 64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    out = Path(getattr(args, "out", None) or cfg.outputs or Path("lret_runs") / args.command)
    cfg.outputs = str(out)
    t0 = time.perf_counter()
    with output_dir(out) as work:
        summary = HANDLERS[args.command](cfg, args, work, seed)
        provenance = {
            "command": args.command,
            "argv": list(sys.argv[1:] if argv is None else argv),
            "seed": seed,
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            "code_version": {"lret": __version__, "python": platform.python_version(), "numpy": np.__version__},
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "outputs": _list_outputs(work),
            "summary": summary,
        }
        (work / "run.json").write_text(json.dumps(provenance, indent=2, sort_keys=True, default=str) + "\n")
    return {"out": str(out), **summary}


def main(argv=None) -> int:
    try:
        result = run(argv)
    except (UsageError, ConfigError) as exc:
        _fail(exc, 2)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        log.debug("traceback", exc_info=True)
        _fail(exc, 1)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


def _fail(exc: BaseException, code: int) -> None:
    msg = " ".join(str(exc).split())  # keep it on one line
    print(json.dumps({"error": type(exc).__name__, "message": msg, "exit_code": code}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
