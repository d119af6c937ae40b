"""Command-line entry point: ``reptransfer <command> [options]``.

Every command resolves its settings as built-in defaults, then an optional
``--config`` JSON file, then explicit flags; prints them; and stores the
resolved set as ``config.json`` in its output directory, so
``reptransfer <command> --config <run>/config.json --out <new>`` repeats a run.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .datagen import TRANSFORM_KINDS, TransformSpec, build_dataset, load_labeled, load_pairs, read_meta
from .exceptions import DivergenceError, InputError
from .inversion import InversionConfig, invert
from .metrics import ReferenceScore, dataset_distance, format_cell, read_scores_csv, write_scores_csv
from .netpbm import read_ppm, write_ppm
from .network import Checkpoint, NetworkConfig, init_checkpoint, load_checkpoint
from .optim import DEFAULT_WEIGHT_DECAY, SGDConfig
from .tensor import precision
from .transfer import (FINETUNE_DEFAULTS, SUPERVISED_DEFAULTS, TRANSFER_DEFAULTS, FeatureSelection, confusion,
                       train_supervised, train_transfer)

log = logging.getLogger("reptransfer")

BASELINE_ROWS = ("B0", "B1", "B2", "Our")
TAP_ROWS = ("pool_1", "pool_2", "pool_3", "pool_4", "pool_5", "W_inc", "W_dec")
TRANSFORM_ORDER = ("photocopy", "ripple", "cubism", "none")
MISSING = "—"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")



DEFAULTS: dict[str, dict] = {
    "gen": dict(out=None, transform="none", seed=0, transform_seed=None, train=2000, val=200, test=200,
                size=64, classes=5, contrast=None, grain=None, amplitude=None, wavelength=None,
                noise=None, cells=None, max_offset=None, jitter=None),
    "train-sup": dict(data=None, side="x1", split="train", init=None, init_seed=0, out=None, seed=0,
                      classes=None, lr=None, momentum=0.9, weight_decay=DEFAULT_WEIGHT_DECAY,
                      power=0.9, iters=SUPERVISED_DEFAULTS["max_iter"], batch=SUPERVISED_DEFAULTS["batch_size"],
                      head_lr_mult=SUPERVISED_DEFAULTS["head_lr_mult"]),
    "train-transfer": dict(teacher=None, data=None, split="train", out=None, seed=0, taps="pool_5",
                           weights=None, strategy=None, cache_teacher=False,
                           lr=TRANSFER_DEFAULTS["base_lr"], momentum=0.9,
                           weight_decay=TRANSFER_DEFAULTS["weight_decay"], power=0.9,
                           iters=TRANSFER_DEFAULTS["max_iter"], batch=TRANSFER_DEFAULTS["batch_size"],
                           head_lr_mult=1.0),
    "eval": dict(ckpt=None, data=None, split="test", side="x2", out=None, tag=None),
    "distance": dict(ref="79.92,69.22", scores=None),
    "invert": dict(ckpt=None, image=None, out=None, content="pool_5=1.0", style="pool_1=1.0,pool_2=1.0,pool_3=1.0",
                   iters=2000, step=0.1, seed=0),
    "report": dict(runs=None, out=None),
}
REQUIRED = {
    "gen": ("out",),
    "train-sup": ("data", "out"),
    "train-transfer": ("teacher", "data", "out"),
    "eval": ("ckpt", "data", "out"),
    "distance": ("scores",),
    "invert": ("ckpt", "image", "out"),
    "report": ("runs",),
}


def _opt(p, *flags, **kw):
    p.add_argument(*flags, default=argparse.SUPPRESS, **kw)


def _sgd_options(p):
    _opt(p, "--lr", type=float, help="base learning rate of the poly schedule")
    _opt(p, "--head-lr-mult", type=float, help="learning-rate multiplier for the classifier head")
    _opt(p, "--momentum", type=float)
    _opt(p, "--weight-decay", type=float, help="applied to weights, not biases")
    _opt(p, "--power", type=float, help="poly schedule exponent")
    _opt(p, "--iters", type=int, help="number of SGD iterations")
    _opt(p, "--batch", type=int, help="batch size")
    _opt(p, "--seed", type=int, help="batch-order seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reptransfer", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--precision", choices=("float32", "float64"), default=None,
                        help="tensor precision (default float32)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with settings; explicit flags win")
        return p

    p = command("gen", "generate a paired synthetic corpus")
    _opt(p, "--out", help="dataset root directory")
    _opt(p, "--transform", choices=TRANSFORM_KINDS)
    _opt(p, "--seed", type=int, help="scene seed")
    _opt(p, "--transform-seed", type=int, help="transform seed (default: --seed)")
    _opt(p, "--train", type=int)
    _opt(p, "--val", type=int)
    _opt(p, "--test", type=int)
    _opt(p, "--size", type=int, help="canvas size in pixels (multiple of 8)")
    _opt(p, "--classes", type=int, help="class count including background")
    _opt(p, "--contrast", type=float, help="photocopy contrast (1 = identity curve)")
    _opt(p, "--grain", type=float, help="photocopy grain std")
    _opt(p, "--amplitude", type=float, help="ripple amplitude in pixels")
    _opt(p, "--wavelength", type=float, help="ripple wavelength in pixels")
    _opt(p, "--noise", type=float, help="ripple additive noise std")
    _opt(p, "--cells", type=int, help="cubism Voronoi cell count")
    _opt(p, "--max-offset", type=float, help="cubism max cell translation in pixels")
    _opt(p, "--jitter", type=float, help="cubism per-cell colour jitter")

    p = command("train-sup", "supervised cross-entropy training (teacher, B1, B2)")
    _opt(p, "--data", help="dataset root")
    _opt(p, "--side", choices=("x1", "x2"), help="x1: source images/labels; x2: transformed ones")
    _opt(p, "--split", choices=("train", "val", "test"))
    _opt(p, "--init", help="checkpoint to fine-tune from (B2); default random init")
    # --lr defaults to 0.03 from scratch and 0.01 when fine-tuning with --init
    _opt(p, "--init-seed", type=int, help="seed of the random initialisation")
    _opt(p, "--classes", type=int, help="class count (default: from dataset)")
    _opt(p, "--out", help="run directory")
    _sgd_options(p)

    p = command("train-transfer", "annotation-free feature regression onto a frozen teacher")
    _opt(p, "--teacher", help="teacher checkpoint")
    _opt(p, "--data", help="paired dataset root (labels are not read)")
    _opt(p, "--split", choices=("train", "val", "test"))
    _opt(p, "--taps", help="comma-separated taps, e.g. pool_5 or pool_1,pool_5")
    _opt(p, "--weights", help="comma-separated tap weights (default 1.0 each)")
    _opt(p, "--strategy", choices=("W_inc", "W_dec"), help="five-tap weight vector")
    _opt(p, "--cache-teacher", action="store_true", help="compute teacher taps once up front")
    _opt(p, "--out", help="run directory")
    _sgd_options(p)

    p = command("eval", "score a checkpoint on a dataset split")
    _opt(p, "--ckpt")
    _opt(p, "--data")
    _opt(p, "--split", choices=("train", "val", "test"))
    _opt(p, "--side", choices=("x1", "x2"))
    _opt(p, "--tag", help="comma-separated report rows this run fills (B0, B1, B2, Our, pool_k, W_inc, W_dec, H1)")
    _opt(p, "--out", help="run directory")

    p = command("distance", "normalised (acc, mIoU) degradation in percent")
    _opt(p, "--ref", help="reference acc,miou")
    _opt(p, "--scores", help="acc,miou on the transformed dataset")

    p = command("invert", "synthesise an image from a network's features")
    _opt(p, "--ckpt")
    _opt(p, "--image", help="reference image (binary PPM)")
    _opt(p, "--content", help="tap=weight list for the content loss ('' for none)")
    _opt(p, "--style", help="tap=weight list for the style loss ('' for none)")
    _opt(p, "--iters", type=int)
    _opt(p, "--step", type=float, help="pixel gradient step")
    _opt(p, "--seed", type=int, help="noise seed")
    _opt(p, "--out", help="run directory")

    p = command("report", "tables of acc-mIoU cells from eval runs")
    _opt(p, "--runs", help="directory searched recursively for eval runs")
    _opt(p, "--out", help="where to write table markdown/CSV (default: --runs)")
    return parser


# keys a command adds to its own snapshot; accepted and ignored when rerunning from it
DERIVED = {"eval": {"transform"}, "invert": {"inversion"}}


def resolve(args: argparse.Namespace) -> dict:
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config", "precision", "verbose")}
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if from_file.get("command", cmd) != cmd:
            raise UsageError(f"config {args.config} is for '{from_file['command']}', not '{cmd}'")
        unknown = set(from_file) - set(cfg) - {"command", "precision"} - DERIVED.get(cmd, set())
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        cfg.update({k: v for k, v in from_file.items() if k in cfg})
        if args.precision is None:
            args.precision = from_file.get("precision")
    cfg.update(given)
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{cmd}: missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    if cmd == "train-sup" and cfg.get("lr") is None:
        # fine-tuning from --init defaults to a gentler rate than training from scratch
        cfg["lr"] = (FINETUNE_DEFAULTS if cfg.get("init") else SUPERVISED_DEFAULTS)["base_lr"]
    cfg["command"] = cmd
    cfg["precision"] = args.precision or "float32"
    return cfg


@contextlib.contextmanager
def run_directory(path, cfg: dict):
    """Create the run directory, hold its lock file, write the config snapshot."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    lock = d / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InputError(f"run directory {d} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        (d / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        yield d
    finally:
        lock.unlink(missing_ok=True)


def _sgd(cfg: dict) -> SGDConfig:
    return SGDConfig(base_lr=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                     power=cfg["power"], max_iter=cfg["iters"], batch_size=cfg["batch"],
                     head_lr_mult=cfg["head_lr_mult"])


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "lr", "loss"])
        for row in history:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _pair(text: str, what: str) -> ReferenceScore:
    try:
        acc, miou = (float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"{what} must be 'acc,miou', got {text!r}") from None
    return ReferenceScore(acc, miou)


def _tap_weights(text: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for item in filter(None, (s.strip() for s in str(text).split(","))):
        tap, _, w = item.partition("=")
        try:
            out[tap] = float(w) if w else 1.0
        except ValueError:
            raise UsageError(f"bad tap weight {item!r}") from None
    return out


def cmd_gen(cfg: dict) -> int:
    keys = {"contrast": "contrast", "grain": "grain", "amplitude": "amplitude_px",
            "wavelength": "wavelength_px", "noise": "noise", "cells": "cells",
            "max_offset": "max_offset_px", "jitter": "jitter"}
    params = {keys[k]: cfg[k] for k in keys if cfg.get(k) is not None}
    tseed = cfg["seed"] if cfg.get("transform_seed") is None else cfg["transform_seed"]
    try:
        spec = TransformSpec(cfg["transform"], params, seed=tseed)
    except InputError as exc:
        raise UsageError(str(exc)) from exc
    with run_directory(cfg["out"], cfg) as root:
        build_dataset(root, cfg["train"], cfg["val"], cfg["test"], spec, seed=cfg["seed"],
                      size=cfg["size"], n_classes=cfg["classes"])
    print(f"wrote {cfg['train']}/{cfg['val']}/{cfg['test']} {spec.kind} pairs to {cfg['out']}")
    return 0


def cmd_train_sup(cfg: dict) -> int:
    data = load_labeled(cfg["data"], cfg["split"], cfg["side"])
    n_classes = cfg.get("classes") or read_meta(cfg["data"])["n_classes"]
    if cfg.get("init"):
        start = load_checkpoint(cfg["init"])
    else:
        start = init_checkpoint(NetworkConfig(n_classes=n_classes), seed=cfg["init_seed"])
    with run_directory(cfg["out"], cfg) as run:
        result = train_supervised(start, data.images, data.labels, _sgd(cfg), seed=cfg["seed"],
                                  log_every=100)
        result.checkpoint.save(run / "model.ck")
        write_loss_csv(run / "loss.csv", result.history)
    print(f"final loss {result.history[-1][2]:.4f}; checkpoint {Path(cfg['out']) / 'model.ck'}")
    return 0


def _selection(cfg: dict) -> FeatureSelection:
    if cfg.get("strategy"):
        if cfg.get("weights"):
            raise UsageError("--strategy fixes the weights; do not pass --weights too")
        return FeatureSelection.named(cfg["strategy"])
    taps = [t.strip() for t in str(cfg["taps"]).split(",") if t.strip()]
    weights = None
    if cfg.get("weights") not in (None, ""):
        try:
            weights = [float(w) for w in str(cfg["weights"]).split(",")]
        except ValueError:
            raise UsageError(f"bad --weights {cfg['weights']!r}") from None
    try:
        return FeatureSelection.parse(taps, weights)
    except InputError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train_transfer(cfg: dict) -> int:
    sel = _selection(cfg)
    teacher = load_checkpoint(cfg["teacher"])
    pairs = load_pairs(cfg["data"], cfg["split"])
    with run_directory(cfg["out"], cfg) as run:
        result = train_transfer(teacher, pairs, sel, _sgd(cfg), seed=cfg["seed"], log_every=100,
                                cache_teacher=bool(cfg.get("cache_teacher")))
        result.checkpoint.save(run / "model.ck")
        write_loss_csv(run / "loss.csv", result.history)
    print(f"final loss {result.history[-1][2]:.6g}; checkpoint {Path(cfg['out']) / 'model.ck'}")
    return 0


def cmd_eval(cfg: dict) -> int:
    net = load_checkpoint(cfg["ckpt"])
    data = load_labeled(cfg["data"], cfg["split"], cfg["side"])
    meta = read_meta(cfg["data"])
    cfg = dict(cfg, transform=meta["transform"]["kind"] if cfg["side"] == "x2" else "none")
    with run_directory(cfg["out"], cfg) as run:
        s = confusion(net, data.images, data.labels).scores()
        write_scores_csv(run / "scores.csv", [(cfg["tag"] or Path(cfg["ckpt"]).name, cfg["split"], s)])
    print(f"acc {s.mean_class_acc:.2f}  miou {s.miou:.2f}  ({format_cell(s.mean_class_acc, s.miou)})")
    return 0


def cmd_distance(cfg: dict) -> int:
    ref = _pair(cfg["ref"], "--ref")
    on_d2 = _pair(cfg["scores"], "--scores")
    try:
        print(f"{dataset_distance(ref, on_d2):.2f}")
    except InputError as exc:
        raise UsageError(str(exc)) from exc
    return 0


def cmd_invert(cfg: dict) -> int:
    try:
        inv_cfg = InversionConfig(content=_tap_weights(cfg["content"]), style=_tap_weights(cfg["style"]),
                                  iterations=cfg["iters"], step_size=cfg["step"], seed=cfg["seed"])
    except InputError as exc:
        raise UsageError(str(exc)) from exc
    net = load_checkpoint(cfg["ckpt"])
    reference = read_ppm(cfg["image"]).astype("float32") / 255.0
    with run_directory(cfg["out"], dict(cfg, inversion=inv_cfg.to_dict())) as run:
        result = invert(net, reference, inv_cfg)
        write_ppm(run / "image.ppm", result.image)
        with open(run / "loss.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss"])
            w.writerows((it, repr(v)) for it, v in result.history)
    print(f"loss {result.history[0][1]:.6g} -> {result.history[-1][1]:.6g}; image {Path(cfg['out']) / 'image.ppm'}")
    return 0


def collect_eval_runs(root) -> list[dict]:
    runs = []
    for cfg_path in sorted(Path(root).rglob("config.json")):
        try:
            cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        scores_path = cfg_path.parent / "scores.csv"
        if cfg.get("command") != "eval" or not scores_path.exists():
            continue
        row = read_scores_csv(scores_path)[0]
        tags = [t.strip() for t in str(cfg.get("tag") or "").split(",") if t.strip()]
        runs.append({"tags": tags, "transform": cfg.get("transform", "none"),
                     "acc": float(row["acc"]), "miou": float(row["miou"]), "run": str(cfg_path.parent)})
    return runs


def build_tables(runs: list[dict]) -> dict[str, dict]:
    """{table name: {"columns": [...], "cells": {row: {column: "acc-miou" or MISSING}}}}."""
    seen = {r["transform"] for r in runs if r["transform"] != "none"}
    columns = [t for t in TRANSFORM_ORDER if t in seen] + sorted(seen - set(TRANSFORM_ORDER))
    by_key = {}
    for r in runs:
        for tag in r["tags"]:
            by_key[(tag, r["transform"])] = r

    def table(rows):
        return {row: {c: format_cell(by_key[(row, c)]["acc"], by_key[(row, c)]["miou"])
                      if (row, c) in by_key else MISSING for c in columns} for row in rows}

    tables = {"baselines": {"columns": columns, "cells": table(BASELINE_ROWS)},
              "taps": {"columns": columns, "cells": table(TAP_ROWS)}}
    refs = [r for r in runs if "H1" in r["tags"]]
    if refs:
        ref = ReferenceScore(refs[0]["acc"], refs[0]["miou"])
        row = {}
        for c in columns:
            b0 = by_key.get(("B0", c))
            row[c] = f"{dataset_distance(ref, ReferenceScore(b0['acc'], b0['miou'])):.2f}" if b0 else MISSING
        tables["distance"] = {"columns": columns, "cells": {"distance": row}}
    return tables


def render_markdown(name: str, table: dict) -> str:
    cols = table["columns"]
    lines = [f"| {name} | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    for row, cells in table["cells"].items():
        lines.append(f"| {row} | " + " | ".join(cells[c] for c in cols) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: dict) -> int:
    runs = collect_eval_runs(cfg["runs"])
    if not runs:
        raise InputError(f"no completed eval runs under {cfg['runs']}")
    out = Path(cfg.get("out") or cfg["runs"])
    tables = build_tables(runs)
    titles = {"distance": "Dataset distance", "baselines": "Baselines and transfer (acc-mIoU)",
              "taps": "Transfer by tap selection (acc-mIoU)"}
    with run_directory(out, cfg):
        for name, table in tables.items():
            md = render_markdown(titles[name], table)
            (out / f"{name}.md").write_text(md, encoding="utf-8")
            with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["row"] + table["columns"])
                for row, cells in table["cells"].items():
                    w.writerow([row] + [cells[c] for c in table["columns"]])
            print(md)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train-sup": cmd_train_sup,
    "train-transfer": cmd_train_transfer,
    "eval": cmd_eval,
    "distance": cmd_distance,
    "invert": cmd_invert,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        print(json.dumps(cfg, sort_keys=True), file=sys.stderr)
        with precision(cfg["precision"]):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"reptransfer {args.command}: {exc}", file=sys.stderr)
        return 1
    except (InputError, DivergenceError, OSError) as exc:
        print(f"reptransfer {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
