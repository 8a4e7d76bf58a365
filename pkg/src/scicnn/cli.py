"""Command-line entry point: ``scicnn {synth,train,eval,ablate}``.

Exit codes: 0 success, 2 config/usage, 3 ingest, 4 divergence, 5 I/O,
6 corrupt checkpoint.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .data import (PatchDataset, generate_synthetic, load_manifest, make_camera_specs, normalize,
                   write_manifest, write_synthetic)
from .errors import ConfigError, RunIOError, SciError
from .model import ArchitectureConfig, load_checkpoint
from .tensor import Rng
from .training import (SWEEPS, TrainConfig, cross_validate, evaluate, image_vote_accuracy, predict,
                       run_ablation, summary_csv)

log = logging.getLogger("scicnn")

ARCH_FIELDS = {f.name for f in fields(ArchitectureConfig)} | {"conv_depth"}
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}

# flag name -> (config section, field)
FLAG_FIELDS = {
    "seed": ("training", "seed"),
    "epochs": ("training", "epochs"),
    "lr": ("training", "learning_rate"),
    "momentum": ("training", "momentum"),
    "batch_size": ("training", "batch_size"),
    "depth": ("architecture", "conv_depth"),
    "activation": ("architecture", "activation"),
    "keep_prob": ("architecture", "dropout_keep"),
}


def resolve_config(args) -> tuple[ArchitectureConfig, TrainConfig]:
    """defaults < ``--config`` file < command-line flags."""
    arch: dict = {}
    train: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        flat = {**raw.pop("architecture", {}), **raw.pop("training", {}), **raw}
        for key, value in flat.items():
            if key in TRAIN_FIELDS:
                train[key] = value
            elif key in ARCH_FIELDS:
                arch[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
    for flag, (section, name) in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            (train if section == "training" else arch)[name] = value
    if "conv_depth" in arch and "filters" in arch and len(arch["filters"]) != arch["conv_depth"]:
        # an explicit depth flag wins over filters from the config file
        arch.pop("filters")
    arch_cfg = ArchitectureConfig.from_dict(arch)
    train_cfg = TrainConfig.from_dict(train)
    arch_cfg.validate()
    train_cfg.validate()
    return arch_cfg, train_cfg


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def input_hashes(manifest, records=()) -> dict:
    h = hashlib.sha256()
    for r in sorted(records, key=lambda r: r.image_id):
        h.update(r.image_id.encode() + b"\0" + sha256_file(r.path).encode())
    return {"manifest": sha256_file(manifest), "images": h.hexdigest()}


@contextlib.contextmanager
def run_dir(out):
    """Create ``out`` and hold its lockfile for the duration of the run."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        fd = os.open(out / ".lock", os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunIOError(f"{out} is locked by another run (remove {out / '.lock'} if stale)") from None
    except OSError as exc:
        raise RunIOError(f"cannot use output directory {out}: {exc}") from exc
    os.close(fd)
    try:
        yield out
    finally:
        with contextlib.suppress(OSError):
            (out / ".lock").unlink()


def write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise RunIOError(f"cannot write {path}: {exc}") from exc


def write_run_manifest(out: Path, command: str, config: dict, seed, inputs: dict, outputs) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
        "version": __version__,
    }
    write_text(out / "run_manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rng = Rng(seed)
    specs = make_camera_specs(args.classes, rng, args.sigma_f, args.sigma_r,
                              correlated=args.correlated, delta_std=args.delta_std)
    records = generate_synthetic(specs, args.per_class, rng, args.size, args.size)
    params = {"classes": args.classes, "per_class": args.per_class, "sigma_f": args.sigma_f,
              "sigma_r": args.sigma_r, "size": args.size, "correlated": args.correlated,
              "delta_std": args.delta_std}
    with run_dir(args.out) as out:
        try:
            manifest = write_synthetic(records, specs, out, seed, params)
        except OSError as exc:
            raise RunIOError(f"cannot write dataset to {out}: {exc}") from exc
        write_run_manifest(out, "synth", params, seed, {},
                           [manifest, out / "synthetic.json"] + [r.path for r in records])
    print(f"wrote {len(records)} images to {manifest}")
    return 0


def cmd_train(args) -> int:
    arch_cfg, train_cfg = resolve_config(args)
    records = load_manifest(args.manifest, allow_jpeg=args.allow_jpeg)
    if not records:
        raise ConfigError(f"manifest {args.manifest} has no images")
    with run_dir(args.out) as out:
        outputs = []

        def keep_test_manifest(k, net, test_recs):
            path = out / f"fold_{k:02d}_test.csv"
            write_manifest(test_recs, path)
            outputs.extend([path, out / f"fold_{k:02d}.ckpt"])

        report = cross_validate(records, args.mode, arch_cfg, train_cfg, folds=args.folds,
                                rounds=args.rounds, checkpoint_dir=out, vote=args.vote == "image",
                                on_round=keep_test_manifest)
        write_text(out / "report.json", report.to_json(include_timings=False))
        write_text(out / "confusion_matrix.csv", report.confusion_matrix.to_csv())
        write_text(out / "timings.json", json.dumps(report.timings, indent=2) + "\n")
        outputs += [out / "report.json", out / "confusion_matrix.csv", out / "timings.json"]
        write_run_manifest(out, "train",
                           {"architecture": report.architecture, "training": asdict(train_cfg),
                            "mode": args.mode, "folds": args.folds, "rounds": args.rounds},
                           train_cfg.seed, input_hashes(args.manifest, records), outputs)
    print(f"mean accuracy {report.mean_accuracy:.4f} over {len(report.fold_accuracies)} folds")
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    mode = args.mode or net.metadata.get("label_mode")
    if mode is None:
        raise ConfigError("checkpoint does not record a label mode; pass --mode")
    records = load_manifest(args.manifest, allow_jpeg=args.allow_jpeg)
    ds = PatchDataset.from_records(records, mode)
    if ds.num_classes != net.num_classes:
        raise ConfigError(f"checkpoint has {net.num_classes} classes but --mode {mode} has {ds.num_classes}")
    ds = normalize(ds, net.metadata.get("channel_means", [0.0] * net.config.in_channels))
    acc, cm = evaluate(net, ds)
    result = {"accuracy": acc, "accuracy_granularity": "patch", "confusion_matrix": cm.counts.tolist(),
              "class_names": list(cm.class_names), "per_class_precision": cm.precision(),
              "per_class_recall": cm.recall(), "label_mode": mode, "patches": cm.total}
    if args.vote == "image":
        result["image_vote_accuracy"] = image_vote_accuracy(predict(net, ds), ds)
    with run_dir(args.out) as out:
        write_text(out / "eval.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
        write_text(out / "confusion_matrix.csv", cm.to_csv())
        write_run_manifest(out, "eval", {"mode": mode, "vote": args.vote}, None,
                           {"checkpoint": sha256_file(args.checkpoint),
                            **input_hashes(args.manifest, records)},
                           [out / "eval.json", out / "confusion_matrix.csv"])
    print(f"accuracy {acc:.4f} on {cm.total} patches")
    return 0


def cmd_ablate(args) -> int:
    arch_cfg, train_cfg = resolve_config(args)
    records = load_manifest(args.manifest, allow_jpeg=args.allow_jpeg)
    if not records:
        raise ConfigError(f"manifest {args.manifest} has no images")
    results = run_ablation(args.sweep, records, args.mode, arch_cfg, train_cfg,
                           folds=args.folds, rounds=args.rounds)
    with run_dir(args.out) as out:
        outputs = []
        for r in results:
            if r.report is None:
                continue
            path = out / f"{args.sweep}_{r.variant}.json"
            write_text(path, r.report.to_json(include_timings=False))
            outputs.append(path)
        summary = out / f"{args.sweep}_summary.csv"
        write_text(summary, summary_csv(results))
        outputs.append(summary)
        write_run_manifest(out, "ablate",
                           {"sweep": args.sweep, "variants": SWEEPS[args.sweep],
                            "architecture": arch_cfg.to_dict(), "training": asdict(train_cfg),
                            "mode": args.mode, "folds": args.folds, "rounds": args.rounds},
                           train_cfg.seed, input_hashes(args.manifest, records), outputs)
    print(summary_csv(results), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scicnn", description="Source camera identification CNN")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic camera dataset")
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--sigma-f", type=float, default=0.05)
    s.add_argument("--sigma-r", type=float, default=0.01)
    s.add_argument("--size", type=int, default=64, help="image side length in pixels")
    s.add_argument("--correlated", action="store_true", help="sensors of one device share a pattern")
    s.add_argument("--delta-std", type=float, default=0.01)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def add_training_flags(q):
        q.add_argument("--manifest", required=True)
        q.add_argument("--mode", choices=["model", "sensor"], required=True)
        q.add_argument("--config")
        q.add_argument("--seed", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--momentum", type=float)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--depth", type=int, choices=[1, 2, 4])
        q.add_argument("--activation", choices=["relu", "leaky_relu"])
        q.add_argument("--keep-prob", type=float)
        q.add_argument("--folds", type=int, default=10)
        q.add_argument("--rounds", type=int, help="only test on the first N folds")
        q.add_argument("--allow-jpeg", action="store_true")
        q.add_argument("--out", required=True)

    t = sub.add_parser("train", help="cross-validated training")
    add_training_flags(t)
    t.add_argument("--vote", choices=["patch", "image"], default="patch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--mode", choices=["model", "sensor"])
    e.add_argument("--vote", choices=["patch", "image"], default="patch")
    e.add_argument("--allow-jpeg", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="architecture / hyperparameter sweeps")
    add_training_flags(a)
    a.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SciError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
