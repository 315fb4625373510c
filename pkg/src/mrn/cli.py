"""``mrn`` command line: synth | train | eval | ablate | gradcheck.

Exit codes: 0 ok, 1 usage/config error, 2 data or storage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, MRNError, NumericalError, StorageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args):
    from .config import load_run_config

    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.synth.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_synth(args) -> int:
    from .synth import generate_dataset

    cfg = _load_config(args)
    if args.patients is not None:
        cfg.synth = dataclasses.replace(cfg.synth, num_patients=args.patients)
    if args.signal_strength is not None:
        cfg.synth = dataclasses.replace(cfg.synth, signal_strength=args.signal_strength)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    manifest = generate_dataset(cfg.synth, out, cfg.roi.specs())
    patients = manifest["patients"]
    summary = {}
    for split in sorted({p["split_tag"] for p in patients}):
        rows = [p for p in patients if p["split_tag"] == split]
        summary[split] = {"HC": sum(p["label"] == 0 for p in rows), "PD": sum(p["label"] == 1 for p in rows)}
    n_pd = sum(p["label"] for p in patients)
    print(f"wrote {len(patients)} patients to {out} (HC {len(patients) - n_pd}, PD {n_pd})")
    for split, c in summary.items():
        print(f"  {split}: HC {c['HC']}, PD {c['PD']}")
    print(f"manifest sha256 {_file_hash(out / 'manifest.json')}")
    return EXIT_OK


def _split(root: Path, tag: str | None):
    from .storage import load_dataset

    samples = load_dataset(root, tag)
    if not samples:
        raise DataError(f"no patients with split tag {tag!r} in {root}")
    return samples


def _check_compatible(cfg, data_root: Path) -> None:
    from .rois import validate_roi_geometry
    from .storage import read_manifest
    from .synth import specs_from_manifest

    manifest = read_manifest(data_root)
    k = len(manifest.get("class_names", [])) or cfg.model.dpt.num_classes
    if k != cfg.model.dpt.num_classes:
        raise ConfigError(f"dataset has {k} segmentation classes, model.dpt.num_classes is {cfg.model.dpt.num_classes}")
    validate_roi_geometry(specs_from_manifest(manifest), cfg.model.encoder.patch_size)


def cmd_train(args) -> int:
    from .config import config_hash, save_run_config
    from .storage import load_dataset
    from .train import Trainer, evaluate, segmentation_dice

    cfg = _load_config(args)
    if args.epochs_pretrain is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs_pretrain=args.epochs_pretrain)
    if args.epochs_finetune is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs_finetune=args.epochs_finetune)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, run_dir / "config.yaml")
    train_set = _split(Path(args.data), "train")
    _check_compatible(cfg, Path(args.data))
    result = Trainer(cfg.model, cfg.train, run_dir).run(train_set)
    report = {"config_hash": config_hash(cfg), "checkpoints": [str(p) for p in result.checkpoints]}
    test_set = load_dataset(Path(args.data), "test")
    if test_set:
        report["test_metrics"] = evaluate(result.model, test_set).to_dict()
        report["test_dice"] = segmentation_dice(result.model, test_set)
    (run_dir / "summary.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate

    model, _, _, _ = load_checkpoint(Path(args.checkpoint))
    samples = _split(Path(args.data), args.split)
    report = evaluate(model, samples).to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import ABLATION_COLUMNS, masking_ablation, write_ablation_csv

    model, _, _, _ = load_checkpoint(Path(args.checkpoint))
    rows = masking_ablation(model, _split(Path(args.data), args.split))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_ablation_csv(rows, out / "ablation.csv")
    print(",".join(ABLATION_COLUMNS))
    for r in rows:
        print(",".join("" if r[c] is None else (f"{r[c]:.4f}" if isinstance(r[c], float) else r[c])
                       for c in ABLATION_COLUMNS))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(seed=args.seed or 0, corrupt=tuple(args.corrupt or ()))
    ok = True
    for r in results:
        status = "PASS" if r.passed(TOLERANCE) else "FAIL"
        ok &= r.passed(TOLERANCE)
        print(f"{r.name:12s} worst relative error {r.worst:.3e}  {status}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", required=True)
    s.add_argument("--patients", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--signal-strength", type=float)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="two-stage training run")
    t.add_argument("--config", type=Path)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs-pretrain", type=int)
    t.add_argument("--epochs-finetune", type=int)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("ablate", cmd_ablate, "ROI masking ablation table")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--data", required=True)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--split", default="test")
        e.add_argument("--out", required=(name == "ablate"))
        e.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, StorageError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MRNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
