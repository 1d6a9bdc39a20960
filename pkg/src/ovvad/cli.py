"""Command-line entry point: corpus generation, the two training stages,
pseudo-anomaly synthesis, evaluation, gradient checking, and report
rendering.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checks, nas
from .data import Manifest, SyntheticConfig, gen_synthetic, load_manifest, read_features, sample_frames
from .errors import DataError, NumericalError, UsageError
from .evaluation import evaluate, write_report
from .model import load_class_catalog, load_checkpoint, save_checkpoint
from .nas import build_pseudo_set, load_pseudo_set, load_snippet_bank, save_pseudo_set, validate_against_catalog
from .train import TrainConfig, TrainingDiverged, finetune_stage2, save_history_csv, train_stage1

GRADCHECK_LIMIT = 1e-3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to code 1."""

    def error(self, message):
        raise UsageError(message)


class RunConfig:
    """Resolved configuration for one command: paths plus the two sections."""

    def __init__(self, raw: dict, base_dir: Path):
        self.base_dir = base_dir
        self.paths = {k: str(v) for k, v in raw.get("paths", {}).items()}
        self.seed = raw.get("seed")
        train_raw = dict(raw.get("train", {}))
        synth_raw = dict(raw.get("synthetic", {}))
        if self.seed is not None:
            train_raw.setdefault("seed", self.seed)
            synth_raw.setdefault("seed", self.seed)
        self.train = TrainConfig.from_dict(train_raw)
        try:
            self.synthetic = SyntheticConfig(**synth_raw)
        except TypeError as exc:
            raise UsageError(f"bad synthetic config: {exc}") from None
        self.nas_per_category = int(raw.get("nas_per_category", 10))

    def path(self, key: str, required: bool = True) -> Path | None:
        if key not in self.paths:
            if required:
                raise UsageError(f"config is missing paths.{key}")
            return None
        p = Path(self.paths[key])
        return p if p.is_absolute() else self.base_dir / p

    def echo(self, out_dir: Path) -> None:
        """Write the effective configuration next to the command's outputs."""
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "seed": self.seed,
            "paths": self.paths,
            "train": asdict(self.train),
            "synthetic": asdict(self.synthetic),
            "nas_per_category": self.nas_per_category,
        }
        (out_dir / "effective_config.json").write_text(json.dumps(payload, indent=1, default=list))


def _load_config(args) -> RunConfig:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise UsageError(f"config file not found: {cfg_path}")
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config {cfg_path}: {exc}") from None
    cfg = RunConfig(raw, cfg_path.parent)
    # flag overrides
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.synthetic.seed = args.seed
    if getattr(args, "sigma", None) is not None:
        cfg.train.sigma = args.sigma
    if getattr(args, "lam", None) is not None:
        cfg.train.lam = args.lam
    if getattr(args, "out", None) is not None:
        cfg.paths["out_dir"] = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.path("out_dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(cfg: RunConfig) -> Manifest:
    return load_manifest(cfg.path("manifest"))


def cmd_gen_synthetic(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    gen_synthetic(cfg.synthetic, out)
    cfg.echo(out)
    print(f"wrote synthetic corpus to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.train.stage1_epochs = args.epochs
    out = _out_dir(cfg)
    manifest = _manifest(cfg)
    ckpt = out / "stage1.ovck"
    try:
        params, history = train_stage1(manifest, cfg.train)
    except TrainingDiverged as exc:
        save_checkpoint(exc.params, ckpt)
        save_history_csv(exc.history, out / "stage1_history.csv")
        raise
    save_checkpoint(params, ckpt)
    save_history_csv(history, out / "stage1_history.csv")
    cfg.echo(out)
    print(f"stage-1 checkpoint: {ckpt}")
    print(f"final loss: {history[-1].total:.4f}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    manifest = _manifest(cfg)
    catalog = load_class_catalog(manifest.resolve(manifest.class_catalog_path))
    bank = load_snippet_bank(cfg.path("snippet_bank"))
    validate_against_catalog(bank, catalog.class_names, catalog.is_base)
    rng = np.random.default_rng([cfg.train.seed, 3])
    normals = []
    for rec in manifest.split("train"):
        if not rec.is_abnormal:
            seq = read_features(manifest.resolve(rec.feature_path))
            normals.append((rec.id, sample_frames(seq, cfg.train.max_len, rng)))
    pseudos = build_pseudo_set(normals, bank, cfg.nas_per_category, rng, max_len=cfg.train.max_len)
    save_pseudo_set(pseudos, out / "pseudo")
    cfg.echo(out)
    print(f"wrote {len(pseudos)} pseudo videos to {out / 'pseudo'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.train.stage2_epochs = args.epochs
    out = _out_dir(cfg)
    manifest = _manifest(cfg)
    params = load_checkpoint(cfg.path("checkpoint"))
    pseudo_path = cfg.path("pseudo_set")
    if not pseudo_path.exists():
        raise DataError(f"pseudo set not found: {pseudo_path}")
    pseudo_set = load_pseudo_set(pseudo_path)
    ckpt = out / "stage2.ovck"
    try:
        tuned, history = finetune_stage2(params, pseudo_set, manifest, cfg.train)
    except TrainingDiverged as exc:
        save_checkpoint(exc.params, ckpt)
        save_history_csv(exc.history, out / "stage2_history.csv")
        raise
    save_checkpoint(tuned, ckpt)
    save_history_csv(history, out / "stage2_history.csv")
    cfg.echo(out)
    print(f"stage-2 checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    manifest = _manifest(cfg)
    ckpt = cfg.path("checkpoint")
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    params = load_checkpoint(ckpt)
    catalog = load_class_catalog(manifest.resolve(manifest.class_catalog_path))
    report = evaluate(params, manifest, catalog, cfg.train.model_config())
    write_report(report, out)
    cfg.echo(out)
    print(f"report: {out / 'report.json'}")
    for name, value in report.scalars().items():
        print(f"  {name}: {'n/a' if value is None else f'{value:.4f}'}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = checks.run_suite(trials=args.trials, seed=args.seed or 0)
    err = max(worst.values())
    for name in sorted(worst):
        print(f"{name:18s} {worst[name]:.3e}")
    print(f"max relative error: {err:.3e}")
    if err > GRADCHECK_LIMIT:
        raise NumericalError(f"gradient check failed: {err:.3e} > {GRADCHECK_LIMIT}")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args)
    report_path = cfg.path("report", required=False) or (_out_dir(cfg) / "report.json")
    if not report_path.exists():
        raise DataError(f"report not found: {report_path}")
    raw = json.loads(report_path.read_text())

    def fmt(key):
        v = raw.get(key)
        return "  n/a" if v is None else f"{100 * v:5.2f}"

    print("metric      overall   base   novel")
    for metric in ("auc", "ap", "acc"):
        row = [fmt(metric), fmt(f"{metric}_base"), fmt(f"{metric}_novel")]
        print(f"{metric.upper():8s} {row[0]:>9s} {row[1]:>6s} {row[2]:>7s}")
    if raw.get("confusion"):
        print("\nconfusion (rows true, cols predicted):")
        names = raw["class_names"]
        width = max(len(n) for n in names)
        print(" " * (width + 1) + " ".join(f"{n[:6]:>6s}" for n in names))
        for name, row in zip(names, raw["confusion"]):
            print(f"{name:>{width}s} " + " ".join(f"{v:6d}" for v in row))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="ovvad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, epochs=False):
        p.add_argument("--config", required=True, help="RunConfig JSON path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--out", default=None, help="override paths.out_dir")
        if epochs:
            p.add_argument("--epochs", type=int, default=None)

    common(sub.add_parser("gen-synthetic", help="write a synthetic corpus"))
    common(sub.add_parser("train", help="stage-1 weakly supervised training"), epochs=True)
    common(sub.add_parser("synth", help="build the pseudo novel-anomaly set"))
    common(sub.add_parser("finetune", help="stage-2 fine-tuning"), epochs=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    common(sub.add_parser("report", help="render a report as a plain-text table"))
    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--trials", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "synth": cmd_synth,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
