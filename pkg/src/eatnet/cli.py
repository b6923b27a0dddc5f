"""Command-line surface: train, eval, verify, params.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure.
Configuration is a flat key=value file with [section] headers; command-line
flags override file values.  All artifacts are written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _set_thread_env(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


# -- config file -------------------------------------------------------------------


def parse_config_file(path: Path) -> dict[str, str]:
    """Flat key=value with [section] headers -> {'section.key': value}."""
    values: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
        elif "=" in line:
            key, val = line.split("=", 1)
            full = f"{section}.{key.strip()}" if section else key.strip()
            values[full] = val.strip()
        else:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
    return values


@dataclass
class RunConfig:
    preset: str = "desk"
    num_classes: int = 3
    resolution: int = 32
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 50
    precision: int = 32
    dataset: str = "synth"          # "synth" or a GTSRB-style directory
    per_class: int = 100
    val_fraction: float = 0.2
    augment_enabled: bool = True
    rotation_max_deg: float = 15.0
    zoom_lo: float = 0.9
    zoom_hi: float = 1.1
    hflip_prob: float = 0.5
    seed: int = 0
    out_dir: str = ""
    verification: bool = False
    threads: int = 0                # 0 = leave the BLAS default

    _KEYS = {
        "model.preset": ("preset", str),
        "model.num_classes": ("num_classes", int),
        "model.resolution": ("resolution", int),
        "optim.learning_rate": ("learning_rate", float),
        "optim.epochs": ("epochs", int),
        "optim.batch_size": ("batch_size", int),
        "optim.precision": ("precision", int),
        "data.dataset": ("dataset", str),
        "data.per_class": ("per_class", int),
        "data.val_fraction": ("val_fraction", float),
        "augment.enabled": ("augment_enabled", None),
        "augment.rotation_max_deg": ("rotation_max_deg", float),
        "augment.zoom_lo": ("zoom_lo", float),
        "augment.zoom_hi": ("zoom_hi", float),
        "augment.hflip_prob": ("hflip_prob", float),
        "run.seed": ("seed", int),
        "run.out_dir": ("out_dir", str),
        "run.verification": ("verification", None),
        "run.threads": ("threads", int),
    }

    def apply_file(self, values: dict[str, str]) -> list[str]:
        problems = []
        for key, val in values.items():
            if key not in self._KEYS:
                problems.append(f"unknown config key {key!r}")
                continue
            attr, conv = self._KEYS[key]
            try:
                if conv is None:  # boolean
                    setattr(self, attr, val.lower() in ("1", "true", "yes", "on"))
                else:
                    setattr(self, attr, conv(val))
            except ValueError:
                problems.append(f"config key {key!r}: cannot parse {val!r}")
        return problems

    def validate(self) -> list[str]:
        problems = []
        if self.preset not in ("desk", "micro"):
            problems.append(f"unknown model preset {self.preset!r}")
        if self.dataset != "synth" and not Path(self.dataset).is_dir():
            problems.append(f"dataset directory does not exist: {self.dataset}")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.precision not in (32, 64):
            problems.append("precision must be 32 or 64")
        if not (self.zoom_lo <= 1.0 <= self.zoom_hi):
            problems.append("zoom range must bracket 1.0")
        if not (0.0 <= self.hflip_prob <= 1.0):
            problems.append("hflip_prob must lie in [0,1]")
        if not (0.0 < self.val_fraction < 1.0):
            problems.append("val_fraction must lie in (0,1)")
        return problems

    def snapshot(self) -> str:
        lines = []
        by_section: dict[str, list[str]] = {}
        for key, (attr, _) in self._KEYS.items():
            section, name = key.split(".", 1)
            by_section.setdefault(section, []).append(
                f"{name} = {getattr(self, attr)}")
        for section in sorted(by_section):
            lines.append(f"[{section}]")
            lines.extend(by_section[section])
            lines.append("")
        return "\n".join(lines)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _default_out_root() -> Path:
    return Path(os.environ.get("EATNET_OUT_ROOT", "runs"))


def _load_run_config(args) -> tuple[RunConfig, list[str]]:
    cfg = RunConfig()
    problems = []
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            return cfg, [f"config file not found: {path}"]
        try:
            problems += cfg.apply_file(parse_config_file(path))
        except ValueError as exc:
            return cfg, [str(exc)]
    for attr in ("preset", "num_classes", "resolution", "epochs", "batch_size",
                 "precision", "dataset", "per_class", "seed", "out_dir",
                 "threads"):
        val = getattr(args, attr, None)
        if val is not None:
            setattr(cfg, attr, val)
    if getattr(args, "learning_rate", None) is not None:
        cfg.learning_rate = args.learning_rate
    if getattr(args, "verification", False):
        cfg.verification = True
    if getattr(args, "no_augment", False):
        cfg.augment_enabled = False
    problems += cfg.validate()
    return cfg, problems


def _build_from_config(cfg: RunConfig):
    from . import tensor as T
    from .backbone import build_model, desk_spec, micro_spec
    from .data import load_gtsrb_dir, make_split, synth_shapes

    T.set_precision(64 if cfg.verification else cfg.precision)
    if cfg.dataset == "synth":
        full = synth_shapes(cfg.per_class, resolution=cfg.resolution,
                            seed=cfg.seed)
    else:
        full = load_gtsrb_dir(cfg.dataset, cfg.resolution)
    train_ds, val_ds, manifest = make_split(full, seed=cfg.seed,
                                            val_fraction=cfg.val_fraction)
    make = desk_spec if cfg.preset == "desk" else micro_spec
    spec = make(num_classes=full.num_classes, resolution=cfg.resolution)
    model = build_model(spec, seed=cfg.seed)
    return model, train_ds, val_ds, manifest


# -- subcommands -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg, problems = _load_run_config(args)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.threads:
        _set_thread_env(cfg.threads)
    from .backbone import SpecError
    from .data import AugmentPolicy, LoadError
    from .tensor import NumericError
    from .training import OptimConfig, evaluate, train

    out_dir = Path(cfg.out_dir) if cfg.out_dir else (
        _default_out_root() / f"train-seed{cfg.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        model, train_ds, val_ds, manifest = _build_from_config(cfg)
    except (SpecError, LoadError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest.write(out_dir / "split.txt")
    _atomic_write_text(out_dir / "config_resolved.txt", cfg.snapshot())
    policy = AugmentPolicy(rotation_max_deg=cfg.rotation_max_deg,
                           zoom_range=(cfg.zoom_lo, cfg.zoom_hi),
                           hflip_prob=cfg.hflip_prob,
                           seed=cfg.seed) if cfg.augment_enabled else None
    ocfg = OptimConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                       batch_size=cfg.batch_size,
                       precision=64 if cfg.verification else cfg.precision)
    try:
        result = train(model, train_ds, val_ds, ocfg, augment_policy=policy,
                       rng_seed=cfg.seed, out_dir=out_dir,
                       verification=cfg.verification)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _, report = evaluate(model, val_ds, ocfg.batch_size)
    _atomic_write_text(out_dir / "metrics.json", report.to_json())
    print(f"trained {cfg.epochs} epochs; best val acc "
          f"{result.best_val_acc:.4f} (epoch {result.best_epoch})")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import tensor as T
    from .backbone import CheckpointError, load_checkpoint
    from .data import LoadError, load_gtsrb_dir, make_split, synth_shapes
    from .training import evaluate

    T.set_precision(args.precision)
    try:
        model, manifest = load_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    res = model.spec.input_resolution[0]
    try:
        if args.dataset == "synth":
            full = synth_shapes(args.per_class, resolution=res, seed=args.seed)
            if args.split == "val":
                _, ds, _ = make_split(full, seed=args.seed)
            else:
                ds = full
        else:
            ds = load_gtsrb_dir(args.dataset, res)
    except LoadError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if ds.num_classes != model.spec.num_classes:
        print(f"class-count mismatch: checkpoint expects "
              f"{model.spec.num_classes}, dataset has {ds.num_classes}",
              file=sys.stderr)
        return EXIT_CONFIG
    _, report = evaluate(model, ds)
    payload = report.to_dict()
    if not args.per_class_flag:
        payload.pop("per_class")
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    try:
        results = run_suites(args.suite or None)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f"  ({r.detail})" if r.detail else ""
        print(f"[{status}] {r.suite}/{r.name}: max err {r.max_err:.3e}{detail}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else 1


def cmd_params(args) -> int:
    cfg, problems = _load_run_config(args)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    from .backbone import SpecError, build_model, count_params_flops, desk_spec, micro_spec

    make = desk_spec if cfg.preset == "desk" else micro_spec
    try:
        spec = make(num_classes=cfg.num_classes, resolution=cfg.resolution)
        model = build_model(spec, seed=cfg.seed)
    except SpecError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    report = count_params_flops(model)
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="eatnet",
        description="Train, evaluate and verify the pyramid EAT-block classifier")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--preset", choices=("desk", "micro"))
        p.add_argument("--num-classes", dest="num_classes", type=int)
        p.add_argument("--resolution", type=int)
        p.add_argument("--dataset", help="'synth' or a GTSRB-style directory")
        p.add_argument("--per-class", dest="per_class", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--precision", type=int, choices=(32, 64))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", dest="out_dir")
        p.add_argument("--threads", type=int)
        p.add_argument("--verification", action="store_true",
                       help="64-bit deterministic mode")
        p.add_argument("--no-augment", dest="no_augment", action="store_true")

    pt = sub.add_parser("train", help="train a model and write artifacts")
    add_run_flags(pt)
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint, print metric JSON")
    pe.add_argument("checkpoint")
    pe.add_argument("--dataset", default="synth")
    pe.add_argument("--split", choices=("val", "all"), default="all")
    pe.add_argument("--per-class", dest="per_class_flag", action="store_true")
    pe.add_argument("--per-class-count", dest="per_class", type=int, default=100)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--precision", type=int, choices=(32, 64), default=64)
    pe.set_defaults(func=cmd_eval)

    pv = sub.add_parser("verify", help="run gradient/oracle/invariant suites")
    pv.add_argument("--suite", action="append",
                    help="suite name (repeatable); default: all")
    pv.set_defaults(func=cmd_verify)

    pp = sub.add_parser("params", help="parameter and FLOPs accounting")
    add_run_flags(pp)
    pp.add_argument("--json", action="store_true")
    pp.set_defaults(func=cmd_params)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # thread pinning must happen before numpy spins up its pools
    if "--threads" in argv:
        try:
            _set_thread_env(int(argv[argv.index("--threads") + 1]))
        except (IndexError, ValueError):
            pass
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
