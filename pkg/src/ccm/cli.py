"""Command-line entry point: ``ccm {generate,train,evaluate,ablate,verify}``.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .data import DatasetSpec, generate, load_dataset, load_spec_file, save_dataset
from .errors import CCMError, ConfigError, FormatError
from .trainer import (
    ABLATIONS,
    TrainConfig,
    evaluate,
    fit,
    load_checkpoint,
    load_config,
    parse_loss_flags,
    run_ablation,
    save_checkpoint,
    write_metrics,
)

log = logging.getLogger("ccm")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

ABLATION_FIELDS = [
    "kind", "config", "teach", "learn", "cs", "prediction_mode", "seed",
    "val_acc", "val_acc_std", "test_acc", "test_acc_std",
]


class ValidationError(CCMError):
    pass


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise ValidationError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} file not found: {p}")
    return p


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise ValidationError(f"--seeds must be a comma list of integers, got {text!r}") from None
    if not seeds:
        raise ValidationError("--seeds is empty")
    return seeds


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(_require_file(args.config, "config")) if args.config else TrainConfig()
    changes = {}
    if getattr(args, "loss_flags", None):
        changes["loss_flags"] = list(parse_loss_flags(args.loss_flags))
    if getattr(args, "prediction_mode", None):
        changes["prediction_mode"] = args.prediction_mode
    return cfg.replace(**changes) if changes else cfg


def _write_manifest(out: Path, config: dict | None, spec: DatasetSpec | None, artifacts: dict,
                    started: float, extra: dict | None = None) -> Path:
    manifest = {
        "tool": "ccm",
        "version": __version__,
        "config": config,
        "dataset_spec": spec.to_dict() if spec else None,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "duration_seconds": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    spec = load_spec_file(_require_file(args.config, "config")) if args.config else DatasetSpec()
    if not args.out:
        raise ValidationError("--out is required")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, spec, generate(spec))
    log.info("wrote %s (%d domains x %d samples)", out, spec.num_domains, spec.samples_per_domain)
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    ds_path = _require_file(args.dataset, "dataset")
    cfg = _resolve_config(args)
    seeds = _parse_seeds(args.seeds)
    if seeds:
        cfg = cfg.replace(seed=seeds[0])
    if not args.out:
        raise ValidationError("--out is required")
    spec, data = load_dataset(ds_path)

    result = fit(cfg, data, spec.test_domain, progress=not args.quiet)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, metrics = out / "checkpoint.ccm", out / "metrics.jsonl"
    save_checkpoint(ckpt, result)
    write_metrics(metrics, result)
    _write_manifest(out, cfg.to_dict(), spec, {"checkpoint": ckpt, "metrics": metrics, "dataset": ds_path},
                    started, {"effective_prediction_mode": cfg.effective_prediction_mode,
                              "selection": result.summary()})
    if not args.quiet:
        print(f"best epoch {result.best_epoch}: val {result.val_accuracy:.4f}  "
              f"held-out {result.test_accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    ds_path = _require_file(args.dataset, "dataset")
    bundle, queue, cfg = load_checkpoint(ckpt)
    spec, data = load_dataset(ds_path)
    mode = args.prediction_mode or (cfg.effective_prediction_mode if cfg else "frontdoor")
    tau = cfg.tau if cfg else TrainConfig().tau
    report = {"checkpoint": str(ckpt), "prediction_mode": mode, "accuracy": {}}
    for d, dd in sorted(data.items()):
        report["accuracy"][str(d)] = evaluate(bundle, queue, dd, mode, tau)
    report["held_out_domain"] = spec.test_domain
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "evaluation.json").write_text(text + "\n")
    if not args.quiet:
        print(text)
    return EXIT_OK


def _ablate_one(cfg_dict: dict, ds_path: str, seed: int, mode: str) -> list[dict]:
    spec, data = load_dataset(ds_path)
    cfg = TrainConfig.from_dict(cfg_dict).replace(seed=seed)
    return run_ablation(cfg, data, spec.test_domain, prediction_mode=mode)


def ablation_table(rows: list[dict]) -> list[dict]:
    """Per-seed rows followed by one mean/stddev row per configuration."""
    table = [{**r, "kind": "run", "val_acc_std": "", "test_acc_std": ""} for r in rows]
    for name in ABLATIONS:
        group = [r for r in rows if r["config"] == name]
        if not group:
            continue
        va = [r["val_acc"] for r in group]
        te = [r["test_acc"] for r in group]
        table.append({
            "kind": "aggregate",
            "config": name,
            "teach": group[0]["teach"],
            "learn": group[0]["learn"],
            "cs": group[0]["cs"],
            "prediction_mode": group[0]["prediction_mode"],
            "seed": "mean",
            "val_acc": statistics.fmean(va),
            "val_acc_std": statistics.pstdev(va),
            "test_acc": statistics.fmean(te),
            "test_acc_std": statistics.pstdev(te),
        })
    return table


def cmd_ablate(args) -> int:
    started = time.time()
    ds_path = _require_file(args.dataset, "dataset")
    cfg = _resolve_config(args)
    seeds = _parse_seeds(args.seeds) or [cfg.seed]
    if not args.out:
        raise ValidationError("--out is required")
    spec, _ = load_dataset(ds_path)
    mode = args.prediction_mode or "classifier"

    jobs = [(cfg.to_dict(), str(ds_path), s, mode) for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            parts = list(pool.map(_ablate_one, *zip(*jobs)))
    else:
        parts = [_ablate_one(*j) for j in jobs]
    rows = [r for part in parts for r in part]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "ablation.csv"
    with open(table_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in ablation_table(rows):
            w.writerow(row)
    _write_manifest(out, cfg.to_dict(), spec, {"ablation_table": table_path, "dataset": ds_path},
                    started, {"seeds": seeds, "prediction_mode": mode})
    if not args.quiet:
        print(table_path.read_text(), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run_all()
    if not args.quiet:
        print(f"{'check':<20} {'result':<6} {'seconds':>8}  detail")
        for r in results:
            print(f"{r.name:<20} {'PASS' if r.passed else 'FAIL':<6} {r.seconds:8.2f}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccm", description="Contrastive causal model training on synthetic domain shift.")
    p.add_argument("--version", action="version", version=f"ccm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")

    g = sub.add_parser("generate", help="generate and cache a synthetic dataset")
    g.add_argument("--config", help="dataset spec JSON (default: the spurious-shift benchmark)")
    g.add_argument("--out", help="output dataset file")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model and select it on source validation")
    t.add_argument("--config", help="training config JSON (default values otherwise)")
    t.add_argument("--dataset", help="dataset file from `ccm generate`")
    t.add_argument("--out", help="output directory")
    t.add_argument("--seeds", help="seed override (first entry is used)")
    t.add_argument("--loss-flags", help="comma list from teach,learn,cs (or 'all')")
    t.add_argument("--prediction-mode", choices=["classifier", "frontdoor"])
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy of a checkpoint on every domain")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", help="dataset file")
    e.add_argument("--out", help="optional directory for evaluation.json")
    e.add_argument("--prediction-mode", choices=["classifier", "frontdoor"])
    common(e)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="loss ablation table over seeds")
    a.add_argument("--config", help="training config JSON")
    a.add_argument("--dataset", help="dataset file")
    a.add_argument("--out", help="output directory")
    a.add_argument("--seeds", help="comma list of seeds, e.g. 0,1,2")
    a.add_argument("--prediction-mode", choices=["classifier", "frontdoor"],
                   help="inference rule applied to every row (default: classifier)")
    a.add_argument("--workers", type=int, default=1, help="worker processes, one seed each")
    common(a)
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", help="run the built-in verification battery")
    common(v)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError, FormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CCMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
