"""Command-line entry point.

Subcommands cover the whole pipeline: ``synth`` writes a synthetic
cohort, ``rearrange`` applies the window rearrangement, ``train`` runs
cross-validated training, ``eval`` produces the survival report, and
``attn`` exports attention heatmap scores.

Configuration is flat key=value text (an optional ``[run]`` INI header
is tolerated); command-line flags override file values, which override
defaults. Every run directory receives a manifest of produced files.
Exit codes: 0 success, 1 validation/configuration error, 2 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import survstats
from .bagio import (
    bin_survival_times,
    load_manifest,
    stratified_kfold,
    write_manifest,
    write_patch_bag,
    write_pbag_arrays,
)
from .blocks import BucketParams
from .errors import ConfigurationError, FormatError, HVTSurvError, NumericError, ValidationError
from .rearrange import compare_strategies, knn_rearrange
from .seeding import derive_seed
from .survmodel import (
    EVAL_MASK_SEED,
    HVTSurvConfig,
    export_attention,
    fit,
    forward,
    load_checkpoint,
    preprocess_patient,
    save_checkpoint,
)
from .synthgen import SynthConfig, gen_cohort

log = logging.getLogger("hvtsurv")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


@dataclass
class RunConfig:
    """Flat run configuration; every key can live in the config file."""

    seed: int = 0
    jobs: int = 1
    # cohort synthesis
    n_patients: int = 200
    wsis_min: int = 1
    wsis_max: int = 2
    patches_min: int = 100
    patches_max: int = 200
    feature_dim: int = 64
    signal_strength: float = 5.0
    censor_rate: float = 0.3
    grid_width: int = 20
    grid_height: int = 20
    hole_density: float = 0.25
    # model and training
    model_dim: int = 512
    window_size: int = 49
    n_heads: int = 8
    n_sub_wsis: int = 2
    n_intervals: int = 4
    pool_hidden: int = 0
    ffn_ratio: int = 4
    bucket_alpha: float = 1.9
    bucket_beta: float = 7.6
    bucket_gamma: float = 11.4
    bucket_lambda: int = 7
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    patience: int = 8
    max_epochs: int = 30
    folds: int = 4
    # attention export
    drop_fraction: float = 0.8

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_patients=self.n_patients,
            wsis_per_patient_range=(self.wsis_min, self.wsis_max),
            patches_per_wsi_range=(self.patches_min, self.patches_max),
            feature_dim=self.feature_dim,
            signal_strength=self.signal_strength,
            censor_rate=self.censor_rate,
            grid_shape=(self.grid_width, self.grid_height, self.hole_density),
            seed=derive_seed(self.seed, "synth"),
        )

    def model_config(self, input_dim: int) -> HVTSurvConfig:
        return HVTSurvConfig(
            input_dim=input_dim,
            model_dim=self.model_dim,
            window_size=self.window_size,
            n_heads=self.n_heads,
            n_sub_wsis=self.n_sub_wsis,
            n_intervals=self.n_intervals,
            pool_hidden=self.pool_hidden,
            ffn_ratio=self.ffn_ratio,
            bucket=BucketParams(alpha=self.bucket_alpha, beta=self.bucket_beta,
                                gamma=self.bucket_gamma, lam=self.bucket_lambda),
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_file(path) -> dict[str, str]:
    """Read flat key=value lines; a leading [section] header is skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.strip()
        if not text or text.startswith(("#", ";")) or (text.startswith("[") and text.endswith("]")):
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def build_run_config(file_values: dict, overrides: dict) -> RunConfig:
    """Merge defaults < config file < flags, rejecting unknown keys."""
    merged: dict = {}
    for source in (file_values, overrides):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            caster = float if "float" in str(_FIELD_TYPES[key]) else int
            merged[key] = caster(value)
    return RunConfig(**merged)


def _prepare_out(out: str, force: bool, marker: str) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sentinel = out_dir / marker
    if sentinel.exists() and not force:
        raise ValidationError(f"{sentinel} already exists; pass --force to overwrite")
    return out_dir


def _require_path(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} {p} does not exist")
    return p


def _write_produced(out_dir: Path, command: str, paths: list[Path]) -> None:
    listing = out_dir / f"{command}_files.txt"
    with open(listing, "w") as fh:
        for p in sorted(paths):
            fh.write(f"{p.relative_to(out_dir)}\n")


def cmd_synth(rc: RunConfig, out: str, force: bool) -> dict:
    """Generate a cohort and write it in manifest + PBAG form."""
    out_dir = _prepare_out(out, force, "manifest.csv")
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(exist_ok=True)
    records = gen_cohort(rc.synth_config())

    produced = []
    rows = []
    n_wsis = 0
    n_patches = 0
    for rec in records:
        for bag in rec.bags:
            path = bag_dir / f"{bag.wsi_id}.pbag"
            write_patch_bag(bag, path)
            produced.append(path)
            rows.append(dict(patient_id=rec.patient_id, wsi_path=f"bags/{bag.wsi_id}.pbag",
                             time_months=rec.follow_up.time_months,
                             censored=rec.follow_up.censored))
            n_wsis += 1
            n_patches += bag.n_patches
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    produced.append(manifest)
    _write_produced(out_dir, "synth", produced)

    summary = dict(
        patients=len(records),
        wsis=n_wsis,
        censored_ratio=float(np.mean([r.follow_up.censored for r in records])),
        mean_patches_per_wsi=n_patches / n_wsis,
    )
    print(f"cohort: {summary['patients']} patients, {summary['wsis']} WSIs, "
          f"censored ratio {summary['censored_ratio']:.3f}, "
          f"mean patches/WSI {summary['mean_patches_per_wsi']:.1f}")
    return summary


def cmd_rearrange(rc: RunConfig, manifest: str, out: str, force: bool,
                  report: bool = False) -> dict:
    """Rearrange every WSI; write PBAG outputs plus window sidecars."""
    _require_path(manifest, "manifest")
    out_dir = _prepare_out(out, force, "rearranged")
    re_dir = out_dir / "rearranged"
    re_dir.mkdir(exist_ok=True)
    records = load_manifest(manifest)
    bags = [bag for rec in records for bag in rec.bags]

    produced = []
    report_rows = []
    failures = []

    def process(bag):
        reb = knn_rearrange(bag, rc.window_size)
        pbag_path = re_dir / f"{bag.wsi_id}.pbag"
        write_pbag_arrays(pbag_path, reb.scaled_coords, reb.features)
        sidecar = re_dir / f"{bag.wsi_id}.windows.csv"
        with open(sidecar, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row_index", "window_index", "gx", "gy"])
            for i in range(reb.features.shape[0]):
                writer.writerow([i, i // reb.window_size,
                                 reb.scaled_coords[i, 0], reb.scaled_coords[i, 1]])
        row = None
        if report:
            knn_mean, raster_mean = compare_strategies(bag, rc.window_size)
            row = dict(wsi_id=bag.wsi_id, knn_mean=knn_mean, raster_mean=raster_mean)
        return [pbag_path, sidecar], row

    def guarded(bag):
        try:
            return process(bag)
        except HVTSurvError as exc:
            log.error("rearrange failed for %s: %s", bag.wsi_id, exc)
            failures.append(bag.wsi_id)
            return [], None

    if rc.jobs > 1:
        with ThreadPoolExecutor(max_workers=rc.jobs) as pool:
            results = list(pool.map(guarded, bags))
    else:
        results = [guarded(bag) for bag in bags]
    for paths, row in results:
        produced.extend(paths)
        if row is not None:
            report_rows.append(row)

    if report:
        report_path = out_dir / "window_distance_report.csv"
        with open(report_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["wsi_id", "knn_mean", "raster_mean"])
            writer.writeheader()
            writer.writerows(
                {**r, "knn_mean": f"{r['knn_mean']:.6f}", "raster_mean": f"{r['raster_mean']:.6f}"}
                for r in report_rows
            )
        produced.append(report_path)
    _write_produced(out_dir, "rearrange", produced)
    if failures:
        raise NumericError(f"rearrangement failed for {len(failures)} bags: {failures[:5]}")
    print(f"rearranged {len(bags)} WSIs at window size {rc.window_size}")
    return dict(n_wsis=len(bags), report_rows=report_rows)


def _train_one_fold(fold, split, records, cfg, rc, out_dir):
    result = fit(records, split.train, split.validation, cfg,
                 seed=derive_seed(rc.seed, f"fold:{fold}"))
    ckpt = out_dir / f"fold{fold}.ckpt"
    save_checkpoint(ckpt, result.params, cfg,
                    extra={"fold": fold, "master_seed": rc.seed, "folds": rc.folds,
                           "best_epoch": result.best_epoch})
    return result, ckpt


def cmd_train(rc: RunConfig, manifest: str, out: str, force: bool,
              parallel_folds: bool = False) -> dict:
    """Cross-validated training; emits one checkpoint per fold + metrics."""
    _require_path(manifest, "manifest")
    out_dir = _prepare_out(out, force, "metrics.csv")
    records = load_manifest(manifest)
    bin_survival_times(records, rc.n_intervals)
    splits = stratified_kfold(records, rc.folds, seed=derive_seed(rc.seed, "splits"))
    cfg = rc.model_config(input_dim=records[0].bags[0].feature_dim)

    produced = []
    histories = {}
    if parallel_folds:
        with ThreadPoolExecutor(max_workers=len(splits)) as pool:
            futures = {fold: pool.submit(_train_one_fold, fold, split, records, cfg, rc, out_dir)
                       for fold, split in enumerate(splits)}
            for fold, future in futures.items():
                try:
                    result, ckpt = future.result()
                except NumericError as exc:
                    raise NumericError(f"fold {fold}: {exc}") from exc
                histories[fold] = result.history
                produced.append(ckpt)
    else:
        for fold, split in enumerate(splits):
            try:
                result, ckpt = _train_one_fold(fold, split, records, cfg, rc, out_dir)
            except NumericError as exc:
                raise NumericError(f"fold {fold}: {exc}") from exc
            histories[fold] = result.history
            produced.append(ckpt)
            log.info("fold %d: %d epochs, final val loss %s", fold, len(result.history),
                     result.history[-1]["val_loss"] if result.history else "n/a")

    metrics = out_dir / "metrics.csv"
    with open(metrics, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "epoch", "train_loss", "val_loss", "val_cindex"])
        for fold in sorted(histories):
            for h in histories[fold]:
                writer.writerow([fold, h["epoch"], f"{h['train_loss']:.6f}",
                                 f"{h['val_loss']:.6f}", f"{h['val_cindex']:.6f}"])
    produced.append(metrics)
    _write_produced(out_dir, "train", produced)
    print(f"trained {len(splits)} folds -> {out_dir}")
    return dict(folds=len(splits), histories=histories)


def _fold_predictions(records, indices, params, cfg):
    cache: dict = {}
    preds = []
    for i in indices:
        rec = records[i]
        out = forward(preprocess_patient(rec, cfg, EVAL_MASK_SEED, cache), params, cfg)
        preds.append(survstats.RiskPrediction(
            patient_id=rec.patient_id, risk=out.risk,
            time_months=rec.follow_up.time_months, censored=rec.follow_up.censored))
    return preds


def cmd_eval(rc: RunConfig, manifest: str, checkpoint_dir: str, out: str,
             force: bool) -> dict:
    """Out-of-sample risks per fold, pooled stratified KM and log-rank."""
    _require_path(manifest, "manifest")
    _require_path(checkpoint_dir, "checkpoint directory")
    out_dir = _prepare_out(out, force, "report.csv")
    records = load_manifest(manifest)
    bin_survival_times(records, rc.n_intervals)

    ckpt_dir = Path(checkpoint_dir)
    ckpts = sorted(ckpt_dir.glob("fold*.ckpt"))
    if not ckpts:
        raise ValidationError(f"no fold checkpoints found in {ckpt_dir}")

    _, cfg0, extra0 = load_checkpoint(ckpts[0])
    if int(extra0.get("folds", -1)) != len(ckpts):
        raise FormatError(
            f"checkpoint set inconsistent: metadata says {extra0.get('folds')} folds, "
            f"found {len(ckpts)} files")
    if int(extra0.get("master_seed", -1)) != rc.seed:
        raise FormatError(
            f"checkpoint/config mismatch: trained with seed {extra0.get('master_seed')}, "
            f"evaluating with seed {rc.seed}")
    splits = stratified_kfold(records, len(ckpts), seed=derive_seed(rc.seed, "splits"))

    fold_ci = []
    pooled_low: list = []
    pooled_high: list = []
    risk_rows = []
    for fold, ckpt_path in enumerate(ckpts):
        params, cfg, extra = load_checkpoint(ckpt_path)
        if cfg.input_dim != records[0].bags[0].feature_dim:
            raise FormatError(
                f"{ckpt_path}: model expects {cfg.input_dim}-dim features, "
                f"cohort has {records[0].bags[0].feature_dim}")
        preds = _fold_predictions(records, splits[fold].test, params, cfg)
        fold_ci.append(survstats.c_index(preds))
        low, high = survstats.risk_stratify(preds)
        pooled_low.extend(low)
        pooled_high.extend(high)
        risk_rows.extend(dict(fold=fold, patient_id=p.patient_id, risk=p.risk,
                              time_months=p.time_months, censored=p.censored)
                         for p in preds)

    chi, p_value = survstats.logrank_test(pooled_low, pooled_high)
    report = out_dir / "report.csv"
    survstats.write_evaluation_report(report, fold_ci, p_value, chi)
    km_path = out_dir / "km_curves.csv"
    survstats.write_km_csv(km_path, {
        "low": survstats.km_curve(pooled_low),
        "high": survstats.km_curve(pooled_high),
    })
    risks_path = out_dir / "risks.csv"
    with open(risks_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["fold", "patient_id", "risk",
                                                "time_months", "censored"])
        writer.writeheader()
        for row in risk_rows:
            writer.writerow({**row, "risk": f"{row['risk']:.8f}",
                             "time_months": f"{row['time_months']:.6f}"})
    _write_produced(out_dir, "eval", [report, km_path, risks_path])
    print(f"mean test C-Index {np.mean(fold_ci):.4f} over {len(fold_ci)} folds; "
          f"pooled log-rank p = {p_value:.3g}")
    return dict(fold_cindex=fold_ci, logrank_p=p_value, chi_square=chi)


def cmd_attn(rc: RunConfig, manifest: str, checkpoint: str, patient_id: str,
             out: str, force: bool) -> dict:
    """Export per-layer attention scores for one patient."""
    _require_path(manifest, "manifest")
    _require_path(checkpoint, "checkpoint")
    out_dir = _prepare_out(out, force, f"attention_{patient_id}.csv")
    records = load_manifest(manifest)
    by_id = {r.patient_id: r for r in records}
    if patient_id not in by_id:
        raise ValidationError(f"unknown patient {patient_id!r}")
    params, cfg, _ = load_checkpoint(checkpoint)

    rec = by_id[patient_id]
    subs = preprocess_patient(rec, cfg, EVAL_MASK_SEED)
    _, attention = forward(subs, params, cfg, want_attention=True)
    layers = export_attention(attention, drop_fraction=rc.drop_fraction)

    path = out_dir / f"attention_{patient_id}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "wsi_id", "patch_index", "gx", "gy", "score"])
        for layer, rows in layers.items():
            for r in rows:
                writer.writerow([layer, r["wsi_id"], r["patch_index"], r["gx"], r["gy"],
                                 f"{r['score']:.6f}"])
    _write_produced(out_dir, "attn", [path])
    print(f"attention scores for {patient_id} -> {path}")
    return dict(layers={k: len(v) for k, v in layers.items()})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, help="worker threads for preprocessing")
    common.add_argument("--out", default="hvtsurv-run", help="output directory")
    common.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="hvtsurv",
                                     description="windowed-attention survival pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n-patients", type=int, dest="n_patients")
    p.add_argument("--censor-rate", type=float, dest="censor_rate")
    p.add_argument("--signal-strength", type=float, dest="signal_strength")

    p = sub.add_parser("rearrange", parents=[common], help="window-rearrange a cohort")
    p.add_argument("--manifest", required=True)
    p.add_argument("--window-size", type=int, dest="window_size")
    p.add_argument("--report", action="store_true",
                   help="also emit the kNN vs raster distance report")

    p = sub.add_parser("train", parents=[common], help="cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int, dest="max_epochs")
    p.add_argument("--model-dim", type=int, dest="model_dim")
    p.add_argument("--window-size", type=int, dest="window_size")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--parallel-folds", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="evaluate fold checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoints", required=True, help="directory with fold*.ckpt")
    p.add_argument("--folds", type=int)

    p = sub.add_parser("attn", parents=[common], help="export attention scores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--drop-fraction", type=float, dest="drop_fraction")

    return parser


_CONFIG_FLAG_KEYS = (
    "seed", "jobs", "n_patients", "censor_rate", "signal_strength", "window_size",
    "folds", "max_epochs", "model_dim", "n_heads", "drop_fraction",
)


def run(argv=None) -> int:
    level = os.environ.get("HVTSURV_LOG", "info").lower()
    if level not in _LOG_LEVELS:
        raise ConfigurationError(f"HVTSURV_LOG must be one of {sorted(_LOG_LEVELS)}")
    logging.basicConfig(level=_LOG_LEVELS[level], format="%(levelname)s %(message)s")

    args = build_parser().parse_args(argv)
    if args.config:
        _require_path(args.config, "config file")
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _CONFIG_FLAG_KEYS if hasattr(args, k)}
    rc = build_run_config(file_values, overrides)

    if args.command == "synth":
        cmd_synth(rc, args.out, args.force)
    elif args.command == "rearrange":
        cmd_rearrange(rc, args.manifest, args.out, args.force, report=args.report)
    elif args.command == "train":
        cmd_train(rc, args.manifest, args.out, args.force,
                  parallel_folds=args.parallel_folds)
    elif args.command == "eval":
        cmd_eval(rc, args.manifest, args.checkpoints, args.out, args.force)
    elif args.command == "attn":
        cmd_attn(rc, args.manifest, args.checkpoint, args.patient, args.out, args.force)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 2
    except HVTSurvError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("i/o failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
