"""Command-line entry point: prepare, train, eval, explain, plot.

One YAML configuration drives every command; flags only pick the command,
the config path and scalar overrides. Exit codes: 0 success, 1 user error,
2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import traceback
import warnings
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2

RUN_DIR_ENV = "HISTOMOE_RUNS"
_SUBDIRS = ("manifests", "checkpoints", "reports", "figures", "logs")


class UserError(Exception):
    """Invalid input, missing artifact or bad configuration."""


def resolve_run_dir(config) -> Path:
    run_dir = Path(config.output.run_dir)
    root = os.environ.get(RUN_DIR_ENV)
    if root and not run_dir.is_absolute():
        run_dir = Path(root) / run_dir
    return run_dir


def run_paths(config) -> dict[str, Path]:
    base = resolve_run_dir(config)
    paths = {"base": base}
    for sub in _SUBDIRS:
        paths[sub] = base / sub
    return paths


class RunLock:
    """Single-writer guard: an exclusive lock file per command invocation."""

    def __init__(self, base: Path):
        self.path = base / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UserError(
                f"run directory is locked by another command ({self.path}); "
                "remove the lock file if that command crashed"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _load_config(args):
    from .config import ConfigError, ExperimentConfig

    try:
        if args.config is not None:
            config = ExperimentConfig.load(args.config)
        else:
            config = ExperimentConfig()
        for override in args.set or []:
            config.apply_override(override)
        if args.run_dir is not None:
            config.output.run_dir = args.run_dir
    except ConfigError as exc:
        raise UserError(str(exc)) from exc
    return config


def _build_index(config):
    from .data import DataError, generate_synthetic_dataset, scan_breakhis

    ds = config.dataset
    if ds.kind == "synthetic":
        return generate_synthetic_dataset(ds.n_per_class, ds.magnifications, ds.seed)
    if ds.kind == "breakhis":
        if not ds.root:
            raise UserError("dataset.kind=breakhis needs dataset.root")
        try:
            return scan_breakhis(ds.root)
        except DataError as exc:
            raise UserError(str(exc)) from exc
    raise UserError(f"unknown dataset.kind {ds.kind!r}")


def _print_count_summary(index) -> None:
    benign = index.count_superclass("benign")
    malignant = index.count_superclass("malignant")
    print(f"Samples: {len(index)} total | benign {benign} | malignant {malignant}")
    per_mag = {}
    for s in index.samples:
        per_mag[s.magnification] = per_mag.get(s.magnification, 0) + 1
    mags = " ".join(f"{m}x={per_mag[m]}" for m in sorted(per_mag))
    print(f"Per magnification: {mags}")
    patients = {s.patient_id for s in index.samples}
    print(f"Patients: {len(patients)}")


def _plan(config, index):
    from .evaluation import protocol_plan

    try:
        return protocol_plan(
            config.eval.protocol,
            index,
            config.dataset.test_fraction,
            config.dataset.seed,
            config.eval.train_magnification,
            config.dataset.patient_disjoint,
        )
    except ValueError as exc:
        raise UserError(str(exc)) from exc


def cmd_prepare(config) -> int:
    from .data import compute_normalization_stats, write_manifest

    paths = run_paths(config)
    with RunLock(paths["base"]):
        for sub in _SUBDIRS:
            paths[sub].mkdir(parents=True, exist_ok=True)
        index = _build_index(config)
        _print_count_summary(index)
        if len(index) == 0:
            raise UserError("dataset is empty; nothing to prepare")

        plan = _plan(config, index)
        write_manifest(paths["manifests"] / "index.tsv", [(r, "all") for r in index.samples])
        job_lines = []
        for job in plan:
            entries = [(r, "train") for r in job.train_index.samples]
            for ej in job.eval_jobs:
                entries.extend((r, f"test_{ej.report_name}") for r in ej.test_index.samples)
            write_manifest(paths["manifests"] / f"{job.name}.tsv", entries)
            mu, sigma = compute_normalization_stats(job.train_index)
            stats_payload = {"mu": [float(v) for v in mu], "sigma": [float(v) for v in sigma]}
            (paths["manifests"] / f"{job.name}.stats.json").write_text(
                json.dumps(stats_payload, sort_keys=True, indent=2) + "\n"
            )
            job_lines.append(job.name + "\t" + ",".join(ej.report_name for ej in job.eval_jobs))
            n_test = sum(len(ej.test_index) for ej in job.eval_jobs)
            print(f"Split {job.name}: train={len(job.train_index)} test={n_test}")
        (paths["manifests"] / "jobs.txt").write_text("\n".join(job_lines) + "\n")
        config.save(paths["base"] / "config.yaml")
    return EXIT_OK


def _read_jobs(paths) -> list[tuple[str, list[str]]]:
    jobs_file = paths["manifests"] / "jobs.txt"
    if not jobs_file.exists():
        raise UserError("no manifests found; run `histomoe prepare` first")
    jobs = []
    for line in jobs_file.read_text().splitlines():
        if not line.strip():
            continue
        name, reports = line.split("\t")
        jobs.append((name, reports.split(",")))
    return jobs


def _job_data(paths, name):
    from .data import manifest_roles, read_manifest

    manifest = paths["manifests"] / f"{name}.tsv"
    if not manifest.exists():
        raise UserError(f"missing manifest {manifest}; run `histomoe prepare` first")
    roles = manifest_roles(read_manifest(manifest))
    stats_payload = json.loads((paths["manifests"] / f"{name}.stats.json").read_text())
    stats = (np.array(stats_payload["mu"]), np.array(stats_payload["sigma"]))
    return roles, stats


def cmd_train(config, resume: bool = False) -> int:
    from .training import MetricsLogger, save_ensemble, train_ensemble

    paths = run_paths(config)
    with RunLock(paths["base"]):
        jobs = _read_jobs(paths)
        for name, _reports in jobs:
            roles, stats = _job_data(paths, name)
            train_index = roles.get("train")
            if train_index is None:
                raise UserError(f"manifest for job {name!r} has no train rows")
            tc = config.train_config()
            logger = MetricsLogger(paths["logs"] / f"{name}.jsonl")
            ensemble = train_ensemble(
                train_index, tc, stats, logger,
                fold_cache_dir=paths["checkpoints"] / name, resume=resume,
            )
            save_ensemble(ensemble, paths["checkpoints"] / name / "ensemble.pt")
            f1s = " ".join(f"{v:.3f}" for v in ensemble.val_f1s)
            print(f"Trained {name}: {len(ensemble.members)} member(s), val F1 [{f1s}]")
    return EXIT_OK


def _load_job_ensemble(config, paths, name, checkpoint=None):
    from .training import load_ensemble

    path = Path(checkpoint) if checkpoint else paths["checkpoints"] / name / "ensemble.pt"
    if not path.exists():
        raise UserError(f"checkpoint not found: {path}; run `histomoe train` first")
    ensemble = load_ensemble(path)
    if tuple(ensemble.config.backbones) != tuple(config.model.backbones):
        raise UserError(
            f"checkpoint backbones {ensemble.config.backbones} do not match "
            f"config backbones {tuple(config.model.backbones)}"
        )
    return ensemble, path


def _checkpoint_digest(ensemble) -> str:
    """Content digest over member parameters and weights (file bytes are not
    guaranteed stable across serializer versions)."""
    h = hashlib.sha256()
    for member in ensemble.members:
        state = member.state_dict()
        for key in sorted(state):
            h.update(key.encode())
            h.update(state[key].cpu().numpy().tobytes())
    h.update(np.asarray(ensemble.member_weights, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def _write_sample_table(path, sample_ids, labels, preds, confidence, uncertainty, entropy, flags):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label", "prediction", "confidence", "uncertainty", "entropy", "flag"])
        for i in range(len(sample_ids)):
            writer.writerow(
                [
                    sample_ids[i],
                    int(labels[i]),
                    int(preds[i]),
                    f"{confidence[i]:.8g}",
                    f"{uncertainty[i]:.8g}",
                    f"{entropy[i]:.8g}",
                    bool(flags[i]),
                ]
            )


def cmd_eval(config, checkpoint=None) -> int:
    from .data import materialize
    from .evaluation import evaluate_probabilities, export_embeddings, write_embeddings_csv
    from .training import ensemble_predict
    from .uncertainty import predictive_entropy, triage

    paths = run_paths(config)
    with RunLock(paths["base"]):
        jobs = _read_jobs(paths)
        for name, reports in jobs:
            roles, stats = _job_data(paths, name)
            ensemble, ckpt_path = _load_job_ensemble(config, paths, name, checkpoint)
            for report_name in reports:
                test_index = roles.get(f"test_{report_name}")
                if test_index is None:
                    raise UserError(f"manifest for {name!r} lacks test rows for {report_name!r}")
                x, y = materialize(test_index, stats)
                mags = test_index.magnifications()
                mean, unc, conf = ensemble_predict(
                    ensemble, x, config.eval.mc_passes, config.dataset.seed, mags
                )
                train_mags = sorted({int(m) for m in roles["train"].magnifications()})
                report = evaluate_probabilities(
                    config.eval.protocol,
                    train_mags,
                    test_index.present_magnifications(),
                    mean, unc, y, ensemble.n_classes, config.dataset.seed,
                )
                report.config_digest = config.digest()
                report.checkpoint_digest = _checkpoint_digest(ensemble)
                sample_path = paths["reports"] / f"{report_name}_samples.csv"
                report.per_sample_table = f"reports/{report_name}_samples.csv"
                _write_sample_table(
                    sample_path,
                    [r.sample_id for r in test_index.samples],
                    y,
                    mean.argmax(axis=-1),
                    conf,
                    unc,
                    predictive_entropy(mean),
                    triage(conf, config.eval.triage_threshold),
                )
                best = int(np.argmax(ensemble.member_weights))
                rows = export_embeddings(
                    ensemble.members[best], x, y, mags,
                    [r.sample_id for r in test_index.samples],
                )
                write_embeddings_csv(rows, paths["reports"] / f"{report_name}_embeddings.csv")
                report.save(paths["reports"] / f"{report_name}.json")
                print(
                    f"Report {report_name}: n={report.n_samples} "
                    f"acc={report.accuracy:.4f} wF1={report.weighted_f1:.4f}"
                )
    return EXIT_OK


def cmd_explain(config) -> int:
    from .data import load_raw, manifest_roles, normalize_pixels, read_manifest
    from .occlusion import occlusion_map, select_xai_cohort
    from .plotting import plot_occlusion_overlay, read_sample_table

    paths = run_paths(config)
    with RunLock(paths["base"]):
        jobs = _read_jobs(paths)
        name, reports = jobs[0]
        report_name = reports[0]
        sample_csv = paths["reports"] / f"{report_name}_samples.csv"
        if not sample_csv.exists():
            raise UserError(f"missing evaluation table {sample_csv}; run `histomoe eval` first")
        table = read_sample_table(sample_csv)
        roles, stats = _job_data(paths, name)
        test_index = roles[f"test_{report_name}"]
        by_id = {r.sample_id: r for r in test_index.samples}
        mags = np.array([by_id[sid].magnification for sid in table["sample_id"]])

        cohort = select_xai_cohort(
            table["sample_id"], table["label"], mags, table["confidence"],
            config.explain.n_per_cell, config.explain.confidence_threshold,
            config.dataset.seed,
        )
        ensemble, _ = _load_job_ensemble(config, paths, name)
        heatmap_dir = paths["figures"] / "heatmaps"
        heatmap_dir.mkdir(parents=True, exist_ok=True)

        def predict_fn(batch):
            return ensemble.predict_proba(batch)

        rows = []
        for idx in cohort:
            sid = str(table["sample_id"][idx])
            ref = by_id[sid]
            raw = load_raw(ref)
            image = normalize_pixels(raw, stats)
            result = occlusion_map(
                predict_fn, image,
                config.explain.patch_size, config.explain.stride,
                baseline_value=0.0, coverage_fraction=config.explain.coverage_fraction,
            )
            plot_occlusion_overlay(
                raw, result.sensitivity_map, heatmap_dir / f"{sid}.png",
                title=f"class {ref.subtype} @ {ref.magnification}x",
            )
            rows.append(
                {
                    "sample_id": sid,
                    "label": ref.subtype,
                    "magnification": ref.magnification,
                    "confidence": result.base_confidence,
                    "s_max": result.s_max,
                    "mean_sensitivity": result.mean_sensitivity,
                    "coverage_pct": result.coverage_pct,
                }
            )

        with open(paths["reports"] / "xai_samples.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["sample_id", "label", "magnification", "confidence", "s_max",
                 "mean_sensitivity", "coverage_pct"]
            )
            for r in rows:
                writer.writerow(
                    [r["sample_id"], r["label"], r["magnification"],
                     f"{r['confidence']:.8g}", f"{r['s_max']:.8g}",
                     f"{r['mean_sensitivity']:.8g}", f"{r['coverage_pct']:.8g}"]
                )

        # nearest training exemplar per learnable prototype
        from histomoe.data import materialize
        from histomoe.prototypes import nearest_exemplars
        import torch

        best = int(np.argmax(ensemble.member_weights))
        member = ensemble.members[best]
        train_index = roles["train"]
        if len(train_index) > 512:  # cap the feature pass on large datasets
            train_index = train_index.subset(range(0, len(train_index), len(train_index) // 512 + 1))
        x_train, _ = materialize(train_index, stats)
        feats = []
        member.eval()
        with torch.no_grad():
            for start in range(0, x_train.shape[0], 128):
                xb = torch.as_tensor(x_train[start : start + 128])
                feats.append(member.extract_global(xb)[0].cpu().numpy())
        exemplars = nearest_exemplars(
            member.prototype_bank.prototypes, np.concatenate(feats),
            [r.sample_id for r in train_index.samples],
        )
        with open(paths["reports"] / "prototype_exemplars.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "prototype", "nearest_sample_id"])
            for c, row in enumerate(exemplars):
                for j, sid in enumerate(row):
                    writer.writerow([c, j, sid])

        # Table-7-style per-(class, magnification) aggregation
        cells: dict[tuple[int, int], list[dict]] = {}
        for r in rows:
            cells.setdefault((r["label"], r["magnification"]), []).append(r)
        with open(paths["reports"] / "xai_summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "magnification", "n", "mean_sensitivity", "max_sensitivity"])
            for key in sorted(cells):
                group = cells[key]
                mean_v = sum(g["mean_sensitivity"] for g in group) / len(group)
                max_v = max(g["s_max"] for g in group)
                writer.writerow([key[0], key[1], len(group), f"{mean_v:.8g}", f"{max_v:.8g}"])
        if not rows:
            warnings.warn("XAI cohort is empty; summary written with no cells")
        print(f"Explained {len(rows)} samples; heatmaps under {heatmap_dir}")
    return EXIT_OK


def cmd_plot(config) -> int:
    from .evaluation import EvalReport
    from .plotting import (
        plot_confidence_hist,
        plot_confusion,
        plot_embedding_scatter,
        plot_uncertainty_hist,
        plot_uncertainty_vs_confidence,
        read_sample_table,
    )

    paths = run_paths(config)
    with RunLock(paths["base"]):
        jobs = _read_jobs(paths)
        name, reports = jobs[0]
        report_name = reports[0]
        needed = {
            "report": paths["reports"] / f"{report_name}.json",
            "samples": paths["reports"] / f"{report_name}_samples.csv",
            "embeddings": paths["reports"] / f"{report_name}_embeddings.csv",
        }
        missing = [str(p) for p in needed.values() if not p.exists()]
        if missing:
            raise UserError("missing artifacts for plotting: " + ", ".join(missing))

        report = EvalReport.load(needed["report"])
        table = read_sample_table(needed["samples"])
        figures = paths["figures"]
        figures.mkdir(parents=True, exist_ok=True)
        plot_uncertainty_hist(table, figures / "uncertainty_hist.png")
        plot_confidence_hist(table, figures / "confidence_hist.png")
        plot_uncertainty_vs_confidence(table, figures / "uncertainty_vs_confidence.png")
        plot_confusion(report.confusion, figures / "confusion_matrix.png")
        plot_embedding_scatter(needed["embeddings"], figures / "embedding_scatter.png",
                               seed=config.dataset.seed)
        print(f"Wrote 5 figures to {figures}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are user errors
        self.print_usage(sys.stderr)
        raise UserError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="histomoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in ("prepare", "train", "eval", "explain", "plot"):
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="YAML experiment config (defaults are a desk-scale synthetic run)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="scalar config override, repeatable")
        p.add_argument("--run-dir", default=None, help="override output.run_dir")
        if cmd == "train":
            p.add_argument("--resume", action="store_true", help="reuse completed fold checkpoints")
        if cmd == "eval":
            p.add_argument("--checkpoint", default=None, help="explicit ensemble checkpoint path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args)
        if args.command == "prepare":
            return cmd_prepare(config)
        if args.command == "train":
            return cmd_train(config, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(config, checkpoint=args.checkpoint)
        if args.command == "explain":
            return cmd_explain(config)
        if args.command == "plot":
            return cmd_plot(config)
        raise UserError(f"unknown command {args.command!r}")
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # noqa: BLE001 - report and map to the internal-error exit code
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
