"""Command line interface and end-to-end pipeline driver.

Subcommands: ``synth`` (generate flows), ``derive`` (flows to counters),
``integrate`` (merge derived sets), ``evaluate`` (cross-validation and
transfer), ``report`` (summarize an evaluation CSV). Exit codes: 0 success,
2 configuration problem, 3 data problem, 4 evaluation problem.

Every command that writes files also writes ``manifest.json`` holding the
sha256 digest and byte size of each output (never a timestamp), so two runs
with identical inputs and seed produce identical manifests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import re
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__
from .errors import ConfigError, DataError, EvaluationError, FaacflowError
from .evaluation import (
    EvalReport,
    EvalSettings,
    aggregate_report,
    read_report_csv,
    run_single_dataset,
    run_transfer_matrix,
    significance_rows,
    write_report_csv,
    write_significance_csv,
)
from .faac import derive_dataset, load_faac_config, read_derived, write_derived
from .hyperopt import write_trial_log
from .ingest import SourceSchema, generate_synthetic, load_source_config, parse_flows, write_flows
from .integrate import IntegrationSpec, distribution_report, integrate, load_integration_spec
from .learning import fit_pipeline, resolve_hyperparams, save_model
from .seeds import derive_seed

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_EVAL = 4


def _configure_logging() -> None:
    level_name = os.environ.get("FAACFLOW_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    out_dir: Path,
    command: str,
    outputs: list[Path],
    configs: list[Path],
    seed: int | None,
    inputs: list[Path] | None = None,
) -> Path:
    doc = {
        "command": command,
        "package_version": __version__,
        "seed": seed,
        "configs": {p.name: _sha256(p) for p in configs},
        "inputs": {p.name: _sha256(p) for p in (inputs or [])},
        "outputs": {
            p.name: {"sha256": _sha256(p), "bytes": p.stat().st_size} for p in sorted(outputs)
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _reading_schema(schema: SourceSchema) -> SourceSchema:
    """Accept canonical class names on input alongside the raw mapping."""
    merged = dict(schema.class_map)
    for name in schema.taxonomy.classes:
        merged.setdefault(name, name)
    return replace(schema, class_map=merged)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", text)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    if not args.config:
        raise ConfigError("synth requires --config pointing at a source description")
    schema = load_source_config(args.config)
    if schema.profile is None:
        raise ConfigError(f"{args.config}: source has no synthetic profile")
    profile = schema.profile
    if args.seed is not None:
        profile = replace(profile, seed=derive_seed(args.seed, "synth", schema.dataset_id))
    out = _out_dir(args)
    path = out / f"{schema.dataset_id}_flows.csv"
    counts: Counter[str] = Counter()

    def counted(records):
        for rec in records:
            counts[rec.label] += 1
            yield rec

    n = write_flows(counted(generate_synthetic(profile, schema)), schema, path)
    _write_manifest(out, "synth", [path], [Path(args.config)], args.seed)
    print(f"wrote {n} flows to {path}")
    for name in sorted(counts):
        print(f"  {name}: {counts[name]} ({counts[name] / n:.4%})")
    return EXIT_OK


def cmd_derive(args: argparse.Namespace) -> int:
    if not args.config:
        raise ConfigError("derive requires --config pointing at a counter configuration")
    config = load_faac_config(args.config)
    schema = load_source_config(args.source)
    out = _out_dir(args)
    n_records = args.count if args.count is not None else schema.record_count_hint
    records = parse_flows(args.input, _reading_schema(schema))
    dataset = derive_dataset(records, args.batches, config, n_records=n_records)
    path = out / f"{schema.dataset_id}_derived.csv"
    write_derived(dataset, path)
    dist_path = out / f"{schema.dataset_id}_distribution.csv"
    _write_distribution_csv(dataset, dist_path)
    _write_manifest(
        out,
        "derive",
        [path, dist_path],
        [Path(args.config), Path(args.source)],
        args.seed,
        inputs=[Path(args.input)],
    )
    print(
        f"wrote {dataset.n_rows} rows x {dataset.n_features} features to {path} "
        f"(batch size {int(dataset.batch_sizes[0]) if dataset.n_rows else 0})"
    )
    for name, c in sorted(dataset.class_counts().items()):
        print(f"  {name}: {c}")
    return EXIT_OK


def _write_distribution_csv(dataset, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["origin", "class", "rows", "fraction"])
        for row in distribution_report(dataset):
            writer.writerow([row["origin"], row["class"], row["rows"], "%.9g" % row["fraction"]])


def cmd_integrate(args: argparse.Namespace) -> int:
    if len(args.inputs) < 2:
        raise ConfigError("integrate needs at least two derived files")
    spec = load_integration_spec(args.config) if args.config else IntegrationSpec()
    datasets = [read_derived(p) for p in args.inputs]
    merged = integrate(datasets, spec)
    out = _out_dir(args)
    path = out / "integrated_derived.csv"
    write_derived(merged, path)
    dist_path = out / "integrated_distribution.csv"
    _write_distribution_csv(merged, dist_path)
    configs = [Path(args.config)] if args.config else []
    _write_manifest(
        out, "integrate", [path, dist_path], configs, args.seed, inputs=[Path(p) for p in args.inputs]
    )
    print(f"wrote {merged.n_rows} rows over classes {list(merged.classes)} to {path}")
    for row in distribution_report(merged):
        print(
            f"  {row['origin']} {row['class']}: {row['rows']} rows ({row['fraction']:.4%})"
        )
    return EXIT_OK


def _settings_from_doc(doc: dict) -> EvalSettings:
    known = {
        "models",
        "k",
        "repetitions",
        "tune",
        "tune_once",
        "n_init",
        "n_iter",
        "n_candidates",
        "fixed_hyper",
    }
    fields = {k: doc[k] for k in known if k in doc}
    if "models" in fields:
        fields["models"] = tuple(str(m) for m in fields["models"])
        for m in fields["models"]:
            if m not in ("lr", "rf"):
                raise ConfigError(f"unknown model {m!r}; expected 'lr' or 'rf'")
    try:
        return EvalSettings(**fields)
    except TypeError as exc:
        raise ConfigError(f"malformed evaluation settings: {exc}") from exc


def _write_eval_outputs(report: EvalReport, out: Path) -> list[Path]:
    outputs = []
    report_path = out / "report.csv"
    write_report_csv(report, report_path)
    outputs.append(report_path)
    models = {r.model for r in report.rows}
    if len(models) >= 2:
        sig_path = out / "significance.csv"
        write_significance_csv(significance_rows(report), sig_path)
        outputs.append(sig_path)
    for run in report.trial_runs:
        name = f"trials_{_slug(run.label)}_{run.model}_r{run.repetition}_f{run.fold}.csv"
        path = out / name
        write_trial_log(run.trials, path)
        outputs.append(path)
    return outputs


def _print_eval_summary(report: EvalReport) -> None:
    for row in aggregate_report(report):
        print(
            f"{row['setting']} {row['model']} {row['train_origin']}->{row['test_origin']}: "
            f"weighted AUC {row['mean_weighted_auc']:.4f} +/- {row['std_weighted_auc']:.4f} "
            f"over {row['n_folds']} folds"
        )
    models = {r.model for r in report.rows}
    if len(models) >= 2:
        for sig in significance_rows(report):
            verdict = "significant" if sig["significant_at_0.05"] else "not significant"
            print(
                f"{sig['model_a']} vs {sig['model_b']}: n={sig['n']} W={sig['W']} "
                f"p={sig['p_two_sided']:.4g} ({verdict} at 0.05)"
            )


def cmd_evaluate(args: argparse.Namespace) -> int:
    if not args.config:
        raise ConfigError("evaluate requires --config pointing at an evaluation plan")
    cfg_path = Path(args.config)
    try:
        doc = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{cfg_path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{cfg_path}: expected a mapping at top level")
    settings = _settings_from_doc(doc)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    base = cfg_path.parent

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else base / path

    report = EvalReport()
    data_paths: list[Path] = []
    for entry in doc.get("single", []) or []:
        if isinstance(entry, str):
            entry = {"path": entry}
        path = resolve(str(entry["path"]))
        data_paths.append(path)
        ds = read_derived(path)
        part = run_single_dataset(
            ds,
            settings,
            seed=seed,
            n_threads=args.threads,
            name=str(entry["name"]) if "name" in entry else None,
        )
        report.rows.extend(part.rows)
        report.trial_runs.extend(part.trial_runs)
    transfer = doc.get("transfer") or {}
    if transfer:
        datasets = {}
        for name, p in transfer.items():
            path = resolve(str(p))
            data_paths.append(path)
            datasets[str(name)] = read_derived(path)
        part = run_transfer_matrix(datasets, settings, seed=seed, n_threads=args.threads)
        report.rows.extend(part.rows)
        report.trial_runs.extend(part.trial_runs)
    if not report.rows:
        raise ConfigError(f"{cfg_path}: no 'single' or 'transfer' inputs given")

    out = _out_dir(args)
    outputs = _write_eval_outputs(report, out)
    _write_manifest(out, "evaluate", outputs, [cfg_path], seed, inputs=data_paths)
    _print_eval_summary(report)
    return EXIT_OK


def _write_plot_data(report: EvalReport, out: Path) -> list[Path]:
    """Plot-ready CSVs: one per-fold AUC sample sheet, one class-count sheet."""
    auc_path = out / "plot_auc_distribution.csv"
    with open(auc_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["setting", "model", "train_origin", "test_origin", "repetition", "fold", "weighted_auc"]
        )
        for r in report.rows:
            writer.writerow(
                [r.setting, r.model, r.train_origin, r.test_origin, r.repetition, r.fold,
                 "%.9g" % r.weighted_auc]
            )

    # test folds are shared across models, so count each fold cell once
    seen: set[tuple] = set()
    totals: dict[tuple[str, str, str], dict[str, int]] = {}
    for r in report.rows:
        cell = (r.setting, r.train_origin, r.test_origin, r.repetition, r.fold)
        if cell in seen:
            continue
        seen.add(cell)
        group = totals.setdefault((r.setting, r.train_origin, r.test_origin), {})
        for cname, q in r.class_counts:
            group[cname] = group.get(cname, 0) + q
    cls_path = out / "plot_class_distribution.csv"
    with open(cls_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["setting", "train_origin", "test_origin", "class", "rows", "fraction"])
        for key in sorted(totals):
            group = totals[key]
            total = sum(group.values())
            for cname in sorted(group):
                writer.writerow(
                    [key[0], key[1], key[2], cname, group[cname], "%.9g" % (group[cname] / total)]
                )
    return [auc_path, cls_path]


def cmd_report(args: argparse.Namespace) -> int:
    report = read_report_csv(args.input)
    out = _out_dir(args)
    agg_path = out / "aggregate.csv"
    rows = aggregate_report(report)
    with open(agg_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "setting",
                "model",
                "train_origin",
                "test_origin",
                "n_folds",
                "mean_weighted_auc",
                "std_weighted_auc",
            ]
        )
        for row in rows:
            writer.writerow(
                [
                    row["setting"],
                    row["model"],
                    row["train_origin"],
                    row["test_origin"],
                    row["n_folds"],
                    "%.9g" % float(row["mean_weighted_auc"]),
                    "%.9g" % float(row["std_weighted_auc"]),
                ]
            )
    outputs = [agg_path]
    outputs.extend(_write_plot_data(report, out))
    models = {r.model for r in report.rows}
    if len(models) >= 2:
        sig_path = out / "significance.csv"
        write_significance_csv(significance_rows(report), sig_path)
        outputs.append(sig_path)
    _write_manifest(out, "report", outputs, [], args.seed, inputs=[Path(args.input)])
    _print_eval_summary(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# One-config pipeline


def orchestrate(
    config_path: str | Path,
    out_dir: str | Path,
    seed: int | None = None,
    threads: int = 1,
) -> dict[str, Path]:
    """Run synth, derive, integrate, and evaluate from a single pipeline config.

    Returns the paths of everything written. Paths inside the config
    resolve relative to the config file.
    """
    config_path = Path(config_path)
    try:
        doc = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{config_path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{config_path}: expected a mapping at top level")
    base = config_path.parent

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else base / path

    if "faac" not in doc or "sources" not in doc:
        raise ConfigError(f"{config_path}: pipeline needs 'faac' and 'sources' keys")
    if seed is None:
        seed = int(doc.get("seed", 0))
    batches = int(doc.get("batches", 0))
    if batches < 1:
        raise ConfigError(f"{config_path}: 'batches' must be a positive target batch count")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    faac_config = load_faac_config(resolve(str(doc["faac"])))
    artifacts: dict[str, Path] = {}
    config_files = [config_path, resolve(str(doc["faac"]))]

    derived: dict[str, "object"] = {}
    for name, src in doc["sources"].items():
        name = str(name)
        schema = load_source_config(resolve(str(src)))
        config_files.append(resolve(str(src)))
        if schema.profile is None:
            raise ConfigError(f"source {name!r} has no synthetic profile to generate from")
        profile = replace(schema.profile, seed=derive_seed(seed, "synth", name))
        flows_path = out / f"{schema.dataset_id}_flows.csv"
        write_flows(generate_synthetic(profile, schema), schema, flows_path)
        artifacts[f"flows:{name}"] = flows_path
        records = parse_flows(flows_path, _reading_schema(schema))
        ds = derive_dataset(records, batches, faac_config, n_records=profile.total)
        derived_path = out / f"{schema.dataset_id}_derived.csv"
        write_derived(ds, derived_path)
        artifacts[f"derived:{name}"] = derived_path
        dist_path = out / f"{schema.dataset_id}_distribution.csv"
        _write_distribution_csv(ds, dist_path)
        artifacts[f"distribution:{name}"] = dist_path
        derived[name] = ds

    if "integration" in doc:
        spec = load_integration_spec(resolve(str(doc["integration"])))
        config_files.append(resolve(str(doc["integration"])))
    else:
        spec = IntegrationSpec()
    merged = None
    if len(derived) >= 2:
        merged = integrate(list(derived.values()), spec)
        merged_path = out / "integrated_derived.csv"
        write_derived(merged, merged_path)
        artifacts["derived:integrated"] = merged_path
        dist_path = out / "integrated_distribution.csv"
        _write_distribution_csv(merged, dist_path)
        artifacts["distribution:integrated"] = dist_path

    eval_doc = doc.get("evaluation")
    if eval_doc:
        settings = _settings_from_doc(eval_doc)
        report = EvalReport()
        for target in eval_doc.get("singles", []) or []:
            target = str(target)
            if target == "integrated":
                if merged is None:
                    raise ConfigError("'integrated' evaluation target needs at least two sources")
                ds = merged
            elif target in derived:
                ds = derived[target]
            else:
                raise ConfigError(f"unknown evaluation target {target!r}")
            part = run_single_dataset(ds, settings, seed=seed, n_threads=threads, name=target)
            report.rows.extend(part.rows)
            report.trial_runs.extend(part.trial_runs)
        if eval_doc.get("transfer", False):
            part = run_transfer_matrix(dict(derived), settings, seed=seed, n_threads=threads)
            report.rows.extend(part.rows)
            report.trial_runs.extend(part.trial_runs)
        if report.rows:
            for path in _write_eval_outputs(report, out):
                artifacts[f"eval:{path.name}"] = path
            _print_eval_summary(report)
        if derived:
            # export one deployable model per kind, fit on the widest dataset
            primary_name = "integrated" if merged is not None else next(iter(derived))
            primary = merged if merged is not None else derived[primary_name]
            for kind in settings.models:
                model = fit_pipeline(
                    primary.X,
                    primary.y,
                    primary.classes,
                    kind,
                    hyperparams=resolve_hyperparams(kind, settings.fixed_hyper.get(kind)),
                    seed=derive_seed(seed, "final", kind),
                    n_threads=threads,
                    provenance={"dataset": primary_name},
                )
                model_path = out / f"model_{kind}.json"
                save_model(model, model_path)
                artifacts[f"model:{kind}"] = model_path

    manifest = _write_manifest(out, "pipeline", list(artifacts.values()), config_files, seed)
    artifacts["manifest"] = manifest
    return artifacts


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to the command's YAML configuration")
    common.add_argument("--seed", type=int, default=None, help="root random seed")
    common.add_argument("--out", default=None, help="output directory (default: current)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for tree building")

    parser = argparse.ArgumentParser(
        prog="faacflow",
        description="Harmonize flow datasets into counter matrices and evaluate classifiers on them.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic flows for a source")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("derive", parents=[common], help="derive the counter matrix from flows")
    p.add_argument("--source", required=True, help="source schema YAML")
    p.add_argument("--input", required=True, help="flows CSV to read")
    p.add_argument("--batches", required=True, type=int, help="target number of batches")
    p.add_argument("--count", type=int, default=None, help="declared record count (enables streaming)")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("integrate", parents=[common], help="merge derived datasets over shared classes")
    p.add_argument("inputs", nargs="*", help="derived CSV files")
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("evaluate", parents=[common], help="cross-validate and transfer-test models")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="summarize an evaluation report CSV")
    p.add_argument("--input", required=True, help="report.csv produced by evaluate")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except FaacflowError as exc:  # base-class fallback keeps exit codes stable
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
