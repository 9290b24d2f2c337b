"""Command-line entry points.

Verbs: ``gen`` (materialize a synthetic bundle), ``run`` (one regime),
``transfer`` (domain-shifted run), ``reduced`` (class-reduction staged
protocol), ``sweep`` (modes x seeds with aggregate tables), ``report``
(re-render layouts from a stored report bundle). Exit codes: 0 success,
1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import _kernels, __version__
from .config import ConfigError, ExperimentConfig, parse_config
from .data import apply_domain_shift, gen_synthetic_task, load_bundle, save_bundle
from .orchestrator import (RunSettings, run, run_reduced_class_protocol, run_transfer)
from .reporting import (RunReportBundle, aggregates_csv, bundle_from_reports,
                        render_report, write_run_artifacts)
from .util import derive_seed


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash, "version": __version__,
            "kernel_backend": _kernels.backend()}


def _base_bundle(cfg: ExperimentConfig, seed: int):
    if cfg.manifest:
        return load_bundle(cfg.manifest)
    return gen_synthetic_task(cfg.generator, seed)


def _settings(cfg: ExperimentConfig, bundle, with_mapping: bool = False) -> RunSettings:
    arch = cfg.arch_for(bundle.labeled[0].image.channels, bundle.num_classes)
    return RunSettings(
        arch=arch,
        hyper=cfg.hyper,
        scratch_depth=cfg.scratch_depth,
        eval_metric=cfg.metric_for(bundle.num_classes),
        loss_mapping=cfg.class_mapping if with_mapping else None,
        concurrent=cfg.concurrent,
    )


def _transfer_bundles(cfg: ExperimentConfig, seed: int):
    src_spec = cfg.source_generator or cfg.generator
    source = gen_synthetic_task(src_spec, derive_seed(seed, "source"))
    base = gen_synthetic_task(cfg.generator, derive_seed(seed, "target"))
    target = apply_domain_shift(base, cfg.shift, derive_seed(seed, "shift"))
    return source, target


def cmd_gen(cfg: ExperimentConfig, out: Path) -> int:
    bundle = gen_synthetic_task(cfg.generator, cfg.seed)
    manifest = save_bundle(bundle, out / "bundle")
    print(f"wrote {manifest}")
    if not cfg.shift.is_identity:
        target = apply_domain_shift(bundle, cfg.shift, derive_seed(cfg.seed, "shift"))
        manifest = save_bundle(target, out / "target_bundle")
        print(f"wrote {manifest}")
    return 0


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    bundle = _base_bundle(cfg, cfg.seed)
    settings = _settings(cfg, bundle, with_mapping=True)
    report = run(cfg.mode, bundle, cfg.T, settings, cfg.seed)
    metric = settings.eval_metric
    write_run_artifacts(report, out / f"run_{cfg.mode}_seed{cfg.seed}", metric,
                        _provenance(cfg))
    bundle_rep = bundle_from_reports([report], metric, cfg.T, _provenance(cfg))
    (out / "report_bundle.json").write_text(bundle_rep.to_json())
    for rep in report.reports:
        gen = "final" if rep.phase == "final" else f"G{rep.t}"
        parts = "  ".join(f"{k}={100 * v:.2f}" for k, v in sorted(rep.scores.items()))
        print(f"{cfg.mode} {gen}: {parts}")
    return 0


def cmd_transfer(cfg: ExperimentConfig, out: Path) -> int:
    source, target = _transfer_bundles(cfg, cfg.seed)
    settings = _settings(cfg, source)
    report = run_transfer(source, target, cfg.mode, cfg.T, settings, cfg.seed)
    metric = settings.eval_metric
    write_run_artifacts(report, out / f"transfer_{cfg.mode}_seed{cfg.seed}", metric,
                        _provenance(cfg))
    bundle_rep = bundle_from_reports([report], metric, cfg.T, _provenance(cfg))
    (out / "report_bundle.json").write_text(bundle_rep.to_json())
    for rep in report.reports:
        gen = "final" if rep.phase == "final" else f"G{rep.t}"
        parts = "  ".join(f"{k}={100 * v:.2f}" for k, v in sorted(rep.scores.items()))
        print(f"transfer/{cfg.mode} {gen}: {parts}")
    return 0


def cmd_reduced(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.class_mapping is None:
        raise ConfigError("config field 'class_mapping': required for the reduced "
                          "protocol")
    source, target = _transfer_bundles(cfg, cfg.seed)
    settings = _settings(cfg, source)
    protocol = run_reduced_class_protocol(source, target, cfg.class_mapping,
                                          cfg.stage1_T, settings, cfg.seed,
                                          stage2_T=cfg.stage2_T,
                                          stage2_init=cfg.stage2_init)
    reports = list(protocol.runs.values())
    bundle_rep = bundle_from_reports(reports, "miou", cfg.stage1_T, _provenance(cfg),
                                     reduced_rows=protocol.rows)
    (out / "report_bundle.json").write_text(bundle_rep.to_json())
    path = render_report(bundle_rep, "table3", out)
    for tag, row in protocol.rows.items():
        print(f"{tag}: miou={100 * row['miou']:.2f}")
    print(f"wrote {path}")
    return 0


def cmd_sweep(cfg: ExperimentConfig, out: Path, transfer: bool = False) -> int:
    reports = []
    metric = None
    for i in range(cfg.num_seeds):
        seed = cfg.base_seed + i
        if transfer:
            source, target = _transfer_bundles(cfg, seed)
            settings = _settings(cfg, source)
            metric = settings.eval_metric
            for mode in cfg.modes:
                rep = run_transfer(source, target, mode, cfg.T, settings, seed)
                reports.append(rep)
                write_run_artifacts(rep, out / "runs" / f"{mode}_seed{seed}",
                                    metric, _provenance(cfg))
        else:
            bundle = _base_bundle(cfg, seed)
            settings = _settings(cfg, bundle)
            metric = settings.eval_metric
            for mode in cfg.modes:
                rep = run(mode, bundle, cfg.T, settings, seed)
                reports.append(rep)
                write_run_artifacts(rep, out / "runs" / f"{mode}_seed{seed}",
                                    metric, _provenance(cfg))
        print(f"seed {seed} done ({i + 1}/{cfg.num_seeds})")
    bundle_rep = bundle_from_reports(reports, metric, cfg.T, _provenance(cfg))
    (out / "report_bundle.json").write_text(bundle_rep.to_json())
    (out / "aggregates.csv").write_text(aggregates_csv(bundle_rep.aggregates))
    if all(m in bundle_rep.modes for m in ("self_learning", "stso", "atso")):
        path = render_report(bundle_rep, "table1", out)
        print(f"wrote {path}")
    return 0


def cmd_report(bundle_path: Path, layout: str, out: Path) -> int:
    bundle = RunReportBundle.from_json(Path(bundle_path).read_text())
    path = render_report(bundle, layout, out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atso",
        description="Teacher-student self-training experiments at desk scale")
    parser.add_argument("--version", action="version", version=f"atso {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_config_verb(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="JSON config path")
        p.add_argument("-o", "--out", default=None, help="output directory "
                       "(defaults to the config's output_dir)")
        return p

    add_config_verb("gen", "generate and persist a synthetic bundle")
    add_config_verb("run", "run the configured mode on the synthetic benchmark")
    add_config_verb("transfer", "run the configured mode on the domain-shifted task")
    add_config_verb("reduced", "run the staged class-reduction protocol")
    p = add_config_verb("sweep", "run configured modes across seeds and aggregate")
    p.add_argument("--transfer", action="store_true",
                   help="sweep the domain-shifted task instead")

    p = sub.add_parser("report", help="render a layout from a stored report bundle")
    p.add_argument("-b", "--bundle", required=True, help="report_bundle.json path")
    p.add_argument("--layout", required=True,
                   choices=["table1", "appendixA", "table3", "csv", "json"])
    p.add_argument("-o", "--out", default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "report":
            return cmd_report(Path(args.bundle), args.layout, Path(args.out))
        cfg = parse_config(args.config)
        out = Path(args.out) if args.out else Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "gen":
            return cmd_gen(cfg, out)
        if args.verb == "run":
            return cmd_run(cfg, out)
        if args.verb == "transfer":
            return cmd_transfer(cfg, out)
        if args.verb == "reduced":
            return cmd_reduced(cfg, out)
        if args.verb == "sweep":
            return cmd_sweep(cfg, out, transfer=args.transfer)
        raise RuntimeError(f"unhandled verb {args.verb}")
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
