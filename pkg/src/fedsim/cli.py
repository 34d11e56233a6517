"""Command-line interface.

Subcommands:
  run                  train with the configured selector, write metrics + manifest
  partition            materialize the client partition and export it as JSON
  estimate-entropy     per-round entropy estimates vs true label entropy
  validate-assumption  gradient-drift scatter plus fitted envelope report
  summarize            rounds-to-target table and speedups across finished runs

Exit codes: 0 success, 2 configuration problem, 3 internal invariant
violation. All outputs (CSV, JSON, figures) are written inside --out.
Set FEDSIM_THREADS to cap local-update parallelism; results are
byte-identical regardless of its value.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from scipy import stats

from ._version import __version__
from .config import build_data, load_config, normalize_config, to_experiment_config
from .engine import build_manifest, run_experiment, write_metrics_csv
from .errors import ConfigError, DomainError, InvariantError
from .estimator import envelope_coverage, fit_envelope
from .harness import drift_probe, entropy_probe
from .report import format_summary_table, summarize_metrics


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulator with "
        "update-based client selection.",
    )
    parser.add_argument("--version", action="version", version=f"fedsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_selector=False):
        p.add_argument("--config", required=True, help="JSON config (or manifest) path")
        p.add_argument(
            "--seed",
            type=int,
            action="append",
            help="run seed; repeat for several (overrides the config's seeds)",
        )
        p.add_argument("--out", default="fedsim_out", help="output directory")
        p.add_argument(
            "--no-figures", action="store_true", help="skip matplotlib figure output"
        )
        if with_selector:
            p.add_argument("--selector", help="override the configured selector kind")

    p_run = sub.add_parser("run", help="train and write per-round metrics")
    add_common(p_run, with_selector=True)
    p_run.set_defaults(func=cmd_run)

    p_part = sub.add_parser("partition", help="export the client partition")
    add_common(p_part)
    p_part.set_defaults(func=cmd_partition)

    p_est = sub.add_parser(
        "estimate-entropy", help="track entropy estimates against the truth"
    )
    add_common(p_est, with_selector=True)
    p_est.set_defaults(func=cmd_estimate_entropy)

    p_val = sub.add_parser(
        "validate-assumption", help="gradient-drift scatter and envelope fit"
    )
    add_common(p_val)
    p_val.set_defaults(func=cmd_validate_assumption)

    p_sum = sub.add_parser("summarize", help="rounds-to-target table across runs")
    p_sum.add_argument("metrics", nargs="+", help="metrics CSV files from runs")
    p_sum.add_argument(
        "--target-acc",
        type=float,
        default=None,
        help="target accuracy (default: random baseline's final smoothed accuracy)",
    )
    p_sum.add_argument("--out", default="fedsim_out", help="output directory")
    p_sum.add_argument("--no-figures", action="store_true")
    p_sum.set_defaults(func=cmd_summarize)
    return parser


def _prepare(args, with_selector=False) -> tuple[dict, Path]:
    norm = load_config(args.config)
    if args.seed:
        norm["seeds"] = [int(s) for s in args.seed]
    if with_selector and getattr(args, "selector", None):
        norm["selector"]["kind"] = args.selector
    norm = normalize_config(norm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return norm, out


def cmd_run(args) -> int:
    norm, out = _prepare(args, with_selector=True)
    cfg = to_experiment_config(norm)
    for seed in norm["seeds"]:
        _, test, partition = build_data(norm, seed)
        rows, sim = run_experiment(partition, test, cfg, seed)
        tag = f"{cfg.selector_kind}_seed{seed}"
        csv_path = out / f"metrics_{tag}.csv"
        write_metrics_csv(rows, csv_path)
        manifest_path = out / f"manifest_{tag}.json"
        manifest_path.write_text(
            json.dumps(build_manifest(norm, seed, sim), indent=2) + "\n"
        )
        evaluated = [r.test_accuracy for r in rows if r.test_accuracy is not None]
        final = f"{evaluated[-1]:.4f}" if evaluated else "n/a"
        print(f"wrote {csv_path} (final test accuracy {final})")
    return 0


def cmd_partition(args) -> int:
    norm, out = _prepare(args)
    for seed in norm["seeds"]:
        _, _, partition = build_data(norm, seed)
        payload = {
            "seed": int(seed),
            "alphas": list(partition.alphas),
            "clients": partition.to_json_records(),
        }
        path = out / f"partition_seed{seed}.json"
        path.write_text(json.dumps(payload, indent=2) + "\n")
        if not args.no_figures:
            from .figures import save_partition_heatmap

            save_partition_heatmap(partition, out / f"partition_seed{seed}.png")
        print(f"wrote {path}")
    return 0


def cmd_estimate_entropy(args) -> int:
    norm, out = _prepare(args, with_selector=True)
    cfg = to_experiment_config(norm)
    for seed in norm["seeds"]:
        _, test, partition = build_data(norm, seed)
        rows = entropy_probe(partition, test, cfg, seed)
        path = out / f"entropy_estimates_seed{seed}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["client_id", "true_entropy", "estimated_entropy", "round"])
            for r in rows:
                writer.writerow(
                    [
                        r.client_id,
                        format(r.true_entropy, ".12g"),
                        format(r.estimated_entropy, ".12g"),
                        r.round,
                    ]
                )
        if not args.no_figures and rows:
            from .figures import save_entropy_scatter

            save_entropy_scatter(rows, out / f"entropy_estimates_seed{seed}.png")
        print(f"wrote {path}")
    return 0


def cmd_validate_assumption(args) -> int:
    norm, out = _prepare(args)
    cfg = to_experiment_config(norm)
    probe_every = int(norm["assumption"]["probe_every"])
    coverage_target = float(norm["assumption"]["coverage_target"])
    for seed in norm["seeds"]:
        train, _, partition = build_data(norm, seed)
        rows = drift_probe(partition, train, cfg, seed, probe_every=probe_every)
        csv_path = out / f"drift_points_seed{seed}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "client_id", "label_entropy", "gradient_gap"])
            for r in rows:
                writer.writerow(
                    [
                        r.round,
                        r.client_id,
                        format(r.label_entropy, ".12g"),
                        format(r.gradient_gap, ".12g"),
                    ]
                )
        points = [(r.label_entropy, r.gradient_gap) for r in rows]
        client_points = [
            (r.label_entropy, r.gradient_gap) for r in rows if r.client_id >= 0
        ]
        params = fit_envelope(points, partition.clients[0].num_classes, coverage_target)
        coverage = envelope_coverage(points, params, partition.clients[0].num_classes)
        ents = [p[0] for p in client_points]
        gaps = [p[1] for p in client_points]
        rho, _ = stats.spearmanr(ents, gaps)
        payload = {
            "seed": int(seed),
            "beta": params.beta,
            "rho": params.rho,
            "kappa": params.kappa,
            "coverage": coverage,
            "coverage_target": coverage_target,
            "spearman_entropy_gap": float(rho),
            "num_points": len(points),
        }
        json_path = out / f"envelope_seed{seed}.json"
        json_path.write_text(json.dumps(payload, indent=2) + "\n")
        if not args.no_figures:
            from .figures import save_drift_envelope

            save_drift_envelope(
                points, params, partition.clients[0].num_classes,
                out / f"drift_points_seed{seed}.png",
            )
        print(f"wrote {json_path} (coverage {coverage:.3f}, spearman {rho:.3f})")
    return 0


def cmd_summarize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize_metrics(args.metrics, target_acc=args.target_acc)
    print(format_summary_table(summary))
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2) + "\n")
    if not args.no_figures:
        from .figures import save_accuracy_curves

        save_accuracy_curves(summary, out / "accuracy_curves.png")
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
