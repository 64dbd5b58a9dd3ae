"""Command-line surface: corpus synthesis, pipeline runs, gradient checks.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O or
data error.  The environment variable ``PPLAB_SEED`` overrides the seed of
whichever config file a subcommand loads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from .checks import GRADCHECK_TOLERANCE, run_gradient_check
from .data_model import PipelineConfig, PseudoLabel, save_pseudo_labels
from .errors import CheckFailure, ConfigError, PplabError
from .pipeline import CorpusResult, run_corpus, run_single_mil_baseline
from .synth_eval import SyntheticConfig, generate_corpus

_PIPELINE_CONFIG_HELP = """\
pipeline config keys (JSON object; every key optional, defaults shown):
  d=0.015                distance-penalty exponent
  v=0.1                  positive-expansion scale factor
  alpha=0.25             positive/negative blend in the stage-two loss
  lambda=0.25            stage-one loss weight in the combined diagnostic
  gamma=0.25             auxiliary-mask loss weight (recorded, never trained)
  focal_gamma=2.0        focal-loss focusing exponent
  t_neg1=0.3             background-negative IoU ceiling
  t_neg2=0.5             part-negative IoU ceiling
  t_min1=0.6 t_min2=0.3  box-mining merge thresholds
  k=3                    box-mining candidate pool size
  learning_rate=0.01 epochs=30 hidden_width=64 seed=0
  neg_background=16      background negatives per scene
  neg_part=8             part negatives per object
  ppg_count=4            expanded positive boxes per object (0..4)
  pdg/pnpg/prm/bms/mps=true   stage toggles
  pdg_variant="sigmoid"  or "literal" (+ pdg_literal_scale=0.5)
A {"preset": "paper_defaults"} entry loads exactly these defaults.
"""

_SYNTH_CONFIG_HELP = """\
synthetic corpus config keys (JSON object, defaults shown):
  num_scenes=20 width=128 height=128 num_classes=4
  min_objects=2 max_objects=5 proposals_per_bag=8
  adjacency_rate=0.3     chance an object is placed beside a same-class one
  part_rate=0.5          chance a bag carries foreground-dominant sub-boxes
  feature_dim=11         must equal num_classes + 7
  feature_noise=0.02 box_jitter=0.04 rect_fraction=0.15 seed=42
"""


def _load_json_file(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc


def _env_seed() -> int | None:
    raw = os.environ.get("PPLAB_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"PPLAB_SEED must be an integer, got {raw!r}") from exc


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = SyntheticConfig.from_json_dict(_load_json_file(args.config))
    seed = _env_seed()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
        cfg.validate()
    manifest = generate_corpus(cfg, args.out)
    print(f"wrote {len(manifest.scenes)} scenes to {args.out}")
    return 0


def _write_run_outputs(result: CorpusResult, out_dir: str, baseline: bool) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, labels in zip(result.names, result.labels):
        base = name[:-5] if name.endswith(".json") else name
        save_pseudo_labels(list(labels), os.path.join(out_dir, f"{base}.labels.json"))
    report = {
        "baseline": baseline,
        "report": result.report.to_json_dict(),
        "losses": {
            "selection": result.losses.selection,
            "positive": result.losses.positive,
            "negative": result.losses.negative,
            "refinement": result.losses.refinement,
            "total": result.losses.total,
        },
        "config": result.config.to_json_dict(),
        "diagnostics": result.diagnostics,
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report, indent=2, allow_nan=False))
        fh.write("\n")
    with open(os.path.join(out_dir, "loss_curve.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_psm", "loss_prm"])
        n = max(len(result.selection_curve), len(result.refinement_curve))
        for epoch in range(n):
            sel = result.selection_curve[epoch] if epoch < len(result.selection_curve) else ""
            ref = result.refinement_curve[epoch] if epoch < len(result.refinement_curve) else ""
            writer.writerow([epoch, sel, ref])


def _cmd_run(args: argparse.Namespace) -> int:
    if not os.path.isdir(args.corpus):
        raise FileNotFoundError(f"corpus directory not found: {args.corpus}")
    config = PipelineConfig.from_json_dict(_load_json_file(args.config))
    seed = _env_seed()
    if seed is not None:
        config = config.with_seed(seed)
    if args.baseline:
        result = run_single_mil_baseline(args.corpus, config, jobs=args.jobs)
    else:
        result = run_corpus(args.corpus, config, jobs=args.jobs)
    _write_run_outputs(result, args.out, args.baseline)
    for line in result.diagnostics:
        print(line, file=sys.stderr)
    miou = result.report.miou_box
    miou_text = "n/a" if miou is None else f"{miou:.4f}"
    print(
        f"labeled {result.report.num_objects} objects in {result.report.num_scenes} scenes;"
        f" miou_box={miou_text}"
    )
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    passed, errors = run_gradient_check(seed=args.seed, inject_fault=args.inject_fault)
    for name, err in errors.items():
        status = "PASS" if err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name}-loss max relative gradient error {err:.3e}: {status}")
    if not passed:
        raise CheckFailure("gradient check failed; see per-loss report above")
    print("all gradients match finite differences")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pplab",
        description="Point-prompted pseudo-label engine: select and refine one "
        "box+mask per annotated point from a bag of proposals.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser(
        "synth",
        help="generate a synthetic corpus with ground truth",
        description="Generate a synthetic scene corpus (with ground truth) into a directory.",
        epilog=_SYNTH_CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p_synth.add_argument("--config", required=True, help="synthetic config JSON file")
    p_synth.add_argument("--out", required=True, help="output corpus directory")
    p_synth.set_defaults(func=_cmd_synth)

    p_run = sub.add_parser(
        "run",
        help="run the pipeline over a corpus",
        description="Train the two MIL stages over a corpus and write pseudo labels, "
        "an evaluation report (when ground truth is present), and the loss curves.",
        epilog=_PIPELINE_CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p_run.add_argument("--corpus", required=True, help="corpus directory with manifest.json")
    p_run.add_argument("--config", required=True, help="pipeline config JSON file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument(
        "--baseline", action="store_true",
        help="single-MIL baseline: stage one only, all other stages disabled",
    )
    p_run.add_argument(
        "--jobs", type=int, default=1,
        help="scene-labeling worker processes (output independent of this)",
    )
    p_run.set_defaults(func=_cmd_run)

    p_check = sub.add_parser(
        "gradcheck",
        help="verify loss gradients against finite differences",
        description="Compare analytic gradients of all four losses with central finite "
        f"differences; passes when every relative error is <= {GRADCHECK_TOLERANCE}.",
    )
    p_check.add_argument("--seed", type=int, default=0, help="random seed for the instances")
    p_check.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p_check.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PplabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
