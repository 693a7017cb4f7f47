import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

# Setup logging
import logging

logger = logging.getLogger("spatialib")

from spatialib.data import generate_synthetic, load_folder, save_dataset
from spatialib.evaluation import (
    accuracy,
    evaluate_methods,
    info_differential_rows,
    mi_quadrants,
    per_sample_info_diffs,
    sufficiency_sweep,
    trend_statistics,
    variance_bound_sweep,
)
from spatialib.explain import emit_difference_map, emit_heatmap, explain
from spatialib.models import METHOD_IDS, ContractError, Dataset, RunConfig, SpatialIBError
from spatialib.network import Classifier, build_small_cnn, load_params, save_params
from spatialib.report import MODES, comparison_table, render_report
from spatialib.sib import train
from spatialib.utils import format_config, load_config, write_csv

LOG_COLUMNS = ["epoch", "acc", "l_ce", "l_fg", "l_bg", "hsic_fg", "hsic_bg"]


# ------ Shared plumbing ------ #
def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.txt").write_text(format_config(config))
    return out


def _dataset_name(config: RunConfig) -> str:
    return Path(config.data_path).name if config.data_path else "synthetic"


def _load_splits(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """Train and test splits from ``data_path`` (``train/`` and ``test/`` subfolders) or generated in memory."""
    if config.data_path is None:
        return generate_synthetic(
            config.classes, config.side, config.n_train, config.spurious, config.seed, config.n_test
        )
    root = Path(config.data_path)
    train_root = root / "train" if (root / "train").is_dir() else root
    test_root = root / "test" if (root / "test").is_dir() else train_root
    return load_folder(train_root), load_folder(test_root)


def _model_path(config: RunConfig, mode: Optional[str] = None) -> Path:
    mode = mode or config.mode
    return Path(config.out) / f"model_{mode}_seed{config.seed}.sibp"


def _load_model(config: RunConfig, path: Optional[Path] = None) -> Classifier:
    path = Path(path) if path else _model_path(config)
    if not path.is_file():
        raise ContractError(f"model file {path} does not exist, run train first")
    template = build_small_cnn(config.channels, config.classes, config.side, config.seed)
    return template.with_params(load_params(path.read_bytes()))


def _method_options(config: RunConfig, method_id: str) -> Dict[str, float]:
    options = {"tau": config.tau}
    if method_id == "integrated_gradients":
        options["steps"] = config.ig_steps
    elif method_id == "ours":
        options.update(threshold=config.mask_threshold, sharpness=config.mask_sharpness)
    return options


def _eval_subset(dataset: Dataset, config: RunConfig, ids: Optional[List[str]] = None) -> Dataset:
    if ids:
        known = {s.sample_id: s for s in dataset.samples}
        unknown = [i for i in ids if i not in known]
        if unknown:
            raise ContractError(f"unknown sample id(s): {', '.join(unknown)}")
        samples = [known[i] for i in ids]
    else:
        samples = dataset.samples[: config.eval_samples]
    return dataset.model_copy(update={"samples": samples})


# ------ Commands ------ #
def cmd_gen(config: RunConfig, args: argparse.Namespace) -> int:
    """Generate the synthetic train/test splits under ``<out>/data``."""
    out = _out_dir(config)
    train_set, test_set = generate_synthetic(
        config.classes, config.side, config.n_train, config.spurious, config.seed, config.n_test
    )
    save_dataset(train_set, out / "data" / "train")
    save_dataset(test_set, out / "data" / "test")
    return 0


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    """Train one model, write its parameters and the per-epoch log (epoch 0 = initial state)."""
    out = _out_dir(config)
    train_set, _ = _load_splits(config)
    model = build_small_cnn(config.channels, config.classes, config.side, config.seed)
    logger.info(f"training {config.run_tag()} on {len(train_set)} samples for {config.epochs} epoch(s)")
    model, log = train(model, train_set, config, include_initial=True)
    _model_path(config).write_bytes(save_params(model))
    write_csv(out / f"train_log_{config.run_tag()}.csv", [r.model_dump() for r in log], LOG_COLUMNS)
    trend = trend_statistics(log)
    logger.info(f"trend: spearman(epoch, hsic_fg)={trend['hsic_fg']:.3f} spearman(epoch, l_bg)={trend['l_bg']:.3f}")
    return 0


def cmd_explain(config: RunConfig, args: argparse.Namespace) -> int:
    """Write heatmaps (and difference maps when the baseline of the same seed exists)."""
    out = _out_dir(config)
    _, test_set = _load_splits(config)
    model = _load_model(config, args.model)
    methods = [args.method] if args.method else config.methods
    ids = [i.strip() for i in args.samples.split(",")] if args.samples else None
    subset = _eval_subset(test_set, config, ids)
    heat_dir = out / f"heatmaps_{config.run_tag()}"

    baseline = None
    if config.mode == "sib" and _model_path(config, "baseline").is_file():
        baseline = _load_model(config, _model_path(config, "baseline"))
    for sample in subset.samples:
        for method_id in methods:
            options = _method_options(config, method_id)
            smap = explain(model, sample.image, method_id, **options)
            emit_heatmap(smap, sample.image, heat_dir, sample.sample_id)
            if baseline is not None:
                # attribute the same class with both models
                base_map = explain(baseline, sample.image, method_id, smap.target, **options)
                emit_difference_map(base_map, smap, heat_dir / f"diff_{method_id}_{sample.sample_id}.ppm")
    return 0


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    """Localization, faithfulness, curve and accuracy CSVs for one model."""
    out = _out_dir(config)
    _, test_set = _load_splits(config)
    model = _load_model(config, args.model)
    subset = _eval_subset(test_set, config)
    frames = evaluate_methods(
        model,
        subset,
        config.methods,
        threshold=config.binarize_threshold,
        steps=config.faithfulness_steps,
        ig_steps=config.ig_steps,
        tau=config.tau,
        mask_threshold=config.mask_threshold,
        mask_sharpness=config.mask_sharpness,
        workers=config.workers,
    )
    tag = config.run_tag()
    keys = {"dataset": _dataset_name(config), "mode": config.mode, "seed": config.seed}
    for name in ("localization", "faithfulness", "curves"):
        frame = frames[name].assign(**keys)
        leading = ["method", "dataset", "mode", "seed"]
        write_csv(out / f"{name}_{tag}.csv", frame[leading + [c for c in frame if c not in leading]])
    scores = accuracy(model, test_set, config.top_k)
    write_csv(out / f"accuracy_{tag}.csv", [{**keys, "top1": scores["top1"], "topk": scores["topk"], "k": int(scores["k"])}])
    return 0


def cmd_report(config: RunConfig, args: argparse.Namespace) -> int:
    """MI quadrants, information differential, theory checks and the baseline-vs-sib table.

    The information differential is reported twice: z-scored within each model,
    and z-scored over both modes of a seed so the two models share one scale.
    """
    out = _out_dir(config)
    quadrant_rows, differential_rows = [], []
    for seed in config.seeds:
        seeded = config.model_copy(update={"seed": seed})
        _, test_set = _load_splits(seeded)
        subset = _eval_subset(test_set, seeded)
        diffs: Dict[str, List[float]] = {}
        for mode in MODES:
            path = _model_path(seeded, mode)
            if not path.is_file():
                continue
            model = _load_model(seeded, path)
            quadrants = mi_quadrants(model, subset, tau=config.tau, mode=config.hsic_standardize)
            quadrant_rows.append(
                {
                    "mode": mode,
                    "seed": seed,
                    **quadrants.model_dump(),
                    "cross_ratio": quadrants.cross / quadrants.within if quadrants.within > 0 else float("nan"),
                }
            )
            diffs[mode] = per_sample_info_diffs(model, subset, "guided_backprop", config.tau)
        differential_rows += info_differential_rows(diffs, [s.sample_id for s in subset.samples], seed)

    quadrant_frame = pd.DataFrame(quadrant_rows)
    differential_frame = pd.DataFrame(differential_rows)
    if not quadrant_frame.empty:
        write_csv(out / "mi_quadrants.csv", quadrant_frame)
    summary = None
    if not differential_frame.empty:
        write_csv(out / "info_differential.csv", differential_frame)
        summary = differential_frame.groupby(["mode", "seed"], sort=False)[["diff", "info_differential", "info_differential_pooled"]].mean().reset_index()

    sweep = variance_bound_sweep(seed=config.seed)
    write_csv(out / "bound_check.csv", [sweep.model_dump()])
    sufficiency = sufficiency_sweep(seed=config.seed)
    comparison = comparison_table(out, config.seeds)
    if not comparison.empty:
        write_csv(out / "comparison.csv", comparison)
    text = render_report(config, _dataset_name(config), sweep, sufficiency, quadrant_frame, summary, comparison)
    (out / "report.md").write_text(text)
    logger.info(f"wrote {out / 'report.md'}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialib", description="Spatial information bottleneck training and evaluation.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        command = sub.add_parser(name, help=func.__doc__)
        command.add_argument("--config", help="key=value config file")
        command.add_argument("--seed", type=int, help="overrides the config seed")
        command.add_argument("--out", help="output directory")
        command.add_argument("--mode", choices=["baseline", "sib"], help="objective mode")
        if name in ("explain", "eval"):
            command.add_argument("--model", help="parameter file, defaults to <out>/model_<mode>_seed<seed>.sibp")
        if name == "explain":
            command.add_argument("--method", choices=list(METHOD_IDS), help="single method, defaults to the config list")
            command.add_argument("--samples", help="comma-separated sample ids")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the ``spatialib`` command, returns the exit code.

    Library errors exit with 1, anything else with 2; both print one JSON line on stderr.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, {"seed": args.seed, "out": args.out, "mode": args.mode})
        logger.info(f"{args.command}: {config.run_tag()} -> {config.out}")
        return COMMANDS[args.command](config, args)
    except SpatialIBError as error:
        print(json.dumps({"error": type(error).__name__, "message": str(error)}), file=sys.stderr)
        return 1
    except Exception as error:
        logger.debug("unexpected failure", exc_info=True)
        print(json.dumps({"error": type(error).__name__, "message": str(error)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
