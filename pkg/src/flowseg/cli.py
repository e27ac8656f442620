"""Command-line entry point.

Subcommands: generate-data, analyze-rank, train, sample, evaluate, plot.
Every command writes a manifest echoing its resolved arguments next to its
outputs, so any artifact can be regenerated from the directory alone.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
import torch

from . import datagen as dg
from . import ppm
from . import rank_analysis as ra
from .flows_continuous import SolverConfig
from .metrics import SampleSet, uncertainty_map, write_metric_csv
from .training import (
    ContinuousFlowModel,
    RunConfig,
    _model_samples,
    evaluate,
    load_model,
    sampled_foreground_covariance,
    train,
)


class UsageError(ValueError):
    """Flag combinations argparse cannot express; maps to exit code 2."""


def _write_command_manifest(out_dir: str, command: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{command}.manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"command": command, "resolved_args": payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_generate_data(args) -> int:
    if args.dataset == "chainshapes":
        dg.chainshapes_generate(args.out, seed=args.seed, count=args.count, quadrant_size=args.quadrant_size)
    else:
        h, w = (int(v) for v in args.shape.lower().split("x"))
        dg.multirater_generate(
            args.out, seed=args.seed, count=args.count, image_shape=(1, h, w), rater_count=args.raters
        )
    _write_command_manifest(args.out, "generate-data", vars(args) | {"func": None})
    return 0


def _parse_ranks(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _cmd_analyze_rank(args) -> int:
    if (args.dataset is None) == (args.synthetic is None):
        raise UsageError("exactly one of --dataset or --synthetic is required")
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    prefix = os.path.splitext(os.path.abspath(args.out))[0]
    if args.dataset is not None:
        manifest, _, labels = dg.load_arrays(args.dataset)
        atlas = dg.atlas_from_manifest(manifest)
        trans, init = dg.transition_from_manifest(manifest)
        _, exact = dg.chainshapes_exact_covariance(trans, init, atlas)
        _, empirical = dg.empirical_foreground_covariance(labels[:, 0, 1])
        reports = [ra.rank_report(exact, assumed_rank=0, n_samples=0, rel_tol=1e-8)]
        reports.append(ra.rank_report(empirical, assumed_rank=0, n_samples=labels.shape[0], rel_tol=1e-4))
        ra.write_rank_csv(reports, args.out, seed=manifest.rng_seed)
        ppm.write_pgm(prefix + "_exact_cov.pgm", exact, comment="exact foreground pixel covariance")
        ppm.write_pgm(prefix + "_empirical_cov.pgm", empirical, comment="empirical foreground pixel covariance")
        print(f"exact covariance numerical rank (rel_tol 1e-8): {reports[0].numerical_rank}")
    else:
        k, d = (int(v) for v in args.synthetic.split(","))
        ranks = _parse_ranks(args.ranks)
        reports, concavity = ra.sublinearity_report(None, ranks, k, d, args.samples, args.seed)
        ra.write_rank_csv(reports, args.out, seed=args.seed)
        for rep in reports:
            spec = ra.decaying_lowrank_spec(k, d, rep.assumed_rank, args.seed)
            rng = np.random.default_rng(np.random.SeedSequence([args.seed, rep.assumed_rank]))
            cov = ra.pushforward_covariance_mc(spec, k, d, max(10_000, args.samples // 10), rng)
            ppm.write_pgm(prefix + f"_cov_r{rep.assumed_rank}.pgm", cov, comment=f"pushforward covariance, rank {rep.assumed_rank}")
        print(f"effective ranks: {[round(r.effective_rank, 3) for r in reports]}")
        print(f"concavity statistic: {concavity:.4f}")
    _write_command_manifest(out_dir, "analyze-rank", {k: v for k, v in vars(args).items() if k != "func"})
    return 0


def _cmd_train(args) -> int:
    config = RunConfig.from_json_file(args.config)
    if args.out:
        config.out_dir = args.out
    result = train(config)
    with open(os.path.join(config.out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_command_manifest(config.out_dir, "train", {"config": args.config, "resolved": config.to_dict()})
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"best checkpoint: {result.best_checkpoint} (metric {result.best_metric:.6f} at step {result.best_step})")
    return 0


def _solver_from_args(args, config: RunConfig) -> SolverConfig:
    if getattr(args, "adaptive", False):
        return SolverConfig("dopri5", steps=config.solver_steps, atol=args.tol, rtol=args.tol)
    if getattr(args, "steps", None) is not None:
        return SolverConfig("euler", steps=args.steps)
    return config.solver()


def _cmd_sample(args) -> int:
    model, config, data = load_model(args.checkpoint)
    solver = _solver_from_args(args, config)
    if not isinstance(model, ContinuousFlowModel) and (args.steps is not None or args.adaptive):
        print("warning: solver flags ignored for single-pass sampling checkpoints", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    gen = torch.Generator().manual_seed(args.seed)
    if data.conditional:
        if not 0 <= args.index < data.images["test"].shape[0]:
            raise UsageError(f"--index {args.index} outside the test split (size {data.images['test'].shape[0]})")
        x = torch.from_numpy(data.images["test"][args.index : args.index + 1])
    else:
        x = None
    labels = _model_samples(model, config, x, gen, args.m, solver).cpu().numpy().astype(np.uint8)
    onehot = dg.foreground_to_onehot(labels)
    with open(os.path.join(args.out, "samples.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(onehot).tobytes())
    with open(os.path.join(args.out, "samples.json"), "w", encoding="utf-8") as fh:
        json.dump({"shape": list(onehot.shape), "dtype": "uint8", "layout": "(sample, k, h, w)"}, fh)
        fh.write("\n")
    grid = _contact_sheet(labels)
    ppm.write_ppm(os.path.join(args.out, "samples.ppm"), grid, comment="sampled label maps")
    refs = onehot[:1]
    umap = uncertainty_map(SampleSet(onehot, refs))
    ppm.write_pgm(os.path.join(args.out, "uncertainty.pgm"), umap, comment="per-pixel entropy (bits)")
    _write_command_manifest(args.out, "sample", {k: v for k, v in vars(args).items() if k != "func"})
    return 0


def _contact_sheet(labels: np.ndarray, pad: int = 2) -> np.ndarray:
    m, h, w = labels.shape
    cols = int(np.ceil(np.sqrt(m)))
    rows = int(np.ceil(m / cols))
    sheet = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 60, dtype=np.uint8)
    for i in range(m):
        r, c = divmod(i, cols)
        tile = (labels[i, :, :, None] * 255).astype(np.uint8).repeat(3, axis=2)
        sheet[pad + r * (h + pad) : pad + r * (h + pad) + h, pad + c * (w + pad) : pad + c * (w + pad) + w] = tile
    return sheet


def _cmd_evaluate(args) -> int:
    model, config, _ = load_model(args.checkpoint, args.dataset)
    solver = _solver_from_args(args, config)
    report = evaluate(
        args.checkpoint,
        args.dataset,
        m=args.m,
        solver=solver,
        split=args.split,
        seed=args.seed,
        max_items=args.max_items,
    )
    report.solver = f"{solver.method}:{solver.steps if solver.method == 'euler' else solver.atol}"
    write_metric_csv([report], args.out)
    print(
        f"ged16={report.ged16:.4f} gedM={report.ged_m:.4f} diversity={report.diversity:.4f} "
        f"dice={report.mean_dice:.4f} hm_iou={report.hm_iou:.4f}"
        + (f" bpd={report.bpd:.4f}" if report.bpd is not None else "")
    )
    _write_command_manifest(os.path.dirname(os.path.abspath(args.out)) or ".", "evaluate", {k: v for k, v in vars(args).items() if k != "func"})
    return 0


def _read_csv(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _cmd_plot(args) -> int:
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    tidy_path = os.path.splitext(args.out)[0] + ".csv"
    series: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    log_x = False
    if args.kind == "bpd":
        if not args.log:
            raise ValueError("--kind bpd needs at least one --log file")
        for path in args.log:
            rows = [r for r in _read_csv(path) if r["eval_metric"]]
            if not rows:
                raise ValueError(f"{path}: no evaluation entries to plot")
            name = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
            series[name] = (
                np.array([float(r["step"]) for r in rows]),
                np.array([float(r["eval_metric"]) for r in rows]),
            )
    elif args.kind == "ged-vs-steps":
        if not args.report:
            raise ValueError("--kind ged-vs-steps needs --report")
        rows = [r for r in _read_csv(args.report) if r.get("solver", "").startswith("euler:")]
        if not rows:
            raise ValueError(f"{args.report}: no fixed-step solver rows found")
        rows.sort(key=lambda r: int(r["solver"].split(":")[1]))
        series["ged16"] = (
            np.array([int(r["solver"].split(":")[1]) for r in rows]),
            np.array([float(r["ged16"]) for r in rows]),
        )
        log_x = True
    elif args.kind == "covariance":
        if not (args.dataset and args.checkpoint):
            raise ValueError("--kind covariance needs --dataset and --checkpoint")
        manifest, _, _ = dg.load_arrays(args.dataset)
        atlas = dg.atlas_from_manifest(manifest)
        trans, init = dg.transition_from_manifest(manifest)
        _, exact = dg.chainshapes_exact_covariance(trans, init, atlas)
        learned = sampled_foreground_covariance(args.checkpoint, n_samples=4096, seed=args.seed)
        lo = min(exact.min(), learned.min())
        hi = max(exact.max(), learned.max())
        gap = np.full((exact.shape[0], 4), lo)
        panel = np.concatenate([exact, gap, learned], axis=1)
        ppm.write_pgm(args.out, panel, comment=f"left: exact, right: learned; shared scale [{lo:.4g}, {hi:.4g}]")
        with open(tidy_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["matrix", "frobenius_norm", "max_entry"])
            writer.writerow(["exact", f"{np.linalg.norm(exact):.6f}", f"{exact.max():.6f}"])
            writer.writerow(["learned", f"{np.linalg.norm(learned):.6f}", f"{learned.max():.6f}"])
        _write_command_manifest(out_dir, "plot", {k: v for k, v in vars(args).items() if k != "func"})
        return 0
    else:
        raise ValueError(f"unknown plot kind {args.kind!r}")

    img = ppm.render_line_chart(series, log_x=log_x)
    ppm.write_ppm(args.out, img, comment=f"kind={args.kind}")
    with open(tidy_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "x", "y"])
        for name, (xs, ys) in series.items():
            for x, y in zip(xs, ys):
                writer.writerow([name, x, y])
    _write_command_manifest(out_dir, "plot", {k: v for k, v in vars(args).items() if k != "func"})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write a synthetic dataset to disk")
    gen.add_argument("--dataset", choices=("chainshapes", "multirater"), required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=10000)
    gen.add_argument("--quadrant-size", type=int, default=8, dest="quadrant_size")
    gen.add_argument("--raters", type=int, default=4)
    gen.add_argument("--shape", default="32x32", help="HxW for the multi-annotator task")
    gen.set_defaults(func=_cmd_generate_data)

    rank = sub.add_parser("analyze-rank", help="rank reports and covariance heatmaps")
    rank.add_argument("--dataset", help="dataset directory (exact + empirical covariance)")
    rank.add_argument("--synthetic", help="k,d for the synthetic pushforward study")
    rank.add_argument("--ranks", default="1,2,4,8,16")
    rank.add_argument("--samples", type=int, default=1_000_000)
    rank.add_argument("--seed", type=int, default=0)
    rank.add_argument("--out", required=True, help="output CSV path")
    rank.set_defaults(func=_cmd_analyze_rank)

    tr = sub.add_parser("train", help="train a model from a JSON run config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", help="override the config's output directory")
    tr.set_defaults(func=_cmd_train)

    sm = sub.add_parser("sample", help="draw segmentation samples from a checkpoint")
    sm.add_argument("--checkpoint", required=True)
    sm.add_argument("--m", type=int, default=16)
    sm.add_argument("--steps", type=int, default=None, help="fixed Euler step count")
    sm.add_argument("--adaptive", action="store_true")
    sm.add_argument("--tol", type=float, default=1e-6)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--index", type=int, default=0, help="test image index for conditional models")
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=_cmd_sample)

    ev = sub.add_parser("evaluate", help="metric report for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", default=None)
    ev.add_argument("--m", type=int, default=16)
    ev.add_argument("--steps", type=int, default=None)
    ev.add_argument("--adaptive", action="store_true")
    ev.add_argument("--tol", type=float, default=1e-6)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--max-items", type=int, default=None, dest="max_items")
    ev.add_argument("--out", required=True, help="metric CSV to append to")
    ev.set_defaults(func=_cmd_evaluate)

    pl = sub.add_parser("plot", help="render chart artifacts from CSV outputs")
    pl.add_argument("--log", action="append", default=[], help="training log CSV (repeatable)")
    pl.add_argument("--report", help="metric report CSV")
    pl.add_argument("--dataset", help="dataset dir (covariance kind)")
    pl.add_argument("--checkpoint", help="checkpoint (covariance kind)")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--kind", required=True, choices=("bpd", "ged-vs-steps", "covariance"))
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, dg.DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
