"""Command line front door: run, compare, gridsearch, gen-data.

Config files are INI-style; see :func:`structreg.config.load_spec`. Results
go under ``--out`` as ``<arm>/seed_<k>/{metrics.csv,summary.json,*.ckpt}``
plus a report for ``compare`` and ``gridsearch``.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import trainer
from .config import SPLIT_KEYS, ConfigError, ExperimentSpec, RunConfig, load_spec, parse_seeds

logger = logging.getLogger("structreg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
DEFAULT_ARM = "run"
COMPARE_FIELDS = ("final_test_err", "final_label_quality", "final_mean_entropy")


# -- job plumbing -------------------------------------------------------------

def worker_count(flag: int | None) -> int:
    env = os.environ.get("STRUCTREG_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"cannot parse {env!r} as int", where="STRUCTREG_WORKERS") from None
    else:
        n = flag if flag is not None else 1
    if n < 1:
        raise ConfigError("worker count must be >= 1", where="--workers")
    return n


def _seed_job(job):
    """All arms of one seed, sharing one prepared experiment so they stay paired."""
    arms, out_dir, with_oracle = job
    first = next(iter(arms.values()))
    exp = trainer.prepare(first, with_oracle=with_oracle)
    results = {}
    for name, cfg in arms.items():
        target = Path(out_dir) / name / f"seed_{cfg.seed}" if out_dir else None
        res = trainer.run(cfg, exp, out_dir=target, keep_steps=False)
        results[name] = {"summary": res.summary, "rows": res.rows}
    return first.seed, results


def run_jobs(jobs, workers: int) -> dict[int, dict]:
    if workers == 1 or len(jobs) == 1:
        done = [_seed_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_seed_job, jobs))
    return dict(done)


def arm_configs(spec: ExperimentSpec, seed: int, **extra) -> dict[str, RunConfig]:
    if not spec.arms:
        return {DEFAULT_ARM: spec.base_config(seed=seed, **extra)}
    return {name: spec.arm_config(name, seed=seed, **extra) for name in spec.arms}


def check_paired(spec: ExperimentSpec):
    for name, over in spec.arms.items():
        bad = sorted(set(over) & set(SPLIT_KEYS))
        if bad:
            raise ConfigError(f"arm overrides data/split key(s) {', '.join(bad)}; arms must share one split",
                              where=f"[arm {name}] {bad[0]}")


# -- reports ------------------------------------------------------------------

def paired_differences(results: dict[int, dict], arm: str, baseline: str) -> dict:
    seeds = sorted(results)
    out = {"seeds": seeds}
    for f in COMPARE_FIELDS:
        d = np.array([results[s][arm]["summary"][f] - results[s][baseline]["summary"][f] for s in seeds])
        out[f] = {
            "per_seed": d.tolist(),
            "mean": float(np.mean(d)),
            "std": float(np.std(d, ddof=1)) if len(d) > 1 else 0.0,
        }
    return out


def curve_differences(results: dict[int, dict], arm: str, baseline: str, column: str):
    """Per-step mean and std across seeds of ``arm - baseline`` for one metrics column."""
    seeds = sorted(results)
    steps = [r["step"] for r in results[seeds[0]][baseline]["rows"]]
    diffs = []
    for s in seeds:
        a = [r[column] for r in results[s][arm]["rows"]]
        b = [r[column] for r in results[s][baseline]["rows"]]
        diffs.append(np.array(a, dtype=float) - np.array(b, dtype=float))
    d = np.array(diffs)
    std = d.std(axis=0, ddof=1) if len(seeds) > 1 else np.zeros(d.shape[1])
    return steps, d.mean(axis=0), std


def _svg_num(v: float) -> str:
    return f"{v:.2f}"


def line_plot_svg(title: str, steps, series: dict[str, tuple], ylabel: str) -> str:
    """Self-contained SVG: one mean line and a +-1 std band per series, zero line dashed."""
    width, height, pad = 640, 360, 56
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    xs = np.asarray(steps, dtype=float)
    lo = min([0.0] + [float(np.nanmin(m - s)) for m, s in series.values() if np.isfinite(m - s).any()])
    hi = max([0.0] + [float(np.nanmax(m + s)) for m, s in series.values() if np.isfinite(m + s).any()])
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    x0, x1 = (xs.min(), xs.max()) if len(xs) else (0.0, 1.0)
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 1.0, x1 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - lo) / (hi - lo) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{_svg_num(py(0.0))}" x2="{width - pad}" y2="{_svg_num(py(0.0))}" '
        'stroke="gray" stroke-dasharray="4,4"/>',
        f'<text x="{width / 2}" y="{height - 16}" text-anchor="middle" font-family="sans-serif" font-size="12">step</text>',
        f'<text x="16" y="{height / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {height / 2})">{ylabel}</text>',
        f'<text x="{pad - 6}" y="{_svg_num(py(hi))}" text-anchor="end" font-family="sans-serif" font-size="10">{hi:.3g}</text>',
        f'<text x="{pad - 6}" y="{_svg_num(py(lo))}" text-anchor="end" font-family="sans-serif" font-size="10">{lo:.3g}</text>',
        f'<text x="{pad}" y="{height - pad + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{x1:g}</text>',
    ]
    for k, (name, (mean, std)) in enumerate(series.items()):
        color = palette[k % len(palette)]
        ok = np.isfinite(mean) & np.isfinite(std)
        if not ok.any():
            continue
        upper = [f"{_svg_num(px(x))},{_svg_num(py(m + s))}" for x, m, s, g in zip(xs, mean, std, ok) if g]
        lower = [f"{_svg_num(px(x))},{_svg_num(py(m - s))}" for x, m, s, g in zip(xs, mean, std, ok) if g]
        line = [f"{_svg_num(px(x))},{_svg_num(py(m))}" for x, m, g in zip(xs, mean, ok) if g]
        parts.append(f'<polygon points="{" ".join(upper + lower[::-1])}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        parts.append(f'<polyline points="{" ".join(line)}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * k}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [[str(h) for h in header]] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4g}"
    return str(v)


# -- subcommands --------------------------------------------------------------

def cmd_run(args) -> int:
    spec = load_spec(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else spec.seeds
    out = Path(args.out or spec.out_dir or "runs")
    jobs = [(arm_configs(spec, s), str(out), None) for s in seeds]
    results = run_jobs(jobs, worker_count(args.workers))
    for s in seeds:
        for name, r in results[s].items():
            summ = r["summary"]
            print(f"{name} seed={s} test_err={_cell(summ['final_test_err'])} "
                  f"epsilon={_cell(summ['final_epsilon'])} -> {out / name / f'seed_{s}'}")
    return EXIT_OK


def compare(spec: ExperimentSpec, seeds: list[int], out: Path, workers: int = 1) -> dict:
    if len(spec.arms) < 2:
        raise ConfigError("compare needs at least two [arm ...] sections", where=spec.source)
    check_paired(spec)
    baseline = spec.baseline or next(iter(spec.arms))
    if baseline not in spec.arms:
        raise ConfigError(f"baseline arm {baseline!r} is not defined", where="[run] baseline")
    jobs = [(arm_configs(spec, s), str(out), True) for s in seeds]
    results = run_jobs(jobs, workers)

    report = {"baseline": baseline, "seeds": seeds, "arms": {}}
    q_series, h_series = {}, {}
    for arm in spec.arms:
        if arm == baseline:
            continue
        report["arms"][arm] = paired_differences(results, arm, baseline)
        steps, qm, qs = curve_differences(results, arm, baseline, "label_quality")
        _, hm, hs = curve_differences(results, arm, baseline, "mean_entropy")
        q_series[f"{arm} - {baseline}"] = (qm, qs)
        h_series[f"{arm} - {baseline}"] = (hm, hs)
        report["arms"][arm]["curves"] = {
            "step": steps, "label_quality_mean": qm.tolist(), "label_quality_std": qs.tolist(),
            "mean_entropy_mean": hm.tolist(), "mean_entropy_std": hs.tolist(),
        }
    out.mkdir(parents=True, exist_ok=True)
    if q_series:
        (out / "quality_diff.svg").write_text(
            line_plot_svg("Label quality difference", steps, q_series, "Q difference"), encoding="utf-8")
        (out / "entropy_diff.svg").write_text(
            line_plot_svg("Prediction entropy difference", steps, h_series, "entropy difference (nats)"),
            encoding="utf-8")
    (out / "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    header = ["arm", "d_error mean", "d_error std", "d_Q mean", "d_Q std", "d_entropy mean", "d_entropy std"]
    rows = []
    for arm, r in report["arms"].items():
        rows.append([arm] + [r[f][k] for f in COMPARE_FIELDS for k in ("mean", "std")])
    report["table"] = format_table(header, rows)
    (out / "compare.txt").write_text(f"baseline: {baseline}\n" + report["table"], encoding="utf-8")
    return report


def cmd_compare(args) -> int:
    spec = load_spec(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else spec.seeds
    out = Path(args.out or spec.out_dir or "compare")
    report = compare(spec, seeds, out, worker_count(args.workers))
    print(f"baseline: {report['baseline']}")
    print(report["table"], end="")
    return EXIT_OK


GRID_TABLE_TAIL = ["Val. error", "Test error", "Avg. learned ε", "% of Avg. Inter-Image Distance"]


def gridsearch(spec: ExperimentSpec, seeds: list[int], out: Path, workers: int = 1) -> dict:
    if not spec.grid or any(len(v) == 0 for v in spec.grid.values()):
        raise ConfigError("gridsearch needs a non-empty [grid] section", where=spec.source)
    bad = sorted(set(spec.grid) & set(SPLIT_KEYS))
    if bad:
        raise ConfigError("grid axes may not change the data or split", where=f"[grid] {bad[0]}")
    axes = list(spec.grid)
    cells = [dict(zip(axes, combo)) for combo in itertools.product(*(spec.grid[a] for a in axes))]
    extra = {}
    if not spec.base.get("val_fraction"):
        extra["val_fraction"] = 0.1
    arms = {f"cell_{k}": cell for k, cell in enumerate(cells)}
    jobs = []
    for s in seeds:
        cfgs = {name: spec.base_config(seed=s, **{**extra, **cell}) for name, cell in arms.items()}
        jobs.append((cfgs, str(out), False))
    results = run_jobs(jobs, workers)

    rows = []
    for name, cell in arms.items():
        summ = [results[s][name]["summary"] for s in seeds]
        eps = float(np.mean([x["final_epsilon"] for x in summ]))
        pct = float(np.mean([x["final_eps_pct"] for x in summ]))
        rows.append({
            "cell": name, **cell,
            "val_err": float(np.mean([x["val_err"] for x in summ])),
            "test_err": float(np.mean([x["final_test_err"] for x in summ])),
            "epsilon": eps, "eps_pct": pct,
        })
    best = min(rows, key=lambda r: (r["val_err"], r["cell"]))
    header = axes + GRID_TABLE_TAIL
    body = [[r[a] for a in axes] + [r["val_err"], r["test_err"], r["epsilon"], r["eps_pct"]] for r in rows]
    table = format_table(header, body)
    best_table = format_table(header, [[best[a] for a in axes] + [best["val_err"], best["test_err"],
                                                                   best["epsilon"], best["eps_pct"]]])
    out.mkdir(parents=True, exist_ok=True)
    report = {"axes": axes, "seeds": seeds, "cells": rows, "best": best}
    (out / "gridsearch.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "gridsearch.txt").write_text("all cells\n" + table + "\nbest settings\n" + best_table, encoding="utf-8")
    report["table"], report["best_table"] = table, best_table
    return report


def cmd_gridsearch(args) -> int:
    spec = load_spec(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else spec.seeds
    out = Path(args.out or spec.out_dir or "gridsearch")
    report = gridsearch(spec, seeds, out, worker_count(args.workers))
    print(report["table"], end="")
    print("best settings")
    print(report["best_table"], end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_spec(args.config).base_config() if args.config else RunConfig()
    out = Path(args.out or "data")
    seeds = parse_seeds(args.seeds) if args.seeds else [cfg.data_seed]
    out.mkdir(parents=True, exist_ok=True)
    for s in seeds:
        c = cfg.replace(data_seed=s, val_fraction=0.0, rescale=False)
        if c.dataset not in ("two_moons", "blobs"):
            raise ConfigError(f"gen-data only knows the bundled generators, not {c.dataset!r}", where="dataset")
        train, test, _ = trainer.load_datasets(c)
        for part, ds in (("train", train), ("test", test)):
            path = data_mod.write_csv(ds, out / f"{c.dataset}_seed{s}_{part}.csv")
            print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structreg", description="Semi-supervised structural regularization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, need_config, help_text in (
        ("run", cmd_run, True, "train every arm of a config for each seed"),
        ("compare", cmd_compare, True, "paired comparison of arms against a baseline arm"),
        ("gridsearch", cmd_gridsearch, True, "grid search selected by validation error"),
        ("gen-data", cmd_gen_data, False, "write the bundled synthetic datasets to CSV"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=need_config, help="INI experiment config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seeds", help='seed list, e.g. "0,1,2" or "0-4"')
        p.add_argument("--workers", type=int, default=None, help="parallel worker processes (default 1)")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, ArithmeticError) as exc:
        # data problems found only once a run starts (bad CSV, too many labels, ...)
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
