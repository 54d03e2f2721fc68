"""Command-line entry point: ``pst run | report | plot``.

Exit codes: 0 success, 1 configuration error, 2 any other failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint, train_config_to_dict
from .config import OUTPUT_ROOT_ENV, dump_config, load_config
from .errors import ConfigError, ContractError, PSTError
from .flops import __doc__ as FLOPS_MODEL
from .metrics import MetricsFile, read_metrics, write_metrics
from .training import run_strategy

log = logging.getLogger("pst")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


# ---------------------------------------------------------------------------
# run


def cmd_run(config_path, resume: bool = False, stop_after: int | None = None,
            out=None) -> Path:
    """Train every seed of a config; returns the metrics file path."""
    out = out or sys.stdout
    cfg = load_config(config_path)
    root = cfg.output
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.resolved.yaml")
    runs = []
    for seed in cfg.seeds:
        stream = cfg.stream(seed)
        train = cfg.train_for(seed)
        ckpt = root / f"seed-{seed}" / "checkpoint.npz"
        state = None
        if resume and ckpt.exists():
            state = load_checkpoint(ckpt)
            if train_config_to_dict(state.config) != train_config_to_dict(train):
                raise ContractError(f"{ckpt}: checkpoint was written by a different configuration")
            log.info("seed %d: resuming at task %d", seed, state.next_task)
        metrics = run_strategy(stream, cfg.strategy, train, state,
                               on_task_end=lambda st, p=ckpt: save_checkpoint(st, p),
                               stop_after=stop_after)
        runs.append(metrics)
        if metrics.summaries:
            print(f"{cfg.strategy} seed={seed} tasks={len(metrics.summaries)} "
                  f"final_acc={metrics.final_accuracy:.4f}", file=out)
    meta = {"strategy": cfg.strategy, "name": cfg.name, "stream": cfg.stream_spec(),
            "class_orders": {str(s): list(cfg.stream(s).class_order) for s in cfg.seeds},
            "config": {k: v for k, v in cfg.to_dict().items() if k != "output"}}
    path = write_metrics(root / "metrics.csv", meta, runs)
    print(f"metrics: {path}", file=out)
    return path


# ---------------------------------------------------------------------------
# report


def _totals(mf: MetricsFile) -> tuple[float, float]:
    rows = mf.select("aggregate")
    upd = sum(r["upd_flops"] for r in rows)
    complete = sum(r["fwd_flops"] + r["bwd_flops"] + r["upd_flops"] for r in rows)
    return upd, complete


def build_report(files: list[MetricsFile], baseline: str | None = None) -> list[dict]:
    """One row per strategy: accuracy after each task, delta vs pst, FLOPs ratios vs baseline."""
    if not files:
        raise ContractError("report needs at least one metrics file")
    spec = files[0].meta.get("stream")
    for mf in files[1:]:
        if mf.meta.get("stream") != spec:
            raise ContractError(f"{mf.path}: task stream differs from {files[0].path}; refusing to compare")
    by_name = {mf.strategy: mf for mf in files}
    if len(by_name) != len(files):
        raise ContractError("two metrics files report the same strategy")
    if baseline is None:
        baseline = "finetune" if "finetune" in by_name else files[0].strategy
    if baseline not in by_name:
        raise ContractError(f"baseline {baseline!r} not among the reported strategies "
                            f"({', '.join(by_name)})")
    base_upd, base_complete = _totals(by_name[baseline])
    pst_final = by_name["pst"].series("single_head_acc")[-1] if "pst" in by_name else None

    table = []
    for mf in files:
        acc = mf.series("single_head_acc")
        upd, complete = _totals(mf)
        table.append({
            "strategy": mf.strategy,
            "seeds": len(mf.seeds),
            "acc_per_task": acc,
            "final_acc": acc[-1],
            "delta_vs_pst": None if pst_final is None else acc[-1] - pst_final,
            "forgetting": mf.series("forgetting")[-1],
            "first_task_multi_head": mf.series("first_task_multi_head")[-1],
            "upd_flops": upd,
            "complete_flops": complete,
            "upd_ratio": base_upd / upd if upd else float("inf"),
            "complete_ratio": base_complete / complete if complete else float("inf"),
            "baseline": baseline,
        })
    return table


def _report_columns(table):
    tasks = max(len(r["acc_per_task"]) for r in table)
    cols = ["strategy", "seeds"] + [f"acc_T{t + 1}" for t in range(tasks)]
    cols += ["delta_vs_pst", "forgetting", "first_task_multi_head", "upd_flops", "complete_flops",
             "upd_ratio", "complete_ratio"]
    return cols


def _flat(row, cols):
    out = dict(row)
    for t, a in enumerate(row["acc_per_task"]):
        out[f"acc_T{t + 1}"] = a
    return {c: out.get(c) for c in cols}


def format_report(table: list[dict]) -> str:
    cols = _report_columns(table)

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            if abs(v) >= 1e3:
                return f"{v:.3e}"
            return f"{v:+.4f}" if v < 0 else f"{v:.4f}"
        return str(v)

    rows = [[cell(_flat(r, cols)[c]) for c in cols] for r in table]
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    lines.append(f"FLOPs ratios: baseline {table[0]['baseline']} / strategy (higher = cheaper).")
    lines.append("")
    lines.append(FLOPS_MODEL.strip())
    return "\n".join(lines)


def write_report_csv(table: list[dict], path) -> Path:
    cols = _report_columns(table)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in table:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in _flat(r, cols).items()})
    return path


def cmd_report(paths, baseline: str | None = None, out_dir=None, out=None) -> list[dict]:
    from .plotting import report_figure

    out = out or sys.stdout

    files = [read_metrics(p) for p in paths]
    table = build_report(files, baseline)
    out_dir = Path(out_dir) if out_dir else _output_root() / "report"
    write_report_csv(table, out_dir / "report.csv")
    report_figure(table, out_dir / "report.svg")
    print(format_report(table), file=out)
    print(f"\nreport: {out_dir / 'report.csv'}, {out_dir / 'report.svg'}", file=out)
    return table


# ---------------------------------------------------------------------------
# plot


def cmd_plot(kind: str, metrics_path, out_path=None, out=None) -> Path:
    from .plotting import plot

    out = out or sys.stdout

    mf = read_metrics(metrics_path)
    path = Path(out_path) if out_path else Path(metrics_path).with_name(f"{kind}.svg")
    plot(kind, mf, path)
    print(f"plot: {path}", file=out)
    return path


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .plotting import KINDS

    p = argparse.ArgumentParser(prog="pst", description="Progressive segmented training experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per task")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every seed of a config")
    run.add_argument("--config", required=True, help="YAML run configuration")
    run.add_argument("--resume", action="store_true", help="continue from per-seed checkpoints")
    run.add_argument("--stop-after", type=int, metavar="N", help="stop each seed after N tasks")

    rep = sub.add_parser("report", help="compare strategies trained on the same stream")
    rep.add_argument("metrics", nargs="+")
    rep.add_argument("--baseline", help="strategy the FLOPs ratios are taken against")
    rep.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/report)")

    plot = sub.add_parser("plot", help="render one SVG figure from a metrics file")
    plot.add_argument("--kind", required=True, choices=KINDS)
    plot.add_argument("metrics")
    plot.add_argument("--out", help="SVG path (default: next to the metrics file)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cmd_run(args.config, args.resume, args.stop_after)
        elif args.command == "report":
            cmd_report(args.metrics, args.baseline, args.out)
        else:
            cmd_plot(args.kind, args.metrics, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PSTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
