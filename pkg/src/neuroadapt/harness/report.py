"""Stage 3 reporting: matched-baseline deltas, pooled aggregation and
table emission.

Deltas are computed per (seed, batch-size) cell against the No-TTA record
sharing the same suite, encoder, seed, batch partition and checkpoint
hash, then pooled over all cells (mean and n-1 standard deviation, single
cells report std 0).  A stratified per-batch-size view is available
behind a flag.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from ..errors import ReportError
from ..metrics import METRIC_NAMES, aggregate, delta

SIGNED_FMT = "{:+.3f} ± {:.3f}"
PLAIN_FMT = "{:.3f} ± {:.3f}"


def _records_as_dicts(records) -> list:
    out = []
    for r in records:
        out.append(r if isinstance(r, dict) else r.__dict__)
    return out


def _match_baselines(records):
    """Map every ok TTA record to its matched No-TTA record; raise on
    orphans (missing baseline or checkpoint mismatch)."""
    baselines = {}
    for r in records:
        if r["method"] == "no_tta" and r["status"] == "ok":
            key = (r["suite"], r["encoder"], r["seed"], r["batch_size"])
            baselines[key] = r
    pairs = []
    orphans = []
    for r in records:
        if r["method"] == "no_tta" or r["status"] != "ok":
            continue
        key = (r["suite"], r["encoder"], r["seed"], r["batch_size"])
        base = baselines.get(key)
        if base is None or base["checkpoint_hash"] != r["checkpoint_hash"]:
            orphans.append(
                f"{r['suite']}|{r['encoder']}|{r['method']}"
                f"|bs{r['batch_size']}|seed{r['seed']}")
            continue
        pairs.append((r, base))
    if orphans:
        raise ReportError("TTA runs without a matched No-TTA baseline: "
                          + ", ".join(sorted(orphans)))
    return pairs


def _pool(cells_by_group):
    out = {}
    for group, by_metric in cells_by_group.items():
        stats = {}
        for metric, cells in by_metric.items():
            if not cells:
                continue
            values = [v for _, v in cells]
            mean, std = aggregate(values)
            stats[metric] = {"mean": mean, "std": std, "n": len(values),
                             "cells": sorted(cells)}
        out[group] = stats
    return out


def build_report(records, per_batch_size: bool = False) -> dict:
    """Aggregate run records into delta and absolute statistics."""
    records = _records_as_dicts(records)
    if not records:
        raise ReportError("no run records to report")
    pairs = _match_baselines(records)

    delta_cells = {}
    for rec, base in pairs:
        group = (rec["suite"], rec["encoder"], rec["method"])
        by_metric = delta_cells.setdefault(
            group, {m: [] for m in METRIC_NAMES})
        for metric in METRIC_NAMES:
            a, b = rec["metrics"].get(metric), base["metrics"].get(metric)
            if a is None or b is None:
                continue
            cell_id = f"seed{rec['seed']}/bs{rec['batch_size']}"
            by_metric[metric].append((cell_id, delta(a, b)))

    absolute_cells = {}
    for rec in records:
        if rec["status"] != "ok":
            continue
        group = (rec["suite"], rec["encoder"], rec["method"])
        by_metric = absolute_cells.setdefault(
            group, {m: [] for m in METRIC_NAMES})
        for metric in METRIC_NAMES:
            value = rec["metrics"].get(metric)
            if value is None:
                continue
            cell_id = f"seed{rec['seed']}/bs{rec['batch_size']}"
            by_metric[metric].append((cell_id, float(value)))

    report = {
        "aggregation": {
            "std_divisor": "n-1",
            "pooled_over": ["seed", "batch_size"],
            "single_cell_std": 0.0,
        },
        "n_records": len(records),
        "n_failed": sum(1 for r in records if r["status"] != "ok"),
        "delta": _nest(_pool(delta_cells)),
        "absolute": _nest(_pool(absolute_cells)),
    }
    if per_batch_size:
        strat = {}
        for rec, base in pairs:
            group = (rec["suite"], rec["encoder"], rec["method"],
                     f"bs{rec['batch_size']}")
            by_metric = strat.setdefault(group, {m: [] for m in METRIC_NAMES})
            for metric in METRIC_NAMES:
                a, b = rec["metrics"].get(metric), base["metrics"].get(metric)
                if a is None or b is None:
                    continue
                by_metric[metric].append((f"seed{rec['seed']}", delta(a, b)))
        report["delta_by_batch_size"] = _nest(_pool(strat))
    return report


def _nest(pooled: dict) -> dict:
    nested = {}
    for group, stats in pooled.items():
        node = nested
        for part in group[:-1]:
            node = node.setdefault(str(part), {})
        node[str(group[-1])] = stats
    return nested


def _iter_groups(nested, prefix=()):
    if nested and all(isinstance(v, dict) and "mean" in v
                      for v in nested.values()):
        yield prefix, nested
        return
    for key, value in nested.items():
        yield from _iter_groups(value, prefix + (key,))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_report(records, out_dir, per_batch_size: bool = False) -> dict:
    """Write delta/absolute CSV tables plus a raw JSON summary; returns the
    summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = build_report(records, per_batch_size=per_batch_size)

    def rows_from(section, fmt):
        rows = []
        for group, stats in sorted(_iter_groups(section)):
            n = max((s["n"] for s in stats.values()), default=0)
            row = list(group) + [n]
            for metric in METRIC_NAMES:
                s = stats.get(metric)
                row.append(fmt.format(s["mean"], s["std"]) if s else "")
            rows.append(row)
        return rows

    base_header = ["suite", "encoder", "method", "n_cells"] + list(METRIC_NAMES)
    _write_csv(out_dir / "delta_summary.csv", base_header,
               rows_from(report["delta"], SIGNED_FMT))
    _write_csv(out_dir / "absolute_summary.csv", base_header,
               rows_from(report["absolute"], PLAIN_FMT))
    if per_batch_size:
        header = ["suite", "encoder", "method", "batch_size", "n_cells"] \
            + list(METRIC_NAMES)
        _write_csv(out_dir / "delta_by_batch_size.csv", header,
                   rows_from(report["delta_by_batch_size"], SIGNED_FMT))
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return report
