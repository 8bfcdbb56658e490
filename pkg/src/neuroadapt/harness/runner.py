"""Experiment orchestration: the (suite x encoder x seed x batch-size x
method) grid with matched No-TTA baselines, resumable JSONL output.

Per-run randomness is derived from the plan seed and the run coordinates,
so adding grid points never changes existing runs.  Every TTA run shares
its checkpoint and batch partition with the No-TTA run of the same cell;
the report stage relies on that to compute deltas.  Failures become
failed records, not aborts.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__
from ..errors import NeuroAdaptError
from ..finetune import FinetuneConfig, train_head
from ..metrics import compute_report
from ..model import EncoderSpec, build_encoder, load_checkpoint, save_checkpoint
from ..rng import Rng
from ..shiftbench.data import read_dataset
from ..shiftbench.suites import generate_suite
from ..tta import run_adaptation
from .config import ExperimentPlan

THREADS_ENV = "NEUROADAPT_THREADS"


@dataclass
class RunRecord:
    suite: str
    encoder: str
    method: str
    batch_size: int
    seed: int
    status: str = "ok"
    metrics: Optional[dict] = None
    checkpoint_hash: Optional[str] = None
    encoder_fingerprint: Optional[str] = None
    wall_time_s: Optional[float] = None
    library_version: str = __version__
    config: Optional[dict] = None
    error: Optional[str] = None

    def key(self) -> str:
        return run_key(self.suite, self.encoder, self.method,
                       self.batch_size, self.seed)

    def to_json_line(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def run_key(suite, encoder, method, batch_size, seed) -> str:
    return f"{suite}|{encoder}|{method}|bs{batch_size}|seed{seed}"


def _resolve_encoder_spec(template: dict, channels: int, samples: int) -> EncoderSpec:
    doc = dict(template)
    doc.setdefault("channels", channels)
    doc.setdefault("samples", samples)
    return EncoderSpec(**doc)


@dataclass
class _Cell:
    suite_name: str
    encoder_key: str
    seed: int
    batch_size: int
    method: str

    def key(self) -> str:
        return run_key(self.suite_name, self.encoder_key, self.method,
                       self.batch_size, self.seed)


def _execute_cell(plan, cell: _Cell, checkpoint, encoder, target_batches,
                  y_true, binary, plan_snapshot, traces_dir) -> RunRecord:
    started = time.perf_counter()
    try:
        config = plan.adapter_config(cell.method)
        result = run_adaptation(config, checkpoint, encoder, target_batches,
                                collect_trace=plan.trace)
        if encoder.fingerprint() != checkpoint.encoder_fingerprint:
            raise NeuroAdaptError("encoder changed during adaptation")
        if traces_dir is not None:
            trace_path = traces_dir / f"{cell.key().replace('|', '_')}.jsonl"
            with open(trace_path, "w") as fh:
                for entry in result.trace:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        report = compute_report(y_true, result.predictions, result.probs,
                                binary=binary)
        return RunRecord(
            suite=cell.suite_name, encoder=cell.encoder_key,
            method=cell.method, batch_size=cell.batch_size, seed=cell.seed,
            status="ok", metrics=report.to_dict(),
            checkpoint_hash=checkpoint.content_hash(),
            encoder_fingerprint=checkpoint.encoder_fingerprint,
            wall_time_s=round(time.perf_counter() - started, 6),
            config=plan_snapshot)
    except Exception as exc:  # failures are data, the grid continues
        return RunRecord(
            suite=cell.suite_name, encoder=cell.encoder_key,
            method=cell.method, batch_size=cell.batch_size, seed=cell.seed,
            status="failed", error=f"{type(exc).__name__}: {exc}",
            wall_time_s=round(time.perf_counter() - started, 6),
            config=plan_snapshot)


def _train_or_load_checkpoint(plan, suite_name, encoder_spec, study_seed,
                              source, ckpt_dir, resume):
    encoder = build_encoder(encoder_spec)
    path = ckpt_dir / f"{suite_name}__{encoder_spec.key()}__s{study_seed}.ckpt"
    if resume and path.exists():
        checkpoint = load_checkpoint(path)
        if checkpoint.encoder_fingerprint == encoder.fingerprint():
            return encoder, checkpoint
    train_seed = Rng(plan.base_seed).derive_seed(
        f"train|{suite_name}|{encoder_spec.key()}", study_seed)
    config = FinetuneConfig(task=source.manifest.task, seed=train_seed,
                            **plan.finetune)
    checkpoint, _ = train_head(config, encoder, source)
    save_checkpoint(path, checkpoint)
    return encoder, checkpoint


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _domain_shape(entry) -> tuple:
    """(name, channels, samples) without materializing any data."""
    if isinstance(entry, dict):
        manifest = read_dataset(entry["source"]).manifest
        return entry["name"], manifest.channels, manifest.samples
    c, t = entry.record_shape
    return entry.name, c, t


def _read_complete_records(path: Path) -> dict:
    """Parse existing records; drop a trailing partial line from a crash
    and rewrite the file so appends stay well-formed."""
    done, good_lines = {}, []
    dirty = False
    raw = path.read_text()
    for line in raw.splitlines():
        if not line.strip():
            continue
        try:
            rec = RunRecord.from_json_line(line)
        except (json.JSONDecodeError, TypeError):
            dirty = True
            continue
        done[rec.key()] = rec
        good_lines.append(line)
    if dirty or (raw and not raw.endswith("\n")):
        path.write_text("".join(l + "\n" for l in good_lines))
    return done


@dataclass
class RunSummary:
    records_path: Path
    n_total: int
    n_executed: int
    n_failed: int
    records: list


def run_experiment(plan: ExperimentPlan, resume: bool = False,
                   log=lambda msg: None) -> RunSummary:
    out_dir = Path(plan.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    traces_dir = None
    if plan.trace:
        traces_dir = out_dir / "traces"
        traces_dir.mkdir(exist_ok=True)
    records_path = out_dir / "runs.jsonl"
    plan_snapshot = plan.to_dict()
    (out_dir / "plan.resolved.json").write_text(
        json.dumps(plan_snapshot, indent=1, sort_keys=True) + "\n")

    done = {}
    if resume and records_path.exists():
        done = _read_complete_records(records_path)
    else:
        records_path.write_text("")

    n_executed = 0
    all_records = []
    workers = _max_workers()
    domains = list(plan.suites) + list(plan.datasets)

    with open(records_path, "a") as out:
        def emit(record: RunRecord):
            out.write(record.to_json_line() + "\n")
            out.flush()

        for entry in domains:
            for study_seed in plan.seeds:
                name, channels, samples = _domain_shape(entry)
                encoder_specs = [
                    _resolve_encoder_spec(t, channels, samples)
                    for t in plan.encoders
                ]
                groups = []  # (spec, cells in deterministic order)
                any_todo = False
                for spec in encoder_specs:
                    cells = [
                        _Cell(name, spec.key(), study_seed, bs, m)
                        for bs in plan.batch_sizes
                        for m in plan.effective_methods
                    ]
                    if any(c.key() not in done for c in cells):
                        any_todo = True
                    groups.append((spec, cells))
                if not any_todo:
                    for _, cells in groups:
                        all_records.extend(done[c.key()] for c in cells)
                    continue

                def fail_group(cells, todo, exc):
                    for c in cells:
                        if c in todo:
                            record = RunRecord(
                                suite=c.suite_name, encoder=c.encoder_key,
                                method=c.method, batch_size=c.batch_size,
                                seed=c.seed, status="failed",
                                error=f"{type(exc).__name__}: {exc}",
                                config=plan_snapshot)
                            emit(record)
                            all_records.append(record)
                        else:
                            all_records.append(done[c.key()])

                try:
                    _, source, target = _load_domain(plan, entry, study_seed)
                except Exception as exc:  # data failures fail every cell
                    for _, cells in groups:
                        todo = [c for c in cells if c.key() not in done]
                        fail_group(cells, todo, exc)
                        n_executed += len(todo)
                    continue
                binary = target.manifest.task.is_binary
                for spec, cells in groups:
                    todo = [c for c in cells if c.key() not in done]
                    if not todo:
                        all_records.extend(done[c.key()] for c in cells)
                        continue
                    log(f"[{name} | {spec.key()} | seed {study_seed}] "
                        f"{len(todo)} runs")
                    try:
                        encoder, checkpoint = _train_or_load_checkpoint(
                            plan, name, spec, study_seed, source, ckpt_dir,
                            resume)
                    except Exception as exc:  # stage-1 failures likewise
                        fail_group(cells, todo, exc)
                        n_executed += len(todo)
                        continue
                    batches_by_size = {
                        bs: list(target.batches("test", bs))
                        for bs in sorted({c.batch_size for c in todo})
                    }
                    y_true_by_size = {
                        bs: np.concatenate([b.labels for b in batches])
                        for bs, batches in batches_by_size.items()
                    }

                    def run_one(c: _Cell) -> RunRecord:
                        return _execute_cell(
                            plan, c, checkpoint, encoder,
                            batches_by_size[c.batch_size],
                            y_true_by_size[c.batch_size], binary,
                            plan_snapshot, traces_dir)

                    if workers > 1 and len(todo) > 1:
                        with ThreadPoolExecutor(max_workers=workers) as pool:
                            futures = {c.key(): pool.submit(run_one, c)
                                       for c in todo}
                    else:
                        futures = None
                    fresh = {}
                    for c in todo:
                        fresh[c.key()] = (futures[c.key()].result()
                                          if futures else run_one(c))
                    # emit in grid order so two identical runs produce
                    # byte-identical files
                    for c in cells:
                        if c.key() in fresh:
                            record = fresh[c.key()]
                            emit(record)
                            n_executed += 1
                            all_records.append(record)
                        else:
                            all_records.append(done[c.key()])

    n_failed = sum(1 for r in all_records if r.status == "failed")
    if len(all_records) != plan.grid_size():
        raise NeuroAdaptError(
            f"grid incomplete: {len(all_records)} records for a "
            f"{plan.grid_size()}-cell plan")
    return RunSummary(records_path=records_path, n_total=len(all_records),
                      n_executed=n_executed, n_failed=n_failed,
                      records=all_records)


def train_checkpoints(plan: ExperimentPlan, log=lambda msg: None) -> list:
    """Stage 1 only: make sure every (suite, encoder, seed) checkpoint
    exists under the plan's output directory; returns the paths."""
    out_dir = Path(plan.output_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for entry in list(plan.suites) + list(plan.datasets):
        for study_seed in plan.seeds:
            name, channels, samples = _domain_shape(entry)
            specs = [_resolve_encoder_spec(t, channels, samples)
                     for t in plan.encoders]
            missing = [
                s for s in specs
                if not (ckpt_dir / f"{name}__{s.key()}__s{study_seed}.ckpt").exists()
            ]
            source = None
            if missing:
                _, source, _ = _load_domain(plan, entry, study_seed)
            for spec in specs:
                path = ckpt_dir / f"{name}__{spec.key()}__s{study_seed}.ckpt"
                if spec in missing:
                    log(f"training {path.name}")
                    _train_or_load_checkpoint(plan, name, spec, study_seed,
                                              source, ckpt_dir, resume=True)
                paths.append(path)
    return paths


def _load_domain(plan: ExperimentPlan, entry, study_seed: int):
    """Materialize (name, source, target) for a suite or dataset entry."""
    if isinstance(entry, dict):  # external dataset paths: fixed data
        source = read_dataset(entry["source"]).load()
        target = read_dataset(entry["target"]).load()
        return entry["name"], source, target
    data_seed = Rng(plan.base_seed).derive_seed(
        f"data|{entry.name}|{entry.seed}", study_seed)
    source, target = generate_suite(replace(entry, seed=data_seed))
    return entry.name, source, target


def read_records(path) -> list:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(RunRecord.from_json_line(line))
    return records
