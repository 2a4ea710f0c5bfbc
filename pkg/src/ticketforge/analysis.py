"""Ticket verdicts, transfer matrices, mask similarity and report files.

A TicketReport is a flat list of per-(source, target, sparsity, seed)
records; aggregation happens at read time.  Reports serialize to a CSV
table with a schema line plus a JSON summary carrying the same records and
the per-cell means.  Every record carries provenance: the configuration
hash and the content hash of the mask it evaluated.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .data import TaskSpec
from .errors import ConfigError, MaskError
from .masks import Mask
from .models import PRETRAIN
from .params import ParamStore
from .pruning import evaluate_ticket, random_prune
from .rng import derive_seed
from .training import TrainBudget

REPORT_SCHEMA = "ticketforge.report.v1"
OVERLAP_SCHEMA = "ticketforge.overlap.v1"

METHODS = ("imp", "random", "shuffled_init", "textonly_init", "pretext_imp",
           "dense", "adv_imp")

RELAXED_PERCENT = 99.0


def relaxed_winning(ticket_acc: float, full_acc: float, p: float) -> bool:
    """True iff the ticket keeps at least p percent of the full accuracy."""
    return ticket_acc >= (p / 100.0) * full_acc


def overlap_ratio(m_i: Mask, m_j: Mask) -> float:
    """100 * |kept_i intersect kept_j| / |kept_i union kept_j|.

    Both masks all-zero is a vacuous identity and scores 100.
    """
    if not m_i.same_layout(m_j):
        raise MaskError("overlap_ratio needs identical mask layouts")
    a = m_i.flat()
    b = m_j.flat()
    inter = float(np.minimum(a, b).sum())
    union = float(np.maximum(a, b).sum())
    if union == 0:
        return 100.0
    return 100.0 * inter / union


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

def _q(value: float, places: int = 4) -> float:
    return float(round(float(value), places))


@dataclass(frozen=True)
class TicketRecord:
    source_task: str
    target_task: str
    sparsity: float
    seed: int
    method: str
    accuracy: float
    dense_reference_accuracy: float
    relaxed_verdict: bool
    config_hash: str = ""
    mask_hash: str = ""

    def key(self):
        return (self.source_task, self.target_task, self.sparsity,
                self.method, self.seed)


def make_record(source: str, target: str, sparsity: float, seed: int,
                method: str, accuracy: float, dense_ref: float,
                config_hash: str = "", mask_hash: str = "") -> TicketRecord:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    accuracy = _q(accuracy)
    dense_ref = _q(dense_ref)
    return TicketRecord(
        source_task=source, target_task=target, sparsity=_q(sparsity),
        seed=int(seed), method=method, accuracy=accuracy,
        dense_reference_accuracy=dense_ref,
        relaxed_verdict=relaxed_winning(accuracy, dense_ref, RELAXED_PERCENT),
        config_hash=config_hash, mask_hash=mask_hash)


@dataclass
class TicketReport:
    records: list = field(default_factory=list)

    def add(self, record: TicketRecord):
        self.records.append(record)

    def extend(self, records: Iterable[TicketRecord]):
        self.records.extend(records)

    def sorted_records(self) -> list:
        return sorted(self.records, key=TicketRecord.key)

    def select(self, **fields) -> list:
        out = self.records
        for name, value in fields.items():
            out = [r for r in out if getattr(r, name) == value]
        return out

    def mean_accuracy(self, **fields) -> float:
        hits = self.select(**fields)
        if not hits:
            raise KeyError(f"no records match {fields}")
        return float(np.mean([r.accuracy for r in hits]))

    def cells(self) -> list:
        """Aggregate mean/std/count per (source, target, sparsity, method)."""
        groups: dict = {}
        for r in self.records:
            key = (r.source_task, r.target_task, r.sparsity, r.method)
            groups.setdefault(key, []).append(r.accuracy)
        out = []
        for key in sorted(groups):
            accs = groups[key]
            out.append({"source_task": key[0], "target_task": key[1],
                        "sparsity": key[2], "method": key[3],
                        "mean_accuracy": _q(float(np.mean(accs))),
                        "std_accuracy": _q(float(np.std(accs))),
                        "runs": len(accs)})
        return out


@dataclass
class OverlapMatrix:
    tasks: list
    values: np.ndarray        # square, percentages in [0, 100]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.tasks)
        if self.values.shape != (n, n):
            raise ConfigError("overlap matrix must be square over the tasks")


def mask_overlap_matrix(masks: dict[str, Mask],
                        require_common_sparsity: bool = True) -> OverlapMatrix:
    """Pairwise overlap of kept-weight sets, at one common sparsity.

    Mixed sparsities are refused rather than silently normalized; the
    comparison is only meaningful on a fixed budget.
    """
    tasks = sorted(masks)
    if require_common_sparsity and len(tasks) > 1:
        zeros = {masks[t].zeros for t in tasks}
        if len(zeros) != 1:
            raise ConfigError(
                "masks have different sparsities; overlap comparison refused")
    n = len(tasks)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            values[i, j] = values[j, i] = overlap_ratio(masks[tasks[i]],
                                                        masks[tasks[j]])
    return OverlapMatrix(tasks=tasks, values=values)


# ---------------------------------------------------------------------------
# grid experiments
# ---------------------------------------------------------------------------

def _dense_reference(init: ParamStore, task: TaskSpec, budget: TrainBudget,
                     seed: int, cache: dict, train_data=None, dev_data=None) -> float:
    key = (task.task_id, seed)
    if key not in cache:
        ones = Mask.ones_like(init)
        cache[key] = evaluate_ticket(ones, init, task, budget, seed,
                                     train_data=train_data,
                                     dev_data=dev_data).accuracy
    return cache[key]


def transfer_matrix(sources: dict[str, dict[float, Mask]],
                    targets: Sequence[TaskSpec], init: ParamStore,
                    budget: TrainBudget, seeds: Sequence[int],
                    include_random: bool = True, config_hash: str = "",
                    data=None) -> TicketReport:
    """Evaluate every source mask on every target task from theta_0.

    ``sources`` maps source name -> {sparsity -> mask}; all sources must
    cover the same sparsity grid.  A random-pruning control row is added at
    every grid sparsity unless disabled.  ``data`` optionally maps task_id
    -> (train_data, dev_data) to pin datasets.
    """
    grids = {name: tuple(sorted(level.keys())) for name, level in sources.items()}
    grid_set = set(grids.values())
    if len(grid_set) > 1:
        raise ConfigError(f"sources disagree on the sparsity grid: {grids}")
    grid = sorted(next(iter(grid_set))) if grid_set else []

    sources = dict(sources)
    if include_random and grid:
        for s in grid:
            sources.setdefault("random", {})
        for s in grid:
            sources["random"][s] = random_prune(init, s,
                                                derive_seed(0, "rp-control", s))

    report = TicketReport()
    dense_cache: dict = {}
    for target in targets:
        train_data, dev_data = (data or {}).get(target.task_id, (None, None))
        for seed in seeds:
            dense = _dense_reference(init, target, budget, seed, dense_cache,
                                     train_data, dev_data)
            for source_name in sorted(sources):
                for s in grid:
                    m = sources[source_name][s]
                    acc = evaluate_ticket(m, init, target, budget, seed,
                                          train_data=train_data,
                                          dev_data=dev_data).accuracy
                    method = ("random" if source_name == "random" else
                              "pretext_imp" if source_name == PRETRAIN else "imp")
                    report.add(make_record(source_name, target.task_id, s,
                                           seed, method, acc, dense,
                                           config_hash, m.content_hash()))
    return report


def sparsity_sweep(wb, task: TaskSpec, grid: Sequence[float],
                   methods: Sequence[str], seeds: Sequence[int],
                   config_hash: str = "") -> TicketReport:
    """Accuracy-vs-sparsity curves for one task.

    The IMP curve reuses the per-round masks of a single run (round k gives
    sparsity 1 - 0.9^k); random masks are drawn at the matching exact
    sparsities so the comparison is paired.  A dense entry at sparsity 0 is
    emitted per method and seed.
    """
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    grid = sorted(set(float(s) for s in grid))
    if any(not (0.0 < s < 1.0) for s in grid):
        raise ConfigError("sparsity grid must lie inside (0, 1)")
    init = wb.theta0()
    budget = wb.task_budget
    train_data, dev_data = wb.train_data(task), wb.dev_data(task)
    report = TicketReport()
    dense_cache: dict = {}

    imp_run = wb.imp_result(task) if {"imp", "shuffled_init",
                                      "textonly_init"} & set(methods) else None
    pretext_run = wb.imp_result(PRETRAIN) if "pretext_imp" in methods else None

    for seed in seeds:
        dense = _dense_reference(init, task, budget, seed, dense_cache,
                                 train_data, dev_data)
        for method in methods:
            report.add(make_record(task.task_id, task.task_id, 0.0, seed,
                                   method, dense, dense, config_hash, ""))
            for s in grid:
                if method in ("imp", "shuffled_init", "textonly_init"):
                    mask = imp_run.mask_at_sparsity(s)
                elif method == "pretext_imp":
                    mask = pretext_run.mask_at_sparsity(s)
                elif method == "random":
                    ref = imp_run.mask_at_sparsity(s) if imp_run else None
                    exact = ref.sparsity if ref else s
                    mask = random_prune(init, exact,
                                        derive_seed(seed, "rp", task.task_id, s))
                else:
                    raise ConfigError(f"method {method!r} not valid in a sweep")
                start = init
                if method == "shuffled_init":
                    start = wb.theta0_shuffled()
                elif method == "textonly_init":
                    start = wb.theta0_textonly()
                acc = evaluate_ticket(mask, start, task, budget, seed,
                                      train_data=train_data,
                                      dev_data=dev_data).accuracy
                report.add(make_record(task.task_id, task.task_id, s, seed,
                                       method, acc, dense, config_hash,
                                       mask.content_hash()))
    return report


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("source_task", "target_task", "sparsity", "seed", "method",
                  "accuracy", "dense_reference_accuracy", "relaxed_verdict",
                  "config_hash", "mask_hash")


def report_emit(report: Union[TicketReport, OverlapMatrix],
                path) -> list[Path]:
    """Write the CSV table and its JSON summary; returns the written paths."""
    path = Path(path)
    if isinstance(report, OverlapMatrix):
        return _emit_overlap(report, path)
    csv_path = path if path.suffix == ".csv" else path.with_suffix(".csv")
    json_path = csv_path.with_suffix(".json")
    lines = [f"# schema={REPORT_SCHEMA}", ",".join(REPORT_COLUMNS)]
    for r in report.sorted_records():
        lines.append(",".join([
            r.source_task, r.target_task, f"{r.sparsity:.4f}", str(r.seed),
            r.method, f"{r.accuracy:.4f}", f"{r.dense_reference_accuracy:.4f}",
            "true" if r.relaxed_verdict else "false", r.config_hash,
            r.mask_hash]))
    csv_path.write_text("\n".join(lines) + "\n", encoding="ascii")
    summary = {"schema": REPORT_SCHEMA,
               "records": [asdict(r) for r in report.sorted_records()],
               "cells": report.cells()}
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                         encoding="ascii")
    return [csv_path, json_path]


def _emit_overlap(matrix: OverlapMatrix, path: Path) -> list[Path]:
    csv_path = path if path.suffix == ".csv" else path.with_suffix(".csv")
    json_path = csv_path.with_suffix(".json")
    lines = [f"# schema={OVERLAP_SCHEMA}", ",".join(["task"] + matrix.tasks)]
    for i, task in enumerate(matrix.tasks):
        row = [task] + [f"{v:.4f}" for v in matrix.values[i]]
        lines.append(",".join(row))
    csv_path.write_text("\n".join(lines) + "\n", encoding="ascii")
    summary = {"schema": OVERLAP_SCHEMA, "tasks": matrix.tasks,
               "values": [[_q(v) for v in row] for row in matrix.values]}
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                         encoding="ascii")
    return [csv_path, json_path]


def parse_report(path) -> TicketReport:
    """Read back a CSV written by report_emit."""
    path = Path(path)
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or not lines[0].startswith("# schema="):
        raise ConfigError(f"{path} is not a report file")
    schema = lines[0].split("=", 1)[1]
    if schema != REPORT_SCHEMA:
        raise ConfigError(f"unsupported report schema {schema!r}")
    reader = csv.DictReader(lines[1:])
    report = TicketReport()
    for row in reader:
        report.add(TicketRecord(
            source_task=row["source_task"], target_task=row["target_task"],
            sparsity=float(row["sparsity"]), seed=int(row["seed"]),
            method=row["method"], accuracy=float(row["accuracy"]),
            dense_reference_accuracy=float(row["dense_reference_accuracy"]),
            relaxed_verdict=row["relaxed_verdict"] == "true",
            config_hash=row["config_hash"], mask_hash=row["mask_hash"]))
    return report


def parse_overlap(path) -> OverlapMatrix:
    path = Path(path)
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != f"# schema={OVERLAP_SCHEMA}":
        raise ConfigError(f"{path} is not an overlap file")
    header = lines[1].split(",")[1:]
    values = [[float(v) for v in line.split(",")[1:]] for line in lines[2:]]
    return OverlapMatrix(tasks=header, values=np.array(values))
