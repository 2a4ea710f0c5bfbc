"""Ticket transfer across tasks and mask-similarity analysis.

Builds a small transfer matrix (two sources, two targets) plus the overlap
matrix of the per-task masks at a common sparsity.
Run:  python3 demos/05_transfer_and_overlap.py   (several minutes)
"""
from ticketforge.analysis import (mask_overlap_matrix, report_emit,
                                  transfer_matrix)
from ticketforge.experiments import Workbench
from ticketforge.models import PRETRAIN

wb = Workbench()
theta0 = wb.theta0()
targets = wb.suite()[:2]
source_ids = [targets[0].task_id, PRETRAIN]

sources = {}
for sid in source_ids:
    run = wb.imp_result(PRETRAIN if sid == PRETRAIN else targets[0])
    sources[sid] = {0.5: run.mask_at_sparsity(0.5)}

data = {t.task_id: (wb.train_data(t), wb.dev_data(t)) for t in targets}
report = transfer_matrix(sources, targets, theta0, wb.task_budget,
                         seeds=[0], data=data)
for cell in report.cells():
    print(f"{cell['source_task']:12} -> {cell['target_task']:14} "
          f"s={cell['sparsity']}: {cell['mean_accuracy']:.1f}%")
paths = report_emit(report, "demo_transfer.csv")
print("wrote:", *paths)

# per-round prune counts depend only on (total, rate, round), so masks from
# the same round share a sparsity exactly and the comparison is legal
masks = {t.task_id: wb.imp_result(t).mask_at_sparsity(0.6)
         for t in wb.suite()[:3]}
matrix = mask_overlap_matrix(masks)
print("overlap (%):", matrix.tasks)
print(matrix.values.round(1))
