"""Pre-train a trunk on the pretext corpus, then finetune downstream.

This is the theta_0 pipeline every ticket experiment starts from: the
pre-trained trunk is the initialization that masks get applied to.
Run:  python3 demos/03_pretrain_and_finetune.py   (about a minute)
"""
import time

from ticketforge.experiments import Workbench
from ticketforge.models import build_task_head
from ticketforge.rng import derive_seed
from ticketforge.training import evaluate_accuracy, train_model

wb = Workbench()
t0 = time.time()
theta0 = wb.theta0()
print(f"pre-trained trunk ready in {time.time() - t0:.0f}s "
      f"({theta0.prunable_total()} prunable weights)")

for task in wb.suite()[:3]:
    params = theta0.with_head(build_task_head(
        wb.arch, task, derive_seed(1, "head", task.task_id)))
    train_model(params, wb.train_data(task), wb.task_budget, seed=100)
    acc = evaluate_accuracy(params, None, wb.dev_data(task))
    print(f"{task.task_id:14} dev accuracy from theta_0: {acc:.1f}%")
