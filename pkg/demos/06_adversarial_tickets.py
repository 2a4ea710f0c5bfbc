"""Adversarial ticket training: PGD in feature space plus the combined loss.

Shows the epsilon-ball discipline of the inner maximization, then
finetunes a ticket adversarially and standardly for comparison.
Run:  python3 demos/06_adversarial_tickets.py   (a few minutes)
"""
import numpy as np

from ticketforge.adversarial import AdvConfig, adv_loss_fn, pgd_perturb
from ticketforge.experiments import Workbench
from ticketforge.pruning import evaluate_ticket

wb = Workbench()
task = wb.suite()[0]
theta0 = wb.theta0()
batch = wb.train_data(task).take(np.arange(16))

cfg = AdvConfig(epsilon=0.5, step_size=0.25, pgd_steps=3, kl_weight=1.0)
delta = pgd_perturb(theta0.with_head(
    {"head/W": np.zeros((wb.arch.hidden, task.class_count)),
     "head/b": np.zeros(task.class_count)}), None, batch, cfg)
for target, block in delta.blocks.items():
    norms = np.sqrt((block * block).sum(axis=(1, 2)))
    print(f"{target}: per-example |delta|_F in "
          f"[{norms.min():.3f}, {norms.max():.3f}]  (epsilon={cfg.epsilon})")

mask = wb.imp_result(task).mask_at_sparsity(0.6)
std = evaluate_ticket(mask, theta0, task, wb.task_budget, seed=0,
                      train_data=wb.train_data(task),
                      dev_data=wb.dev_data(task)).accuracy
adv = evaluate_ticket(mask, theta0, task, wb.task_budget, seed=0,
                      train_data=wb.train_data(task),
                      dev_data=wb.dev_data(task),
                      loss_fn=adv_loss_fn(cfg)).accuracy
print(f"ticket at 60% sparsity: standard {std:.1f}%  adversarial {adv:.1f}%")
