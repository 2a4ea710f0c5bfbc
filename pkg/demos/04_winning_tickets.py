"""Find a winning ticket by iterative magnitude pruning and re-train it.

Compares the IMP mask against a random mask of identical sparsity and
prints the relaxed-winning verdict at the 99% bar.
Run:  python3 demos/04_winning_tickets.py   (a few minutes)
"""
from ticketforge.analysis import relaxed_winning
from ticketforge.experiments import Workbench
from ticketforge.masks import Mask
from ticketforge.pruning import evaluate_ticket, random_prune
from ticketforge.rng import derive_seed

wb = Workbench()
task = wb.suite()[0]
theta0 = wb.theta0()
run = wb.imp_result(task)
print("round sparsities:", [round(m.sparsity, 3) for m in run.round_masks])

dense = evaluate_ticket(Mask.ones_like(theta0), theta0, task, wb.task_budget,
                        seed=0, train_data=wb.train_data(task),
                        dev_data=wb.dev_data(task)).accuracy
print(f"dense reference: {dense:.1f}%")

for target in (0.5, 0.6):
    ticket = run.mask_at_sparsity(target)
    rand = random_prune(theta0, ticket.sparsity, derive_seed(0, "rp", target))
    acc_t = evaluate_ticket(ticket, theta0, task, wb.task_budget, seed=0,
                            train_data=wb.train_data(task),
                            dev_data=wb.dev_data(task)).accuracy
    acc_r = evaluate_ticket(rand, theta0, task, wb.task_budget, seed=0,
                            train_data=wb.train_data(task),
                            dev_data=wb.dev_data(task)).accuracy
    verdict = relaxed_winning(acc_t, dense, 99.0)
    print(f"sparsity {ticket.sparsity:.3f}: IMP {acc_t:.1f}% "
          f"(relaxed winner: {verdict})  random {acc_r:.1f}%")
