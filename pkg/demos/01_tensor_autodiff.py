"""Tour of the tensor core: tapes, gradients, and the SGD update.

Run:  python3 demos/01_tensor_autodiff.py
"""
import numpy as np

from ticketforge import autodiff as ad
from ticketforge.params import ParamStore, optimizer_step

rng = np.random.default_rng(0)

# --- a tape records the forward graph; backward replays it once ----------
tape = ad.Tape()
w = tape.leaf(rng.normal(size=(3, 2)), name="w")
x = ad.constant(rng.normal(size=(5, 3)))
logits = ad.matmul(x, w)
labels = rng.integers(0, 2, size=5)
loss = ad.softmax_cross_entropy(logits, labels)
grads = ad.backward(tape, loss)
print("loss:", float(loss.data))
print("dL/dw:\n", grads[w])

# --- finite differences agree with the analytic gradient -----------------
h = 1e-5
w_arr = w.data.copy()
i, j = 1, 0
for sign in (+1, -1):
    w_arr[i, j] += sign * h
    out = ad.softmax_cross_entropy(ad.matmul(x, ad.constant(w_arr)), labels)
    if sign > 0:
        up = float(out.data)
    else:
        down = float(out.data)
    w_arr[i, j] -= sign * h
print("finite diff:", (up - down) / (2 * h), "analytic:", grads[w][i, j])

# --- plain SGD drives a quadratic to its minimum --------------------------
params = ParamStore({"w": np.array([[0.0]])}, {"w"}, set(), {"w"})
for step in range(8):
    value = params.entries["w"][0, 0]
    grad = np.array([[2.0 * (value - 3.0)]])   # d/dw (w - 3)^2
    optimizer_step(params, {"w": grad}, lr=0.25)
    print(f"step {step}: w = {params.entries['w'][0, 0]:.4f}")
