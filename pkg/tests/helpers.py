"""Shared oracles for the test suite.

The gradcheck harness is the independent route for every differentiable
op: central finite differences on the raw arrays, never touching the
tape's analytic rules.
"""
from __future__ import annotations

import numpy as np

from ticketforge import autodiff as ad


def numeric_gradient(fn, arrays, index, h=1e-5):
    """Central-difference gradient of fn w.r.t. arrays[index].

    ``fn`` maps a list of constant Tensors to a scalar Tensor and is
    re-evaluated from scratch for every probe, so no tape state leaks in.
    """
    target = arrays[index]
    flat = target.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn([ad.constant(a) for a in arrays]).data)
        flat[i] = orig - h
        fm = float(fn([ad.constant(a) for a in arrays]).data)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(target.shape)


def gradcheck(fn, arrays, tol=1e-4, h=1e-5):
    """Assert analytic and finite-difference gradients agree elementwise.

    Relative error is measured against max(1, |analytic|, |numeric|), the
    usual guard against blowing up near zero.
    """
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = fn(leaves)
    grads = ad.backward(tape, loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads[leaf]
        numeric = numeric_gradient(fn, arrays, i, h=h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = float(np.max(np.abs(analytic - numeric) / denom))
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch on input {i}: {err:.3e}"
    return worst


def op_gradcheck_cases(rng):
    """One random gradcheck case per differentiable op, as (name, fn, arrays).

    Every case reduces to a scalar through sum_all so the same harness
    drives ops of any output shape.
    """
    b, s, h = 3, 4, 6
    labels = rng.integers(0, 5, size=4)
    ids = rng.integers(0, 7, size=(3, 5))
    rows = rng.integers(0, 12, size=6)

    def reduce(op):
        return lambda leaves: ad.sum_all(op(leaves))

    cases = [
        ("add", reduce(lambda l: ad.add(l[0], l[1])),
         [rng.normal(size=(b, s, h)), rng.normal(size=(h,))]),
        ("sub", reduce(lambda l: ad.sub(l[0], l[1])),
         [rng.normal(size=(b, h)), rng.normal(size=(b, h))]),
        ("mul", reduce(lambda l: ad.mul(l[0], l[1])),
         [rng.normal(size=(b, h)), rng.normal(size=(b, h))]),
        ("scale", reduce(lambda l: ad.scale(l[0], 1.7)),
         [rng.normal(size=(b, h))]),
        ("matmul", reduce(lambda l: ad.matmul(l[0], l[1])),
         [rng.normal(size=(4, 5)), rng.normal(size=(5, 3))]),
        ("bmm", reduce(lambda l: ad.bmm(l[0], l[1])),
         [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))]),
        ("linear", reduce(lambda l: ad.linear(l[0], l[1], l[2])),
         [rng.normal(size=(4, 5)), rng.normal(size=(5, 3)),
          rng.normal(size=(3,))]),
        ("reshape", reduce(lambda l: ad.reshape(l[0], (s, b * h))),
         [rng.normal(size=(b, s, h))]),
        ("transpose", reduce(lambda l: ad.transpose(l[0], (2, 0, 1))),
         [rng.normal(size=(b, s, h))]),
        ("concat", reduce(lambda l: ad.concat([l[0], l[1]], axis=1)),
         [rng.normal(size=(b, 2, h)), rng.normal(size=(b, 3, h))]),
        ("slice_axis", reduce(lambda l: ad.slice_axis(l[0], 1, 1, 3)),
         [rng.normal(size=(b, s, h))]),
        ("gather_rows", reduce(lambda l: ad.gather_rows(l[0], rows)),
         [rng.normal(size=(12, h))]),
        ("embedding", reduce(lambda l: ad.embedding(l[0], ids)),
         [rng.normal(size=(7, h))]),
        ("tile_rows", reduce(lambda l: ad.tile_rows(l[0], 5)),
         [rng.normal(size=(h,))]),
        ("split_heads", reduce(lambda l: ad.split_heads(l[0], 2, 3, 2, 3)),
         [rng.normal(size=(6, 6))]),
        ("merge_heads", reduce(lambda l: ad.merge_heads(l[0], 2, 3, 2, 3)),
         [rng.normal(size=(4, 3, 3))]),
        ("sum_all", lambda l: ad.sum_all(l[0]),
         [rng.normal(size=(b, s))]),
        ("silu", reduce(lambda l: ad.silu(l[0])),
         [rng.normal(size=(b, h))]),
        ("softmax", reduce(lambda l: ad.mul(ad.softmax(l[0]), l[1])),
         [rng.normal(size=(b, h)), rng.normal(size=(b, h))]),
        ("layer_norm", reduce(lambda l: ad.layer_norm(l[0], l[1], l[2])),
         [rng.normal(size=(b, s, h)), rng.normal(size=(h,)) * 0.5 + 1.0,
          rng.normal(size=(h,))]),
        ("attention_core",
         reduce(lambda l: ad.attention_core(l[0], l[1], l[2], 0.7)),
         [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4)),
          rng.normal(size=(2, 3, 4))]),
        ("softmax_cross_entropy",
         lambda l: ad.softmax_cross_entropy(l[0], labels),
         [rng.normal(size=(4, 5))]),
        ("symmetric_kl", lambda l: ad.symmetric_kl(l[0], l[1]),
         [rng.normal(size=(4, 5)), rng.normal(size=(4, 5))]),
    ]
    return cases
