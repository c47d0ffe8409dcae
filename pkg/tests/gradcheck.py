"""Central finite differences against tape gradients."""

import numpy as np


def numeric_grad(loss_fn, arr, idx, eps):
    orig = arr[idx]
    arr[idx] = orig + eps
    up = loss_fn()
    arr[idx] = orig - eps
    down = loss_fn()
    arr[idx] = orig
    return (up - down) / (2 * eps)


def check_params(loss_fn, params, analytic, eps=1e-6, rtol=1e-2, floor=1e-5, per_param=None, seed=0):
    """Worst relative error per parameter; entries where both grads are below ``floor`` are skipped."""
    gen = np.random.default_rng(seed)
    worst = {}
    for p in params:
        flat = list(np.ndindex(p.data.shape))
        if per_param is not None and len(flat) > per_param:
            flat = [flat[i] for i in gen.choice(len(flat), per_param, replace=False)]
        err = 0.0
        for idx in flat:
            num = numeric_grad(loss_fn, p.data, idx, eps)
            ana = analytic[p.name][idx]
            if max(abs(num), abs(ana)) < floor:
                continue
            err = max(err, abs(num - ana) / max(abs(num), abs(ana)))
        worst[p.name] = err
    return worst
