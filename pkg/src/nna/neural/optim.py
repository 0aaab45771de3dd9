"""Adam optimizer with bias correction."""

import numpy as np


class AdamState:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.data) for p in params}
        self.v = {id(p): np.zeros_like(p.data) for p in params}
        self.params = list(params)


def adam_step(state, grads, lr):
    """One Adam update. ``grads``: {Parameter: ndarray}; missing entries are skipped.

    Parameters with trainable=False are never touched, regardless of grads.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in state.params:
        g = grads.get(p)
        if g is None or not p.trainable:
            continue
        m = state.m[id(p)]
        v = state.v[id(p)]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = p.data - update.astype(p.data.dtype)
