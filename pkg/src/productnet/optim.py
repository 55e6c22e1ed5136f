"""Plain-numpy Adam, shared by the local classifiers and the fusion network."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a list of parameter arrays, updated in place.

    Scratch buffers keep the per-step cost allocation-free; the projection
    matrices of the fusion net are by far the largest parameter group.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self._s1 = [np.empty_like(p) for p in self.params]
        self._s2 = [np.empty_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, g, m, v, s1, s2 in zip(self.params, grads, self.m, self.v, self._s1, self._s2):
            m *= b1
            np.multiply(g, 1.0 - b1, out=s1)
            m += s1
            v *= b2
            np.multiply(g, g, out=s1)
            s1 *= 1.0 - b2
            v += s1
            # p -= lr * (m / bias1) / (sqrt(v / bias2) + eps)
            np.divide(v, bias2, out=s1)
            np.sqrt(s1, out=s1)
            s1 += self.eps
            np.divide(m, bias1, out=s2)
            s2 /= s1
            s2 *= self.lr
            p -= s2
