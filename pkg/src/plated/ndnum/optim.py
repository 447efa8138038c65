import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Adam with bias correction.

    Per-parameter L2 (``Param.l2``) is folded into the gradient as ``l2 * w``
    before the moment updates. Frozen parameters, and parameters whose
    effective gradient is exactly zero, are skipped entirely (values and
    moments untouched), so a zero-gradient step never moves anything.
    """

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        live = [(k, p) for k, p in params.items() if p.trainable]
        for k, p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        lr, b1, b2 = self.learning_rate, self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in live:
            g = p.grad + p.l2 * p.value if p.l2 else p.grad
            if not g.any():
                continue
            if k not in self.m:
                self.m[k] = np.zeros_like(p.value)
                self.v[k] = np.zeros_like(p.value)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)
