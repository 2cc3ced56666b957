"""Adam with bias correction and simple step-size schedules."""
from __future__ import annotations

import math

import numpy as np


def scheduled_lr(lr, schedule, step, total, final_fraction=0.0):
    """Step size at ``step`` (0-based) of ``total`` steps."""
    if schedule == 'constant' or total <= 1:
        return lr
    frac = min(step / (total - 1), 1.0)
    floor = lr * final_fraction
    if schedule == 'linear':
        return floor + (lr - floor) * (1 - frac)
    if schedule == 'cosine':
        return floor + (lr - floor) * 0.5 * (1 + math.cos(math.pi * frac))
    raise ValueError(f'unknown schedule {schedule!r}')


class Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8, dtype=float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s, dtype) for s in shapes]
        self.v = [np.zeros(s, dtype) for s in shapes]
        self.t = 0

    def _advance(self, m, v, g, out):
        # in place with one scratch buffer (``out`` may alias ``g``):
        # m <- g + b1 (m - g), v <- g^2 + b2 (v - g^2)
        m -= g
        m *= self.beta1
        m += g
        np.multiply(g, g, out=out)
        v -= out
        v *= self.beta2
        v += out
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        np.sqrt(v, out=out)
        out *= 1 / math.sqrt(bc2)
        out += self.eps
        np.divide(m, out, out=out)
        return out, 1 / bc1

    def updates(self, grads, lr):
        """Advance the moment estimates and return the step for each parameter."""
        self.t += 1
        steps = []
        for m, v, g in zip(self.m, self.v, grads):
            out, scale = self._advance(m, v, g, np.empty_like(m))
            out *= lr * scale
            steps.append(out)
        return steps

    def step(self, params, grads, lr, rows=None):
        """Update ``params`` in place. Gradient buffers are reused as scratch.

        ``rows[i]``, when given, lists the leading-axis rows that ``grads[i]``
        covers; only those rows (and their moments) are touched, the usual
        lazy treatment of embedding-like layers.
        """
        self.t += 1
        rows = rows or [None] * len(params)
        for p, m, v, g, r in zip(params, self.m, self.v, grads, rows):
            scratch = g if g.dtype == m.dtype and g.flags.writeable else np.empty_like(g, m.dtype)
            if r is None:
                out, scale = self._advance(m, v, g, scratch)
                out *= lr * scale
                p -= out
            else:
                mr, vr = m[r], v[r]
                out, scale = self._advance(mr, vr, g, scratch)
                m[r], v[r] = mr, vr
                out *= lr * scale
                p[r] -= out
