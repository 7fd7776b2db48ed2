"""Decoupled-weight-decay adaptive-moment optimizer and parameter EMA."""

from __future__ import annotations

import numpy as np

from .schedules import update_ema


class AdamW:
    """Adam with decoupled weight decay; norm gains and biases are not decayed.

    Entries are (name, tensor, decay?) triples. Parameters whose grad is
    None are skipped entirely (no decay either), so unused wiring pieces
    stay at their init values.
    """

    def __init__(self, entries, beta1=0.9, beta2=0.95, weight_decay=0.05, eps=1e-8):
        self.entries = list(entries)
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t, _ in self.entries}
        self._v = {name: np.zeros_like(t.data) for name, t, _ in self.entries}

    def zero_grad(self):
        for _, tensor, _ in self.entries:
            tensor.grad = None

    def step(self, lr):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, tensor, decay in self.entries:
            g = tensor.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if decay and self.weight_decay:
                update = update + self.weight_decay * tensor.data
            tensor.data -= lr * update


class Ema:
    """Geometric moving average of parameters; evaluation runs on the shadow."""

    def __init__(self, entries, decay):
        self.decay = decay
        self.entries = [(name, tensor) for name, tensor, _ in entries]
        self.shadow = {name: tensor.data.copy() for name, tensor in self.entries}

    def update(self):
        update_ema(self.shadow, {n: t.data for n, t in self.entries}, self.decay)

    def copy_to_params(self):
        for name, tensor in self.entries:
            tensor.data = self.shadow[name].copy()

    def swap(self):
        """Exchange live and shadow values (call twice to restore)."""
        for name, tensor in self.entries:
            live = tensor.data.copy()
            tensor.data = self.shadow[name].copy()
            self.shadow[name] = live
