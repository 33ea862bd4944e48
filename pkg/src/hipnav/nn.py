"""Minimal dense-network plumbing in float64 numpy: tanh MLPs and Adam."""

from __future__ import annotations

import numpy as np


def init_dense(rng, sizes, prefix, params, out_scale=1.0):
    """Glorot-normal weights for a chain of dense layers, written into ``params``."""
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / (a + b))
        if k == len(sizes) - 2:
            scale *= out_scale
        params[f"{prefix}W{k}"] = rng.normal(0.0, scale, (a, b))
        params[f"{prefix}b{k}"] = np.zeros(b)
    return params


def n_layers(params, prefix):
    k = 0
    while f"{prefix}W{k}" in params:
        k += 1
    return k


def mlp_forward(params, prefix, x, final_tanh=True):
    """Returns the output and the per-layer activations needed for backprop."""
    acts = [x]
    L = n_layers(params, prefix)
    h = x
    for k in range(L):
        h = h @ params[f"{prefix}W{k}"] + params[f"{prefix}b{k}"]
        if k < L - 1 or final_tanh:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def mlp_backward(params, prefix, acts, g_out, grads, final_tanh=True):
    """Accumulates parameter gradients into ``grads``; returns d(loss)/d(input)."""
    L = n_layers(params, prefix)
    g = g_out
    for k in reversed(range(L)):
        if k < L - 1 or final_tanh:
            g = g * (1.0 - acts[k + 1] ** 2)
        a = acts[k]
        grads[f"{prefix}W{k}"] = grads.get(f"{prefix}W{k}", 0.0) + a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grads[f"{prefix}b{k}"] = grads.get(f"{prefix}b{k}", 0.0) + g.reshape(-1, g.shape[-1]).sum(axis=0)
        g = g @ params[f"{prefix}W{k}"].T
    return g


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
