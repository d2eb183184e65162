"""ADAM with bias correction."""

from dataclasses import dataclass, field

import numpy as np

from desmoke.errors import ShapeError

ADAM_EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=2e-4, beta1=0.5, beta2=0.999, eps=ADAM_EPS):
    """Update ``params`` (name -> array) in place from ``grads``; returns the state."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class Adam:
    """Optimizer bound to a Network's parameters."""

    def __init__(self, net, lr=2e-4, beta1=0.5, beta2=0.999):
        self.net = net
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.state = AdamState()

    def step(self):
        params, grads = {}, {}
        for name, layer, key in self.net.named_params():
            params[name] = layer.params[key]
            grads[name] = layer.grads.get(key, np.zeros_like(layer.params[key]))
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2)
