"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Adaptive-moment optimizer over a name -> Tensor mapping."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        st = self.state
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"optimizer_step: no gradient for parameter(s) {missing[:5]}")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad
            m = st.m[name]
            v = st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay:
                p.data -= st.lr * st.weight_decay * p.data
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.grad = None

    # checkpoint support
    def state_arrays(self):
        out = {}
        for name in self.params:
            out[f"m/{name}"] = self.state.m[name]
            out[f"v/{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays, step):
        for name in self.params:
            self.state.m[name][...] = arrays[f"m/{name}"]
            self.state.v[name][...] = arrays[f"v/{name}"]
        self.state.step = int(step)


def optimizer_step(opt: AdamW):
    opt.step()
