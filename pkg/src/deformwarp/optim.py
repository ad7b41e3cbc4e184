"""Parameter storage and the Adam optimiser."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

ADAM_LR = 2e-4
ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class ParamStore:
    """Named trainable tensors, each paired with Adam moments."""

    def __init__(self, params: dict | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.adam = AdamState()
        for name, val in (params or {}).items():
            self.add(name, val)

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise InvalidArgumentError(f"duplicate parameter '{name}'")
        self.params[name] = value
        self.adam.m[name] = np.zeros_like(value)
        self.adam.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def keys(self):
        return self.params.keys()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.adam = AdamState({k: v.copy() for k, v in self.adam.m.items()},
                             {k: v.copy() for k, v in self.adam.v.items()}, self.adam.step)
        return out


def adam_step(store: ParamStore, grads: dict, lr: float = ADAM_LR, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> ParamStore:
    """One bias-corrected Adam update, in place. Returns ``store``."""
    if set(grads) != set(store.params):
        missing = sorted(set(store.params) - set(grads))
        extra = sorted(set(grads) - set(store.params))
        raise InvalidArgumentError(f"gradient keys differ from parameters: missing {missing[:3]}, extra {extra[:3]}")
    st = store.adam
    st.step += 1
    bc1 = 1.0 - beta1 ** st.step
    bc2 = 1.0 - beta2 ** st.step
    for name, p in store.params.items():
        g = grads[name]
        m = st.m[name]
        v = st.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store
