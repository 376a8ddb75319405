"""Adam with decoupled weight decay."""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from .params import ParameterStore
from .tensor import NonFiniteError


class AdamW:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 decay_filter: Callable[[str], bool] | None = None):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, ps: ParameterStore, grads: Mapping[str, np.ndarray] | None = None) -> None:
        """Apply one update and clear grads.

        ``grads`` defaults to each parameter's ``.grad``; any missing
        gradient is an error.
        """
        if grads is None:
            missing = [n for n, t in ps.items() if t.grad is None]
            if missing:
                raise ValueError(f"missing gradients for: {', '.join(missing)}")
            grads = {n: t.grad for n, t in ps.items()}
        else:
            missing = [n for n in ps.names() if n not in grads]
            if missing:
                raise ValueError(f"missing gradients for: {', '.join(missing)}")

        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        updates = {}
        with np.errstate(all="ignore"):
            for name, p in ps.items():
                g = grads[name]
                m = self.m.get(name)
                v = self.v.get(name)
                m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
                v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
                step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                wd = self.weight_decay
                if wd and (self.decay_filter is None or self.decay_filter(name)):
                    step = step + self.lr * wd * p.data
                new = p.data - step
                if not np.isfinite(new).all():
                    raise NonFiniteError(f"AdamW update for {name} is non-finite")
                updates[name] = (new, m, v)
        for name, (new, m, v) in updates.items():
            ps[name].data[...] = new
            self.m[name] = m
            self.v[name] = v
        ps.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step: int) -> None:
        self.t = int(step)
        for key, arr in arrays.items():
            if key.startswith("optim.m."):
                self.m[key[len("optim.m."):]] = np.array(arr)
            elif key.startswith("optim.v."):
                self.v[key[len("optim.v."):]] = np.array(arr)


def adamw_step(ps: ParameterStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0, optimizer: AdamW | None = None) -> AdamW:
    """Functional form: one step with the given hyperparameters.

    Pass the returned optimizer back in to keep moment estimates across steps.
    """
    opt = optimizer or AdamW()
    opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay = lr, beta1, beta2, eps, weight_decay
    opt.step(ps)
    return opt
