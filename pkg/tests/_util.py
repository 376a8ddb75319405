"""Shared builders and independent numpy references for the test suite."""

from __future__ import annotations

import numpy as np

from gacl.dataset import make_synthetic, split_by_density
from gacl.diffcore import Tensor, numeric_gradient, relative_error
from gacl.harness import ModelConfig


def toy_split(n_users=4, n_services=4, n_slices=3, density=0.75, seed=1):
    return split_by_density(make_synthetic(n_users, n_services, n_slices, seed=seed), density, seed)


def toy_config(**kw) -> ModelConfig:
    base = dict(l_g=1, d=4, ws=1, l_tf=1, l_hd=2, density=0.75, reg_lambda=0.0, lr=3e-3, batch_size=16,
                epochs=2, patience=0, neighbor_cap=None)
    base.update(kw)
    return ModelConfig(**base)


def max_grad_error(loss_fn, leaves: dict[str, Tensor], h: float = 1e-5) -> tuple[float, str]:
    """Largest relative error between backward() and central differences over ``leaves``."""
    for t in leaves.values():
        t.requires_grad = True
        t.grad = None
    loss_fn().backward()
    worst, where = 0.0, ""
    for name, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(lambda: loss_fn().item(), t.data, h)
        err = relative_error(analytic, numeric)
        if err > worst:
            worst, where = err, name
    return worst, where


# -- plain numpy graph attention -------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _prelu(x, a):
    return np.where(x > 0, x, a * x)


def _l2n(v, eps=1e-12):
    return v / max(np.linalg.norm(v), eps)


def numpy_gat(g, values: dict[str, np.ndarray], u: int, s: int, t: int, l_g: int,
              mode: str = "semantic_only") -> tuple[np.ndarray, np.ndarray]:
    """Features of target user ``u`` and service ``s`` after ``l_g`` layers in snapshot ``t``.

    Every node of the full snapshot is updated at every layer from its full
    neighbour list. ``mode`` is "semantic_only" (plain attention) or "full".
    """
    n_users = g.n_users
    tgt = {True: n_users + s, False: u}  # prompt by center side
    X = values["tpgat.embedding"].copy()
    for layer in range(1, l_g + 1):
        new = np.empty_like(X)
        for v in range(g.n_nodes):
            is_user = v < n_users
            side = "user" if is_user else "service"

            def p(name):
                return values[f"tpgat.layer{layer}.{side}.{name}"]

            nbrs = g.adjacency(v, t)
            if not nbrs:
                new[v] = _prelu(X[v], p("prelu_slope"))
                continue
            scores = []
            for nb, w in nbrs:
                a = _sigmoid(p("W_attn") @ (X[v] + X[nb]))
                if mode == "full":
                    x_hat = np.concatenate([_l2n(X[tgt[is_user]] + X[nb]), _l2n(p("W_w") * w + p("b_w"))])
                    a = np.tanh(p("W_alpha") @ x_hat + p("b_alpha")) * a + np.tanh(p("W_beta") @ x_hat + p("b_beta"))
                scores.append(a)
            scores = np.array(scores)
            e = np.exp(scores - scores.max())
            soft = e / e.sum()
            agg = sum(soft[k] * (p("W_msg") @ X[nb]) for k, (nb, _) in enumerate(nbrs))
            new[v] = _prelu(X[v] + agg, p("prelu_slope"))
        X = new
    return X[u], X[n_users + s]
