"""Invocation MLP, output layer and the regularised MSE loss."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .diffcore import ParameterStore, Tensor, ops
from .diffcore.params import uniform_fan_in


def init_params(ps: ParameterStore, rng: np.random.Generator, d: int, output_bias: float = 0.0) -> None:
    ps.add("predictor.W_inv", uniform_fan_in(rng, (d, 2 * d), 2 * d))
    ps.add("predictor.b_inv", np.zeros(d), decay=False)
    ps.add("predictor.prelu_slope", np.full((), 0.25), decay=False)
    ps.add("predictor.W_o", uniform_fan_in(rng, (d,), d))
    ps.add("predictor.b_o", np.full((), float(output_bias)), decay=False)


def predict(h_u, h_s, params: Mapping[str, Tensor]) -> Tensor:
    """relu(W_o . prelu(W_inv [h_u || h_s] + b_inv) + b_o); works on (d,) or (B, d) inputs."""
    h_us = ops.concat([h_u, h_s], axis=-1)
    h_inv = ops.prelu(ops.add(ops.matmul(h_us, ops.transpose(params["predictor.W_inv"])),
                              params["predictor.b_inv"]),
                      params["predictor.prelu_slope"])
    return ops.relu(ops.add(ops.matmul(h_inv, params["predictor.W_o"]), params["predictor.b_o"]))


def l2_penalty(params: Mapping[str, Tensor], names) -> Tensor | None:
    terms = [ops.sum(ops.square(params[n])) for n in names]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


def loss(predictions, targets, params: Mapping[str, Tensor] | ParameterStore, lam: float,
         decay_names=None, denominator: int | None = None) -> Tensor:
    """Mean squared error plus ``lam`` times the squared L2 norm of ``decay_names``.

    ``decay_names`` defaults to every parameter. ``denominator`` overrides
    the batch size in the mean (used when a batch is split across workers).
    """
    preds = predictions if isinstance(predictions, Tensor) else ops.concat(
        [ops.reshape(p, (1,)) for p in predictions], axis=0)
    y = np.asarray(targets, dtype=np.float64).reshape(preds.shape)
    if y.size == 0:
        raise ValueError("loss needs at least one prediction")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    n = y.size if denominator is None else denominator
    total = ops.scale(ops.sum(ops.square(ops.sub(preds, y))), 1.0 / n)
    if lam:
        if isinstance(params, ParameterStore):
            names = decay_names if decay_names is not None else params.names()
            params = params.as_dict()
        else:
            names = decay_names if decay_names is not None else list(params)
        penalty = l2_penalty(params, names)
        if penalty is not None:
            total = ops.add(total, ops.scale(penalty, lam))
    return total
