"""Transformer encoder over the per-slice feature window."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .diffcore import ParameterStore, Tensor, ops
from .diffcore.params import uniform_fan_in


@dataclass(frozen=True)
class EncoderConfig:
    l_tf: int
    l_hd: int
    d: int
    ffn_width: int | None = None
    # "single": one residual + norm around attention and FFN together;
    # "standard": separate residual + norm after attention and after FFN.
    norm_style: str = "single"

    def __post_init__(self):
        if self.d % self.l_hd:
            raise ValueError(f"l_hd={self.l_hd} must divide d={self.d}")
        if self.norm_style not in ("single", "standard"):
            raise ValueError(f"norm_style must be 'single' or 'standard', got {self.norm_style!r}")
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 4 * self.d)

    @property
    def d_k(self) -> int:
        return self.d // self.l_hd


def positional_encoding(ws: int, d: int) -> np.ndarray:
    """Sinusoidal table: even columns sin, odd columns cos of pos / 10000^(2i/d)."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even width, got d={d}")
    pos = np.arange(ws, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d)
    pe = np.empty((ws, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def init_params(ps: ParameterStore, rng: np.random.Generator, cfg: EncoderConfig, prefix: str = "tempenc") -> None:
    d, f = cfg.d, cfg.ffn_width
    for i in range(1, cfg.l_tf + 1):
        p = f"{prefix}.layer{i}"
        for name in ("W_q", "W_k", "W_v", "W_hd"):
            ps.add(f"{p}.{name}", uniform_fan_in(rng, (d, d), d))
        ps.add(f"{p}.W_1", uniform_fan_in(rng, (d, f), d))
        ps.add(f"{p}.b_1", np.zeros(f), decay=False)
        ps.add(f"{p}.W_2", uniform_fan_in(rng, (f, d), f))
        ps.add(f"{p}.b_2", np.zeros(d), decay=False)
        ps.add(f"{p}.ln_gamma", np.ones(d), decay=False)
        ps.add(f"{p}.ln_beta", np.zeros(d), decay=False)
        if cfg.norm_style == "standard":
            ps.add(f"{p}.ln_attn_gamma", np.ones(d), decay=False)
            ps.add(f"{p}.ln_attn_beta", np.zeros(d), decay=False)


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, n, d = x.shape
    return ops.transpose(ops.reshape(x, (B, n, h, d // h)), (0, 2, 1, 3))


def multi_head_attention(Z: Tensor, cfg: EncoderConfig, params: Mapping[str, Tensor], prefix: str,
                         attn_out: list | None = None) -> Tensor:
    B, n, d = Z.shape
    h = cfg.l_hd
    Q = _split_heads(ops.matmul(Z, params[f"{prefix}.W_q"]), h)
    K = _split_heads(ops.matmul(Z, params[f"{prefix}.W_k"]), h)
    V = _split_heads(ops.matmul(Z, params[f"{prefix}.W_v"]), h)
    scores = ops.scale(ops.matmul(Q, ops.swapaxes(K, -1, -2)), 1.0 / np.sqrt(cfg.d_k))
    A = ops.softmax(scores, axis=-1)
    if attn_out is not None:
        attn_out.append(A.data.copy())
    heads = ops.matmul(A, V)                                   # (B, h, n, d_k)
    merged = ops.reshape(ops.transpose(heads, (0, 2, 1, 3)), (B, n, d))
    return ops.matmul(merged, params[f"{prefix}.W_hd"])


def _affine_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return ops.add(ops.mul(ops.layer_norm(x), gamma), beta)


def _ffn(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = ops.relu(ops.add(ops.matmul(x, params[f"{prefix}.W_1"]), params[f"{prefix}.b_1"]))
    return ops.add(ops.matmul(hidden, params[f"{prefix}.W_2"]), params[f"{prefix}.b_2"])


def encoder_layer(Z_prev: Tensor, cfg: EncoderConfig, params: Mapping[str, Tensor], prefix: str,
                  attn_out: list | None = None) -> Tensor:
    """One encoder layer on a (B, ws, d) batch."""
    Z_attn = multi_head_attention(Z_prev, cfg, params, prefix, attn_out)
    if cfg.norm_style == "single":
        Z_hat = _ffn(Z_attn, params, prefix)
        return _affine_norm(ops.add(Z_hat, Z_prev), params[f"{prefix}.ln_gamma"], params[f"{prefix}.ln_beta"])
    Z_mid = _affine_norm(ops.add(Z_attn, Z_prev), params[f"{prefix}.ln_attn_gamma"], params[f"{prefix}.ln_attn_beta"])
    return _affine_norm(ops.add(_ffn(Z_mid, params, prefix), Z_mid),
                        params[f"{prefix}.ln_gamma"], params[f"{prefix}.ln_beta"])


def encode_temporal(X: Tensor, cfg: EncoderConfig, params: Mapping[str, Tensor], prefix: str = "tempenc",
                    attn_out: list | None = None, use_positional: bool = True) -> Tensor:
    """Encode (B, ws, d) or (ws, d) sequences; returns the last row of the final layer."""
    single = X.ndim == 2
    if single:
        X = ops.reshape(X, (1,) + X.shape)
    ws = X.shape[1]
    Z = ops.add(X, positional_encoding(ws, cfg.d)) if use_positional else X
    for i in range(1, cfg.l_tf + 1):
        Z = encoder_layer(Z, cfg, params, f"{prefix}.layer{i}", attn_out)
    last = ops.index(Z, (slice(None), ws - 1))
    return ops.reshape(last, (cfg.d,)) if single else last
