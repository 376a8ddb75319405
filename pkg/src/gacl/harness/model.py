"""Assembled model: parameters for all stages plus the batched forward pass."""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .. import __version__, predictor, tempenc, tpgat
from ..diffcore import ParameterStore, Tensor, ops
from ..diffcore.params import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import ModelConfig


def to_target_space(raw, target_mode: str, value_min: float, value_max: float) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if target_mode == "normalized":
        span = value_max - value_min
        return (raw - value_min) / (span if span > 0 else 1.0)
    return raw


class GACLModel:
    """Parameters and forward pass for one configuration.

    Predictions live in *target space*: raw QoS, or min-max normalised QoS
    when ``config.target_mode == "normalized"``; :meth:`to_raw` maps back.
    """

    def __init__(self, config: ModelConfig, n_users: int, n_services: int,
                 value_min: float = 0.0, value_max: float = 1.0, output_bias: float = 0.0):
        self.config = config
        self.n_users = n_users
        self.n_services = n_services
        self.value_min = float(value_min)
        self.value_max = float(value_max)
        self.encoder = tempenc.EncoderConfig(config.l_tf, config.l_hd, config.d,
                                             ffn_width=config.ffn_mult * config.d,
                                             norm_style=config.norm_style)
        rng = np.random.default_rng(config.seed_init)
        self.ps = ParameterStore(config.seed_init)
        tpgat.init_params(self.ps, rng, n_users + n_services, config.d, config.l_g, config.ablation_mode)
        for prefix in self.encoder_prefixes:
            tempenc.init_params(self.ps, rng, self.encoder, prefix)
        predictor.init_params(self.ps, rng, config.d, output_bias)

    @property
    def encoder_prefixes(self) -> tuple[str, ...]:
        if self.config.separate_encoders:
            return ("tempenc.user", "tempenc.service")
        return ("tempenc",)

    def decay_names(self) -> list[str]:
        if self.config.decay_biases:
            return self.ps.names()
        return [n for n in self.ps.names() if self.ps.decays(n)]

    # -- target scaling ----------------------------------------------------
    @property
    def _span(self) -> float:
        span = self.value_max - self.value_min
        return span if span > 0 else 1.0

    def to_target(self, raw) -> np.ndarray:
        return to_target_space(raw, self.config.target_mode, self.value_min, self.value_max)

    def to_raw(self, target) -> np.ndarray:
        target = np.asarray(target, dtype=np.float64)
        if self.config.target_mode == "normalized":
            return target * self._span + self.value_min
        return target

    # -- forward -----------------------------------------------------------
    def constant_params(self) -> dict[str, Tensor]:
        """Parameters wrapped without grad tracking, for inference."""
        return {n: Tensor(t.data) for n, t in self.ps.items()}

    def forward(self, params: Mapping[str, Tensor], wb: tpgat.WindowBatch,
                attn_out: list | None = None) -> Tensor:
        cfg = self.config
        users, services = tpgat.extract_batch(params, wb, cfg.l_g, cfg.ablation_mode)
        if cfg.separate_encoders:
            h_u = tempenc.encode_temporal(users, self.encoder, params, "tempenc.user", attn_out)
            h_s = tempenc.encode_temporal(services, self.encoder, params, "tempenc.service", attn_out)
        else:
            B = wb.n_targets
            both = tempenc.encode_temporal(ops.concat([users, services], axis=0), self.encoder, params,
                                           "tempenc", attn_out)
            h_u = ops.index(both, slice(0, B))
            h_s = ops.index(both, slice(B, 2 * B))
        return predictor.predict(h_u, h_s, params)

    # -- persistence -------------------------------------------------------
    def sidecar(self, **extra) -> dict:
        meta = {
            "format": 1,
            "library_version": __version__,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "n_users": self.n_users,
            "n_services": self.n_services,
            "value_min": self.value_min,
            "value_max": self.value_max,
        }
        meta.update(extra)
        return meta

    def save(self, path: str | Path, optimizer_state: Mapping[str, np.ndarray] | None = None, **extra) -> None:
        save_checkpoint(path, self.ps, self.sidecar(**extra), extra=optimizer_state)

    @classmethod
    def load(cls, path: str | Path) -> tuple["GACLModel", dict, dict[str, np.ndarray]]:
        """Return (model, sidecar metadata, remaining non-parameter arrays)."""
        arrays, meta = load_checkpoint(path)
        if "config" not in meta:
            raise CheckpointError(f"{path}: missing or incomplete JSON sidecar")
        config = ModelConfig.from_mapping(meta["config"])
        model = cls(config, meta["n_users"], meta["n_services"], meta["value_min"], meta["value_max"])
        load_into(model.ps, arrays)
        rest = {k: v for k, v in arrays.items() if k not in model.ps}
        return model, meta, rest
