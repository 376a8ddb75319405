"""Error metrics and the serialisable report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

SCHEMA_VERSION = 1
CSV_COLUMNS = ("dataset", "density", "ablation", "mae", "nmae", "rmse", "n_eval")


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.size != a.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {a.size} actual values")
    if p.size == 0:
        raise ValueError("metrics need at least one pair")
    return p, a


def mae(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.mean(np.abs(p - a)))


def nmae(pred, actual) -> float:
    """MAE * |D| / sum(actual)."""
    p, a = _pair(pred, actual)
    total = float(a.sum())
    if total <= 0:
        raise ValueError("NMAE is undefined when the actual values sum to zero")
    return mae(p, a) * a.size / total


def rmse(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


@dataclass
class MetricsReport:
    dataset: str
    density: float
    ablation: str
    mae: float
    nmae: float
    rmse: float
    n_eval: int
    config_hash: str
    wall_time: float = 0.0

    @classmethod
    def from_predictions(cls, pred, actual, *, dataset: str, density: float, ablation: str,
                         config_hash: str, wall_time: float = 0.0) -> "MetricsReport":
        p, a = _pair(pred, actual)
        return cls(dataset=dataset, density=float(density), ablation=ablation, mae=mae(p, a),
                   nmae=nmae(p, a), rmse=rmse(p, a), n_eval=int(p.size), config_hash=config_hash,
                   wall_time=wall_time)

    def to_dict(self, include_timing: bool = False) -> dict:
        """Stable payload; timing is left out unless asked for so reruns compare byte-for-byte."""
        out = {
            "schema": SCHEMA_VERSION,
            "dataset": self.dataset,
            "density": self.density,
            "ablation": self.ablation,
            "mae": self.mae,
            "nmae": self.nmae,
            "rmse": self.rmse,
            "n_eval": self.n_eval,
            "config_hash": self.config_hash,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {data.get('schema')!r}")
        return cls(dataset=data["dataset"], density=data["density"], ablation=data["ablation"],
                   mae=data["mae"], nmae=data["nmae"], rmse=data["rmse"], n_eval=data["n_eval"],
                   config_hash=data["config_hash"], wall_time=data.get("wall_time", 0.0))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.dataset, repr(r.density), r.ablation, repr(r.mae), repr(r.nmae), repr(r.rmse), r.n_eval])
    return buf.getvalue()
