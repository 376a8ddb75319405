"""Named trainable parameters and the binary checkpoint container."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"GACLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint or shape mismatch on load."""


class ParameterStore:
    """Ordered map of parameter name to a leaf ``Tensor`` with requires_grad.

    ``decay`` marks which parameters take part in L2 / weight decay
    (weight matrices and embeddings, not biases or slopes).
    """

    def __init__(self, init_seed: int = 0):
        self.init_seed = int(init_seed)
        self._params: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}

    def add(self, name: str, value, decay: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self._params[name] = t
        self._decay[name] = bool(decay)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, Tensor]:
        """Fresh leaf tensors sharing (read-only) data, for one worker's tape."""
        out = {}
        for name, t in self._params.items():
            view = t.data.view()
            view.flags.writeable = False
            out[name] = Tensor(view, requires_grad=True, name=name)
        return out

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._params)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def set_values(self, values: Mapping[str, np.ndarray]) -> None:
        for name, arr in values.items():
            t = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: expected {t.shape}, got {arr.shape}")
            t.data[...] = arr

    def content_hash(self) -> str:
        return hashlib.sha256(encode_arrays(self.copy_values())).hexdigest()


# -- initialisers ----------------------------------------------------------

def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def normal(rng: np.random.Generator, shape, std: float = 0.1) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


# -- checkpoint container --------------------------------------------------
# layout: MAGIC, u32 version, u32 count, then per entry
#   u32 name_len, name (utf-8), u32 ndim, u64 dims[ndim], f64 values (little endian, C order)

def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8").copy(order="C")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_arrays(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8
    try:
        version, count = struct.unpack_from("<II", view, pos)
        pos += 8
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(blob):
                raise CheckpointError(f"truncated checkpoint: entry {name!r} is incomplete")
            arr = np.frombuffer(view[pos:pos + 8 * size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += 8 * size
            out[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return out


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path: str | Path, ps: ParameterStore, sidecar: Mapping,
                    extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write parameters (plus optional extra arrays such as optimizer moments)."""
    arrays = ps.copy_values()
    for k, v in (extra or {}).items():
        arrays[k] = v
    Path(path).write_bytes(encode_arrays(arrays))
    meta = dict(sidecar)
    meta["param_names"] = ps.names()
    meta["param_count"] = ps.count()
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = decode_arrays(Path(path).read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return arrays, meta


def load_into(ps: ParameterStore, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``ps``; every parameter must be present with its exact shape."""
    missing = [n for n in ps.names() if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing)}")
    ps.set_values({n: arrays[n] for n in ps.names()})
