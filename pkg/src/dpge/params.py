"""Model configuration, flat parameter vectors and the checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

MAGIC = b"DPGE0001"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2048
    max_seq_len: int = 64
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    dropout_rate: float = 0.0
    num_labels: int = 2

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "num_layers", "hidden_dim",
                     "num_heads", "ff_dim", "num_labels"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 5 special tokens")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    V, L, H, F = config.vocab_size, config.max_seq_len, config.hidden_dim, config.ff_dim
    shapes = [
        ("emb.word", (V, H)),
        ("emb.position", (L, H)),
        ("emb.segment", (2, H)),
        ("emb.ln.gain", (H,)),
        ("emb.ln.bias", (H,)),
    ]
    for i in range(config.num_layers):
        p = f"layer{i}."
        shapes += [
            (p + "attn.q.weight", (H, H)), (p + "attn.q.bias", (H,)),
            (p + "attn.k.weight", (H, H)), (p + "attn.k.bias", (H,)),
            (p + "attn.v.weight", (H, H)), (p + "attn.v.bias", (H,)),
            (p + "attn.out.weight", (H, H)), (p + "attn.out.bias", (H,)),
            (p + "attn.ln.gain", (H,)), (p + "attn.ln.bias", (H,)),
            (p + "ffn.in.weight", (H, F)), (p + "ffn.in.bias", (F,)),
            (p + "ffn.out.weight", (F, H)), (p + "ffn.out.bias", (H,)),
            (p + "ffn.ln.gain", (H,)), (p + "ffn.ln.bias", (H,)),
        ]
    shapes += [
        ("pooler.weight", (H, H)), ("pooler.bias", (H,)),
        ("nsp.weight", (H, 2)), ("nsp.bias", (2,)),
        ("mlm.transform.weight", (H, H)), ("mlm.transform.bias", (H,)),
        ("mlm.ln.gain", (H,)), ("mlm.ln.bias", (H,)),
        ("mlm.decoder.bias", (V,)),
        ("cls.weight", (H, config.num_labels)), ("cls.bias", (config.num_labels,)),
    ]
    return shapes


def build_registry(config: ModelConfig) -> List[Tuple[str, int, Tuple[int, ...]]]:
    registry, offset = [], 0
    for name, shape in param_shapes(config):
        registry.append((name, offset, shape))
        offset += int(np.prod(shape))
    return registry


class ParamVector:
    """Flat parameter vector with a name -> (offset, shape) registry.

    ``get(name)`` returns a writable view into ``values``.
    """

    def __init__(self, config: ModelConfig, values: np.ndarray):
        self.config = config
        self.registry = build_registry(config)
        self._index = {name: (off, shape) for name, off, shape in self.registry}
        size = self.registry[-1][1] + int(np.prod(self.registry[-1][2]))
        values = np.asarray(values)
        if values.shape != (size,):
            raise ValueError(f"expected {size} parameters, got shape {values.shape}")
        self.values = values

    def __len__(self):
        return self.values.shape[0]

    @property
    def dtype(self):
        return self.values.dtype

    def get(self, name: str) -> np.ndarray:
        off, shape = self._index[name]
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def slice_of(self, name: str) -> slice:
        off, shape = self._index[name]
        return slice(off, off + int(np.prod(shape)))

    def names(self) -> List[str]:
        return [name for name, _, _ in self.registry]

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.config, self.values.astype(dtype))

    def copy(self) -> "ParamVector":
        return ParamVector(self.config, self.values.copy())

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.config, values)

    def views(self, flat: np.ndarray, batch: int | None = None) -> Dict[str, np.ndarray]:
        """Named reshaped views into a (P,) or (B, P) buffer laid out like this vector."""
        out = {}
        for name, off, shape in self.registry:
            n = int(np.prod(shape))
            if batch is None:
                out[name] = flat[off:off + n].reshape(shape)
            else:
                out[name] = flat[:, off:off + n].reshape((batch,) + shape)
        return out


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParamVector:
    """Weights ~ N(0, 0.02^2) truncated at two std; biases 0; layer-norm gains 1."""
    rng = np.random.default_rng(seed)
    params = ParamVector(config, np.zeros(sum(int(np.prod(s)) for _, s in param_shapes(config)),
                                          dtype=dtype))
    for name, _, shape in params.registry:
        view = params.get(name)
        if name.endswith(".gain"):
            view[...] = 1.0
        elif name.endswith(".bias"):
            view[...] = 0.0
        else:
            view[...] = _truncated_normal(rng, shape, 0.02)
    return params


def save_checkpoint(path, params: ParamVector, metadata: dict | None = None) -> None:
    """magic | uint64 LE length | UTF-8 JSON metadata | float32 LE values."""
    meta = dict(metadata or {})
    meta["model_config"] = params.config.to_dict()
    meta["registry"] = [[name, off, list(shape)] for name, off, shape in params.registry]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    values = np.ascontiguousarray(params.values, dtype="<f4")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(values.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[ParamVector, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    (n,) = struct.unpack("<Q", data[8:16])
    meta = json.loads(data[16:16 + n].decode("utf-8"))
    config = ModelConfig(**meta["model_config"])
    registry = [[name, off, list(shape)] for name, off, shape in build_registry(config)]
    if meta.get("registry") != registry:
        raise CheckpointError(f"{path}: registry does not match the stored model config")
    values = np.frombuffer(data[16 + n:], dtype="<f4").astype(np.float32)
    return ParamVector(config, values), meta
