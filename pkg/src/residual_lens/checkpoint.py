"""GPT-2 checkpoint loading and writing.

A model directory holds ``config.json`` and ``model.safetensors`` in the layout
the published GPT-2 checkpoints use. Weights of the projection layers are
stored as ``(in_features, out_features)`` so the runtime can always compute
``x @ W + b``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, NamedTuple

import numpy as np

from .errors import CheckpointError, MalformedHeaderError, MissingTensorError, ShapeMismatchError

CONFIG_FILE = "config.json"
WEIGHTS_FILE = "model.safetensors"

_DTYPES = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "F64": np.dtype("<f8"),
}
# Buffers some exports carry alongside the weights; they hold no parameters.
_IGNORED_SUFFIXES = (".attn.bias", ".attn.masked_bias")
_PREFIX = "transformer."
_MAX_HEADER = 100_000_000


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int
    n_head: int
    n_embd: int
    vocab_size: int
    n_ctx: int
    layer_norm_epsilon: float = 1e-5
    n_inner: int | None = None

    def __post_init__(self):
        for name in ("n_layer", "n_head", "n_embd", "vocab_size", "n_ctx"):
            if int(getattr(self, name)) < 1:
                raise CheckpointError(f"config.{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise CheckpointError("config.vocab_size must be >= 2")
        if self.n_embd % self.n_head:
            raise CheckpointError(f"n_embd={self.n_embd} is not divisible by n_head={self.n_head}")
        if not self.layer_norm_epsilon > 0:
            raise CheckpointError("config.layer_norm_epsilon must be positive")

    @property
    def d_mlp(self) -> int:
        return self.n_inner or 4 * self.n_embd

    @property
    def head_dim(self) -> int:
        return self.n_embd // self.n_head

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ModelConfig":
        def pick(*names, default=None):
            for n in names:
                if raw.get(n) is not None:
                    return raw[n]
            if default is None:
                raise CheckpointError(f"config is missing required key {names[0]!r}")
            return default

        act = raw.get("activation_function", "gelu_new")
        if act not in ("gelu_new", "gelu_pytorch_tanh"):
            raise CheckpointError(f"unsupported activation_function {act!r}")
        return cls(
            n_layer=int(pick("n_layer", "num_hidden_layers")),
            n_head=int(pick("n_head", "num_attention_heads")),
            n_embd=int(pick("n_embd", "hidden_size")),
            vocab_size=int(pick("vocab_size")),
            n_ctx=int(pick("n_ctx", "n_positions", "max_position_embeddings")),
            layer_norm_epsilon=float(pick("layer_norm_epsilon", default=1e-5)),
            n_inner=raw.get("n_inner"),
        )

    def to_dict(self) -> dict:
        # The extra keys let other GPT-2 tooling open the same directory.
        return {
            "model_type": "gpt2",
            "architectures": ["GPT2LMHeadModel"],
            "activation_function": "gelu_new",
            "n_layer": self.n_layer,
            "n_head": self.n_head,
            "n_embd": self.n_embd,
            "vocab_size": self.vocab_size,
            "n_ctx": self.n_ctx,
            "n_positions": self.n_ctx,
            "n_inner": self.n_inner,
            "layer_norm_epsilon": self.layer_norm_epsilon,
            "tie_word_embeddings": True,
        }


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape for every tensor the config requires."""
    d, m = config.n_embd, config.d_mlp
    shapes: dict[str, tuple[int, ...]] = {
        "wte.weight": (config.vocab_size, d),
        "wpe.weight": (config.n_ctx, d),
    }
    for i in range(config.n_layer):
        p = f"h.{i}."
        shapes.update({
            p + "ln_1.weight": (d,),
            p + "ln_1.bias": (d,),
            p + "attn.c_attn.weight": (d, 3 * d),
            p + "attn.c_attn.bias": (3 * d,),
            p + "attn.c_proj.weight": (d, d),
            p + "attn.c_proj.bias": (d,),
            p + "ln_2.weight": (d,),
            p + "ln_2.bias": (d,),
            p + "mlp.c_fc.weight": (d, m),
            p + "mlp.c_fc.bias": (m,),
            p + "mlp.c_proj.weight": (m, d),
            p + "mlp.c_proj.bias": (d,),
        })
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


class LayerWeights(NamedTuple):
    ln_1_g: np.ndarray
    ln_1_b: np.ndarray
    attn_w: np.ndarray
    attn_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    ln_2_g: np.ndarray
    ln_2_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    mlp_proj_w: np.ndarray
    mlp_proj_b: np.ndarray


@dataclass(frozen=True, eq=False)
class CheckpointBundle:
    """Validated, read-only model weights.

    The token embedding table doubles as the output head: logits are
    ``final_ln(x) @ wte.T``.
    """

    config: ModelConfig
    tensors: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        validate_tensors(self.config, self.tensors)
        frozen = {}
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", MappingProxyType(frozen))

    def __eq__(self, other):
        if not isinstance(other, CheckpointBundle):
            return NotImplemented
        if self.config != other.config or self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            self.tensors[k].shape == other.tensors[k].shape
            and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )

    __hash__ = None

    @property
    def wte(self) -> np.ndarray:
        return self.tensors["wte.weight"]

    @property
    def wpe(self) -> np.ndarray:
        return self.tensors["wpe.weight"]

    @property
    def ln_f(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors["ln_f.weight"], self.tensors["ln_f.bias"]

    @cached_property
    def unembedding64(self) -> np.ndarray:
        # Transposed float64 copy, built once; the logit lens projects many
        # states per prompt and re-widening the table each time dominates.
        return np.ascontiguousarray(self.wte.T, dtype=np.float64)

    def layer(self, i: int) -> LayerWeights:
        if not 0 <= i < self.config.n_layer:
            raise IndexError(f"layer {i} out of range for n_layer={self.config.n_layer}")
        t, p = self.tensors, f"h.{i}."
        return LayerWeights(
            t[p + "ln_1.weight"], t[p + "ln_1.bias"],
            t[p + "attn.c_attn.weight"], t[p + "attn.c_attn.bias"],
            t[p + "attn.c_proj.weight"], t[p + "attn.c_proj.bias"],
            t[p + "ln_2.weight"], t[p + "ln_2.bias"],
            t[p + "mlp.c_fc.weight"], t[p + "mlp.c_fc.bias"],
            t[p + "mlp.c_proj.weight"], t[p + "mlp.c_proj.bias"],
        )


def validate_tensors(config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
    if not tensors:
        raise CheckpointError("checkpoint contains no tensors")
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in tensors:
            raise MissingTensorError(f"missing tensor {name!r}", tensor=name)
        got = tuple(np.shape(tensors[name]))
        if got != shape:
            raise ShapeMismatchError(f"tensor {name!r} has shape {got}, expected {shape}", tensor=name)
        if not np.all(np.isfinite(tensors[name])):
            raise CheckpointError(f"tensor {name!r} contains non-finite values", tensor=name)
    extras = sorted(set(tensors) - set(shapes))
    if extras:
        raise CheckpointError(f"unexpected tensor {extras[0]!r}", tensor=extras[0])


# -- safetensors container ---------------------------------------------------


def read_safetensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read every tensor from a safetensors file into float32 arrays."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8:
        raise MalformedHeaderError(f"{path}: file too short for a safetensors header")
    (n,) = struct.unpack("<Q", raw[:8])
    if n > _MAX_HEADER or 8 + n > len(raw):
        raise MalformedHeaderError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    header.pop("__metadata__", None)
    data = memoryview(raw)[8 + n :]

    out: dict[str, np.ndarray] = {}
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"{path}: bad header entry for {name!r}", tensor=name) from exc
        if dtype == "BF16":
            np_dtype = np.dtype("<u2")
        elif dtype in _DTYPES:
            np_dtype = _DTYPES[dtype]
        else:
            raise MalformedHeaderError(f"{path}: unsupported dtype {dtype!r} for {name!r}", tensor=name)
        count = int(np.prod(shape)) if shape else 1
        if not 0 <= begin <= end <= len(data) or end - begin != count * np_dtype.itemsize:
            raise MalformedHeaderError(f"{path}: data offsets of {name!r} are inconsistent", tensor=name)
        arr = np.frombuffer(data[begin:end], dtype=np_dtype).reshape(shape)
        if dtype == "BF16":
            arr = (arr.astype(np.uint32) << 16).view(np.float32)
        out[name] = arr.astype(np.float32)
    return out


def write_safetensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        buf = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(np.shape(tensors[name])),
            "data_offsets": [offset, offset + len(buf)],
        }
        chunks.append(buf)
        offset += len(buf)
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)


# -- model directories ---------------------------------------------------------


def _canonicalize(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    lm_head = None
    for name, arr in tensors.items():
        key = name[len(_PREFIX):] if name.startswith(_PREFIX) else name
        if key.endswith(_IGNORED_SUFFIXES):
            continue
        if key == "lm_head.weight":
            lm_head = arr
            continue
        out[key] = arr
    if lm_head is not None:
        wte = out.get("wte.weight")
        if wte is None or wte.shape != lm_head.shape or not np.array_equal(wte, lm_head):
            raise CheckpointError(
                "lm_head.weight differs from wte.weight; only tied output heads are supported",
                tensor="lm_head.weight",
            )
    return out


def load_checkpoint(model_dir: str | os.PathLike) -> CheckpointBundle:
    model_dir = Path(model_dir).expanduser()
    cfg_path = model_dir / CONFIG_FILE
    try:
        raw_cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"{cfg_path} not found") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot parse {cfg_path}: {exc}") from exc
    config = ModelConfig.from_dict(raw_cfg)
    tensors = _canonicalize(read_safetensors(model_dir / WEIGHTS_FILE))
    return CheckpointBundle(config, tensors)


def write_checkpoint(bundle: CheckpointBundle, model_dir: str | os.PathLike) -> None:
    model_dir = Path(model_dir)
    validate_tensors(bundle.config, bundle.tensors)
    try:
        model_dir.mkdir(parents=True, exist_ok=True)
        (model_dir / CONFIG_FILE).write_text(
            json.dumps(bundle.config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        write_safetensors(model_dir / WEIGHTS_FILE, bundle.tensors, metadata={"format": "pt"})
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint to {model_dir}: {exc}") from exc


def synthetic_checkpoint(config: ModelConfig, seed: int = 0, scale: float = 0.3) -> CheckpointBundle:
    """Random weights for a model of the given shape.

    Layer-norm gains sit near 1 and biases near 0 so activations stay in a
    realistic range; everything else is Gaussian with std ``scale``.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(("ln_1.weight", "ln_2.weight", "ln_f.weight")):
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith(".bias"):
            arr = 0.1 * rng.standard_normal(shape)
        else:
            arr = scale * rng.standard_normal(shape)
        tensors[name] = arr.astype(np.float32)
    return CheckpointBundle(config, tensors)
