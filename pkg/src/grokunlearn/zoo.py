"""Desk-scale model families and the GRKF checkpoint format.

Three families share one flat-parameter view:

* ``mlp`` -- fully connected ReLU network, ``layer_sizes = [in, h1, ..., out]``.
* ``transformer_lite`` -- decoder-only, learned positional embeddings, GELU
  MLP, no layer norm; logits are read from the last position.
* ``cnn_lite`` -- three 3x3 ReLU convolutions (the last two with stride 2)
  followed by two linear layers.

Checkpoint layout (all integers little-endian)::

    b"GRKF" | u16 version | u32 n_tensors
    per tensor: u16 name_len | name utf-8 | u8 dtype (1 = f32) | u8 ndim
                | u32 dims[ndim] | u64 offset into payload
    payload: concatenated little-endian float32 data

A JSON sidecar ``<path>.json`` holds the model spec, seed, step and any
trajectory summary.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numkernel as nk
from .numkernel import GradVector, RngState, ShapeError, Tensor

FAMILIES = ("mlp", "transformer_lite", "cnn_lite")
MAGIC = b"GRKF"
FORMAT_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4")}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    layer_sizes: tuple = ()
    vocab_size: int = 0
    seq_len: int = 0
    embed_dim: int = 0
    heads: int = 1
    n_blocks: int = 1
    mlp_dim: int = 0
    n_classes: int = 0
    in_channels: int = 1
    image_size: int = 8
    channels: tuple = (8, 16, 16)
    hidden: int = 32
    seed: int = 0
    init_scale: float = 1.0

    @property
    def activation(self) -> str:
        return "gelu" if self.family == "transformer_lite" else "relu"

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1] if self.family == "mlp" else self.n_classes

    @property
    def rep_dim(self) -> int:
        if self.family == "mlp":
            return self.layer_sizes[-2]
        if self.family == "transformer_lite":
            return self.embed_dim
        return self.hidden

    def validate(self) -> "ModelSpec":
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family == "mlp":
            if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
                raise ValueError("mlp needs >= 2 positive layer sizes")
        elif self.family == "transformer_lite":
            sizes = (self.vocab_size, self.seq_len, self.embed_dim, self.heads, self.n_blocks, self.n_classes)
            if min(sizes) < 1:
                raise ValueError("transformer_lite sizes must be positive and n_blocks >= 1")
            if self.embed_dim % self.heads:
                raise ValueError("embed_dim must be divisible by heads")
        else:
            if len(self.channels) != 3 or min(self.channels) < 1 or self.n_classes < 1 or self.hidden < 1:
                raise ValueError("cnn_lite needs 3 positive conv widths, hidden and n_classes")
            if self.image_size < 4 or self.image_size % 4:
                raise ValueError("cnn_lite image_size must be a positive multiple of 4")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        for k in ("layer_sizes", "channels"):
            if k in d:
                d[k] = tuple(d[k])
        d.pop("activation", None)
        return cls(**d).validate()


@dataclass
class Params:
    """Named float32 parameter arrays in a fixed order."""

    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        self.arrays = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.arrays.items()}

    @property
    def total_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    @property
    def shapes(self) -> dict:
        return {k: a.shape for k, a in self.arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def flatten(self) -> GradVector:
        return GradVector.from_arrays(self.arrays)

    def unflatten(self, vec: GradVector | np.ndarray) -> "Params":
        values = vec.values if isinstance(vec, GradVector) else np.asarray(vec)
        if values.size != self.total_count:
            raise ShapeError("flat vector length does not match parameter count")
        out, off = {}, 0
        for k, a in self.arrays.items():
            out[k] = values[off : off + a.size].reshape(a.shape).copy()
            off += a.size
        return Params(out)

    def tensors(self, requires_grad: bool = True, dtype=None) -> dict:
        dtype = dtype or nk.get_dtype()
        return {k: Tensor(a.astype(dtype), requires_grad=requires_grad) for k, a in self.arrays.items()}

    def copy(self) -> "Params":
        return Params({k: a.copy() for k, a in self.arrays.items()})

    def equal(self, other: "Params") -> bool:
        return list(self.arrays) == list(other.arrays) and all(
            np.array_equal(a, other.arrays[k]) for k, a in self.arrays.items()
        )

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(a.astype(np.float64) ** 2)) for a in self.arrays.values()))


def param_shapes(spec: ModelSpec) -> dict:
    spec.validate()
    shapes: dict = {}
    if spec.family == "mlp":
        sizes = spec.layer_sizes
        for i in range(len(sizes) - 1):
            name = "head" if i == len(sizes) - 2 else f"fc{i}"
            shapes[f"{name}.w"] = (sizes[i], sizes[i + 1])
            shapes[f"{name}.b"] = (sizes[i + 1],)
    elif spec.family == "transformer_lite":
        d = spec.embed_dim
        m = spec.mlp_dim or 4 * d
        shapes["embed.tok"] = (spec.vocab_size, d)
        shapes["embed.pos"] = (spec.seq_len, d)
        for b in range(spec.n_blocks):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"blocks.{b}.attn.{w}"] = (d, d)
            shapes[f"blocks.{b}.mlp.w1"] = (d, m)
            shapes[f"blocks.{b}.mlp.b1"] = (m,)
            shapes[f"blocks.{b}.mlp.w2"] = (m, d)
            shapes[f"blocks.{b}.mlp.b2"] = (d,)
        shapes["head.w"] = (d, spec.n_classes)
        shapes["head.b"] = (spec.n_classes,)
    else:
        c_in = spec.in_channels
        for i, c in enumerate(spec.channels):
            shapes[f"conv{i}.w"] = (c, c_in, 3, 3)
            shapes[f"conv{i}.b"] = (c,)
            c_in = c
        flat = spec.channels[-1] * (spec.image_size // 4) ** 2
        shapes["fc0.w"] = (flat, spec.hidden)
        shapes["fc0.b"] = (spec.hidden,)
        shapes["head.w"] = (spec.hidden, spec.n_classes)
        shapes["head.b"] = (spec.n_classes,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith(".b"):
        return 0
    return int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]


def build_model(spec: ModelSpec, rng: RngState | None = None) -> Params:
    """Initialise parameters: fan-in uniform for linear/conv, N(0, 0.02) for embeddings.

    Biases share the bound of their layer's weight.
    """
    shapes = param_shapes(spec)
    gen = (rng or RngState(spec.seed)).generator()
    arrays, bound = {}, 1.0
    for name, shape in shapes.items():
        if name.startswith("embed."):
            arrays[name] = gen.normal(0.0, 0.02, size=shape)
            continue
        fan = _fan_in(name, shape)
        if fan:
            bound = 1.0 / math.sqrt(fan)
        arrays[name] = gen.uniform(-bound, bound, size=shape) * spec.init_scale
    return Params(arrays)


# forward --------------------------------------------------------------------


def _as_tensors(params) -> dict:
    if isinstance(params, Params):
        return params.tensors(requires_grad=False)
    return dict(params)


def _check_input(spec: ModelSpec, x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if spec.family == "mlp":
        ok = arr.ndim == 2 and arr.shape[1] == spec.layer_sizes[0]
    elif spec.family == "transformer_lite":
        ok = arr.ndim == 2 and 1 <= arr.shape[1] <= spec.seq_len and arr.dtype.kind in "iu"
    else:
        s = spec.image_size
        ok = arr.ndim == 4 and arr.shape[1:] == (spec.in_channels, s, s)
    if not ok:
        raise ShapeError(f"input of shape {arr.shape} does not fit {spec.family}")
    return arr


def _run(spec: ModelSpec, P: dict, x, trace: dict | None = None) -> Tensor:
    """Shared forward; returns [n, classes] logits ([n, t, classes] for sequences)."""
    _check_input(spec, x)
    preacts = [] if trace is not None else None
    if spec.family == "mlp":
        h = x if isinstance(x, Tensor) else Tensor(x)
        n_layers = len(spec.layer_sizes) - 1
        for i in range(n_layers - 1):
            z = h @ P[f"fc{i}.w"] + P[f"fc{i}.b"]
            if preacts is not None:
                preacts.append(z.data)
            h = nk.relu(z)
        if trace is not None:
            trace["penultimate"] = h.data
        out = h @ P["head.w"] + P["head.b"]
    elif spec.family == "cnn_lite":
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i in range(3):
            z = nk.conv2d(h, P[f"conv{i}.w"], P[f"conv{i}.b"], stride=1 if i == 0 else 2, padding=1)
            if preacts is not None:
                preacts.append(z.data.reshape(z.shape[0], -1))
            h = nk.relu(z)
        h = h.reshape(h.shape[0], -1)
        z = h @ P["fc0.w"] + P["fc0.b"]
        if preacts is not None:
            preacts.append(z.data)
        h = nk.relu(z)
        if trace is not None:
            trace["penultimate"] = h.data
        out = h @ P["head.w"] + P["head.b"]
    else:
        tokens = np.asarray(x.data if isinstance(x, Tensor) else x)
        n, t = tokens.shape
        d, nh = spec.embed_dim, spec.heads
        dh = d // nh
        h = nk.embedding(P["embed.tok"], tokens) + P["embed.pos"][:t]
        mask = np.triu(np.full((t, t), -1e4, dtype=h.data.dtype), k=1)
        for b in range(spec.n_blocks):
            pre = f"blocks.{b}"

            def heads(z):
                return z.reshape(n, t, nh, dh).transpose(0, 2, 1, 3)

            q = heads(h @ P[f"{pre}.attn.wq"])
            k = heads(h @ P[f"{pre}.attn.wk"])
            v = heads(h @ P[f"{pre}.attn.wv"])
            scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + mask
            att = nk.softmax(scores) @ v
            h = h + att.transpose(0, 2, 1, 3).reshape(n, t, d) @ P[f"{pre}.attn.wo"]
            z = h @ P[f"{pre}.mlp.w1"] + P[f"{pre}.mlp.b1"]
            h = h + nk.gelu(z) @ P[f"{pre}.mlp.w2"] + P[f"{pre}.mlp.b2"]
        if trace is not None:
            trace["penultimate"] = h.data[:, -1, :]
            trace["sequence"] = True
        out = h @ P["head.w"] + P["head.b"]
    if trace is not None:
        trace["preacts"] = preacts
    return out


def forward(spec: ModelSpec, params, batch) -> Tensor:
    """Logits of shape [batch, classes]. ``params`` may be Params or a dict of Tensors."""
    out = _run(spec, _as_tensors(params), batch)
    if spec.family == "transformer_lite":
        out = out[:, -1, :]
    return out


def sequence_logits(spec: ModelSpec, params, tokens) -> Tensor:
    """Per-position logits [n, t, classes] of a transformer_lite model."""
    if spec.family != "transformer_lite":
        raise ValueError("sequence_logits needs a transformer_lite model")
    return _run(spec, _as_tensors(params), tokens)


def predict(spec: ModelSpec, params: Params, inputs, batch_size: int = 4096) -> np.ndarray:
    """Logits as a float32 array, evaluated in chunks without recording a graph."""
    P = params.tensors(requires_grad=False) if isinstance(params, Params) else params
    chunks = [forward(spec, P, inputs[i : i + batch_size]).data for i in range(0, len(inputs), batch_size)]
    return np.concatenate(chunks, axis=0)


def penultimate_activations(spec: ModelSpec, params: Params, inputs, batch_size: int = 4096) -> np.ndarray:
    """Activations feeding the classifier head, one row per example in order."""
    if len(inputs) == 0:
        raise ValueError("penultimate_activations needs a nonempty dataset")
    P = params.tensors(requires_grad=False)
    rows = []
    for i in range(0, len(inputs), batch_size):
        trace: dict = {}
        _run(spec, P, inputs[i : i + batch_size], trace)
        rows.append(trace["penultimate"])
    return np.concatenate(rows, axis=0)


def preactivations(spec: ModelSpec, params: Params, inputs) -> list:
    """Per-layer ReLU pre-activations flattened to [n, units] (mlp and cnn_lite only)."""
    if spec.family == "transformer_lite":
        raise ValueError("transformer_lite has no ReLU pre-activations")
    trace: dict = {}
    _run(spec, params.tensors(requires_grad=False) if isinstance(params, Params) else params, inputs, trace)
    return trace["preacts"]


# checkpoints ------------------------------------------------------------------


def save_checkpoint(path, params: Params, meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(params.arrays))]
    payload, offset = [], 0
    for name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        nb = name.encode()
        header.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", 1, arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", offset))
        payload.append(raw)
        offset += len(raw)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(header) + b"".join(payload))
    tmp.replace(path)
    side = Path(str(path) + ".json")
    side.write_text(json.dumps(dict(meta or {}), indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, ModelSpec):
        return o.to_dict()
    raise TypeError(type(o))


def load_checkpoint(path) -> tuple:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path} is not a GRKF checkpoint")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos, table = 10, []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode()
        pos += ln
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        table.append((name, _DTYPE_CODES[code], shape, off))
    arrays = {}
    for name, dt, shape, off in table:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(buf, dtype=dt, count=n, offset=pos + off).reshape(shape).astype(np.float32)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return Params(arrays), meta
