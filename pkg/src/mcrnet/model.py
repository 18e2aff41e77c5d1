"""Asymmetric autoencoder for quantized phase-shift vectors.

Encoder: n stride-2 conv stages (GELU), a stack of pre-norm MHSA blocks, then
a per-position dense projection to a single channel. The latent keeps the
sequence layout, length hw / 2^n.

Decoder: n stride-2 transposed-conv stages (ReLU) back to full length,
a few depthwise-gated modulation blocks, then a 1x1 conv back to one channel.
The decoder is deliberately much smaller than the encoder: it is the side that
runs at the receiver.

Weights file (magic "MCRW"): version u16=1, u32 length + UTF-8 config record
(canonical key-sorted text), then per tensor: u16 name length + name,
u8 dtype (0 = float32), u8 rank, rank x u32 dims, row-major little-endian
payload. All integers little-endian. Tensor records are written in sorted
name order so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Parameter, ParameterSet, Tensor

WEIGHTS_MAGIC = b"MCRW"
WEIGHTS_VERSION = 1
_DTYPE_F32 = 0


@dataclass(frozen=True)
class ModelConfig:
    hw: int
    channels: int = 64
    cr_stages: int = 3
    mhsa_blocks: int = 3
    heads: int = 4
    dwcg_modules: int = 2

    def validate(self) -> "ModelConfig":
        if self.cr_stages not in (1, 2, 3):
            raise ConfigError(f"cr_stages must be 1, 2 or 3, got {self.cr_stages}")
        if self.hw % (1 << self.cr_stages) != 0:
            raise ConfigError(f"hw={self.hw} not divisible by 2^{self.cr_stages}")
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads != 0:
            raise ConfigError(
                f"channels={self.channels} must be a positive multiple of heads={self.heads}"
            )
        if self.mhsa_blocks < 0 or self.dwcg_modules < 0:
            raise ConfigError("mhsa_blocks and dwcg_modules must be >= 0")
        return self

    @property
    def latent_len(self) -> int:
        return self.hw >> self.cr_stages

    @property
    def compression_ratio(self) -> str:
        return f"1/{1 << self.cr_stages}"

    def record(self) -> str:
        """Canonical key-sorted text form, embedded in weights files."""
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        return "".join(f"{k}={vals[k]}\n" for k in sorted(vals))

    @classmethod
    def from_record(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = int(val)
        known = {f.name for f in fields(cls)}
        unknown = set(kv) - known
        if unknown or set(kv) != known:
            raise FormatError(f"bad config record: keys {sorted(kv)}")
        return cls(**kv).validate()


class Model:
    def __init__(self, config: ModelConfig, params: ParameterSet):
        self.config = config
        self.params = params

    # -- forward passes --------------------------------------------------

    def _as_tensor(self, x, dtype) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=dtype))

    @property
    def dtype(self):
        return self.params["enc.conv0.w"].dtype

    def encode(self, x, params: ParameterSet | None = None) -> Tensor:
        """Map (..., hw, 1) normalized phases to the (..., hw/2^n, 1) latent."""
        p = params if params is not None else self.params
        cfg = self.config
        h = self._as_tensor(x, self.dtype)
        if h.shape[-2] != cfg.hw or h.shape[-1] != 1:
            raise ShapeError(f"encode: expected (..., {cfg.hw}, 1), got {h.shape}")
        for i in range(cfg.cr_stages):
            h = ops.gelu(ops.conv1d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], 2, 1))
        for j in range(cfg.mhsa_blocks):
            pre = f"enc.attn{j}"
            normed = ops.layer_norm(h, p[f"{pre}.ln.g"], p[f"{pre}.ln.b"])
            attended = ops.mhsa(
                normed,
                cfg.heads,
                [p[f"{pre}.h{i}.wq"] for i in range(cfg.heads)],
                [p[f"{pre}.h{i}.wk"] for i in range(cfg.heads)],
                [p[f"{pre}.h{i}.wv"] for i in range(cfg.heads)],
                p[f"{pre}.wo"],
            )
            h = h + attended
        return ops.dense(h, p["enc.head.w"], p["enc.head.b"])

    def decode(self, z, params: ParameterSet | None = None) -> Tensor:
        """Map the (..., hw/2^n, 1) latent back to a (..., hw, 1) reconstruction."""
        p = params if params is not None else self.params
        cfg = self.config
        h = self._as_tensor(z, self.dtype)
        if h.shape[-2] != cfg.latent_len or h.shape[-1] != 1:
            raise ShapeError(f"decode: expected (..., {cfg.latent_len}, 1), got {h.shape}")
        for i in range(cfg.cr_stages):
            h = ops.relu(
                ops.conv_transpose1d(h, p[f"dec.convt{i}.w"], p[f"dec.convt{i}.b"], 2, 1, 1)
            )
        for m in range(cfg.dwcg_modules):
            pre = f"dec.dwcg{m}"
            h = dwcg_forward(
                h, p[f"{pre}.conv3.w"], p[f"{pre}.conv3.b"], p[f"{pre}.beta"],
                p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"],
            )
        return ops.conv1d(h, p["dec.head.w"], p["dec.head.b"], 1, 0)

    def reconstruct(self, x, params: ParameterSet | None = None) -> Tensor:
        return self.decode(self.encode(x, params), params)


def dwcg_forward(z_in: Tensor, w3: Tensor, b3: Tensor, beta: Tensor,
                 w1: Tensor, b1: Tensor) -> Tensor:
    """Depthwise-gated modulation: Swish(DWConv_k3(z)) * DWConv_k1(z)."""
    gate = ops.swish(ops.dwconv1d(z_in, w3, b3), beta)
    value = ops.dwconv1d(z_in, w1, b1)
    return ops.elementwise_mul(gate, value)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Build with uniform +-1/sqrt(fan_in) weights, zero biases, Swish beta = 1.

    Parameters are created in a fixed order from a single seeded stream, so
    two builds with the same seed are bit-identical.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    c, n = config.channels, config.cr_stages

    def weight(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        params.add(Parameter(rng.uniform(-bound, bound, shape).astype(dtype), name))

    def zeros(name, shape):
        params.add(Parameter(np.zeros(shape, dtype=dtype), name))

    def const(name, value):
        params.add(Parameter(np.atleast_1d(np.asarray(value, dtype=dtype)), name))

    c_in = 1
    for i in range(n):
        weight(f"enc.conv{i}.w", (3, c_in, c), 3 * c_in)
        zeros(f"enc.conv{i}.b", (c,))
        c_in = c
    d_k = c // config.heads
    for j in range(config.mhsa_blocks):
        pre = f"enc.attn{j}"
        const(f"{pre}.ln.g", np.ones(c))
        zeros(f"{pre}.ln.b", (c,))
        for i in range(config.heads):
            weight(f"{pre}.h{i}.wq", (c, d_k), c)
            weight(f"{pre}.h{i}.wk", (c, d_k), c)
            weight(f"{pre}.h{i}.wv", (c, d_k), c)
        weight(f"{pre}.wo", (c, c), c)
    weight("enc.head.w", (c, 1), c)
    zeros("enc.head.b", (1,))

    c_in = 1
    for i in range(n):
        weight(f"dec.convt{i}.w", (3, c_in, c), 3 * c_in)
        zeros(f"dec.convt{i}.b", (c,))
        c_in = c
    for m in range(config.dwcg_modules):
        pre = f"dec.dwcg{m}"
        weight(f"{pre}.conv3.w", (3, c), 3)
        zeros(f"{pre}.conv3.b", (c,))
        const(f"{pre}.beta", 1.0)
        weight(f"{pre}.conv1.w", (1, c), 1)
        zeros(f"{pre}.conv1.b", (c,))
    weight("dec.head.w", (1, c, 1), c)
    zeros("dec.head.b", (1,))

    return Model(config, params)


def count_params(model: Model) -> dict:
    """Exact scalar parameter counts per side (biases and Swish betas included).

    Closed forms, with C channels, n stride-2 stages, B attention blocks,
    M gated modules (head count does not change the total):

        encoder = (3C + C) + (n-1)(3C^2 + C) + B(4C^2 + 2C) + (C + 1)
        decoder = (3C + C) + (n-1)(3C^2 + C) + M(6C + 1)    + (C + 1)
    """
    return {
        "encoder": model.params.n_params("enc."),
        "decoder": model.params.n_params("dec."),
    }


# ---------------------------------------------------------------------------
# weights file I/O
# ---------------------------------------------------------------------------

def save_weights(model: Model, path) -> None:
    out = io.BytesIO()
    out.write(WEIGHTS_MAGIC)
    out.write(struct.pack("<H", WEIGHTS_VERSION))
    record = model.config.record().encode("utf-8")
    out.write(struct.pack("<I", len(record)))
    out.write(record)
    for name in sorted(model.params.names()):
        data = np.asarray(model.params[name].data, dtype="<f4")  # keeps rank, incl. 0-d
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<BB", _DTYPE_F32, data.ndim))
        for dim in data.shape:
            out.write(struct.pack("<I", dim))
        out.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def _take(buf: memoryview, offset: int, count: int, what: str):
    if offset + count > len(buf):
        raise FormatError(f"weights file truncated while reading {what}")
    return buf[offset:offset + count], offset + count


def load_weights(path, config: ModelConfig | None = None) -> Model:
    """Rebuild a Model from an MCRW file.

    When `config` is given it overrides the embedded record; any tensor whose
    stored dims disagree with that config raises a FormatError naming the
    tensor and both shapes.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = memoryview(raw)
    chunk, pos = _take(buf, 0, 4, "magic")
    if bytes(chunk) != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {bytes(chunk)!r}, expected {WEIGHTS_MAGIC!r}")
    chunk, pos = _take(buf, pos, 2, "version")
    version = struct.unpack("<H", chunk)[0]
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    chunk, pos = _take(buf, pos, 4, "config length")
    (rec_len,) = struct.unpack("<I", chunk)
    chunk, pos = _take(buf, pos, rec_len, "config record")
    embedded = ModelConfig.from_record(bytes(chunk).decode("utf-8"))
    target = config if config is not None else embedded

    model = build_model(target, seed=0)
    seen: set[str] = set()
    while pos < len(buf):
        chunk, pos = _take(buf, pos, 2, "tensor name length")
        (name_len,) = struct.unpack("<H", chunk)
        chunk, pos = _take(buf, pos, name_len, "tensor name")
        name = bytes(chunk).decode("utf-8")
        chunk, pos = _take(buf, pos, 2, f"{name} header")
        dtype_code, rank = struct.unpack("<BB", chunk)
        if dtype_code != _DTYPE_F32:
            raise FormatError(f"tensor {name}: unknown dtype code {dtype_code}")
        dims = []
        for _ in range(rank):
            chunk, pos = _take(buf, pos, 4, f"{name} dims")
            dims.append(struct.unpack("<I", chunk)[0])
        shape = tuple(dims)
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        chunk, pos = _take(buf, pos, n_bytes, f"{name} payload")
        if name not in model.params:
            raise FormatError(f"tensor {name}: not part of config {target}")
        expected = model.params[name].data.shape
        if shape != expected:
            raise FormatError(f"tensor {name}: expected dims {expected}, found {shape}")
        values = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        model.params[name].data = values.astype(np.float32).copy()
        seen.add(name)
    missing = set(model.params.names()) - seen
    if missing:
        raise FormatError(f"weights file missing tensors: {sorted(missing)[:3]}")
    return model
