"""U-Net style fully convolutional cloud segmenter.

Six encode blocks (two 3x3 conv + ReLU, followed by 2x2 max pooling on all
but the last) and five decode blocks (2x2 stride-2 transposed conv, copy of
the matching encode output, two 3x3 conv + ReLU). A final 1x1 conv reduces
to one channel and a sigmoid yields the cloud probability map.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import ConfigError, ContractError, FormatError, IntegrityError, ShapeError

CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 192
    in_channels: int = 4
    base_channels: int = 32
    channel_cap: int = 1024
    encode_blocks: int = 6
    decode_blocks: int = 5

    def __post_init__(self):
        if self.encode_blocks < 1 or self.decode_blocks != self.encode_blocks - 1:
            raise ConfigError("decode_blocks must equal encode_blocks - 1")
        if min(self.input_size, self.in_channels, self.base_channels, self.channel_cap) <= 0:
            raise ConfigError("network sizes must be positive")
        if self.input_size % self.downsample:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**{self.encode_blocks - 1}"
            )

    @property
    def downsample(self) -> int:
        return 2 ** (self.encode_blocks - 1)

    def encode_channels(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.channel_cap) for i in range(self.encode_blocks)]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Ordered name -> shape table for every trainable tensor."""
        shapes: dict[str, tuple[int, ...]] = {}
        chans = self.encode_channels()
        prev = self.in_channels
        for i, ch in enumerate(chans):
            shapes[f"enc{i}.conv1.w"] = (ch, prev, 3, 3)
            shapes[f"enc{i}.conv1.b"] = (ch,)
            shapes[f"enc{i}.conv2.w"] = (ch, ch, 3, 3)
            shapes[f"enc{i}.conv2.b"] = (ch,)
            prev = ch
        for j in range(self.decode_blocks):
            skip = chans[self.encode_blocks - 2 - j]
            shapes[f"dec{j}.up.w"] = (prev, skip, 2, 2)
            shapes[f"dec{j}.up.b"] = (skip,)
            shapes[f"dec{j}.conv1.w"] = (skip, 2 * skip, 3, 3)
            shapes[f"dec{j}.conv1.b"] = (skip,)
            shapes[f"dec{j}.conv2.w"] = (skip, skip, 3, 3)
            shapes[f"dec{j}.conv2.b"] = (skip,)
            prev = skip
        shapes["out.w"] = (1, prev)
        shapes["out.b"] = (1,)
        return shapes


def _fan_in(shape: tuple[int, ...], name: str) -> int:
    if name.endswith(".up.w"):
        return shape[0]  # each output pixel receives one tap per input channel
    return int(np.prod(shape[1:]))


@dataclass
class ModelParams:
    config: NetworkConfig
    tensors: dict[str, np.ndarray]
    seed: int | None = None
    init: str = ""
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        expected = self.config.param_shapes()
        if list(self.tensors) != list(expected):
            raise ConfigError("parameter names do not match the network config")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.config == other.config
            and self.seed == other.seed
            and self.init == other.init
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.seed, self.init)

    def bump(self) -> None:
        """Mark the tensors as mutated; outstanding tapes become stale."""
        self.version += 1

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.seed, self.init
        )


def init_params(
    cfg: NetworkConfig, seed: int, scale: float | None = None, gain: float = 6.0, dtype=np.float32
) -> ModelParams:
    """Draw weights i.i.d. uniform from a seeded generator; biases start at zero.

    With ``scale`` given, every weight is drawn from ``[-scale, scale]``
    (``scale=1`` is the plain [-1, 1] initialisation). With ``scale=None`` each
    tensor uses the bound ``sqrt(gain / fan_in)``: ``gain=6`` is He-uniform,
    ``gain=1`` the narrower ``sqrt(1 / fan_in)`` variant.
    """
    if scale is not None and not scale > 0:
        raise ConfigError("init scale must be positive")
    if not gain > 0:
        raise ConfigError("init gain must be positive")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        bound = scale if scale is not None else math.sqrt(gain / _fan_in(shape, name))
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    init = f"uniform:{scale}" if scale is not None else f"fan_in:{gain}"
    return ModelParams(cfg, tensors, seed=seed, init=init)


@dataclass
class Tape:
    """Activations recorded by :func:`forward` for a single :func:`backward`."""

    params_id: int
    params_version: int
    records: dict = field(default_factory=dict)
    consumed: bool = False


def forward(params: ModelParams, x: np.ndarray, cfg: NetworkConfig | None = None):
    """Run the network; returns ``(prob_map, tape)``."""
    cfg = cfg or params.config
    if cfg != params.config:
        raise ConfigError("network config does not match parameters")
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"expected input (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
        )
    p = params.tensors
    x = x.astype(params.dtype, copy=False)
    tape = Tape(id(params), params.version)
    rec = tape.records
    skips = []
    h = x
    last = cfg.encode_blocks - 1
    for i in range(cfg.encode_blocks):
        a1 = L.conv2d_forward(h, p[f"enc{i}.conv1.w"], p[f"enc{i}.conv1.b"])
        r1 = L.relu_forward(a1)
        a2 = L.conv2d_forward(r1, p[f"enc{i}.conv2.w"], p[f"enc{i}.conv2.b"])
        r2 = L.relu_forward(a2)
        rec[f"enc{i}"] = (h, a1, r1, a2)
        expected = cfg.input_size // 2**i
        assert r2.shape[2] == expected, f"encode block {i}: spatial {r2.shape[2]} != {expected}"
        skips.append(r2)
        if i < last:
            h, argmax = L.maxpool2_forward(r2)
            rec[f"pool{i}"] = argmax
        else:
            h = r2
    for j in range(cfg.decode_blocks):
        s = cfg.encode_blocks - 2 - j
        h_in = h
        up = L.convtrans2_forward(h_in, p[f"dec{j}.up.w"], p[f"dec{j}.up.b"])
        cat = L.concat_channels(skips[s], up)
        a1 = L.conv2d_forward(cat, p[f"dec{j}.conv1.w"], p[f"dec{j}.conv1.b"])
        r1 = L.relu_forward(a1)
        a2 = L.conv2d_forward(r1, p[f"dec{j}.conv2.w"], p[f"dec{j}.conv2.b"])
        h = L.relu_forward(a2)
        rec[f"dec{j}"] = (h_in, cat, a1, r1, a2)
        assert h.shape[2] == skips[s].shape[2], f"decode block {j}: spatial mismatch with skip"
    logits = L.pointwise_forward(h, p["out.w"], p["out.b"])
    prob = L.sigmoid_forward(logits)
    rec["out"] = (h, prob)
    return prob, tape


def backward(params: ModelParams, tape: Tape, grad_prob: np.ndarray) -> dict[str, np.ndarray]:
    """Back-propagate ``dLoss/dprob`` to every parameter tensor."""
    if tape.consumed:
        raise ContractError("tape was already consumed by a previous backward call")
    if tape.params_id != id(params) or tape.params_version != params.version:
        raise ContractError("tape is stale: parameters changed since forward")
    cfg = params.config
    p = params.tensors
    rec = tape.records
    h_out, prob = rec["out"]
    if grad_prob.shape != prob.shape:
        raise ShapeError(f"grad_prob {grad_prob.shape} does not match output {prob.shape}")
    tape.consumed = True
    grads: dict[str, np.ndarray] = {}

    g = L.sigmoid_backward(prob, grad_prob.astype(prob.dtype, copy=False))
    g, grads["out.w"], grads["out.b"] = L.pointwise_backward(h_out, p["out.w"], g)

    skip_grads: dict[int, np.ndarray] = {}
    for j in reversed(range(cfg.decode_blocks)):
        s = cfg.encode_blocks - 2 - j
        h_in, cat, a1, r1, a2 = rec[f"dec{j}"]
        g = L.relu_backward(a2, g)
        g, grads[f"dec{j}.conv2.w"], grads[f"dec{j}.conv2.b"] = L.conv2d_backward(r1, p[f"dec{j}.conv2.w"], g)
        g = L.relu_backward(a1, g)
        g, grads[f"dec{j}.conv1.w"], grads[f"dec{j}.conv1.b"] = L.conv2d_backward(cat, p[f"dec{j}.conv1.w"], g)
        skip_ch = p[f"dec{j}.up.w"].shape[1]
        g_skip, g_up = L.split_channels(g, skip_ch)
        skip_grads[s] = g_skip
        g, grads[f"dec{j}.up.w"], grads[f"dec{j}.up.b"] = L.convtrans2_backward(h_in, p[f"dec{j}.up.w"], g_up)

    for i in reversed(range(cfg.encode_blocks)):
        h_in, a1, r1, a2 = rec[f"enc{i}"]
        if i < cfg.encode_blocks - 1:
            g = L.maxpool2_backward(rec[f"pool{i}"], g) + skip_grads[i]
        g = L.relu_backward(a2, g)
        g, grads[f"enc{i}.conv2.w"], grads[f"enc{i}.conv2.b"] = L.conv2d_backward(r1, p[f"enc{i}.conv2.w"], g)
        g = L.relu_backward(a1, g)
        g, grads[f"enc{i}.conv1.w"], grads[f"enc{i}.conv1.b"] = L.conv2d_backward(h_in, p[f"enc{i}.conv1.w"], g)

    return {name: grads[name] for name in p}


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    prob, _ = forward(params, x)
    return prob


# -- checkpoints -----------------------------------------------------------


def save_params(
    path,
    params: ModelParams,
    extra: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """Write a versioned, checksummed checkpoint.

    Layout: ``CSCK`` | u32 version | u32 header length | JSON header |
    u32 tensor count | tensor records | sha256 of everything before it.
    Each tensor record is u16 name length, UTF-8 name, u8 dtype code, u8 ndim,
    u32 dims, then the little-endian payload.
    """
    header = {
        "config": asdict(params.config),
        "seed": params.seed,
        "init": params.init,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    table = {**params.tensors, **{f"extra/{k}": v for k, v in (extra or {}).items()}}
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)), hbytes]
    parts.append(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_checkpoint(path):
    """Return ``(params, extra_tensors, meta)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if len(data) < 44 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(body[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors, extra = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += nbytes
        if name.startswith("extra/"):
            extra[name[6:]] = arr
        else:
            tensors[name] = arr
    if off != len(body):
        raise FormatError(f"{path}: trailing bytes after tensor table")
    cfg = NetworkConfig(**header["config"])
    params = ModelParams(cfg, tensors, seed=header["seed"], init=header["init"])
    return params, extra, header["meta"]


def load_params(path, expected: NetworkConfig | None = None) -> ModelParams:
    params, _, _ = read_checkpoint(path)
    if expected is not None and params.config != expected:
        raise ConfigError(f"checkpoint config {params.config} does not match {expected}")
    return params
