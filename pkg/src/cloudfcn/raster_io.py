"""Band rasters, QA decoding and binary masks on disk.

Band rasters use a small custom container: an ASCII header line
``CSR1 <width> <height> <band_id>\\n`` followed by little-endian uint16
samples in row-major order. Masks are 8-bit binary PGM (P5) files with
0 for negative and 255 for positive pixels.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, LengthError, ShapeError

RASTER_MAGIC = b"CSR1"
_MAX_HEADER = 128


class Band(enum.Enum):
    """Landsat 8 bands (wavelength range in micrometres) plus artifact bands."""

    B1 = ("Ultra Blue", 0.435, 0.451)
    B2 = ("Blue", 0.452, 0.512)
    B3 = ("Green", 0.533, 0.590)
    B4 = ("Red", 0.636, 0.673)
    B5 = ("Near Infrared", 0.851, 0.879)
    B6 = ("Shortwave Infrared 1", 1.566, 1.651)
    B7 = ("Shortwave Infrared 2", 2.107, 2.294)
    B8 = ("Panchromatic", 0.503, 0.676)
    B9 = ("Cirrus", 1.363, 1.384)
    B10 = ("Thermal Infrared 1", 10.60, 11.19)
    B11 = ("Thermal Infrared 2", 11.50, 12.51)
    QA = ("Quality Assessment", None, None)
    PROB = ("Cloud probability", None, None)

    @property
    def label(self) -> str:
        return self.value[0]

    @property
    def wavelength(self) -> tuple[float, float] | None:
        lo, hi = self.value[1:]
        return None if lo is None else (lo, hi)


# network input order
RGBN = (Band.B4, Band.B3, Band.B2, Band.B5)


@dataclass(eq=False)
class Raster:
    samples: np.ndarray
    band_id: Band
    scene_id: str = field(default="")

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2:
            raise ShapeError(f"raster samples must be 2-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ShapeError("raster must have positive width and height")
        if self.samples.dtype != np.uint16:
            if self.samples.size and (self.samples.min() < 0 or self.samples.max() > 65535):
                raise ValueError("raster samples must fit in 16 bits")
            self.samples = self.samples.astype(np.uint16)
        if isinstance(self.band_id, str):
            self.band_id = Band[self.band_id]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape

    def __eq__(self, other):
        # scene_id is provenance, not content
        if not isinstance(other, Raster):
            return NotImplemented
        return self.band_id == other.band_id and np.array_equal(self.samples, other.samples)

    def normalized(self, dtype=np.float64) -> np.ndarray:
        return self.samples.astype(dtype) / 65535


@dataclass(eq=False)
class MaskGrid:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.bits.shape}")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, MaskGrid):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


def read_raster(path, scene_id: str | None = None) -> Raster:
    path = Path(path)
    data = path.read_bytes()
    nl = data.find(b"\n", 0, _MAX_HEADER)
    if nl < 0 or not data.startswith(RASTER_MAGIC + b" "):
        raise FormatError(f"{path}: missing CSR1 header")
    parts = data[:nl].decode("ascii", errors="replace").split(" ")
    if len(parts) != 4:
        raise FormatError(f"{path}: malformed header {data[:nl]!r}")
    try:
        width, height = int(parts[1]), int(parts[2])
        band = Band[parts[3]]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: malformed header {data[:nl]!r}") from exc
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: non-positive dimensions {width}x{height}")
    payload = data[nl + 1:]
    if len(payload) != 2 * width * height:
        raise LengthError(
            f"{path}: header advertises {width}x{height} samples, payload holds {len(payload) / 2:g}"
        )
    samples = np.frombuffer(payload, dtype="<u2").astype(np.uint16).reshape(height, width)
    return Raster(samples, band, scene_id if scene_id is not None else path.parent.name)


def write_raster(r: Raster, path) -> None:
    header = f"CSR1 {r.width} {r.height} {r.band_id.name}\n".encode("ascii")
    Path(path).write_bytes(header + r.samples.astype("<u2").tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n)*(\S+)")


def read_mask(path) -> MaskGrid:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM masks are supported")
    payload = data[pos + 1:]
    if len(payload) != width * height:
        raise LengthError(f"{path}: expected {width * height} mask bytes, found {len(payload)}")
    return MaskGrid(np.frombuffer(payload, dtype=np.uint8).reshape(height, width) != 0)


def write_mask(m: MaskGrid, path) -> None:
    header = f"P5\n{m.width} {m.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.where(m.bits, 255, 0).astype(np.uint8).tobytes())


@dataclass(frozen=True)
class QaBitConfig:
    """Which QA bits must hold which values for a pixel to count as cloud or snow.

    Each pattern is a sequence of ``(bit_position, required_value)`` pairs; a
    word matches when every listed bit has its required value.
    """

    cloud_bits: tuple[tuple[int, int], ...]
    snow_bits: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for name in ("cloud_bits", "snow_bits"):
            pattern = tuple((int(p), int(v)) for p, v in getattr(self, name))
            if not pattern:
                raise ConfigError(f"{name} must list at least one bit")
            for pos, val in pattern:
                if not 0 <= pos <= 15:
                    raise ConfigError(f"{name}: bit position {pos} outside [0, 15]")
                if val not in (0, 1):
                    raise ConfigError(f"{name}: required value must be 0 or 1, got {val}")
            object.__setattr__(self, name, pattern)

    @staticmethod
    def _matches(words: np.ndarray, pattern: Iterable[tuple[int, int]]) -> np.ndarray:
        words = words.astype(np.uint32)
        hit = np.ones(words.shape, dtype=bool)
        for pos, val in pattern:
            hit &= ((words >> pos) & 1) == val
        return hit


def decode_qa(qa: Raster, cfg: QaBitConfig) -> tuple[MaskGrid, MaskGrid, MaskGrid]:
    """Split a QA raster into disjoint (cloud, snow, clear) masks.

    Words matching both patterns are assigned to cloud.
    """
    words = qa.samples if isinstance(qa, Raster) else np.asarray(qa)
    cloud = cfg._matches(words, cfg.cloud_bits)
    snow = cfg._matches(words, cfg.snow_bits) & ~cloud
    clear = ~(cloud | snow)
    return MaskGrid(cloud), MaskGrid(snow), MaskGrid(clear)


def stack_bands(scene: Sequence[Raster], dtype=np.float64) -> np.ndarray:
    """Stack four rasters (Red, Green, Blue, Nir) into a (1, 4, H, W) tensor in [0, 1]."""
    if len(scene) != 4:
        raise ShapeError(f"expected 4 band rasters, got {len(scene)}")
    shapes = {r.samples.shape for r in scene}
    if len(shapes) != 1:
        raise ShapeError(f"band rasters differ in shape: {sorted(shapes)}")
    return np.stack([r.normalized(dtype) for r in scene])[None]
