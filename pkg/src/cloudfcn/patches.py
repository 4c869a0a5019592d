"""Scene tiling, resampling, stitching and whole-scene prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import unet
from .errors import ShapeError
from .raster_io import Band, MaskGrid, Raster, stack_bands


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch_native: int = 384
    patch_net: int = 192

    def __post_init__(self):
        if min(self.height, self.width, self.patch_native, self.patch_net) <= 0:
            raise ShapeError("grid dimensions must be positive")

    @property
    def rows(self) -> int:
        return math.ceil(self.height / self.patch_native)

    @property
    def cols(self) -> int:
        return math.ceil(self.width / self.patch_native)

    @property
    def pad_bottom(self) -> int:
        return self.rows * self.patch_native - self.height

    @property
    def pad_right(self) -> int:
        return self.cols * self.patch_native - self.width

    def __len__(self) -> int:
        return self.rows * self.cols

    def origin(self, index: int) -> tuple[int, int]:
        """Top-left scene coordinate (y, x) of patch ``index`` in row-major order."""
        r, c = divmod(index, self.cols)
        return r * self.patch_native, c * self.patch_native

    def index_of(self, y: int, x: int) -> int:
        return (y // self.patch_native) * self.cols + x // self.patch_native


def grid_for(img_or_raster, patch_native: int = 384, patch_net: int = 192) -> PatchGrid:
    arr = img_or_raster.samples if isinstance(img_or_raster, Raster) else np.asarray(img_or_raster)
    h, w = arr.shape[-2:]
    return PatchGrid(h, w, patch_native, patch_net)


def tile(img, grid: PatchGrid) -> list[np.ndarray]:
    """Cut a 2-D image into non-overlapping native-size patches, row-major.

    Partial tiles on the right and bottom edges are filled by reflecting the
    image across its border.
    """
    arr = img.samples if isinstance(img, Raster) else np.asarray(img)
    if arr.shape != (grid.height, grid.width):
        raise ShapeError(f"image {arr.shape} does not match grid {(grid.height, grid.width)}")
    if grid.pad_bottom or grid.pad_right:
        arr = np.pad(arr, ((0, grid.pad_bottom), (0, grid.pad_right)), mode="reflect")
    n = grid.patch_native
    return [arr[r * n:(r + 1) * n, c * n:(c + 1) * n] for r in range(grid.rows) for c in range(grid.cols)]


def stitch(patches: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    if len(patches) != len(grid):
        raise ShapeError(f"expected {len(grid)} patches, got {len(patches)}")
    n = grid.patch_native
    first = np.asarray(patches[0])
    out = np.empty((grid.rows * n, grid.cols * n), dtype=first.dtype)
    for i, p in enumerate(patches):
        p = np.asarray(p)
        if p.shape != (n, n):
            raise ShapeError(f"patch {i} has shape {p.shape}, expected {(n, n)}")
        y, x = grid.origin(i)
        out[y:y + n, x:x + n] = p
    return out[:grid.height, :grid.width]


def _resize_axis(a: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == out:
        return a.copy()
    if out == 1:
        pos = np.array([(n - 1) / 2])
    else:
        pos = np.arange(out) * ((n - 1) / (out - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = out
    frac = frac.reshape(shape).astype(a.dtype if a.dtype.kind == "f" else np.float64)
    va = np.take(a, lo, axis=axis)
    vb = np.take(a, hi, axis=axis)
    # a + f*(b-a) keeps constant runs exact; the clip removes rounding overshoot
    res = va + frac * (vb - va)
    return np.clip(res, np.minimum(va, vb), np.maximum(va, vb))


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of the last two axes.

    Output sample ``i`` along an axis of input length ``n`` reads input
    coordinate ``i * (n - 1) / (out - 1)``, so corner pixels map exactly onto
    corner pixels.
    """
    if out_w <= 0 or out_h <= 0:
        raise ShapeError("resize target must be positive")
    a = np.asarray(img)
    if a.dtype.kind != "f":
        a = a.astype(np.float64)
    a = _resize_axis(a, out_h, a.ndim - 2)
    return _resize_axis(a, out_w, a.ndim - 1)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> MaskGrid:
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    return MaskGrid(np.asarray(prob) >= threshold)


def training_pairs(scene: np.ndarray, gt: np.ndarray, grid: PatchGrid) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cut a (C, H, W) scene and its (H, W) mask into network-sized ``(x, h)`` pairs.

    Bands are resized bilinearly; the mask is resized the same way and
    thresholded at one half, so it stays binary.
    """
    if gt.shape != scene.shape[1:]:
        raise ShapeError(f"ground truth {gt.shape} does not match bands {scene.shape[1:]}")
    size = grid.patch_net
    band_tiles = [tile(scene[c], grid) for c in range(scene.shape[0])]
    gt_tiles = tile(np.asarray(gt, dtype=np.float64), grid)
    pairs = []
    for i in range(len(grid)):
        x = np.stack([resize_bilinear(b[i], size, size) for b in band_tiles]).astype(np.float32)
        h = (resize_bilinear(gt_tiles[i], size, size) >= 0.5).astype(np.uint8)
        pairs.append((x, h))
    return pairs


def predict_patch_probs(params: unet.ModelParams, scene: np.ndarray, grid: PatchGrid, order=None) -> list[np.ndarray]:
    """Per-patch probability maps at native size, indexed in row-major order.

    ``scene`` is a (4, H, W) normalized array. Each patch is run through the
    network on its own, so results do not depend on ``order``.
    """
    size = params.config.input_size
    if grid.patch_net != size:
        raise ShapeError(f"grid net size {grid.patch_net} differs from network input {size}")
    per_band = [tile(scene[c], grid) for c in range(scene.shape[0])]
    out: list[np.ndarray | None] = [None] * len(grid)
    for i in (range(len(grid)) if order is None else order):
        x = np.stack([resize_bilinear(b[i], size, size) for b in per_band])[None]
        prob = unet.predict(params, x)[0, 0]
        out[i] = resize_bilinear(prob.astype(np.float64), grid.patch_native, grid.patch_native)
    if any(p is None for p in out):
        raise ShapeError("patch order did not cover every patch")
    return out


def predict_scene(
    params: unet.ModelParams,
    scene,
    patch_native: int = 384,
    threshold: float = 0.5,
    order=None,
) -> tuple[np.ndarray, MaskGrid]:
    """Probability map and binary cloud mask for a full scene.

    ``scene`` is either four rasters ordered Red, Green, Blue, Nir or an
    already-normalized (4, H, W) array.
    """
    if isinstance(scene, np.ndarray):
        arr = scene
    else:
        arr = stack_bands(scene)[0]
    grid = PatchGrid(arr.shape[1], arr.shape[2], patch_native, params.config.input_size)
    prob = stitch(predict_patch_probs(params, arr, grid, order), grid)
    return prob, binarize(prob, threshold)


def prob_to_raster(prob: np.ndarray, scene_id: str = "") -> Raster:
    return Raster(np.round(np.clip(prob, 0, 1) * 65535).astype(np.uint16), Band.PROB, scene_id)
