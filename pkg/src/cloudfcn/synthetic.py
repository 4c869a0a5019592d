"""Synthetic Landsat-like scenes with known cloud and snow truth.

Clouds are bright, spectrally flat and smooth (soft edges). Snow is just as
bright in the visible bands but carries strong pixel-scale texture, which
is what the gradient-based correction keys on. Land is darker and gently
varying.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster_io import RGBN, Band, MaskGrid, QaBitConfig, Raster

# bit 4 = cloud, bit 10 = snow/ice (an arbitrary but fixed layout for fixtures)
DEMO_QA = QaBitConfig(cloud_bits=((4, 1),), snow_bits=((10, 1),))


@dataclass
class SyntheticScene:
    scene_id: str
    bands: dict[Band, Raster]
    qa: Raster
    true_cloud: MaskGrid
    snow_region: MaskGrid
    default_gt: MaskGrid

    def rgbn(self) -> list[Raster]:
        return [self.bands[b] for b in RGBN]


def _to_u16(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0, 1) * 65535).astype(np.uint16)


def _land(rng, shape, lo=0.08, hi=0.3) -> np.ndarray:
    base = ndimage.gaussian_filter(rng.random(shape), sigma=max(shape) / 8, mode="reflect")
    base = (base - base.min()) / (np.ptp(base) + 1e-12)
    return lo + (hi - lo) * base


def _blob(rng, shape, n, radius_range) -> np.ndarray:
    """Sum of soft elliptical bumps clipped to [0, 1]."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    field = np.zeros(shape)
    for _ in range(n):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(*radius_range), rng.uniform(*radius_range)
        d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        field = np.maximum(field, np.clip(1.5 - d, 0, 1))
    return field


def snow_scene(
    size: int = 256,
    seed: int = 0,
    cloud_blobs: int = 3,
    cloud_radius: tuple[float, float] = (0.2, 0.3),
    snow_boxes: int = 1,
    snow_size: tuple[int, int] = (28, 36),
    texture: float = 0.3,
    cloud_level: float = 0.5,
    scene_id: str = "synthetic",
) -> SyntheticScene:
    """Scene whose default ground truth marks both cloud and snow as cloud.

    Cloud opacity is a soft field; pixels with opacity above ``cloud_level``
    are true cloud. Snow is one or more textured rectangles placed on land.
    The QA raster sets the cloud bit on true cloud and on snow (the
    mislabelling the correction is meant to undo).
    """
    rng = np.random.default_rng(seed)
    shape = (size, size)
    r_lo, r_hi = cloud_radius
    opacity = _blob(rng, shape, cloud_blobs, (r_lo * size, r_hi * size))
    opacity = ndimage.gaussian_filter(opacity, sigma=size / 64, mode="reflect")
    cloud = opacity > cloud_level

    snow = np.zeros(shape, dtype=bool)
    for _ in range(snow_boxes):
        for _attempt in range(200):
            sh, sw = rng.integers(snow_size[0], snow_size[1] + 1, size=2)
            y0, x0 = rng.integers(0, size - sh + 1), rng.integers(0, size - sw + 1)
            box = np.zeros(shape, dtype=bool)
            box[y0:y0 + sh, x0:x0 + sw] = True
            # keep snow clear of the cloud's soft halo
            if not (ndimage.binary_dilation(box, iterations=3) & (opacity > 0.05)).any():
                snow |= box
                break
    tex = rng.uniform(-texture, texture, size=shape)

    bands = {}
    # reflectance of (land, cloud, snow) per band; snow is dim in Nir relative to cloud
    spectra = {Band.B2: (0.0, 0.80, 0.68), Band.B3: (0.02, 0.80, 0.68), Band.B4: (0.04, 0.80, 0.66), Band.B5: (0.15, 0.78, 0.60)}
    land = _land(rng, shape)
    for band, (land_off, cloud_v, snow_v) in spectra.items():
        img = land + land_off
        img = img * (1 - opacity) + cloud_v * opacity
        img = np.where(snow, snow_v + tex, img)
        bands[band] = Raster(_to_u16(img), band, scene_id)

    default = cloud | snow
    qa = np.zeros(shape, dtype=np.uint16)
    qa[default] |= 1 << 4
    return SyntheticScene(
        scene_id=scene_id,
        bands=bands,
        qa=Raster(qa, Band.QA, scene_id),
        true_cloud=MaskGrid(cloud),
        snow_region=MaskGrid(snow),
        default_gt=MaskGrid(default),
    )


def shape_patches(
    n: int = 8,
    size: int = 32,
    seed: int = 0,
    land: tuple[float, float] = (0.02, 0.15),
    cloud: float = 0.9,
    radius: tuple[float, float] = (0.25, 0.4),
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Four-band patches with hard-edged geometric clouds (discs, boxes, ellipses, triangles)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = []
    for i in range(n):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 3))):
            kind = (i + _) % 4
            cy, cx = rng.uniform(0.2, 0.8, size=2) * size
            r = rng.uniform(*radius) * size
            if kind == 0:
                m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
            elif kind == 1:
                m = (abs(yy - cy) <= r) & (abs(xx - cx) <= 0.7 * r)
            elif kind == 2:
                m = ((yy - cy) / (0.6 * r)) ** 2 + ((xx - cx) / r) ** 2 <= 1
            else:
                m = (yy >= cy - r) & (yy - (cy - r) >= 2 * abs(xx - cx))
            mask |= m
        ground = _land(rng, (size, size), *land)
        bands = []
        for off in (0.04, 0.02, 0.0, 0.15):
            img = np.where(mask, cloud, ground + off) + rng.normal(0, 0.01, size=(size, size))
            bands.append(np.clip(img, 0, 1))
        out.append((np.stack(bands).astype(np.float32), mask.astype(np.float32)))
    return out


def scene_tensor(scene: SyntheticScene) -> np.ndarray:
    return np.stack([r.normalized() for r in scene.rgbn()])
