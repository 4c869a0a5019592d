"""Snow/ice removal from default cloud ground truths.

Snow and ice show far more pixel-to-pixel texture in the blue band than
cloud does, so pixels whose Sobel gradient magnitude exceeds a global
threshold are flagged as snow and subtracted from the QA-derived cloud mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .raster_io import MaskGrid, QaBitConfig, Raster, decode_qa

DEFAULT_PERCENTILE = 95.0


@dataclass
class GradientField:
    magnitudes: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitudes.shape


@dataclass
class RegionGradientStats:
    mean_snow: float | None
    mean_cloud: float | None
    mean_clear: float | None
    count_snow: int
    count_cloud: int
    count_clear: int


def gradient_magnitude(band: Raster | np.ndarray) -> GradientField:
    """Sobel gradient magnitude with replicate edge padding.

    Rasters are normalized to [0, 1] first; plain arrays are used as given.
    """
    img = band.normalized() if isinstance(band, Raster) else np.asarray(band, dtype=np.float64)
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape

    def at(di, dj):
        return p[1 + di:1 + di + h, 1 + dj:1 + dj + w]

    gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1))
    gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1))
    return GradientField(np.hypot(gx, gy))


def _check_same(shape, *masks: MaskGrid) -> None:
    for m in masks:
        if m.shape != shape:
            raise ShapeError(f"mask shape {m.shape} does not match {shape}")


def region_stats(g: GradientField, cloud: MaskGrid, snow: MaskGrid, clear: MaskGrid) -> RegionGradientStats:
    _check_same(g.shape, cloud, snow, clear)

    def mean(mask):
        n = int(mask.bits.sum())
        return (float(g.magnitudes[mask.bits].mean()) if n else None), n

    ms, ns = mean(snow)
    mc, nc = mean(cloud)
    ml, nl = mean(clear)
    return RegionGradientStats(ms, mc, ml, ns, nc, nl)


def select_threshold(
    g: GradientField,
    cloud: MaskGrid | None = None,
    percentile: float = DEFAULT_PERCENTILE,
    fallback: float | None = None,
) -> float:
    """Percentile of cloud-region gradient magnitudes, or ``fallback`` without a cloud region."""
    if cloud is not None:
        _check_same(g.shape, cloud)
        if cloud.bits.any():
            return float(np.percentile(g.magnitudes[cloud.bits], percentile))
    if fallback is None:
        raise ValueError("no cloud pixels to derive a threshold from and no fallback given")
    return float(fallback)


def snow_mask(g: GradientField, threshold: float) -> MaskGrid:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return MaskGrid(g.magnitudes > threshold)


def correct_ground_truth(default_cloud: MaskGrid, snow: MaskGrid) -> MaskGrid:
    _check_same(default_cloud.shape, snow)
    return MaskGrid(default_cloud.bits & ~snow.bits)


@dataclass
class Correction:
    default_gt: MaskGrid
    snow: MaskGrid
    corrected_gt: MaskGrid
    threshold: float
    stats: RegionGradientStats
    gradient: GradientField


def correct_scene(
    band: Raster,
    qa: Raster,
    qa_cfg: QaBitConfig,
    threshold: float | str = "auto",
    percentile: float = DEFAULT_PERCENTILE,
    fallback: float | None = None,
) -> Correction:
    """Run the whole correction for one scene from its blue band and QA raster."""
    if band.samples.shape != qa.samples.shape:
        raise ShapeError(f"band {band.samples.shape} and QA {qa.samples.shape} differ in shape")
    cloud, snow_qa, clear = decode_qa(qa, qa_cfg)
    g = gradient_magnitude(band)
    if threshold == "auto":
        t = select_threshold(g, cloud, percentile, fallback)
    else:
        t = float(threshold)
    snow = snow_mask(g, t)
    return Correction(
        default_gt=cloud,
        snow=snow,
        corrected_gt=correct_ground_truth(cloud, snow),
        threshold=t,
        stats=region_stats(g, cloud, snow_qa, clear),
        gradient=g,
    )


def format_stats_report(scene_id: str, c: Correction) -> str:
    def fmt(v):
        return "absent" if v is None else f"{v:.6g}"

    s = c.stats
    lines = [
        f"scene {scene_id}",
        f"threshold {c.threshold:.6g}",
        f"region snow count {s.count_snow} mean_gradient {fmt(s.mean_snow)}",
        f"region cloud count {s.count_cloud} mean_gradient {fmt(s.mean_cloud)}",
        f"region clear count {s.count_clear} mean_gradient {fmt(s.mean_clear)}",
        f"snow_pixels {int(c.snow.bits.sum())}",
        f"default_cloud_pixels {int(c.default_gt.bits.sum())}",
        f"corrected_cloud_pixels {int(c.corrected_gt.bits.sum())}",
    ]
    return "\n".join(lines) + "\n"
