"""Flower localization in a reference frame.

Flowers are bright plexiglass squares on a darker background; each square's
centroid is taken as its center well. Detection = threshold (fixed or Otsu)
-> 4-connected components -> squareness filters -> deterministic numbering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Flower, ImageBuffer, PatchpipeError, Point2, ValidationError
from .formats import AssayConfig


class NoFlowersError(PatchpipeError, RuntimeError):
    """Detection ran but found zero flowers (explicit, never a silent empty)."""


@dataclass(frozen=True)
class SquareRegion:
    """A connected bright region summarized for squareness filtering."""

    centroid: Point2
    bbox: tuple[int, int, int, int]  # x, y, w, h
    area: int
    fill_ratio: float


@dataclass(frozen=True)
class FlowerParams:
    threshold: int | str = "otsu"
    min_area_px2: int = 400
    aspect_tol: float = 0.2
    fill_min: float = 0.8
    well_fraction: float = 0.08

    @classmethod
    def from_config(cls, cfg: AssayConfig) -> "FlowerParams":
        return cls(
            threshold=cfg.flower_threshold,
            min_area_px2=cfg.flower_min_area_px2,
            aspect_tol=cfg.flower_aspect_tol,
            fill_min=cfg.flower_fill_min,
            well_fraction=cfg.flower_well_fraction,
        )


def to_grayscale(img: ImageBuffer) -> np.ndarray:
    """Grayscale (h, w) uint8 plane; RGB converted by luma, rounded half-up."""
    arr = img.to_array()
    if img.channels == 1:
        return arr[:, :, 0].copy()
    luma = 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    return np.floor(luma + 0.5).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> int:
    """Threshold maximizing inter-class variance over the 256-bin histogram.

    Classes are split as {sample < t} vs {sample >= t}; the smallest argmax
    wins, so a perfectly bimodal image thresholds just above its dark mode.
    """
    hist = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    values = np.arange(256, dtype=np.float64)
    # cumulative count/mass of the {< t} class for t = 0..255
    w0 = np.concatenate(([0.0], np.cumsum(hist)[:-1]))
    m0 = np.concatenate(([0.0], np.cumsum(hist * values)[:-1]))
    w1 = total - w0
    m1 = hist @ values - m0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(w0 > 0, m0 / w0, 0.0)
        mu1 = np.where(w1 > 0, m1 / w1, 0.0)
        sigma_b = w0 * w1 * (mu0 - mu1) ** 2
    sigma_b[(w0 == 0) | (w1 == 0)] = 0.0
    return int(np.argmax(sigma_b))


def threshold_image(img: ImageBuffer, method: int | str = "otsu") -> np.ndarray:
    """Binary mask of samples >= threshold; method is 'otsu' or a fixed level."""
    if img.channels != 1:
        raise ValidationError("threshold_image expects a grayscale image")
    gray = img.to_array()[:, :, 0]
    if method == "otsu":
        level = otsu_threshold(gray)
    elif isinstance(method, int) and not isinstance(method, bool):
        level = method
    else:
        raise ValidationError(f"unknown threshold method {method!r}")
    return gray >= level


def connected_components(mask: np.ndarray, min_area: int = 1) -> list[SquareRegion]:
    """4-connected components of a binary mask with at least min_area pixels.

    Regions are returned sorted by (bbox y, bbox x).
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    regions: list[SquareRegion] = []
    next_label = 0
    for sy in range(h):
        row = mask[sy]
        for sx in range(w):
            if not row[sx] or labels[sy, sx]:
                continue
            next_label += 1
            stack = [(sx, sy)]
            labels[sy, sx] = next_label
            xs_sum = 0.0
            ys_sum = 0.0
            count = 0
            min_x = max_x = sx
            min_y = max_y = sy
            while stack:
                x, y = stack.pop()
                count += 1
                xs_sum += x
                ys_sum += y
                min_x = min(min_x, x)
                max_x = max(max_x, x)
                min_y = min(min_y, y)
                max_y = max(max_y, y)
                for nx, ny in ((x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)):
                    if 0 <= nx < w and 0 <= ny < h and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = next_label
                        stack.append((nx, ny))
            if count < min_area:
                continue
            bw = max_x - min_x + 1
            bh = max_y - min_y + 1
            regions.append(
                SquareRegion(
                    centroid=Point2(xs_sum / count, ys_sum / count),
                    bbox=(min_x, min_y, bw, bh),
                    area=count,
                    fill_ratio=count / (bw * bh),
                )
            )
    regions.sort(key=lambda r: (r.bbox[1], r.bbox[0]))
    return regions


def detect_flowers(img: ImageBuffer, params: FlowerParams = FlowerParams()) -> list[Flower]:
    """Detect flower squares and derive their center wells.

    Keeps regions with aspect ratio within 1 +- aspect_tol and fill ratio
    >= fill_min; flowers are numbered 0..n-1 sorted by (y, x) of center.
    """
    gray = img if img.channels == 1 else ImageBuffer.from_array(to_grayscale(img))
    mask = threshold_image(gray, params.threshold)
    regions = connected_components(mask, min_area=params.min_area_px2)
    kept: list[SquareRegion] = []
    for region in regions:
        _, _, w, h = region.bbox
        aspect = w / h
        if not (1.0 - params.aspect_tol <= aspect <= 1.0 + params.aspect_tol):
            continue
        if region.fill_ratio < params.fill_min:
            continue
        kept.append(region)
    if not kept:
        raise NoFlowersError("no flowers found in reference frame")
    kept.sort(key=lambda r: (r.centroid.y, r.centroid.x))
    flowers = []
    for i, region in enumerate(kept):
        _, _, w, h = region.bbox
        side = (w + h) / 2.0
        flowers.append(
            Flower(
                flower_id=i,
                center_well=region.centroid,
                well_radius=params.well_fraction * side,
                square_side=side,
            )
        )
    return flowers


def flowers_from_config(cfg: AssayConfig) -> list[Flower]:
    """Bypass detection: read explicit flower centers/radii from the config."""
    flowers = []
    seen: set[int] = set()
    for m in cfg.flower_manual:
        if m.id in seen:
            raise ValidationError(f"duplicate flower id {m.id} in flower.manual")
        seen.add(m.id)
        side = m.square_side if m.square_side is not None else m.well_radius / cfg.flower_well_fraction
        flowers.append(
            Flower(
                flower_id=m.id,
                center_well=Point2(m.cx, m.cy),
                well_radius=m.well_radius,
                square_side=side,
                color_tag=m.color,
            )
        )
    return flowers


def flowers_to_config(flowers: list[Flower], base: AssayConfig = AssayConfig()) -> AssayConfig:
    """Inverse of flowers_from_config: embed a flower list as manual entries."""
    from dataclasses import replace

    from .formats import ManualFlower

    manual = tuple(
        ManualFlower(
            id=f.flower_id,
            cx=f.center_well.x,
            cy=f.center_well.y,
            well_radius=f.well_radius,
            square_side=f.square_side,
            color=f.color_tag,
        )
        for f in flowers
    )
    return replace(base, flower_manual=manual)
