"""Percentile-normalised jet overlays for anomaly maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import luminance
from .netpbm import encode, quantize
from .scoring import percentile
from .tensor import Tensor

# (position, r, g, b); linear in between
JET_KNOTS = np.array(
    [
        [0.0, 0.0, 0.0, 0.5],
        [0.125, 0.0, 0.0, 1.0],
        [0.375, 0.0, 1.0, 1.0],
        [0.625, 1.0, 1.0, 0.0],
        [0.875, 1.0, 0.0, 0.0],
        [1.0, 0.5, 0.0, 0.0],
    ]
)


@dataclass(frozen=True)
class RenderSpec:
    p_lo: float = 20.0
    p_hi: float = 95.0
    alpha: float = 0.5
    colormap: str = "jet"

    def __post_init__(self):
        if not 0.0 <= self.p_lo < self.p_hi <= 100.0:
            raise ValueError(f"need 0 <= p_lo < p_hi <= 100, got {self.p_lo}, {self.p_hi}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.colormap != "jet":
            raise ValueError(f"unsupported colormap {self.colormap!r}")


def normalize_maps(maps: Sequence[np.ndarray], spec: RenderSpec = RenderSpec()) -> list[np.ndarray]:
    """Clamp-rescale every map by percentiles pooled over the whole collection."""
    if len(maps) == 0:
        raise ValueError("normalize_maps needs at least one map")
    pooled = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    lo, hi = percentile(pooled, spec.p_lo), percentile(pooled, spec.p_hi)
    if hi == lo:
        return [np.zeros(np.shape(m)) for m in maps]
    return [np.clip((np.asarray(m, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0) for m in maps]


def jet(values: np.ndarray) -> np.ndarray:
    """[0, 1] values to (..., 3) RGB floats."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pos = JET_KNOTS[:, 0]
    return np.stack([np.interp(v, pos, JET_KNOTS[:, c]) for c in (1, 2, 3)], axis=-1)


def _gray(image) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim == 4:
        data = data[0]
    if data.ndim == 2:
        return data
    if data.shape[0] == 1:
        return data[0]
    if data.shape[0] == 3:
        return luminance(data)
    raise ValueError(f"cannot render image of shape {data.shape}")


def render_overlay(image, normalized_map: np.ndarray, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    """Blend the colormapped map over the grayscale image; uint8 (3, H, W)."""
    gray = _gray(image)
    m = np.asarray(normalized_map, dtype=np.float64)
    if gray.shape != m.shape:
        raise ValueError(f"image is {gray.shape} but map is {m.shape}")
    rgb = spec.alpha * jet(m) + (1.0 - spec.alpha) * gray[..., None]
    return quantize(rgb.transpose(2, 0, 1))


def overlay_ppm(image, normalized_map: np.ndarray, spec: RenderSpec = RenderSpec()) -> bytes:
    return encode(render_overlay(image, normalized_map, spec))


def overlay_path(root, dataset: str, sample_id: str, which) -> Path:
    """``<root>/<dataset>/<sample-id>__loop<k|final>.ppm``."""
    return Path(root) / dataset / f"{sample_id}__loop{which}.ppm"
