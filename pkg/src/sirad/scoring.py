"""Anomaly maps, cross-loop fusion, image scores and AUROC."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import SirModel, loop_forward, teacher_forward
from .tensor import ShapeError, Tensor, bilinear_upsample, cosine_distance_map, gaussian_smooth

NORMAL, ANOMALOUS = "normal", "anomalous"


class UndefinedAUROC(ValueError):
    """AUROC needs at least one normal and one anomalous score."""


@dataclass
class AnomalyResult:
    """Maps are (H, W) arrays at image resolution.

    ``per_scale_maps[l]`` is the ``(f3_map, phi_map)`` pair of loop ``l``;
    ``per_loop_maps[l]`` is their sum.
    """

    per_loop_maps: list[np.ndarray]
    per_scale_maps: list[tuple[np.ndarray, np.ndarray]]
    final_map: np.ndarray
    score: float

    def scores(self) -> dict[str, float]:
        """Max-of-map score for every Table-3 style row."""
        out = {}
        for k, ((f3, phi), fused) in enumerate(zip(self.per_scale_maps, self.per_loop_maps), start=1):
            out[f"loop{k}_f3"] = float(f3.max())
            out[f"loop{k}_phi"] = float(phi.max())
            out[f"loop{k}_fused"] = float(fused.max())
        out["final_fused"] = self.score
        return out


def _scale_map(student: Tensor, target: Tensor, H: int, W: int, eps: float, sigma: float) -> np.ndarray:
    d = cosine_distance_map(student, target, eps)
    d = gaussian_smooth(bilinear_upsample(d, H, W), sigma)
    return d.data[0, 0]


def maps_from_features(
    outputs: Sequence[tuple[Tensor, Tensor]],
    f3_t: Tensor,
    phi_t: Tensor,
    size: tuple[int, int],
    sigma: float = 4.0,
    eps: float = 1e-8,
) -> AnomalyResult:
    """Fuse per-loop student outputs against teacher targets for one image."""
    H, W = size
    per_scale, per_loop = [], []
    for f3_s, phi_s in outputs:
        a = _scale_map(f3_s, f3_t, H, W, eps, sigma)
        b = _scale_map(phi_s, phi_t, H, W, eps, sigma)
        per_scale.append((a, b))
        per_loop.append(a + b)
    final = np.zeros((H, W))
    for m in per_loop:
        final = final + m
    return AnomalyResult(per_loop, per_scale, final, float(final.max()))


def anomaly_maps(model: SirModel, x: Tensor, sigma: float = 4.0) -> AnomalyResult:
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"anomaly_maps scores one image at a time, got shape {x.shape}")
    H, W = x.shape[2:]
    f3_t, phi_t = teacher_forward(model, x)
    outputs = loop_forward(model, phi_t)
    return maps_from_features(outputs, f3_t, phi_t, (H, W), sigma, model.eps)


def _is_anomalous(label) -> bool:
    if label in (ANOMALOUS, 1, True):
        return True
    if label in (NORMAL, 0, False):
        return False
    raise ValueError(f"unknown label {label!r}")


def auroc(scores: Sequence[float], labels: Sequence) -> float:
    """Mann-Whitney AUROC from mid-ranks; ties count one half.

    ``labels`` may be ``"normal"``/``"anomalous"`` or 0/1.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.array([_is_anomalous(l) for l in labels], dtype=bool)
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROC(f"undefined AUROC: {n_pos} anomalous and {n_neg} normal scores")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        # doubled mid-rank keeps everything integral
        ranks[order[i : j + 1]] = i + j + 2
        i = j + 1
    rank_sum2 = int(ranks[y].sum())
    u2 = rank_sum2 - n_pos * (n_pos + 1)  # 2 * U
    return u2 / (2 * n_pos * n_neg)


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile at rank p/100 * (n - 1)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty collection")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"p must lie in [0, 100], got {p}")
    r = p / 100.0 * (v.size - 1)
    lo, hi = math.floor(r), math.ceil(r)
    if lo == hi:
        return float(v[lo])
    return float(v[lo] + (r - lo) * (v[hi] - v[lo]))
