"""Seeded synthetic multi-domain anomaly benchmark.

Every domain has its own normal appearance family; anomalous test images
are fresh normals with one injected defect.  A defect is blended in as
``base + contrast * mask * (defect - base)`` (the blob kind adds
``contrast * mask`` instead), so ``contrast = 0`` leaves the base untouched.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import ConfigError, DatasetManifest
from .netpbm import quantize, write_image
from .tensor import Tensor, gaussian_smooth

FAMILIES = ("texture", "grid", "radial")
DEFECTS = ("blob", "occlusion", "swap")


@dataclass
class SynthSpec:
    domains: int = 3
    train_normals: int = 20
    test_normals: int = 20
    test_anoms: int = 20
    size: int = 64
    defect_contrast: float = 1.0
    defect_radius: float = 0.2  # fraction of the image side
    noise: float = 0.01
    max_shift: int = 0  # pixels of translation jitter between samples
    fov: float = 0.95  # radius of the bright disc, as a fraction of the half side; 0 disables
    defect_kinds: tuple[str, ...] = DEFECTS
    families: tuple[str, ...] = FAMILIES
    seed: int = 0

    def validate(self) -> None:
        if self.domains < 1:
            raise ConfigError("synthetic benchmark needs at least one domain")
        if self.test_anoms < 1:
            raise ConfigError("synthetic benchmark needs at least one anomalous test image per domain")
        if self.train_normals < 1 or self.test_normals < 1:
            raise ConfigError("synthetic benchmark needs train and test normals")
        if self.size < 16:
            raise ConfigError(f"image size {self.size} too small")
        if not 0.0 <= self.defect_contrast <= 1.0:
            raise ConfigError(f"defect_contrast must lie in [0, 1], got {self.defect_contrast}")
        if not 0.0 < self.defect_radius < 0.5:
            raise ConfigError(f"defect_radius must lie in (0, 0.5), got {self.defect_radius}")
        if self.noise < 0 or self.max_shift < 0 or self.fov < 0:
            raise ConfigError("noise, max_shift and fov must be non-negative")
        unknown = set(self.defect_kinds) - set(DEFECTS) or set(self.families) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown defect kinds or families: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defect_kinds"] = list(self.defect_kinds)
        d["families"] = list(self.families)
        return d


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((1, 1, size, size))
    v = gaussian_smooth(Tensor(noise), sigma).data[0, 0]
    return (v - v.mean()) / (v.std() + 1e-12)


@dataclass
class DomainStyle:
    """Appearance template shared by every image of one domain.

    Individual samples are the template under an optional random shift,
    gain/offset jitter and pixel noise, seen through a circular field of
    view with a dark surround, much like aligned scans of one modality.
    """

    family: str
    size: int
    pattern: np.ndarray | None = None
    period: float = 0.0
    phase: tuple[float, float] = (0.0, 0.0)
    centre: tuple[float, float] = (0.0, 0.0)
    freq: float = 0.0
    max_shift: int = 0
    noise: float = 0.01
    fov: float = 0.95

    @classmethod
    def draw(
        cls,
        family: str,
        variant: int,
        size: int,
        rng: np.random.Generator,
        max_shift: int = 0,
        noise: float = 0.01,
        fov: float = 0.95,
    ) -> "DomainStyle":
        scale = size / 64.0
        style = cls(family, size, max_shift=max_shift, noise=noise, fov=fov)
        pad = size + 2 * style.max_shift
        if family == "texture":
            style.pattern = 0.5 + 0.12 * _smooth_noise(rng, pad, (1.5 + 0.5 * variant) * scale)
        elif family == "grid":
            style.period = (8.0 + 2 * variant) * scale + rng.uniform(-0.5, 0.5) * scale
            style.phase = tuple(rng.uniform(0, style.period, size=2))
        elif family == "radial":
            style.centre = tuple(size / 2 + rng.uniform(-0.08, 0.08, size=2) * size)
            style.freq = 3.0 + variant + rng.uniform(-0.2, 0.2)
        else:
            raise ConfigError(f"unknown family {family!r}")
        return style

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        size, s = self.size, self.max_shift
        dy, dx = rng.integers(-s, s + 1, size=2)
        gain, offset = 1.0 + rng.uniform(-0.05, 0.05), rng.uniform(-0.03, 0.03)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        yy, xx = yy + dy, xx + dx
        if self.family == "texture":
            img = self.pattern[s + dy : s + dy + size, s + dx : s + dx + size]
        elif self.family == "grid":
            width = 1.5 * size / 64.0
            on = (np.mod(yy - self.phase[0], self.period) < width) | (np.mod(xx - self.phase[1], self.period) < width)
            img = np.where(on, 0.75, 0.3)
        else:
            r = np.hypot(yy - self.centre[0], xx - self.centre[1]) / (size / 2)
            img = 0.8 - 0.35 * r + 0.08 * np.cos(2 * np.pi * self.freq * r)
        img = gain * (img - 0.5) + 0.5 + offset + self.noise * rng.standard_normal((size, size))
        img = np.clip(img, 0.0, 1.0)
        if self.fov > 0:
            yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
            r = np.hypot(yy - (size - 1) / 2, xx - (size - 1) / 2) / (size / 2)
            img = img * np.clip((self.fov - r) / 0.1, 0.0, 1.0)
        return img


def inject_defect(
    base: np.ndarray, kind: str, contrast: float, radius: float, rng: np.random.Generator
) -> np.ndarray:
    size = base.shape[0]
    r = max(2.0, radius * size)
    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "blob":
        sign = rng.choice([-1.0, 1.0])
        mask = np.exp(-0.5 * ((yy - cy) ** 2 + (xx - cx) ** 2) / (r / 1.5) ** 2)
        out = base + contrast * sign * mask
    elif kind == "occlusion":
        hh, hw = r * rng.uniform(0.6, 1.0, size=2)
        mask = ((np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)).astype(np.float64)
        fill = 1.0 if base.mean() < 0.5 else 0.0
        out = base + contrast * mask * (fill - base)
    elif kind == "swap":
        mask = (np.hypot(yy - cy, xx - cx) <= r).astype(np.float64)
        patch = rng.uniform(0.0, 1.0, size=base.shape)
        out = base + contrast * mask * (patch - base)
    else:
        raise ConfigError(f"unknown defect kind {kind!r}")
    return np.clip(out, 0.0, 1.0)


def anomalous_image(style: DomainStyle, spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, str]:
    """(normal base, defected image, defect kind)."""
    base = style.sample(rng)
    kind = spec.defect_kinds[int(rng.integers(len(spec.defect_kinds)))]
    return base, inject_defect(base, kind, spec.defect_contrast, spec.defect_radius, rng), kind


def domain_name(spec: SynthSpec, index: int) -> str:
    family = spec.families[index % len(spec.families)]
    rep = index // len(spec.families)
    return family if rep == 0 else f"{family}{rep}"


def synth_benchmark(spec: SynthSpec, out_dir) -> list[DatasetManifest]:
    """Write every domain's images plus manifests under ``out_dir``.

    Layout: ``<domain>/{train,test}/*.pgm``, ``<domain>/manifest.json`` and
    a top-level ``benchmark.json`` listing the manifests.
    """
    spec.validate()
    out_dir = Path(out_dir)
    manifests = []
    seqs = np.random.SeedSequence(spec.seed).spawn(spec.domains)
    for index, seq in enumerate(seqs):
        family = spec.families[index % len(spec.families)]
        variant = index // len(spec.families)
        name = domain_name(spec, index)
        ddir = out_dir / name
        for sub in ("train", "test"):
            (ddir / sub).mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(seq)
        style = DomainStyle.draw(family, variant, spec.size, rng, spec.max_shift, spec.noise, spec.fov)
        m = DatasetManifest(domain=name, root=ddir)
        defects = []
        for i in range(spec.train_normals):
            rel = f"train/normal_{i:03d}.pgm"
            write_image(ddir / rel, quantize(style.sample(rng))[None])
            m.train_normal.append(rel)
        for i in range(spec.test_normals):
            rel = f"test/normal_{i:03d}.pgm"
            write_image(ddir / rel, quantize(style.sample(rng))[None])
            m.test_normal.append(rel)
        for i in range(spec.test_anoms):
            rel = f"test/anomalous_{i:03d}.pgm"
            _, img, kind = anomalous_image(style, spec, rng)
            write_image(ddir / rel, quantize(img)[None])
            m.test_anomalous.append(rel)
            defects.append({"path": rel, "kind": kind})
        m.save(ddir / "manifest.json")
        (ddir / "defects.json").write_text(json.dumps(defects, indent=2) + "\n")
        manifests.append(m)
    index = {"spec": spec.to_dict(), "manifests": [f"{m.domain}/manifest.json" for m in manifests]}
    (out_dir / "benchmark.json").write_text(json.dumps(index, indent=2) + "\n")
    return manifests
