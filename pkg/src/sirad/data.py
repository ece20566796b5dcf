"""Preprocessing, dataset manifests and the training/evaluation protocols."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import load_image
from .scoring import ANOMALOUS, NORMAL
from .tensor import Tensor, bilinear_upsample

LUMA = (0.299, 0.587, 0.114)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luma over axis -3; integer per-mille weights keep white exactly 1."""
    r, g, b = rgb[..., 0, :, :], rgb[..., 1, :, :], rgb[..., 2, :, :]
    return np.clip((299.0 * r + 587.0 * g + 114.0 * b) / 1000.0, 0.0, 1.0)

PROTOCOLS = (
    "one_shot_universal",
    "full_shot_universal",
    "k_shot_universal",
    "one_shot_specialized",
    "full_shot_specialized",
)


class ConfigError(ValueError):
    pass


def preprocess(img: Tensor, size: int, channels: int) -> Tensor:
    """Resize to ``size x size`` (bilinear) and adapt the channel count."""
    _, c, h, w = img.shape
    x = img if (h, w) == (size, size) else bilinear_upsample(img, size, size)
    if c == channels:
        return x
    if c == 3 and channels == 1:
        return Tensor(luminance(x.data)[:, None])
    if c == 1 and channels == 3:
        return Tensor(np.repeat(x.data, 3, axis=1))
    raise ValueError(f"cannot adapt {c} channels to {channels}")


@dataclass
class SampleRecord:
    image: Tensor
    domain: str
    label: str
    source: str

    @property
    def sample_id(self) -> str:
        return Path(self.source).stem


@dataclass
class DatasetManifest:
    """Paths are stored as written in the manifest, relative to ``root``."""

    domain: str
    train_normal: list[str] = field(default_factory=list)
    test_normal: list[str] = field(default_factory=list)
    test_anomalous: list[str] = field(default_factory=list)
    root: Path = Path(".")

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "train_normal": list(self.train_normal),
            "test_normal": list(self.test_normal),
            "test_anomalous": list(self.test_anomalous),
        }

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _read_json(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: manifest is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: manifest must be a JSON object")
    return doc


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = _read_json(path)
    missing = [k for k in ("domain", "train_normal", "test_normal", "test_anomalous") if k not in doc]
    if missing:
        raise ConfigError(f"{path}: manifest missing keys {missing}")
    return DatasetManifest(
        domain=str(doc["domain"]),
        train_normal=[str(p) for p in doc["train_normal"]],
        test_normal=[str(p) for p in doc["test_normal"]],
        test_anomalous=[str(p) for p in doc["test_anomalous"]],
        root=path.parent,
    )


def load_manifests(paths) -> list[DatasetManifest]:
    """Accept domain manifests or a benchmark index listing them."""
    out = []
    for p in paths:
        p = Path(p)
        doc = _read_json(p)
        if "manifests" in doc:
            out.extend(load_manifest(p.parent / m) for m in doc["manifests"])
        else:
            out.append(load_manifest(p))
    return out


@dataclass(frozen=True)
class Protocol:
    name: str
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.name not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.name!r}; choose from {', '.join(PROTOCOLS)}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "Protocol":
        """``"k_shot_universal:10"`` style strings."""
        name, _, k = text.partition(":")
        try:
            shots = int(k) if k else 1
        except ValueError:
            raise ConfigError(f"bad shot count in protocol {text!r}") from None
        return cls(name, shots, seed)

    @property
    def universal(self) -> bool:
        return self.name.endswith("_universal")

    def shots(self) -> int | None:
        if self.name.startswith("one_shot"):
            return 1
        if self.name.startswith("k_shot"):
            return self.k
        return None


@dataclass
class ProtocolRun:
    """One model's worth of work: a train set and the test sets it is scored on."""

    name: str
    train: list[tuple[str, Path]]
    tests: dict[str, list[tuple[Path, str]]]


def select_normals(manifest: DatasetManifest, shots: int | None, rng: np.random.Generator) -> list[Path]:
    """Seeded shuffle of the lexicographically sorted list, then take the first ``shots``."""
    if not manifest.train_normal:
        raise ConfigError(f"domain {manifest.domain!r} has no train_normal images")
    paths = sorted(manifest.train_normal)
    if shots is None:
        return [manifest.resolve(p) for p in paths]
    order = rng.permutation(len(paths))
    return [manifest.resolve(paths[i]) for i in order[:shots]]


def test_set(m: DatasetManifest) -> list[tuple[Path, str]]:
    return [(m.resolve(p), NORMAL) for p in m.test_normal] + [(m.resolve(p), ANOMALOUS) for p in m.test_anomalous]


def build_protocol(manifests: list[DatasetManifest], protocol: Protocol) -> list[ProtocolRun]:
    """Universal protocols give one pooled run; specialized ones give one run per domain.

    Each domain draws from its own generator spawned from the protocol
    seed in manifest order, so adding a domain never changes the others'
    selections.
    """
    if not manifests:
        raise ConfigError("no dataset manifests given")
    names = [m.domain for m in manifests]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate domain names: {names}")
    seqs = np.random.SeedSequence(protocol.seed).spawn(len(manifests))
    picks = {
        m.domain: select_normals(m, protocol.shots(), np.random.default_rng(s)) for m, s in zip(manifests, seqs)
    }
    for m in manifests:
        bad = set(map(str, picks[m.domain])) & {str(m.resolve(p)) for p in m.test_anomalous}
        if bad:
            raise ConfigError(f"anomalous images listed as training normals in {m.domain!r}: {sorted(bad)}")
    if protocol.universal:
        train = [(m.domain, p) for m in manifests for p in picks[m.domain]]
        return [ProtocolRun("universal", train, {m.domain: test_set(m) for m in manifests})]
    return [ProtocolRun(m.domain, [(m.domain, p) for p in picks[m.domain]], {m.domain: test_set(m)}) for m in manifests]


def load_record(path, domain: str, label: str, size: int, channels: int) -> SampleRecord:
    img = preprocess(load_image(path), size, channels)
    return SampleRecord(img, domain, label, os.fspath(path))
