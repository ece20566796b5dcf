import json

import numpy as np
import pytest

from sirad.data import ConfigError, load_manifests
from sirad.netpbm import load_image
from sirad.synth import DEFECTS, FAMILIES, DomainStyle, SynthSpec, anomalous_image, inject_defect, synth_benchmark

SMALL = dict(train_normals=2, test_normals=2, test_anoms=3, size=32)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_same_files(tmp_path):
    synth_benchmark(SynthSpec(**SMALL, seed=9), tmp_path / "a")
    synth_benchmark(SynthSpec(**SMALL, seed=9), tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    synth_benchmark(SynthSpec(**SMALL, seed=10), tmp_path / "c")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_layout_and_manifests(tmp_path):
    ms = synth_benchmark(SynthSpec(**SMALL, domains=4), tmp_path)
    assert [m.domain for m in ms] == ["texture", "grid", "radial", "texture1"]
    loaded = load_manifests([tmp_path / "benchmark.json"])
    assert [m.to_dict() for m in loaded] == [m.to_dict() for m in ms]
    m = loaded[0]
    assert len(m.train_normal) == 2 and len(m.test_normal) == 2 and len(m.test_anomalous) == 3
    img = load_image(m.resolve(m.test_anomalous[0]))
    assert img.shape == (1, 1, 32, 32)
    defects = json.loads((tmp_path / "texture" / "defects.json").read_text())
    assert {d["kind"] for d in defects} <= set(DEFECTS)


def test_domains_look_different(tmp_path):
    ms = synth_benchmark(SynthSpec(**SMALL), tmp_path)
    means = [load_image(m.resolve(m.train_normal[0])).data for m in ms]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.abs(means[i] - means[j]).mean() > 0.05


@pytest.mark.parametrize("kind", DEFECTS)
def test_zero_contrast_is_identity(kind):
    rng = np.random.default_rng(0)
    base = rng.uniform(size=(32, 32))
    np.testing.assert_array_equal(inject_defect(base, kind, 0.0, 0.2, rng), base)


@pytest.mark.parametrize("kind", DEFECTS)
def test_defects_change_pixels(kind):
    rng = np.random.default_rng(1)
    base = np.full((32, 32), 0.4)
    out = inject_defect(base, kind, 1.0, 0.2, rng)
    assert np.abs(out - base).max() > 0.3
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("family", FAMILIES)
def test_negative_control_pixels_equal_base(family):
    spec = SynthSpec(defect_contrast=0.0, size=32)
    rng = np.random.default_rng(2)
    style = DomainStyle.draw(family, 0, 32, rng)
    for _ in range(3):
        base, img, _ = anomalous_image(style, spec, rng)
        np.testing.assert_array_equal(img, base)


def test_negative_control_files_share_normals(tmp_path):
    synth_benchmark(SynthSpec(**SMALL), tmp_path / "d")
    synth_benchmark(SynthSpec(**SMALL, defect_contrast=0.0), tmp_path / "z")
    a, z = tree_bytes(tmp_path / "d"), tree_bytes(tmp_path / "z")
    for name in a:
        if "/train/" in name or "normal_" in name and "anomalous" not in name:
            assert a[name] == z[name], name


def test_field_of_view_darkens_corners():
    style = DomainStyle.draw("grid", 0, 32, np.random.default_rng(0), fov=0.9)
    img = style.sample(np.random.default_rng(1))
    assert img[0, 0] == 0.0 and img[16, 16] > 0.0


@pytest.mark.parametrize(
    "kw",
    [dict(domains=0), dict(test_anoms=0), dict(size=8), dict(defect_contrast=1.5), dict(defect_radius=0.7),
     dict(defect_kinds=("crack",)), dict(families=("stripes",)), dict(noise=-1.0)],
)
def test_spec_validation(kw, tmp_path):
    with pytest.raises(ConfigError):
        synth_benchmark(SynthSpec(**kw), tmp_path)
