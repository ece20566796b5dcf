import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sirad.netpbm import decode
from sirad.scoring import percentile
from sirad.viz import JET_KNOTS, RenderSpec, jet, normalize_maps, overlay_path, overlay_ppm, render_overlay


def test_knot_values():
    for pos, r, g, b in JET_KNOTS:
        np.testing.assert_array_equal(jet(np.array(pos)), [r, g, b])
    np.testing.assert_allclose(jet(np.array(0.25)), [0.0, 0.5, 1.0])


def test_hue_is_monotone_along_the_knots():
    # blue -> cyan -> yellow -> red: each step gains red or loses blue
    grid = np.linspace(0.125, 0.875, 61)
    rgb = jet(grid)
    hue_index = rgb[:, 0] - rgb[:, 2]
    assert np.all(np.diff(hue_index) >= 0)


def test_alpha_one_extremes():
    img = np.full((1, 1, 2, 2), 0.3)
    spec = RenderSpec(alpha=1.0)
    out = render_overlay(img, np.zeros((2, 2)), spec)
    assert np.all(out[:, 0, 0] == [0, 0, 128])
    out = render_overlay(img, np.ones((2, 2)), spec)
    assert np.all(out[:, 0, 0] == [128, 0, 0])


def test_alpha_zero_is_grayscale():
    img = np.random.default_rng(0).uniform(size=(1, 1, 3, 4))
    out = render_overlay(img, np.random.default_rng(1).uniform(size=(3, 4)), RenderSpec(alpha=0.0))
    expected = np.floor(img[0, 0] * 255 + 0.5)
    for c in range(3):
        np.testing.assert_array_equal(out[c], expected)


def test_size_mismatch():
    with pytest.raises(ValueError):
        render_overlay(np.zeros((1, 1, 4, 4)), np.zeros((3, 3)))


@given(st.lists(st.integers(0, 20).map(float), min_size=1, max_size=25))
def test_normalize_matches_sort_oracle(values):
    maps = [np.array(values[: len(values) // 2 + 1]), np.array(values[len(values) // 2 + 1 :])]
    spec = RenderSpec(10, 90)
    s = sorted(values)
    lo, hi = percentile(s, 10), percentile(s, 90)
    out = normalize_maps(maps, spec)
    for m, o in zip(maps, out):
        if hi == lo:
            assert np.all(o == 0)
        else:
            np.testing.assert_array_equal(o, np.clip((m - lo) / (hi - lo), 0, 1))


def test_endpoints_map_to_zero_and_one():
    values = np.arange(101, dtype=float)
    out = normalize_maps([values])[0]
    assert out[20] == 0.0 and out[95] == 1.0
    assert np.all(out[:20] == 0.0) and np.all(out[95:] == 1.0)


def test_degenerate_and_empty():
    assert np.all(normalize_maps([np.full((2, 2), 3.0)])[0] == 0)
    with pytest.raises(ValueError):
        normalize_maps([])


def test_ppm_is_valid_and_pure():
    rng = np.random.default_rng(3)
    img, m = rng.uniform(size=(1, 1, 5, 6)), rng.uniform(size=(5, 6))
    a, b = overlay_ppm(img, m), overlay_ppm(img, m)
    assert a == b and a.startswith(b"P6")
    assert decode(a).shape == (3, 5, 6)


def test_spec_validation():
    for kw in (dict(p_lo=50, p_hi=50), dict(alpha=1.5), dict(colormap="viridis")):
        with pytest.raises(ValueError):
            RenderSpec(**kw)


def test_overlay_path(tmp_path):
    assert overlay_path(tmp_path, "grid", "a_001", 2) == tmp_path / "grid" / "a_001__loop2.ppm"
    assert overlay_path(tmp_path, "grid", "a_001", "final").name == "a_001__loopfinal.ppm"
