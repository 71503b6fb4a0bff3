import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tirtone.metrics import average_histogram, histogram256, histogram_csv, histogram_kl, image_entropy, to_gray8


def two_spike_kl(s):
    mpmath.mp.dps = 40
    s = mpmath.mpf(s)
    a = (1 + s) / (1 + 256 * s)
    b = s / (1 + 256 * s)
    return float(a * mpmath.log(a / b) + b * mpmath.log(b / a))


def test_entropy_constant():
    assert image_entropy(np.full((5, 5), 42, dtype=np.uint8)) == 0.0


def test_entropy_uniform():
    img = np.arange(256, dtype=np.uint8).repeat(3).reshape(48, 16)
    assert image_entropy(img) == pytest.approx(8.0, abs=1e-12)


def test_entropy_two_point():
    img = np.array([[10, 200], [10, 200]], dtype=np.uint8)
    assert image_entropy(img) == pytest.approx(1.0, abs=1e-12)


def test_entropy_of_float_rgb_uses_channel_mean():
    img = np.stack([np.full((2, 2), 0.0), np.full((2, 2), 100.0), np.full((2, 2), 200.0)])
    assert to_gray8(img).tolist() == [[100, 100], [100, 100]]
    assert image_entropy(img) == 0.0


def test_entropy_empty():
    with pytest.raises(ValueError):
        image_entropy(np.zeros((0, 3), dtype=np.uint8))


def test_histogram_total():
    h = histogram256(np.random.default_rng(0).integers(0, 256, (9, 9)).astype(np.uint8))
    assert h.bins.sum() == h.total == 81


def test_average_histogram_single():
    img = np.random.default_rng(1).integers(0, 256, (6, 6)).astype(np.uint8)
    np.testing.assert_array_equal(average_histogram([img]), histogram256(img).normalized())


def test_average_histogram_two_spikes():
    h = average_histogram([np.full((3, 3), 7, np.uint8), np.full((4, 4), 250, np.uint8)])
    assert h[7] == 0.5 and h[250] == 0.5 and h.sum() == 1.0


def test_average_histogram_order_free_and_copies():
    rng = np.random.default_rng(2)
    imgs = [rng.integers(0, 256, (5, 5)).astype(np.uint8) for _ in range(4)]
    np.testing.assert_allclose(average_histogram(imgs), average_histogram(imgs[::-1]), atol=1e-15)
    np.testing.assert_array_equal(average_histogram([imgs[0]] * 5), histogram256(imgs[0]).normalized())


def test_average_histogram_empty():
    with pytest.raises(ValueError):
        average_histogram([])


def test_kl_identity():
    p = average_histogram([np.random.default_rng(3).integers(0, 256, (8, 8)).astype(np.uint8)])
    assert histogram_kl(p, p) == 0.0


def test_kl_two_spikes_closed_form():
    p = np.zeros(256)
    q = np.zeros(256)
    p[0] = 1.0
    q[255] = 1.0
    assert histogram_kl(p, q, 1e-9) == pytest.approx(two_spike_kl("1e-9"), rel=1e-10)
    assert histogram_kl(p, q, 1e-9) == pytest.approx(20.7232605327917, rel=1e-10)


def test_kl_rejects_unnormalized():
    with pytest.raises(ValueError):
        histogram_kl(np.ones(256), np.full(256, 1 / 256))


hists = arrays(np.float64, 256, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 0).map(lambda a: a / a.sum())


@settings(max_examples=100, deadline=None)
@given(hists, hists)
def test_kl_nonnegative(p, q):
    assert histogram_kl(p, q) >= -1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_entropy_bounds(img):
    assert 0.0 <= image_entropy(img) <= 8.0


def test_histogram_csv_layout():
    text = histogram_csv({"a": np.full(256, 1 / 256), "b": np.eye(256)[0]})
    lines = text.splitlines()
    assert lines[0] == "bin,a,b"
    assert len(lines) == 257
