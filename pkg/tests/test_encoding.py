import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from siamese_snn.encoding import (
    EncodedDataset,
    EncoderConfig,
    encode_binary,
    encode_black_white,
    encode_grayscale,
    encode_images,
)

images = arrays(np.float64, 784, elements=st.floats(0, 1))


def _img(value, at=0):
    img = np.zeros(784)
    img[at] = value
    return img


def test_black_white_examples():
    assert encode_black_white(_img(1.0))[0] == 0.0
    assert encode_black_white(_img(0.2))[0] == 1.79
    assert encode_black_white(_img(0.5))[0] == 0.0
    ev = encode_black_white(np.zeros(784))
    assert ev.n_events == 784


def test_binary_examples():
    assert encode_binary(_img(1.0))[0] == 0.0
    assert encode_binary(_img(0.0))[0] is None
    assert encode_binary(np.zeros(784)).n_events == 0


def test_grayscale_examples():
    assert encode_grayscale(_img(1.0))[0] == 1.0
    assert encode_grayscale(_img(0.0))[0] is None
    assert encode_grayscale(_img(0.5))[0] == 2.0
    # no clipping of dim pixels
    assert encode_grayscale(_img(1 / 255))[0] == pytest.approx(255.0)


@given(images)
def test_binary_is_black_white_without_late_events(img):
    bw = encode_black_white(img)
    bi = encode_binary(img)
    for i in range(784):
        expect = None if bw[i] == 1.79 else bw[i]
        assert bi[i] == expect


@given(st.floats(1e-3, 1), st.floats(1e-3, 1))
def test_grayscale_strictly_decreasing(a, b):
    if a == b:
        return
    ta = encode_grayscale(_img(a))[0]
    tb = encode_grayscale(_img(b))[0]
    assert (ta < tb) == (a > b)


@given(images)
def test_encoders_are_pixelwise(img):
    # encoding a permuted image permutes the channels
    perm = np.random.default_rng(0).permutation(784)
    for scheme in ("black_white", "binary", "grayscale"):
        cfg = EncoderConfig(scheme)
        t, p = encode_images(img[None], cfg)
        tp, pp = encode_images(img[perm][None], cfg)
        np.testing.assert_array_equal(t[0, perm], tp[0])
        np.testing.assert_array_equal(p[0, perm], pp[0])


def test_accepts_28x28_images():
    img = np.zeros((28, 28))
    img[3, 4] = 1.0
    ev = encode_binary(img.reshape(-1))
    assert ev[3 * 28 + 4] == 0.0
    t, p = encode_images(img[None], EncoderConfig("binary"))
    assert t.shape == (1, 784) and p.sum() == 1


def test_rejects_bad_images():
    with pytest.raises(ValueError):
        encode_black_white(np.zeros(10))
    with pytest.raises(ValueError):
        encode_black_white(np.full(784, 1.5))


def test_config_validation():
    with pytest.raises(ValueError, match="valid schemes"):
        EncoderConfig("rainbow")
    with pytest.raises(ValueError):
        EncoderConfig(t0=2.0, t1=1.0)
    with pytest.raises(ValueError):
        EncoderConfig(threshold=1.0)
    assert EncoderConfig().digest() != EncoderConfig(t1=2.0).digest()


def test_encoded_dataset_subset():
    t, p = encode_images(np.eye(784)[:5], EncoderConfig("binary"))
    ds = EncodedDataset(t, p, np.arange(5), "binary")
    sub = ds.subset([1, 3])
    assert len(sub) == 2 and sub.labels.tolist() == [1, 3]
    assert sub.example(0)[1] == 0.0 and sub.example(0).n_events == 1
