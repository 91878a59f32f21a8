import numpy as np
import pytest

from phnn.data import (SyntheticSedParams, apply_channel_policy, generate_synthetic_sed, load_image_dataset,
                       make_desk_images, read_cifar_binary, read_idx, write_cifar_binary, write_idx)
from phnn.errors import ChannelPolicyError, ParseError, SpecInvalid


def test_idx_round_trip(tmp_path, rng):
    arr = rng.integers(0, 256, size=(5, 3, 4)).astype(np.uint8)
    write_idx(tmp_path / "a.idx", arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), arr)
    flt = rng.normal(size=(2, 3))
    write_idx(tmp_path / "b.idx", flt)
    np.testing.assert_array_equal(read_idx(tmp_path / "b.idx"), flt)


def test_idx_header_bytes(tmp_path):
    write_idx(tmp_path / "a.idx", np.zeros((2, 3), dtype=np.uint8))
    assert (tmp_path / "a.idx").read_bytes()[:12] == bytes([0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 3])


@pytest.mark.parametrize("blob", [b"\x01\x00\x08\x01\x00\x00\x00\x01\x00", b"\x00\x00\x07\x01",
                                  b"\x00\x00\x08\x02\x00\x00", b"\x00\x00\x08\x01\x00\x00\x00\x03\x01"])
def test_idx_parse_errors(tmp_path, blob):
    (tmp_path / "x.idx").write_bytes(blob)
    with pytest.raises(ParseError):
        read_idx(tmp_path / "x.idx")


def test_cifar_round_trip(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(4, 3, 8, 8)).astype(np.uint8)
    labels = np.array([3, 0, 9, 1])
    write_cifar_binary(tmp_path / "c.bin", imgs, labels)
    got, got_labels = read_cifar_binary(tmp_path / "c.bin", (3, 8, 8))
    np.testing.assert_array_equal(got, imgs)
    np.testing.assert_array_equal(got_labels, labels)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "c.bin").read_bytes()[:-1])
    with pytest.raises(ParseError):
        read_cifar_binary(tmp_path / "bad.bin", (3, 8, 8))


def test_rgb_padded_for_quaternions(rng):
    x = rng.uniform(size=(2, 3, 4, 4))
    out = apply_channel_policy(x, "zero_pad_to_n", 4)
    assert out.shape == (2, 4, 4, 4)
    assert not out[:, 0].any()
    np.testing.assert_array_equal(out[:, 1:], x)


def test_natural_policy(rng):
    x = rng.uniform(size=(2, 3, 4, 4))
    assert apply_channel_policy(x, "natural", 3) is x
    with pytest.raises(ChannelPolicyError):
        apply_channel_policy(rng.uniform(size=(2, 1, 4, 4)), "natural", 2)
    assert apply_channel_policy(x, "zero_pad_to_n", 1) is x


def test_load_image_dataset(tmp_path):
    imgs, labels = make_desk_images(20, seed=3)
    write_cifar_binary(tmp_path / "d.bin", imgs, labels)
    ds = load_image_dataset(tmp_path / "d.bin", "cifar_binary", "zero_pad_to_n", 2, image_shape=(3, 8, 8))
    assert ds.images.shape == (20, 4, 8, 8)
    assert 0.0 <= ds.images.data.min() and ds.images.data.max() <= 1.0
    np.testing.assert_array_equal(ds.labels, labels)

    write_idx(tmp_path / "g.idx", imgs[:, 0])
    write_idx(tmp_path / "l.idx", labels.astype(np.uint8))
    with pytest.raises(ChannelPolicyError):
        load_image_dataset(tmp_path / "g.idx", "idx", "natural", 2, labels_path=tmp_path / "l.idx")
    gray = load_image_dataset(tmp_path / "g.idx", "idx", "natural", 1, labels_path=tmp_path / "l.idx")
    assert gray.images.shape == (20, 1, 8, 8)


def test_desk_images_are_deterministic():
    a, la = make_desk_images(50, seed=1)
    b, lb = make_desk_images(50, seed=1)
    assert a.tobytes() == b.tobytes() and la.tobytes() == lb.tobytes()
    assert a.shape == (50, 3, 8, 8) and a.dtype == np.uint8
    assert not np.array_equal(a, make_desk_images(50, seed=2)[0])


@pytest.mark.parametrize("channels,phase", [(4, False), (8, False), (8, True), (16, True)])
def test_sed_shapes_and_normalisation(channels, phase):
    p = SyntheticSedParams(num_clips=12, channels=channels, phase=phase)
    feats, labels = generate_synthetic_sed(p, seed=0)
    assert feats.shape == (12, channels, 32, 16)
    assert labels.shape == (12, 32, 6)
    np.testing.assert_allclose(feats.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(feats.std(axis=(0, 2, 3)), 1.0, atol=1e-12)
    assert set(np.unique(labels)) <= {0.0, 1.0}


@pytest.mark.parametrize("cap", [1, 2, 3])
def test_sed_overlap_cap(cap):
    p = SyntheticSedParams(num_clips=40, max_overlap=cap, events_per_clip=(3, 6))
    _, labels = generate_synthetic_sed(p, seed=5)
    assert labels.sum(axis=2).max() <= cap


def test_sed_determinism():
    p = SyntheticSedParams(num_clips=6)
    a = generate_synthetic_sed(p, seed=9)
    b = generate_synthetic_sed(p, seed=9)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


@pytest.mark.parametrize("kw", [dict(channels=6), dict(max_overlap=4), dict(channels=16, phase=False),
                                dict(channels=4, phase=True), dict(num_clips=0)])
def test_sed_params_validation(kw):
    with pytest.raises(SpecInvalid):
        SyntheticSedParams(**kw).validate()
