import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmix.adversary import AttackConfig
from advmix.datasets import (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, AugmentPolicy, BadMagicError,
                             CountMismatchError, Dataset, Preprocessor, TruncatedError, augment,
                             blob_centers, compute_channel_stats, epsilon_to_normalized,
                             export_csv, gen_gaussian_blobs, gen_rings, gen_two_moons, hflip,
                             load_idx, max_shift_for, normalize, train_test_split, translate,
                             write_idx)


def _write_raw_idx(tmp_path, pixels, labels, image_magic=IDX_IMAGES_MAGIC, n_labels=None):
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    img, lab = tmp_path / "images.idx", tmp_path / "labels.idx"
    img.write_bytes(struct.pack(">IIII", image_magic, n, rows, cols) + pixels.tobytes())
    lab.write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels) if n_labels is None else n_labels)
                    + labels.tobytes())
    return img, lab


# -- synthetic generators -------------------------------------------------------------


def test_noiseless_moons_lie_on_their_arcs():
    ds = gen_two_moons(400, noise_sigma=0.0, seed=0)
    upper = ds.inputs[ds.labels == 0]
    lower = ds.inputs[ds.labels == 1]
    np.testing.assert_allclose(np.hypot(*upper.T), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0, atol=1e-12)
    assert np.all(upper[:, 1] >= 0) and np.all(lower[:, 1] <= 0.5)
    assert len(upper) == len(lower) == 200


def test_generators_are_seeded():
    for make in (lambda s: gen_two_moons(100, 0.1, s), lambda s: gen_gaussian_blobs(3, 90, seed=s),
                 lambda s: gen_rings(100, seed=s)):
        assert make(4).digest() == make(4).digest()
        assert make(4).digest() != make(5).digest()


def test_moons_ambient_dimension():
    ds = gen_two_moons(50, 0.0, 0, ambient_dim=6, nuisance_sigma=0.5)
    assert ds.inputs.shape == (50, 6)
    upper = ds.inputs[ds.labels == 0, :2]
    np.testing.assert_allclose(np.hypot(*upper.T), 1.0, atol=1e-12)
    assert ds.inputs[:, 2:].std() > 0.3
    with pytest.raises(ValueError):
        gen_two_moons(50, ambient_dim=1)


def test_blob_centers_spacing():
    c = blob_centers(5, 10.0)
    d = np.linalg.norm(c - np.roll(c, 1, axis=0), axis=1)
    np.testing.assert_allclose(d, 10.0)


def test_well_separated_blobs_are_linearly_separable():
    ds = gen_gaussian_blobs(4, 2000, spacing=10.0, sigma=1.0, seed=1)
    centers = blob_centers(4, 10.0)
    # nearest-center rule is a linear classifier for equal-variance blobs
    pred = np.argmin(((ds.inputs[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) >= 0.99


def test_rings_radii():
    ds = gen_rings(300, radii=(1.0, 3.0), sigma=0.0, seed=0)
    r = np.hypot(*ds.inputs.T)
    np.testing.assert_allclose(r[ds.labels == 0], 1.0)
    np.testing.assert_allclose(r[ds.labels == 1], 3.0)


def test_split_is_disjoint_and_seeded():
    ds = gen_two_moons(101, 0.1, 0)
    tr, te = train_test_split(ds, 0.3, seed=2)
    assert len(tr) + len(te) == 101 and len(te) == 30
    rows = {r.tobytes() for r in tr.inputs}
    assert not any(r.tobytes() in rows for r in te.inputs)
    tr2, _ = train_test_split(ds, 0.3, seed=2)
    assert tr.digest() == tr2.digest()


def test_csv_header_and_rows(tmp_path):
    ds = gen_two_moons(5, 0.1, 0)
    export_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,label"
    assert len(lines) == 6
    first = lines[1].split(",")
    assert float(first[0]) == ds.inputs[0, 0] and int(first[2]) == ds.labels[0]


# -- IDX ---------------------------------------------------------------------


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (7, 4, 5))
    img, lab = _write_raw_idx(tmp_path, pixels, rng.integers(0, 10, 7))
    ds = load_idx(img, lab, class_count=10)
    assert ds.inputs.shape == (7, 1, 4, 5) and ds.declared_range == (0.0, 1.0)
    np.testing.assert_array_equal(np.rint(ds.inputs[:, 0] * 255).astype(int), pixels)
    write_idx(ds, tmp_path / "a", tmp_path / "b")
    again = load_idx(tmp_path / "a", tmp_path / "b", class_count=10)
    assert again.digest() == ds.digest()


def test_idx_pixel_scaling(tmp_path):
    img, lab = _write_raw_idx(tmp_path, [[[0, 255]]], [1])
    ds = load_idx(img, lab)
    assert ds.inputs[0, 0, 0, 0] == 0.0 and ds.inputs[0, 0, 0, 1] == 1.0


def test_idx_empty_file(tmp_path):
    img, lab = _write_raw_idx(tmp_path, np.zeros((0, 8, 8)), [])
    ds = load_idx(img, lab, class_count=10)
    assert len(ds) == 0 and ds.inputs.shape == (0, 1, 8, 8)


def test_idx_errors(tmp_path):
    img, lab = _write_raw_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1], image_magic=0x0803)
    load_idx(img, lab)
    bad, _ = _write_raw_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1], image_magic=0x0801)
    with pytest.raises(BadMagicError):
        load_idx(bad, lab)
    img, lab = _write_raw_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1])
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(TruncatedError):
        load_idx(img, lab)
    img.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedError):
        load_idx(img, lab)
    img, lab = _write_raw_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1, 1])
    with pytest.raises(CountMismatchError):
        load_idx(img, lab)


def test_idx_labels_out_of_range(tmp_path):
    img, lab = _write_raw_idx(tmp_path, np.zeros((2, 3, 3)), [0, 7])
    with pytest.raises(ValueError):
        load_idx(img, lab, class_count=5)


# -- augmentation and normalization ------------------------------------------------------


def test_no_flip_no_shift_is_identity():
    x = np.random.default_rng(0).uniform(size=(4, 1, 8, 8))
    out = augment(x, np.random.default_rng(1), AugmentPolicy(flip_prob=0.0, max_shift=0))
    np.testing.assert_array_equal(out, x)


def test_double_flip_is_identity():
    img = np.arange(12.0).reshape(1, 3, 4)
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    np.testing.assert_array_equal(hflip(img)[0, 0], [3, 2, 1, 0])


def test_translate_moves_content_and_zero_fills():
    img = np.arange(9.0).reshape(1, 3, 3)
    out = translate(img, 1, 0)
    np.testing.assert_array_equal(out[0, 0], 0.0)
    np.testing.assert_array_equal(out[0, 1:], img[0, :2])


def test_max_shift_scales_with_side():
    assert max_shift_for(32) == 4
    assert max_shift_for(8) == 1


def test_flat_inputs_pass_through_augmentation():
    x = np.ones((3, 2))
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    assert augment(x, rng) is x
    assert rng.bit_generator.state == state


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_augmentation_preserves_pixel_multiset_bounds(seed):
    x = np.random.default_rng(seed).uniform(size=(5, 1, 8, 8))
    out = augment(x, np.random.default_rng(seed))
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= x.max()


def test_normalized_train_set_has_zero_mean_unit_std():
    x = np.random.default_rng(0).uniform(size=(50, 3, 4, 4))
    stats = compute_channel_stats(x)
    z = normalize(x, stats)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1.0, atol=1e-9)


def test_zero_std_rejected():
    with pytest.raises(ValueError):
        compute_channel_stats(np.ones((4, 1, 2, 2)))
    with pytest.raises(ValueError):
        normalize(np.ones((1, 1, 2, 2)), (np.zeros(1), np.zeros(1)))


def test_epsilon_conversion_example():
    assert epsilon_to_normalized(8 / 255, 0.25) == pytest.approx(0.12549019607843137, abs=1e-15)


def test_normalized_budget_matches_pixel_budget():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(20, 2, 4, 4))
    ds = Dataset(x, rng.integers(0, 2, 20), 2, declared_range=(0.0, 1.0))
    prep = Preprocessor(ds, augment_images=False)
    cfg = prep.attack_units(AttackConfig(epsilon=8 / 255, step_size=2 / 255))
    mean, std = prep.stats
    delta = rng.uniform(-1, 1, x.shape) * 8 / 255
    z_delta = prep(x + delta) - prep(x)
    assert np.all(np.abs(z_delta) <= cfg.epsilon * (1 + 1e-12))
    np.testing.assert_allclose(z_delta * std.reshape(-1, 1, 1), delta, atol=1e-12)
    lo, hi = prep.value_range()
    np.testing.assert_allclose(lo.ravel(), -mean / std)
    np.testing.assert_allclose(hi.ravel(), (1 - mean) / std)


def test_labels_unaffected_by_preprocessing():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.uniform(size=(6, 1, 8, 8)), np.arange(6) % 3, 3, declared_range=(0.0, 1.0))
    prep = Preprocessor(ds)
    before = ds.labels.copy()
    prep(ds.inputs, rng=rng, train=True)
    np.testing.assert_array_equal(ds.labels, before)


def test_synthetic_data_untouched_by_preprocessor():
    ds = gen_two_moons(20, 0.1, 0)
    prep = Preprocessor(ds)
    np.testing.assert_array_equal(prep(ds.inputs, np.random.default_rng(0), train=True), ds.inputs)
    assert prep.value_range() is None
    assert math.isclose(prep.attack_units(AttackConfig(epsilon=0.1)).epsilon, 0.1)
