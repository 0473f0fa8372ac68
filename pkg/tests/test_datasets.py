import csv

import numpy as np
import pytest
from PIL import Image

from splitguard.datasets import (
    DEFAULT_PROPORTIONS,
    SyntheticAttributeSpec,
    generate_synthetic,
    load_external,
    save_bundle,
    training_context,
    trivial_classifier,
)
from splitguard.errors import ConfigError, SchemaError, SizeError, SplitAccessError

SMALL = (120, 100, 60)


@pytest.fixture(scope="module")
def bundle():
    return generate_synthetic(SyntheticAttributeSpec(seed=7), SMALL)


def test_shapes_ranges_and_labels(bundle):
    assert bundle.shape == (3, 32, 32)
    for name, split in bundle.splits.items():
        assert split.images.shape[1:] == (3, 32, 32)
        assert split.images.dtype == np.float32
        assert split.images.min() >= 0.0 and split.images.max() <= 1.0
        assert set(np.unique(split.y)) <= {0, 1} and set(np.unique(split.z)) <= {0, 1}
    assert [len(s) for s in bundle.splits.values()] == list(SMALL)
    assert bundle.descriptor.sizes == SMALL


def test_deterministic_bytes():
    a = generate_synthetic(SyntheticAttributeSpec(seed=7), SMALL)
    b = generate_synthetic(SyntheticAttributeSpec(seed=7), SMALL)
    c = generate_synthetic(SyntheticAttributeSpec(seed=8), SMALL)
    for name in a.splits:
        assert a.splits[name].images.tobytes() == b.splits[name].images.tobytes()
        assert np.array_equal(a.splits[name].y, b.splits[name].y)
    assert a.user_train.images.tobytes() != c.user_train.images.tobytes()


def test_split_ids_disjoint(bundle):
    ids = [set(s.ids) for s in bundle.splits.values()]
    assert all(len(s) == n for s, n in zip(ids, SMALL))
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_splits_read_only(bundle):
    with pytest.raises(ValueError):
        bundle.user_train.images[0, 0, 0, 0] = 1.0


def test_test_split_guarded_in_training(bundle):
    with training_context():
        _ = bundle.user_train.images
        _ = bundle.test.ids
        for attr in ("images", "y", "z"):
            with pytest.raises(SplitAccessError):
                getattr(bundle.test, attr)
    assert bundle.test.images.shape[0] == SMALL[2]


def test_independent_labels_when_uncorrelated():
    spec = SyntheticAttributeSpec(seed=3)
    from splitguard.datasets import _draw_labels

    y, z = _draw_labels(np.random.default_rng(0), spec, 10_000)
    assert abs(np.corrcoef(y, z)[0, 1]) < 0.05
    # balanced generator: majority rate within 50% +- 2 pts
    assert abs(max(np.mean(y == 0), np.mean(y == 1)) - 0.5) <= 0.02


def test_correlation_knob():
    from splitguard.datasets import _draw_labels

    y, z = _draw_labels(np.random.default_rng(0), SyntheticAttributeSpec(correlation=1.0), 2000)
    assert np.array_equal(y % 2, z)


def test_hue_leaves_luma_channel_sum_unchanged():
    """Chroma offsets sum to zero over channels: the mean over channels carries no hue."""
    from splitguard.datasets import HUE_OFFSETS

    np.testing.assert_allclose(HUE_OFFSETS.sum(axis=1), 0.0, atol=1e-12)


@pytest.mark.parametrize("factor", ["orientation", "shape"])
def test_both_geometry_factors_render(factor):
    b = generate_synthetic(SyntheticAttributeSpec(desired_factor=factor, k_desired=3, k_sensitive=3, n_objects=2), (30, 30, 30))
    assert b.k_desired == 3 and b.user_train.images.shape == (30, 3, 32, 32)
    assert set(np.unique(b.user_train.y)) <= {0, 1, 2}


@pytest.mark.parametrize(
    "kw",
    [
        dict(k_desired=1),
        dict(k_sensitive=99),
        dict(correlation=1.5),
        dict(image_size=4),
        dict(desired_factor="texture"),
        dict(desired_prior=(0.5, 0.6)),
        dict(desired_factor="orientation", k_desired=5),
        dict(n_objects=0),
    ],
)
def test_invalid_spec_is_config_error(kw):
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticAttributeSpec(**kw), (10, 10, 10))


@pytest.mark.parametrize("sizes", [(0, 1, 1), (1, 2), (-1, 5, 5)])
def test_invalid_sizes(sizes):
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticAttributeSpec(), sizes)


def test_default_proportions():
    assert DEFAULT_PROPORTIONS == (0.45, 0.40, 0.15)


def test_trivial_classifier_balanced(bundle):
    v = trivial_classifier(bundle, "desired")
    assert abs(v - 0.5) < 0.1
    # direct recomputation
    maj = np.argmax(np.bincount(bundle.user_train.y, minlength=2))
    assert v == np.mean(bundle.test.y == maj)


def test_trivial_classifier_skew():
    b = generate_synthetic(SyntheticAttributeSpec(seed=1, desired_prior=(0.7, 0.3)), (2000, 10, 2000))
    assert trivial_classifier(b, "desired") == pytest.approx(0.70, abs=0.02)
    with pytest.raises(ConfigError):
        trivial_classifier(b, "other")


def _write_table(root, n, header=("image", "Smiling", "Male"), values=(-1, 1)):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(n):
        fn = f"img{i:03d}.png"
        Image.fromarray((rng.random((20, 24, 3)) * 255).astype(np.uint8)).save(root / fn)
        rows.append([fn] + [int(rng.choice(values)) for _ in header[1:]])
    with open(root / "attributes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def test_load_external(tmp_path):
    _write_table(tmp_path, 30)
    b = load_external(tmp_path, "Smiling", "Male", (10, 10, 5), seed=3, image_size=16)
    assert b.shape == (3, 16, 16)
    assert b.user_train.images.shape == (10, 3, 16, 16)
    assert set(np.unique(b.user_train.y)) <= {0, 1}
    assert 0.0 <= b.test.images.min() and b.test.images.max() <= 1.0
    again = load_external(tmp_path, "Smiling", "Male", (10, 10, 5), seed=3, image_size=16)
    for name in b.splits:
        assert list(b.splits[name].ids) == list(again.splits[name].ids)
    ids = [set(s.ids) for s in b.splits.values()]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_load_external_zero_one_values(tmp_path):
    _write_table(tmp_path, 12, values=(0, 1))
    b = load_external(tmp_path / "attributes.csv", "Smiling", "Male", (4, 4, 4), image_size=8)
    assert set(np.unique(b.user_train.z)) <= {0, 1}


def test_load_external_errors(tmp_path):
    _write_table(tmp_path, 12)
    with pytest.raises(SchemaError):
        load_external(tmp_path, "Smiling", "Eyeglasses", (4, 4, 4))
    with pytest.raises(SizeError):
        load_external(tmp_path, "Smiling", "Male", (10, 10, 10))


def test_save_bundle_roundtrip(tmp_path, bundle):
    small = generate_synthetic(SyntheticAttributeSpec(seed=2), (6, 5, 4))
    save_bundle(small, tmp_path)
    b = load_external(tmp_path, "desired", "sensitive", (6, 5, 4), image_size=32)
    assert sorted(np.concatenate([s.ids for s in b.splits.values()])) == sorted(
        f"{i}.png" for s in small.splits.values() for i in s.ids
    )
    lookup = {f"{i}.png": img for s in small.splits.values() for i, img in zip(s.ids, s.images)}
    for s in b.splits.values():
        for i, img in zip(s.ids, s.images):
            assert np.abs(img - lookup[i]).max() <= 1 / 255 + 1e-6
