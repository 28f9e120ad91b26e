import numpy as np
import pytest
from PIL import Image

from dadu.data import (ExtentMismatchError, MaskValueError, PhantomParams, UnreadableImageError, kfold_split,
                       list_cases, load_dataset, load_sample, one_hot, phantom_dataset, save_sample,
                       stack_batch, synth_phantom, write_dataset)


def _write(path, arr, mode="L"):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode=mode).save(path)


def test_black_image_loads_as_zeros(tmp_path):
    _write(tmp_path / "i.png", np.zeros((8, 8)))
    _write(tmp_path / "m.png", np.zeros((8, 8)))
    s = load_sample(tmp_path / "i.png", tmp_path / "m.png")
    assert s.image.shape == (1, 1, 8, 8)
    assert np.all(s.image.data == 0)


def test_loaded_image_is_min_max_normalized(tmp_path, rng):
    _write(tmp_path / "i.png", rng.integers(30, 200, (8, 8)))
    _write(tmp_path / "m.png", np.zeros((8, 8)))
    img = load_sample(tmp_path / "i.png", tmp_path / "m.png").image.data
    assert img.min() == 0.0 and img.max() == 1.0


def test_bad_mask_value_rejected(tmp_path):
    m = np.zeros((8, 8))
    m[2, 2] = 5
    _write(tmp_path / "i.png", np.zeros((8, 8)))
    _write(tmp_path / "m.png", m)
    with pytest.raises(MaskValueError, match="5"):
        load_sample(tmp_path / "i.png", tmp_path / "m.png")


def test_remap_table(tmp_path):
    m = np.zeros((4, 4))
    m[0, 0], m[1, 1] = 85, 255
    _write(tmp_path / "i.png", np.zeros((4, 4)))
    _write(tmp_path / "m.png", m)
    s = load_sample(tmp_path / "i.png", tmp_path / "m.png", remap={85: 1, 255: 3})
    assert s.mask[0, 0] == 1 and s.mask[1, 1] == 3


def test_distinct_errors(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    _write(tmp_path / "m.png", np.zeros((8, 8)))
    with pytest.raises(UnreadableImageError):
        load_sample(tmp_path / "bad.png", tmp_path / "m.png")
    _write(tmp_path / "i.png", np.zeros((8, 6)))
    with pytest.raises(ExtentMismatchError):
        load_sample(tmp_path / "i.png", tmp_path / "m.png")


def test_resize(tmp_path, rng):
    _write(tmp_path / "i.png", rng.integers(0, 255, (20, 20)))
    m = np.zeros((20, 20))
    m[5:15, 5:15] = 3
    _write(tmp_path / "m.png", m)
    s = load_sample(tmp_path / "i.png", tmp_path / "m.png", size=16)
    assert s.image.shape == (1, 1, 16, 16) and s.mask.shape == (16, 16)
    assert set(np.unique(s.mask)) == {0, 3}


def test_phantom_png_roundtrip(tmp_path):
    s = phantom_dataset(1, 64, seed=3)[0]
    save_sample(s, tmp_path)
    back = load_sample(tmp_path / "images" / f"{s.case_id}.png", tmp_path / "masks" / f"{s.case_id}.png")
    np.testing.assert_array_equal(back.mask, s.mask)
    assert np.max(np.abs(back.image.data - s.image.data)) <= 1 / 255 + 1e-7


def test_loader_is_pure(tmp_path):
    write_dataset(phantom_dataset(3, 32, seed=1), tmp_path)
    a, b = load_dataset(tmp_path), load_dataset(tmp_path)
    for x, y in zip(a, b):
        assert x.case_id == y.case_id
        np.testing.assert_array_equal(x.image.data, y.image.data)
        np.testing.assert_array_equal(x.mask, y.mask)


def test_manifest_pins_order(tmp_path):
    write_dataset(phantom_dataset(3, 32, seed=1), tmp_path)
    (tmp_path / "manifest.txt").write_text("case0002\ncase0000\n")
    assert list_cases(tmp_path) == ["case0002", "case0000"]
    assert [s.case_id for s in load_dataset(tmp_path)] == ["case0002", "case0000"]


def test_missing_dataset_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")


# --- phantoms --------------------------------------------------------------


def test_phantom_deterministic():
    a = synth_phantom(PhantomParams(seed=11))
    b = synth_phantom(PhantomParams(seed=11))
    assert a.image.data.tobytes() == b.image.data.tobytes()
    np.testing.assert_array_equal(a.mask, b.mask)


def test_noiseless_phantom_has_four_levels():
    s = synth_phantom(PhantomParams(seed=2, noise_sigma=0.0))
    assert len(np.unique(s.image.data)) == 4


def _touching(mask, a, b):
    ra, rb = mask == a, mask == b
    return bool((ra[1:] & rb[:-1]).any() or (ra[:-1] & rb[1:]).any()
                or (ra[:, 1:] & rb[:, :-1]).any() or (ra[:, :-1] & rb[:, 1:]).any())


@pytest.mark.parametrize("size", [32, 64, 128])
def test_phantom_geometry(size):
    for seed in range(100):
        m = synth_phantom(PhantomParams(seed=seed, size=size)).mask
        assert all((m == c).any() for c in (1, 2, 3)), seed
        assert not _touching(m, 1, 3), seed
        # every LV border pixel is wrapped by myocardium
        assert _touching(m, 2, 3)


def test_phantom_rejects_oversized_geometry():
    with pytest.raises(ValueError):
        synth_phantom(PhantomParams(size=64, lv_radius=(20.0, 30.0)))


def test_phantom_dataset_matches_loader_normalization():
    for s in phantom_dataset(5, 32, seed=4):
        assert s.image.data.min() == 0.0 and s.image.data.max() == 1.0


# --- targets and folds -----------------------------------------------------


def test_one_hot_properties(rng):
    m = rng.integers(0, 4, (6, 5))
    oh = one_hot(m, 4).data
    assert oh.shape == (1, 4, 6, 5)
    np.testing.assert_array_equal(oh.sum(axis=1), 1)
    np.testing.assert_array_equal(oh.argmax(axis=1)[0], m)
    np.testing.assert_array_equal(oh.sum(axis=(0, 2, 3)), np.bincount(m.ravel(), minlength=4))
    with pytest.raises(MaskValueError):
        one_hot(np.full((2, 2), 4), 4)


def test_stack_batch():
    samples = phantom_dataset(3, 32, seed=0)
    images, targets = stack_batch(samples)
    assert images.shape == (3, 1, 32, 32) and targets.shape == (3, 4, 32, 32)
    np.testing.assert_array_equal(targets.data[1], one_hot(samples[1].mask).data[0])


def test_kfold_hundred_cases():
    split = kfold_split([f"c{i:03d}" for i in range(100)], seed=0)
    assert split.sizes() == [20] * 5


def test_kfold_seven_cases():
    split = kfold_split([f"c{i}" for i in range(7)], seed=3)
    assert sorted(split.sizes(), reverse=True) == [2, 2, 1, 1, 1]


@pytest.mark.parametrize("n,seed", [(5, 0), (23, 1), (50, 7)])
def test_kfold_partition_and_purity(n, seed):
    ids = [f"case{i}" for i in range(n)]
    split = kfold_split(ids, seed=seed)
    folds = [set(split.fold(i)) for i in range(5)]
    assert set().union(*folds) == set(ids)
    assert sum(len(f) for f in folds) == n
    assert max(split.sizes()) - min(split.sizes()) <= 1
    shuffled = list(np.random.default_rng(99).permutation(ids))
    assert kfold_split(shuffled, seed=seed).assignments == split.assignments
    for i in range(5):
        assert set(split.train_ids(i)) == set(ids) - folds[i]


def test_kfold_too_few_cases():
    with pytest.raises(ValueError):
        kfold_split(["a", "b"], folds=5)
