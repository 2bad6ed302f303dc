import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qiseg import data
from qiseg.errors import DatasetError, SplitError


@pytest.fixture(scope="module")
def phantoms():
    return data.generate_phantoms(6, seed=11)


@pytest.fixture(scope="module")
def dataset(phantoms):
    return data.from_phantoms(phantoms, 64)


GROUPS = ((1, 2), (3, 4))


def test_generation_is_deterministic(phantoms):
    again = data.generate_phantoms(6, seed=11)
    for a, b in zip(phantoms, again):
        assert a.volume.tobytes() == b.volume.tobytes()
        assert all(a.masks[c].tobytes() == b.masks[c].tobytes() for c in a.masks)


def test_shapes_and_classes(phantoms):
    for ph in phantoms:
        assert ph.volume.shape == (32, 64, 64)
        assert ph.class_ids == [1, 2, 3, 4]


def test_masks_disjoint(phantoms):
    for ph in phantoms:
        total = sum(m.astype(int) for m in ph.masks.values())
        assert total.max() == 1


def test_contrast_within_noise_band():
    cfg = data.PhantomConfig()
    for ph in data.generate_phantoms(100, seed=5, cfg=cfg):
        scale = ph.meta["gain"] * cfg.scale
        clean = ~ph.meta["hot"]
        tissue = ph.meta["body"] & ~ph.meta["taken"] & clean
        bg = ph.volume[tissue].mean() / scale
        for c, m in ph.masks.items():
            organ = (m > 0) & clean
            measured = ph.volume[organ].mean() / scale - bg
            assert abs(measured - ph.meta["contrasts"][c]) < 3 * cfg.noise


def test_placement_retry_cap():
    cfg = data.PhantomConfig(max_retries=1)
    big = [data.ClassSpec(c.class_id, c.contrast, (30, 31), (20, 21), (0.5, 0.5), c.texture)
           for c in cfg.classes]
    with pytest.raises(DatasetError, match="retries"):
        data.generate_phantoms(1, 0, data.PhantomConfig(classes=big, max_retries=3))


def test_preprocess_constant_volume():
    np.testing.assert_array_equal(data.preprocess(np.full((2, 8, 8), 4.0)), 0.0)


def test_preprocess_clips_outlier():
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 1, size=(4, 16, 16))
    v[0, 0, 0] = 1e6
    top = np.percentile(v, 99.5, method="higher")
    out = data.preprocess(v)
    np.testing.assert_allclose(out, (np.minimum(v, top) - v.min()) / (top - v.min()), rtol=1e-12)
    assert out.max() == 1.0
    assert np.isclose(out[0, 0, 0], 1.0)
    assert (out == 1.0).sum() >= (v >= top).sum()


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_preprocess_idempotent(seed):
    v = np.random.default_rng(seed).gamma(2.0, size=(3, 8, 8)) * 1000
    once = data.preprocess(v)
    np.testing.assert_allclose(data.preprocess(once), once, atol=1e-12)


@pytest.mark.parametrize("src, size", [(48, 64), (80, 64), (64, 64), (63, 32)])
def test_crop_or_pad_size(src, size):
    assert data.preprocess(np.ones((2, src, src)), size).shape == (2, size, size)


def test_dataset_roundtrip(phantoms, tmp_path):
    data.write_dataset(phantoms, tmp_path)
    ds = data.load_dataset(tmp_path, 64)
    ref = data.from_phantoms(phantoms, 64)
    assert [v.volume_id for v in ds.volumes] == [v.volume_id for v in ref.volumes]
    for a, b in zip(ds.volumes, ref.volumes):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.labels, b.labels)
    rows = data.read_manifest(tmp_path)
    assert all(r["classes"] == [1, 2, 3, 4] for r in rows)


def test_missing_manifest_names_path(tmp_path):
    with pytest.raises(DatasetError, match=str(tmp_path / "manifest.txt")):
        data.load_dataset(tmp_path)


def test_setting1_admits_everything(dataset):
    split = data.make_split(dataset, 1, 0, groups=GROUPS)
    assert all(split.admitted[v.volume_id] == list(range(32)) for v in dataset.volumes)


@pytest.mark.parametrize("fold", [0, 1])
def test_setting2_has_no_leakage(dataset, fold):
    split = data.make_split(dataset, 2, fold, groups=GROUPS)
    assert data.leaked_pixels(dataset, split) == 0
    assert set(split.train_classes).isdisjoint(split.test_classes)
    # nothing admissible was dropped
    for vol in dataset.volumes:
        clean = [z for z in range(32) if not np.isin(vol.labels[z], split.test_classes).any()]
        assert split.admitted[vol.volume_id] == clean


@pytest.mark.parametrize("groups", [GROUPS, None])
def test_folds_cover_classes_once(dataset, groups):
    seen = []
    for fold in (0, 1):
        seen += data.make_split(dataset, 2, fold, seed=3, groups=groups).test_classes
    assert sorted(seen) == [1, 2, 3, 4]


def test_split_errors(dataset):
    with pytest.raises(SplitError):
        data.make_split(dataset, 3, 0)
    with pytest.raises(SplitError):
        data.make_split(dataset, 1, 2, groups=GROUPS)
    labels = np.zeros((3, 8, 8), dtype=np.uint8)
    labels[:, 0, 0] = 1
    labels[:, 5, 5] = 2
    tiny = data.Dataset([data.VolumeRecord("v", np.zeros((3, 8, 8)), labels, [1, 2])])
    with pytest.raises(SplitError, match="no training slices"):
        data.make_split(tiny, 2, 0, groups=((1,), (2,)))


def test_split_text_roundtrip(dataset):
    split = data.make_split(dataset, 2, 1, groups=GROUPS)
    assert data.SplitPlan.from_text(split.to_text()) == split


def test_eval_episode_contract(dataset):
    split = data.make_split(dataset, 2, 0, groups=GROUPS)
    rng = np.random.default_rng(0)
    for _ in range(50):
        ep = data.sample_eval_episode(dataset, split, rng)
        assert ep.meta["support_volume"] != ep.meta["query_volume"]
        assert ep.class_id in split.test_classes
        assert ep.support_mask.any() and ep.query_mask.any()


def test_eval_episodes_cover_every_pair(dataset):
    split = data.make_split(dataset, 2, 1, groups=GROUPS)
    eps = data.eval_episodes(dataset, split, 0)
    pairs = {(e.class_id, e.meta["query_volume"]) for e in eps}
    expected = {(c, v.volume_id) for c in split.test_classes for v in dataset.volumes
                if v.slices_with(c)}
    assert pairs == expected
    n_slices = sum(len(v.slices_with(c)) for c in split.test_classes for v in dataset.volumes)
    assert len(eps) == n_slices
    assert all(e.meta["support_volume"] != e.meta["query_volume"] for e in eps)


def test_eval_needs_two_volumes(phantoms):
    ds = data.from_phantoms(phantoms[:1], 64)
    split = data.make_split(ds, 1, 0, groups=GROUPS)
    with pytest.raises(SplitError, match="fewer than 2"):
        data.eval_episodes(ds, split)
