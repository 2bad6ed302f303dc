import numpy as np
import pytest
from scipy import ndimage

from qiseg import data
from qiseg.supervoxel import (NoEligibleSupervoxel, SupervoxelLabels, cluster_cached,
                              cluster_supervoxels, episode_index, sample_pseudo_episode)
from qiseg.tensor_core import io as tio


def _assert_partition(sv: SupervoxelLabels, shape, min_size):
    lab = sv.labels
    assert lab.shape == shape
    assert lab.min() == 0 and lab.max() == sv.count - 1
    assert np.all(sv.sizes() >= min_size)
    six = ndimage.generate_binary_structure(3, 1)
    for k in range(sv.count):
        _, n = ndimage.label(lab == k, structure=six)
        assert n == 1, f"label {k} has {n} components"


def test_homogeneous_volume_gives_blocks():
    vol = np.zeros((16, 32, 32))
    sv = cluster_supervoxels(vol, k=16, min_size=50, seed=0)
    _assert_partition(sv, vol.shape, 50)
    sizes = sv.sizes()
    assert 8 <= sv.count <= 16
    assert sizes.max() <= 4 * sizes.min()


def test_two_intensity_volume_is_pure():
    vol = np.zeros((16, 32, 32))
    vol[:, :, 13:] = 1.0  # boundary off the seed grid
    sv = cluster_supervoxels(vol, k=32, compactness=0.01, min_size=20, seed=1)
    _assert_partition(sv, vol.shape, 20)
    pure = 0
    for k in range(sv.count):
        vals = vol[sv.labels == k]
        pure += max(vals.mean(), 1 - vals.mean()) >= 0.95
    assert pure >= 0.95 * sv.count


def test_deterministic_and_seed_sensitive():
    vol = np.random.default_rng(0).uniform(size=(12, 24, 24))
    a = cluster_supervoxels(vol, k=20, min_size=30, seed=3)
    b = cluster_supervoxels(vol, k=20, min_size=30, seed=3)
    assert a.labels.tobytes() == b.labels.tobytes()


def test_rejections():
    with pytest.raises(ValueError, match="exceeds"):
        cluster_supervoxels(np.zeros((2, 2, 2)), k=9)
    with pytest.raises(ValueError):
        cluster_supervoxels(np.zeros((2, 2, 2)), k=0)
    bad = np.zeros((4, 4, 4))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        cluster_supervoxels(bad, k=2)


@pytest.fixture(scope="module")
def phantom_volume():
    ph = data.generate_phantoms(1, seed=4)[0]
    return data.from_phantoms([ph], 64).volumes[0]


@pytest.fixture(scope="module")
def phantom_labels(phantom_volume):
    return cluster_supervoxels(phantom_volume.image, k=50, compactness=0.1, min_size=100, seed=0)


def test_phantom_partition(phantom_volume, phantom_labels):
    _assert_partition(phantom_labels, phantom_volume.image.shape, 100)


def test_cache_roundtrip(phantom_volume, phantom_labels, tmp_path):
    sv = cluster_cached(phantom_volume.image, "vol_x", tmp_path, 50, 0.1, 100, 0)
    assert sv.labels.tobytes() == phantom_labels.labels.tobytes()
    files = list(tmp_path.iterdir())
    assert [f.name for f in files] == ["sv_vol_x_k50_c0.1_m100_s0.tensor"]
    np.testing.assert_array_equal(tio.load(files[0]), phantom_labels.labels)
    again = cluster_cached(np.zeros(1), "vol_x", tmp_path, 50, 0.1, 100, 0)  # served from disk
    assert again.labels.tobytes() == sv.labels.tobytes()


def test_pseudo_episode_contract(phantom_volume, phantom_labels):
    rng = np.random.default_rng(0)
    for _ in range(200):
        ep = sample_pseudo_episode(phantom_volume.image, phantom_labels, rng)
        s, q, k = ep.meta["support_slice"], ep.meta["query_slice"], ep.meta["supervoxel"]
        assert q in (s - 1, s + 1)
        assert ep.support_mask.any() and ep.query_mask.any()
        np.testing.assert_array_equal(ep.support_mask, phantom_labels.labels[s] == k)
        np.testing.assert_array_equal(ep.query_mask, phantom_labels.labels[q] == k)


def test_pseudo_episode_coverage(phantom_volume, phantom_labels):
    index = episode_index(phantom_labels)
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(1000):
        ep = sample_pseudo_episode(phantom_volume.image, phantom_labels, rng, index=index)
        seen.add(ep.meta["supervoxel"])
    assert seen == set(index)


def test_admitted_slices_respected(phantom_volume, phantom_labels):
    admitted = list(range(5, 12))
    rng = np.random.default_rng(2)
    for _ in range(100):
        ep = sample_pseudo_episode(phantom_volume.image, phantom_labels, rng, admitted=admitted)
        assert ep.meta["support_slice"] in admitted and ep.meta["query_slice"] in admitted


def test_no_eligible_supervoxel(phantom_volume, phantom_labels):
    with pytest.raises(NoEligibleSupervoxel):
        sample_pseudo_episode(phantom_volume.image, phantom_labels, np.random.default_rng(0),
                              admitted=[0, 2, 4])
