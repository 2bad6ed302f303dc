from types import SimpleNamespace

import numpy as np
import pytest

from qiseg import data
from qiseg.episode import Episode
from qiseg.protoseg import ProbabilityMaps, SegConfig, encode_pair, segment_features
from qiseg.tensor_core import autograd as ag
from qiseg.train import (OptimState, PseudoEpisodeSampler, TrainConfig, align_loss, collect_grads,
                         init_model, meta_train, optimizer_step, read_checkpoint, seg_loss,
                         total_loss)

GROUPS = ((1, 2), (3, 4))


def _maps(fg):
    return ProbabilityMaps.from_foreground(ag.param(np.asarray(fg, dtype=float)))


# --- losses -------------------------------------------------------------------


def test_seg_loss_examples():
    m = np.array([[1, 0], [0, 1]])
    assert seg_loss(_maps(m), m).value < 1e-6
    assert np.isclose(seg_loss(_maps(np.full((2, 2), 0.5)), m).value, np.log(2))
    truth = np.array([[1, 0], [0, 0]])
    fg = np.full((2, 2), 0.8)
    expected = -0.25 * (np.log(0.8) + 3 * np.log(0.2))
    assert np.isclose(seg_loss(_maps(fg), truth).value, expected)


def test_seg_loss_gradient():
    rng = np.random.default_rng(0)
    fg = rng.uniform(0.05, 0.95, size=(3, 4))
    truth = rng.integers(0, 2, size=(3, 4))
    maps = _maps(fg)
    ag.backward(seg_loss(maps, truth))
    leaf = maps.foreground.parents[0] if maps.foreground.grad is None else maps.foreground
    # d/dfg of -(m log fg + (1-m) log(1-fg)) / n
    expected = (-(truth / fg) + (1 - truth) / (1 - fg)) / truth.size
    np.testing.assert_allclose(leaf.grad, expected, rtol=1e-10)


@pytest.fixture(scope="module")
def model():
    return init_model(0, SegConfig())


@pytest.fixture(scope="module")
def dataset():
    return data.from_phantoms(data.generate_phantoms(3, seed=2), 64)


@pytest.fixture(scope="module")
def split(dataset):
    return data.make_split(dataset, 2, 0, groups=GROUPS)


@pytest.fixture(scope="module")
def sampler(dataset, split):
    return PseudoEpisodeSampler(dataset, split, TrainConfig())


@pytest.fixture
def episode(sampler):
    return sampler.sample(np.random.default_rng(4))


def test_align_skipped_on_empty_prediction(model, episode):
    sf, qf = encode_pair(episode.support_image, episode.query_image, model)
    empty = SimpleNamespace(mask=np.zeros(episode.query_image.shape, bool))
    assert align_loss(sf, qf, empty, episode.support_mask, model, (64, 64)) is None


def test_align_equals_seg_on_self_episode(model, episode):
    # identical images and a perfect query prediction make the swapped task the same task
    img, mask = episode.support_image, episode.support_mask
    sf, qf = encode_pair(img, img, model)
    res = segment_features(sf, mask, qf, model, img.shape)
    forward = seg_loss(res.maps, mask)
    back = align_loss(sf, qf, SimpleNamespace(mask=mask), mask, model, img.shape)
    np.testing.assert_allclose(back.value, forward.value, rtol=1e-10)


def test_align_uses_query_prediction(model, episode):
    parts = total_loss(episode, model, use_align=True)
    sf, qf = encode_pair(episode.support_image, episode.query_image, model)
    pred = parts.result.mask
    if not pred.any():
        pytest.skip("prediction empty for this episode")
    swapped = segment_features(qf, pred, sf, model, episode.query_image.shape)
    np.testing.assert_allclose(parts.reg.value, seg_loss(swapped.maps, episode.support_mask).value,
                               rtol=1e-12)
    np.testing.assert_allclose(parts.total.value, parts.seg.value + parts.reg.value, rtol=1e-12)


def test_align_off_gives_seg_only(model, episode):
    parts = total_loss(episode, model, use_align=False)
    assert parts.reg is None
    assert parts.total.value == parts.seg.value


def test_total_loss_matches_finite_difference(episode):
    params = init_model(1, SegConfig())
    leaves = params.leaves()
    probe = leaves["block1.kernel"]
    ag.backward(total_loss(episode, params).total)
    grads = collect_grads(leaves)
    idx = (1, 1, 0, 3)
    base = probe.value.copy()
    h = 1e-6
    vals = []
    for sign in (1, -1):
        probe.value = base.copy()
        probe.value[idx] += sign * h
        vals.append(float(total_loss(episode, params).total.value))
    probe.value = base
    numeric = (vals[0] - vals[1]) / (2 * h)
    assert abs(numeric - grads["block1.kernel"][idx]) <= 1e-4 * max(1.0, abs(numeric))


def test_gradient_flow_audit(episode):
    params = init_model(2, SegConfig())
    leaves = params.leaves()
    ag.backward(total_loss(episode, params).total)
    for name, leaf in leaves.items():
        assert leaf.grad is not None and np.isfinite(leaf.grad).all(), name
        if name.startswith(("block", "proj")) or name.startswith("head.fc2"):
            assert np.abs(leaf.grad).sum() > 0, name
    collect_grads(leaves)


def test_fixed_threshold_receives_gradient(episode):
    params = init_model(0, SegConfig(threshold="fixed"))
    ag.backward(total_loss(episode, params).total)
    assert params.fixed_t.grad is not None and params.fixed_t.grad != 0
    assert params.head is None


# --- optimizer ----------------------------------------------------------------


def test_schedule():
    cfg = TrainConfig()
    assert cfg.lr(0) == cfg.lr(999) == 1e-3
    assert np.isclose(cfg.lr(1000), 1e-3 * 0.98)
    assert np.isclose(cfg.lr(2500), 1e-3 * 0.98 ** 2)


def test_sgd_step_examples():
    cfg = TrainConfig()
    leaf = ag.param(np.array([1.0]))
    before = leaf.value
    assert optimizer_step({"w": leaf}, {"w": np.array([2.0])}, OptimState(), cfg, 0)
    assert np.isclose(leaf.value[0], 0.998)
    assert before[0] == 1.0  # old array untouched
    w = ag.param(np.arange(3.0))
    optimizer_step({"w": w}, {"w": np.zeros(3)}, OptimState(), cfg, 0)
    np.testing.assert_array_equal(w.value, np.arange(3.0))


def test_non_finite_gradient_skips_step(caplog):
    leaf = ag.param(np.ones(2))
    state = OptimState()
    assert not optimizer_step({"w": leaf}, {"w": np.array([1.0, np.nan])}, state, TrainConfig(), 7)
    np.testing.assert_array_equal(leaf.value, 1.0)
    assert state.t == 0
    assert "non-finite" in caplog.text


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        optimizer_step({"w": ag.param(np.ones(2))}, {"w": np.ones(3)}, OptimState(), TrainConfig(), 0)


def test_momentum_and_adam():
    g = np.array([1.0, -2.0])
    w = ag.param(np.zeros(2))
    state = OptimState()
    cfg = TrainConfig(momentum=0.9)
    optimizer_step({"w": w}, {"w": g}, state, cfg, 0)
    optimizer_step({"w": w}, {"w": g}, state, cfg, 1)
    np.testing.assert_allclose(w.value, -1e-3 * (g + (0.9 * g + g)))
    w = ag.param(np.zeros(2))
    state = OptimState()
    optimizer_step({"w": w}, {"w": g}, state, TrainConfig(optimizer="adam"), 0)
    # first bias-corrected adam step moves each coordinate by lr against its sign
    np.testing.assert_allclose(w.value, [-1e-3, 1e-3], rtol=1e-6)
    assert set(state.buffers["w"]) == {"m", "v"}


# --- sampling and training ----------------------------------------------------


def test_sampler_never_sees_test_classes(dataset, split, sampler):
    rng = np.random.default_rng(0)
    by_id = {v.volume_id: v for v in dataset.volumes}
    for _ in range(300):
        ep = sampler.sample(rng)
        labels = by_id[ep.meta["volume"]].labels
        for z in (ep.meta["support_slice"], ep.meta["query_slice"]):
            assert z in split.admitted[ep.meta["volume"]]
            assert not np.isin(labels[z], split.test_classes).any()


def test_loss_decreases_on_probe_episode(episode):
    params = init_model(3, SegConfig())
    leaves = params.leaves()
    cfg = TrainConfig(lr0=0.05)
    state = OptimState()
    losses = []
    for t in range(25):
        parts = total_loss(episode, params, use_align=False)
        losses.append(float(parts.total.value))
        ag.backward(parts.total)
        optimizer_step(leaves, collect_grads(leaves), state, cfg, t)
    assert losses[-1] < 0.8 * losses[0]


def _short_cfg(**kw):
    return TrainConfig(**{"iters": 6, "ckpt_every": 3, "seed": 5, **kw})


def test_training_is_deterministic(dataset, split, sampler):
    a = meta_train(dataset, split, _short_cfg(), SegConfig(), sampler=sampler)
    b = meta_train(dataset, split, _short_cfg(), SegConfig(), sampler=sampler)
    assert a.log == b.log
    for name, leaf in a.params.leaves().items():
        assert leaf.value.tobytes() == b.params.leaves()[name].value.tobytes()


def test_checkpoint_roundtrip_and_resume(dataset, split, sampler, tmp_path):
    full = meta_train(dataset, split, _short_cfg(), SegConfig(), out_dir=tmp_path / "full",
                      sampler=sampler, ckpt_extra={"note": "x"})
    assert sorted(p.name for p in (tmp_path / "full").glob("ckpt_*")) == ["ckpt_000003",
                                                                          "ckpt_000006"]
    params, state, it, rng_state, extra = read_checkpoint(tmp_path / "full" / "ckpt_000006")
    assert it == 6 and extra == {"note": "x"} and rng_state is not None
    for name, leaf in full.params.leaves().items():
        np.testing.assert_array_equal(params.leaves()[name].value, leaf.value)

    meta_train(dataset, split, _short_cfg(iters=3), SegConfig(), out_dir=tmp_path / "part",
               sampler=sampler)
    resumed = meta_train(dataset, split, _short_cfg(), SegConfig(), out_dir=tmp_path / "part",
                         resume=True, sampler=sampler)
    assert resumed.log == full.log
    assert (tmp_path / "part" / "loss.csv").read_bytes() == (tmp_path / "full" / "loss.csv").read_bytes()
    for name, leaf in full.params.leaves().items():
        assert leaf.value.tobytes() == resumed.params.leaves()[name].value.tobytes()


def test_log_rows(dataset, split, sampler):
    res = meta_train(dataset, split, _short_cfg(iters=2), SegConfig(), sampler=sampler)
    for t, row in enumerate(res.log):
        assert row[0] == t and float(row[1]) == 1e-3
        l_seg, l_reg, total = float(row[2]), row[3], float(row[4])
        assert np.isclose(total, l_seg + (float(l_reg) if l_reg else 0.0))


def test_episode_type(episode):
    assert isinstance(episode, Episode)
    assert episode.class_id == -1
