import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evtlab import context as cx
from evtlab import datagen as dg
from evtlab.numgrad import ParamStore, Tensor, check_gradients, ops
from evtlab.tracksim import EmbodimentConfig, Scenario

CFG = cx.EncoderConfig()
TINY = cx.EncoderConfig(K=3, d_z=3, mask_h=11, mask_w=11, feat_dim=4, lstm_hidden=4, aux_hidden=4)


def make_store(cfg, seed=0, jitter=0.0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    cx.init_encoder(store, cfg, rng)
    # zero biases on all-background pixels sit exactly on relu kinks; move off them for gradchecks
    for _, p in store.items():
        p.data += jitter * rng.normal(size=p.shape)
    return store


@pytest.fixture(scope="module")
def store():
    return make_store(CFG)


@pytest.fixture(scope="module")
def episodes():
    grid = dg.embodiment_grid(heights=(0.5, 1.7), v_max=(1.0,), base=EmbodimentConfig(mask_w=32, mask_h=32))
    return dg.generate_episodes(grid, 1, 0.1, seed=0, scenario=Scenario(max_steps=30))


@pytest.fixture(scope="module")
def micro_episodes():
    grid = dg.embodiment_grid(heights=(0.5, 1.7), v_max=(1.0,), base=EmbodimentConfig(mask_w=11, mask_h=11))
    return dg.generate_episodes(grid, 1, 0.2, seed=1, scenario=Scenario(max_steps=6))


def test_empty_history_gives_fixed_z0(store):
    empty = cx.ContextHistory.empty(CFG.K, 32, 32)
    z0 = cx.encode_context(store, CFG, empty).data
    assert z0.shape == (CFG.d_z,) and np.all(np.isfinite(z0))
    # history at t=0 of any episode is the empty history
    masks = np.random.default_rng(0).choice([0, 128, 255], size=(5, 32, 32)).astype(np.uint8)
    z_ep = cx.episode_contexts(store, CFG, masks, np.ones((5, 2)), steps=[0]).data[0]
    np.testing.assert_array_equal(z_ep, z0)


def test_action_at_last_slot_changes_z(store, episodes):
    ep = episodes[0]
    h1 = cx.history_at(ep.masks, ep.actions, 12, CFG.K)
    h2 = cx.history_at(ep.masks, ep.actions, 12, CFG.K)
    h2.actions = h2.actions.copy()
    h2.actions[-1] = -h2.actions[-1] + 0.5
    z1, z2 = cx.encode_context(store, CFG, [h1, h2]).data
    assert np.max(np.abs(z1 - z2)) > 1e-12


def test_history_index_matches_explicit_histories(store, episodes):
    ep = episodes[1]
    steps = np.array([0, 1, 5, 20])
    z_idx = cx.episode_contexts(store, CFG, ep.masks, ep.actions, steps).data
    z_hist = cx.encode_context(store, CFG, [cx.history_at(ep.masks, ep.actions, t, CFG.K) for t in steps]).data
    np.testing.assert_allclose(z_idx, z_hist, rtol=0, atol=1e-12)


def test_history_padding_flags():
    masks = np.zeros((4, 8, 8), np.uint8)
    hist = cx.history_at(masks, np.ones((4, 2)), 2, 5)
    assert hist.padded.tolist() == [True, True, True, False, False]
    assert np.all(hist.actions[:3] == 0)
    assert cx.history_index(np.array([2]), 5).tolist() == [[-1, -1, -1, 0, 1]]


def test_wrong_slot_count_rejected(store):
    with pytest.raises(ValueError):
        cx.encode_context(store, CFG, cx.ContextHistory.empty(CFG.K + 1, 32, 32))


def test_z_gradient_wrt_cnn_weights(micro_episodes):
    store = make_store(TINY, seed=3, jitter=0.1)
    ep = micro_episodes[0]
    proj = np.random.default_rng(0).normal(size=TINY.d_z)

    def fn():
        z = cx.episode_contexts(store, TINY, ep.masks, ep.actions, steps=[4])
        return ops.sum(ops.mul(z[0], Tensor(proj)))

    errs = check_gradients(fn, store.group("encoder/cnn"), max_entries=40)
    assert max(errs.values()) < 1e-4, errs


def test_aux_loss_gradients_micro_batch(micro_episodes):
    store = make_store(TINY, seed=4, jitter=0.1)

    def fn():
        return cx.aux_losses(store, TINY, micro_episodes).total

    errs = check_gradients(fn, store.group("encoder", "aux"), max_entries=40)
    assert max(errs.values()) < 1e-4, errs


def test_aux_losses_components_and_sum(store, episodes):
    losses = cx.aux_losses(store, CFG, episodes)
    vals = losses.as_floats()
    assert all(np.isfinite(v) and v >= 0 for v in vals.values())
    assert losses.total.item() == pytest.approx(sum(vals.values()), abs=1e-12)
    assert 0.0 <= vals["L_cons"] <= 2.0


def test_perfect_head_gives_zero_identification_loss(store, episodes):
    ep = episodes[0]
    z = cx.episode_contexts(store, CFG, ep.masks, ep.actions)
    r_hat, h_hat = cx.aux_predict(store, z)
    l_r, l_h = cx.identification_losses(store, CFG, z, r_hat.data, h_hat.data * CFG.height_scale)
    assert l_r.item() == 0.0 and l_h.item() == pytest.approx(0.0, abs=1e-28)


def test_state_rewards_shift():
    np.testing.assert_array_equal(cx.state_rewards(np.array([0.5, 0.25])), [1.0, 0.5, 0.25])


# ------------------------------------------------------------ temporal consistency

def test_identical_contexts_give_zero():
    z = np.tile(np.array([0.3, -1.0, 2.0]), (4, 1))
    loss = cx.consistency_loss([Tensor(z)], [Tensor(z.mean(axis=0))])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_orthogonal_single_step_gives_one():
    loss = cx.consistency_loss([Tensor(np.array([[1.0, 0.0]]))], [Tensor(np.array([0.0, 2.0]))])
    assert loss.item() == 1.0


def test_degenerate_context_counts_as_zero_similarity():
    loss = cx.consistency_loss([Tensor(np.zeros((1, 3)))], [Tensor(np.ones(3))])
    assert loss.item() == 1.0


def test_consistency_steps():
    assert cx.consistency_steps(500, 8).tolist() == list(range(1, 9))
    assert cx.consistency_steps(4, 8).tolist() == [1, 2, 3]
    assert cx.consistency_steps(1, 8).tolist() == [0]


vectors = st.lists(st.floats(-10, 10, allow_nan=False), min_size=12, max_size=12)


@settings(max_examples=60, deadline=None)
@given(vectors, vectors, st.floats(0.01, 100.0))
def test_consistency_bounds_and_scale_invariance(a, b, scale):
    za = np.array(a).reshape(2, 2, 3)
    zb = np.array(b).reshape(2, 2, 3)
    early = [Tensor(za[0]), Tensor(zb[0])]
    means = [Tensor(za[1].mean(axis=0)), Tensor(zb[1].mean(axis=0))]
    loss = cx.consistency_loss(early, means).item()
    assert -1e-12 <= loss <= 2.0 + 1e-12
    scaled = cx.consistency_loss([Tensor(e.data * scale) for e in early],
                                 [Tensor(m.data * scale) for m in means]).item()
    if all(np.linalg.norm(x, axis=-1).min() * min(scale, 1) > 1e-6 for x in (za, zb)):
        assert scaled == pytest.approx(loss, abs=1e-9)


# ------------------------------------------------------------ diagnostics

def test_probe_reports_constant_baseline(store, episodes):
    rep = cx.context_probe(store, CFG, episodes)
    # two heights, equal step counts: constant-mean predictor is off by half the gap
    assert rep.baseline_mae == pytest.approx(0.6, abs=1e-9)
    assert rep.separation is not None and rep.separation > 0
    assert set(rep.mean_z) == {0.5, 1.7}


def test_probe_single_height_has_no_separation(store, episodes):
    rep = cx.context_probe(store, CFG, episodes[:1])
    assert rep.separation is None and rep.baseline_mae == 0.0


def test_export_contexts_csv(tmp_path):
    z = np.arange(6, dtype=float).reshape(3, 2) / 7
    path = tmp_path / "z.csv"
    cx.export_contexts_csv(path, z)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "z0", "z1"]
    np.testing.assert_array_equal(np.array([[float(v) for v in r[1:]] for r in rows[1:]]), z)


def test_cnn_output_shape():
    assert cx.cnn_output_hw(64, 64) == (15, 15)
    assert cx.cnn_output_hw(32, 32) == (7, 7)
