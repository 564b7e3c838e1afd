import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swarmnet import diffcore as dc
from swarmnet import swarmgen as sg
from swarmnet import trainer as tr
from swarmnet.diffcore import Tape, Tensor
from swarmnet.model import SwarmNet, SwarmNetConfig

SMALL = dict(filters=8, encoded_size=8, edge_size=8, edge_hidden=[8], agg_hidden=[8],
             node_hidden=[8], decoder_hidden=[8])


@pytest.fixture(scope="module")
def episodes():
    return sg.make_dataset("chaser", sg.SimConfig(T=20), 12, 0)


def test_loss_and_natural_skip_by_hand():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
    total = sum((a[t, i, d] - b[t, i, d]) ** 2 for t in range(3) for i in range(2) for d in range(4))
    assert tr.loss_eq4(a, b) == pytest.approx(total / (2 * 24), rel=1e-12)
    skip = sum((a[t + 1, i, d] - a[t, i, d]) ** 2 for t in range(2) for i in range(2) for d in range(4))
    assert tr.natural_skip(a) == pytest.approx(skip / (2 * 16), rel=1e-12)


def test_stationary_episode_has_no_normaliser():
    with pytest.raises(tr.NormalizationUndefinedError):
        tr.natural_skip(np.ones((5, 2, 4)))
    with pytest.raises(tr.NormalizationUndefinedError):
        tr.LossReport(1.0, 0.0, 1, 1).L_norm


def test_copy_prediction_scores_one(episodes):
    states = np.stack([ep.states for ep in episodes])
    starts = tr.window_starts(20, 7, 3)
    _, targets, _, prev = tr._batch(states, np.zeros((12, 5)), starts, 7, 1)
    L, L_bar = tr._per_episode_losses(prev, targets, prev, 12)
    np.testing.assert_allclose(L / L_bar, 1.0, rtol=1e-12)


def test_window_starts_and_horizon_error():
    np.testing.assert_array_equal(tr.window_starts(10, 7, 2), [0, 1])
    with pytest.raises(tr.HorizonTooLongError) as err:
        tr.window_starts(10, 7, 4)
    assert err.value.max_horizon == 3


def test_stack_windows_layout():
    states = np.arange(10 * 2 * 4, dtype=np.float32).reshape(10, 2, 4)
    ctx = np.array([7.0, 8.0], np.float32)
    win, tgt = tr.stack_windows(states, ctx, 3, 2)
    assert win.shape == (6, 3, 2, 6) and tgt.shape == (6, 2, 2, 4)
    for k in range(6):
        np.testing.assert_array_equal(win[k, :, :, :4], states[k:k + 3])
        np.testing.assert_array_equal(tgt[k], states[k + 3:k + 5])
    assert np.all(win[..., 4:] == ctx)


def test_unroll_feeds_back_predictions():
    cfg = SwarmNetConfig(zero_init_output=False, **SMALL)
    net = SwarmNet(cfg)
    rng = np.random.default_rng(1)
    win = rng.normal(size=(2, 7, 3, 4)).astype(np.float32)
    ctx = rng.normal(size=(2, 5)).astype(np.float32)
    out = tr.multistep_unroll(net, win, ctx, 4).data
    ref, w = [], win.copy()
    for _ in range(4):
        nxt = net.predict_next(w, ctx).data
        ref.append(nxt)
        w = np.concatenate([w[:, 1:], nxt[:, None]], axis=1)
    np.testing.assert_allclose(out, np.stack(ref, axis=1), rtol=1e-6, atol=1e-6)


def test_unroll_gradient_matches_finite_difference():
    cfg = SwarmNetConfig(zero_init_output=False, **SMALL)
    net = SwarmNet(cfg)
    for p in net.parameters():
        p.data = p.data.astype(np.float64)
    rng = np.random.default_rng(2)
    win = Tensor(rng.normal(size=(1, 7, 3, 4)), dtype=np.float64)
    ctx = rng.normal(size=(1, 5))
    target = rng.normal(size=(1, 3, 3, 4))

    def loss_fn():
        return tr.loss_tensor(tr.multistep_unroll(net, win, ctx, 3), target)

    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    checked = 0
    for p in net.parameters():
        d = rng.normal(size=p.shape)
        num = dc.directional_grad(loss_fn, p, d, 1e-6)
        if num is not None:
            assert dc.relative_error(np.sum(p.grad * d), num) < 1e-5
            checked += 1
    assert checked > len(net.params) // 2


@settings(max_examples=40, deadline=None)
@given(epochs=st.integers(1, 60), start=st.integers(1, 3), top=st.integers(3, 12))
def test_curriculum_is_monotone_and_reaches_top(epochs, start, top):
    sched = tr.CurriculumSchedule.linear(epochs, start, top)
    hs = [sched.horizon(e) for e in range(epochs)]
    assert hs[0] == start
    assert all(b >= a for a, b in zip(hs, hs[1:]))
    assert max(hs) <= top
    if epochs >= top - start + 1:
        assert hs[-1] == top


def test_default_curriculum_steps():
    sched = tr.TrainRunConfig(epochs=30).schedule()
    assert [sched.horizon(e) for e in (0, 2, 3, 29)] == [1, 1, 2, 10]
    fixed = tr.TrainRunConfig(curriculum=False, fixed_horizon=2).schedule()
    assert {fixed.horizon(e) for e in range(10)} == {2}


def test_split_is_disjoint_and_complete():
    a, b = tr.split_episodes(50, 0.1, 3)
    assert len(b) == 5 and not set(a) & set(b)
    assert sorted(set(a) | set(b)) == list(range(50))


def test_normalization_stats_by_hand():
    rng = np.random.default_rng(0)
    states = rng.normal(size=(3, 6, 2, 4))
    ctx = rng.normal(size=(3, 5))
    shift, scale, delta = tr.normalization_stats(states, ctx)
    np.testing.assert_allclose(shift[:4], states.reshape(-1, 4).mean(0))
    np.testing.assert_allclose(scale[4:], ctx.std(0))
    np.testing.assert_allclose(delta, np.diff(states, axis=1).reshape(-1, 4).std(0))


def run_small(episodes, tmp_path, name):
    rc = tr.TrainRunConfig(epochs=3, batch_size=4, max_horizon=3, windows_per_episode=3, val_fraction=0.25)
    return tr.train(episodes, SwarmNetConfig(**SMALL), rc, tmp_path / f"{name}.csv", tmp_path / f"{name}.ckpt")


def test_training_is_deterministic_and_logged(episodes, tmp_path):
    a = run_small(episodes, tmp_path, "a")
    b = run_small(episodes, tmp_path, "b")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    rows = tr.read_log(tmp_path / "a.csv")
    assert len(rows) == 3 and list(rows[0]) == tr.LOG_COLUMNS
    strip = lambda log: [{k: v for k, v in r.items() if k != "seconds"} for r in log]  # noqa: E731
    assert strip(a.log) == strip(b.log)
    assert [r["horizon"] for r in a.log] == [1, 2, 3]
    assert a.best_val_Lnorm <= a.log[0]["val_Lnorm"]


def test_checkpoint_reproduces_validation_loss(episodes, tmp_path):
    res = run_small(episodes, tmp_path, "c")
    back = SwarmNet.load(tmp_path / "c.ckpt")
    states = np.stack([ep.states for ep in episodes])
    ctx = np.stack([ep.encoded for ep in episodes])
    a = tr.evaluate_loss(res.model, states, ctx, 3)
    b = tr.evaluate_loss(back, states, ctx, 3)
    assert abs(a[0] - b[0]) < 1e-6 and abs(a[1] - b[1]) < 1e-6


def test_training_reduces_loss(episodes):
    rc = tr.TrainRunConfig(epochs=6, batch_size=4, curriculum=False, val_fraction=0.25)
    res = tr.train(episodes, SwarmNetConfig(**SMALL), rc)
    assert res.log[-1]["train_L"] < res.log[0]["train_L"]


def test_nan_data_aborts_with_location(episodes):
    bad = [sg.Episode(ep.states.copy(), ep.context, ep.model_tag, ep.seed, ep.encoded) for ep in episodes]
    for ep in bad:
        ep.states[10, 0, 0] = np.nan
    rc = tr.TrainRunConfig(epochs=1, batch_size=4, curriculum=False, normalize=False)
    with pytest.raises(tr.TrainingDivergedError) as err:
        tr.train(bad, SwarmNetConfig(**SMALL), rc)
    assert err.value.epoch == 0 and err.value.batch == 0


def test_shape_mismatch_is_config_error(episodes):
    with pytest.raises(tr.TrainConfigError):
        tr.train(episodes, SwarmNetConfig(context_dim=8, **SMALL), tr.TrainRunConfig(epochs=1))
    with pytest.raises(tr.HorizonTooLongError):
        tr.train(episodes, SwarmNetConfig(**SMALL), tr.TrainRunConfig(epochs=1, max_horizon=14))


def test_run_config_round_trip():
    rc = tr.TrainRunConfig(epochs=4, windows_per_episode=2)
    assert tr.TrainRunConfig.from_dict(rc.to_dict()) == rc
    with pytest.raises(dc.ParameterError):
        tr.TrainRunConfig.from_dict({"epoch": 3})
    with pytest.raises(dc.ParameterError):
        tr.TrainRunConfig(val_fraction=1.0)
