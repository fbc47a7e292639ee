import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pedscl.core import Dataset
from pedscl.learn import (
    OptState,
    TaskAnchor,
    TrainingDiverged,
    TrainLog,
    ewc_loss,
    estimate_fim,
    pred_loss,
    train,
)
from pedscl.model import tbptt_gradient


def test_pred_loss_examples():
    assert pred_loss(np.zeros((15, 2)), np.zeros((15, 2))) == 0.0
    pred = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert pred_loss(pred, np.zeros((2, 2))) == pytest.approx(1.0)
    target = np.random.default_rng(0).normal(size=(15, 2))
    base = pred_loss(np.zeros((15, 2)), target)
    assert pred_loss(np.zeros((15, 2)), 2 * target) == pytest.approx(4 * base)
    with pytest.raises(ValueError):
        pred_loss(np.zeros((3, 2)), np.zeros((4, 2)))


def test_ewc_loss_example():
    anchor = TaskAnchor(0, np.array([1.0, 0.0, 0.0]), np.array([2.0, 0.0, 1.0]))
    value, grad = ewc_loss(np.array([4.0, 5.0, 0.0]), [anchor], lam=1.0)
    assert value == pytest.approx(9.0)
    assert np.allclose(grad, [6.0, 0.0, 0.0])
    assert ewc_loss(anchor.theta, [anchor], 1e9)[0] == 0.0
    assert ewc_loss(np.zeros(3), [], 5.0)[0] == 0.0


def test_anchor_validation():
    with pytest.raises(ValueError):
        TaskAnchor(0, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        TaskAnchor(0, np.zeros(2), np.array([1.0, -1.0]))
    anchor = TaskAnchor(0, np.zeros(2), np.ones(2))
    with pytest.raises(ValueError, match="anchor 0"):
        ewc_loss(np.zeros(3), [anchor], 1.0)


@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.floats(0.01, 100.0))
def test_ewc_gradient_matches_finite_differences(seed, n_anchors, lam):
    rng = np.random.default_rng(seed)
    anchors = [TaskAnchor(k, rng.normal(size=6), rng.random(6)) for k in range(n_anchors)]
    theta = rng.normal(size=6)
    _, grad = ewc_loss(theta, anchors, lam)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        numeric = (ewc_loss(theta + e, anchors, lam)[0] - ewc_loss(theta - e, anchors, lam)[0]) / (2 * h)
        assert abs(numeric - grad[i]) < 1e-6 * max(1.0, abs(grad[i]))


def test_fim_zero_for_zero_decoder_and_targets(small_arch, small_params, make_sequence):
    params = small_params.copy()
    params["dec.W"] = 0.0
    params["dec.b"] = 0.0
    rng = np.random.default_rng(1)
    data = Dataset([make_sequence(small_arch, rng, scale=0.0) for _ in range(4)])
    assert np.all(estimate_fim(params, data) == 0.0)


def test_fim_single_example_is_squared_gradient(small_arch, small_params, make_sequence):
    seq = make_sequence(small_arch, np.random.default_rng(2), length=1)
    _, g = tbptt_gradient(small_params, seq)
    assert np.allclose(estimate_fim(small_params, Dataset([seq])), g * g, rtol=1e-12, atol=0)


def _prefix(seq, n):
    return dataclasses.replace(seq, ego=seq.ego[:n], occ=seq.occ[:n], social=seq.social[:n], target=seq.target[:n],
                               position=seq.position[:n], future=seq.future[:n], ticks=seq.ticks[:n])


def test_fim_averages_per_example_gradients(small_arch, small_params, make_sequence):
    rng = np.random.default_rng(12)
    seqs = [make_sequence(small_arch, rng, length=4) for _ in range(3)]
    expected = np.zeros(small_params.size)
    for seq in seqs:
        for t in range(4):
            # loss of example t alone, from the mean losses of the two prefixes around it
            g = (t + 1) * tbptt_gradient(small_params, _prefix(seq, t + 1))[1]
            if t:
                g -= t * tbptt_gradient(small_params, _prefix(seq, t))[1]
            expected += g * g
    assert np.allclose(estimate_fim(small_params, Dataset(seqs)), expected / 12, rtol=1e-9, atol=1e-15)


def test_fim_invariant_to_order_and_chunking(small_arch, small_params, make_sequence):
    rng = np.random.default_rng(3)
    seqs = [make_sequence(small_arch, rng) for _ in range(7)]
    ref = estimate_fim(small_params, Dataset(seqs))
    assert np.all(ref >= 0)
    shuffled = [seqs[i] for i in rng.permutation(7)]
    assert np.allclose(estimate_fim(small_params, Dataset(shuffled)), ref, rtol=1e-12, atol=1e-300)
    assert np.allclose(estimate_fim(small_params, Dataset(seqs), chunk=2), ref, rtol=1e-12, atol=1e-300)
    with pytest.raises(ValueError):
        estimate_fim(small_params, Dataset())


def test_adam_first_step_moves_by_learning_rate():
    opt = OptState.create(3, lr=0.1, l2=0.0)
    theta = opt.update(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    assert np.allclose(theta, [-0.1, 0.1, 0.0], atol=1e-7)
    decay = OptState.create(1, lr=0.1, l2=0.5)
    assert decay.update(np.array([2.0]), np.zeros(1))[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def _data(arch, seed, n=8, length=4):
    rng = np.random.default_rng(seed)
    from conftest import random_sequence

    return Dataset([random_sequence(arch, rng, length) for _ in range(n)])


def test_zero_epochs_returns_same_parameters(small_arch, small_params):
    out = train(small_params, _data(small_arch, 0), [], OptState.create(small_params.size), 0, np.random.default_rng(0))
    assert np.array_equal(out.flat, small_params.flat)
    assert out is not small_params


def test_training_is_deterministic_and_does_not_mutate_input(small_arch, small_params):
    data = _data(small_arch, 1)
    before = small_params.flat.copy()
    runs = [
        train(small_params, data, [], OptState.create(small_params.size), 3, np.random.default_rng(4), batch_size=3)
        for _ in range(2)
    ]
    assert np.array_equal(runs[0].flat, runs[1].flat)
    assert np.array_equal(small_params.flat, before)


def test_single_sequence_is_memorised(small_arch, small_params):
    data = _data(small_arch, 2, n=1)
    log = TrainLog()
    train(small_params, data, [], OptState.create(small_params.size, lr=1e-2, l2=0.0), 250,
          np.random.default_rng(0), log=log)
    losses = [r.pred for r in log.records]
    assert losses[-1] < 0.1 * losses[0]
    # no sustained rise: each 10-epoch window ends at most 20 % above where it began
    for k in range(0, 240):
        assert losses[k + 10] <= 1.2 * losses[k]


def test_ewc_term_logged_and_pulls_toward_anchor(small_arch, small_params):
    data = _data(small_arch, 3)
    anchor = TaskAnchor(0, small_params.flat.copy(), np.ones(small_params.size))
    free = train(small_params, data, [], OptState.create(small_params.size, l2=0.0), 5, np.random.default_rng(0))
    log = TrainLog()
    held = train(small_params, data, [anchor], OptState.create(small_params.size, l2=0.0), 5,
                 np.random.default_rng(0), ewc_lambda=1e3, log=log)
    dist = lambda p: np.linalg.norm(p.flat - anchor.theta)
    assert dist(held) < dist(free)
    assert all(r.total >= r.pred for r in log.records)
    assert log.records[-1].ewc > 0


def test_divergence_raises(small_arch, small_params):
    data = _data(small_arch, 4)
    for s in data:
        s.target *= 1e5
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(small_params, data, [], OptState.create(small_params.size), 1, np.random.default_rng(0))


def test_train_log_csv(tmp_path, small_arch, small_params):
    log = TrainLog()
    train(small_params, _data(small_arch, 5), [], OptState.create(small_params.size), 2, np.random.default_rng(0), log=log)
    log.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,total,pred,ewc" and len(lines) == 3
