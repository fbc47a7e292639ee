import numpy as np
import pytest

from pedscl.core import ModelInput, OccupancyPatch, SocialVector
from pedscl.model import (
    Architecture,
    ParamVector,
    RecurrentState,
    SequenceBatch,
    cv_predict,
    forward,
    forward_batch,
    init_params,
    integrate,
    load_checkpoint,
    run_sequences,
    save_checkpoint,
    sequence_gradients,
    tbptt_gradient,
)


def batch_loss(params, batch):
    losses, _ = sequence_gradients(params, batch)
    return float(losses.mean())


def central_difference(f, theta, h=1e-5, coords=None):
    coords = range(len(theta)) if coords is None else coords
    out = np.zeros(len(theta))
    for i in coords:
        old = theta[i]
        theta[i] = old + h
        up = f()
        theta[i] = old - h
        down = f()
        theta[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def test_default_parameter_count_and_shapes():
    arch = Architecture()
    p = ParamVector(arch)
    assert p.size == 72590
    assert p["rnn.W_ih"].shape == (256, 80)
    assert p["enc_occ.W"].shape == (32, 1024)
    assert p["dec.W"].shape == (30, 64)


def test_param_vector_views_share_storage(small_arch):
    p = ParamVector(small_arch)
    p["dec.b"] = np.arange(6.0)
    assert np.array_equal(p.flat[p.slice_of("dec.b")], np.arange(6.0))
    with pytest.raises(ValueError):
        ParamVector(small_arch, np.zeros(3))


def test_init_is_seeded_and_sets_forget_bias(small_arch):
    a = init_params(small_arch, np.random.default_rng(1))
    b = init_params(small_arch, np.random.default_rng(1))
    assert np.array_equal(a.flat, b.flat)
    H = small_arch.hidden
    assert np.all(a["rnn.b"][H : 2 * H] == 1.0)
    assert np.all(a["dec.b"] == 0.0)


def _input(arch, rng):
    return ModelInput(
        rng.normal(size=2),
        OccupancyPatch(rng.random((arch.grid, arch.grid)) < 0.5),
        SocialVector(np.sort(rng.random((arch.n_social, 4)), axis=0)),
    )


def test_reset_state_forgets_history(small_arch, small_params):
    rng = np.random.default_rng(2)
    inp = _input(small_arch, rng)
    fresh, _ = forward(small_params, inp, RecurrentState.zeros(small_arch))
    state = RecurrentState.zeros(small_arch)
    for _ in range(7):
        _, state = forward(small_params, _input(small_arch, rng), state)
    carried, _ = forward(small_params, inp, state)
    assert not np.allclose(carried.velocities, fresh.velocities)
    again, _ = forward(small_params, inp, RecurrentState.zeros(small_arch))
    assert np.array_equal(again.velocities, fresh.velocities)
    assert fresh.velocities.shape == (small_arch.pred_steps, 2)


def test_batch_forward_matches_single_agent(small_arch, small_params):
    rng = np.random.default_rng(3)
    inputs = [_input(small_arch, rng) for _ in range(3)]
    state = RecurrentState(rng.normal(size=(3, small_arch.hidden)), rng.normal(size=(3, small_arch.hidden)))
    pred, new = forward_batch(
        small_params,
        np.stack([i.ego_velocity for i in inputs]),
        np.stack([i.occ_patch.cells for i in inputs]),
        np.stack([i.social.entries for i in inputs]),
        state,
    )
    for k, inp in enumerate(inputs):
        single, st = forward(small_params, inp, RecurrentState(state.h[k], state.c[k]))
        assert np.allclose(single.velocities, pred[k], atol=1e-14)
        assert np.allclose(st.h, new.h[k], atol=1e-14)


def test_run_sequences_matches_stepwise_forward(small_arch, small_params, make_sequence):
    seq = make_sequence(small_arch, np.random.default_rng(4), length=5)
    out = run_sequences(small_params, SequenceBatch.from_sequences([seq]))[0]
    state = RecurrentState(seq.h0, seq.c0)
    for t in range(len(seq)):
        inp = ModelInput(seq.ego[t], OccupancyPatch(seq.occ[t]), SocialVector(seq.social[t]))
        pred, state = forward(small_params, inp, state)
        assert np.allclose(pred.velocities, out[t], atol=1e-13)


def test_gradient_matches_finite_differences(small_arch, make_sequence):
    rng = np.random.default_rng(5)
    for _ in range(5):
        params = init_params(small_arch, rng)
        params.flat += 0.1 * rng.normal(size=params.size)
        batch = SequenceBatch.from_sequences([make_sequence(small_arch, rng, length=4) for _ in range(2)])
        _, grad = sequence_gradients(params, batch)
        numeric = central_difference(lambda: batch_loss(params, batch), params.flat)
        rel = np.abs(grad - numeric) / np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-6)
        assert rel.max() < 1e-4


def test_default_architecture_gradient_on_sampled_coordinates(make_sequence):
    arch = Architecture()
    rng = np.random.default_rng(6)
    params = init_params(arch, rng)
    batch = SequenceBatch.from_sequences([make_sequence(arch, rng, length=3)])
    _, grad = sequence_gradients(params, batch)
    coords = []
    for name in params.names:
        sl = params.slice_of(name)
        coords += list(rng.integers(sl.start, sl.stop, size=4))
    numeric = central_difference(lambda: batch_loss(params, batch), params.flat, coords=coords)
    for i in coords:
        assert abs(grad[i] - numeric[i]) <= 1e-4 * max(abs(grad[i]), abs(numeric[i]), 1e-6)


def test_per_example_gradients_average_to_batch_gradient(small_arch, small_params, make_sequence):
    rng = np.random.default_rng(7)
    batch = SequenceBatch.from_sequences([make_sequence(small_arch, rng) for _ in range(3)])
    losses, per = sequence_gradients(small_params, batch, per_example=True)
    _, mean = sequence_gradients(small_params, batch)
    assert per.shape == (3, small_params.size)
    assert np.allclose(per.mean(axis=0), mean, atol=1e-14)


def test_tbptt_gradient_adds_l2(small_arch, small_params, make_sequence):
    seq = make_sequence(small_arch, np.random.default_rng(8))
    loss0, g0 = tbptt_gradient(small_params, seq)
    loss1, g1 = tbptt_gradient(small_params, seq, l2=0.01)
    theta = small_params.flat
    assert loss1 == pytest.approx(loss0 + 0.01 * theta @ theta)
    assert np.allclose(g1 - g0, 0.02 * theta)


def test_mismatched_target_rejected(small_arch, small_params, make_sequence):
    batch = SequenceBatch.from_sequences([make_sequence(small_arch, np.random.default_rng(9))])
    batch.target = batch.target[:, :, :2]
    with pytest.raises(ValueError, match="target shape"):
        sequence_gradients(small_params, batch)
    with pytest.raises(ValueError):
        SequenceBatch.from_sequences([])


def test_non_finite_activation_names_layer(small_arch, small_params):
    bad = small_params.copy()
    bad["enc_soc.W"] = np.nan
    with pytest.raises(FloatingPointError, match="enc_soc"):
        forward(bad, _input(small_arch, np.random.default_rng(0)), RecurrentState.zeros(small_arch))


def test_checkpoint_round_trip(tmp_path, small_arch, small_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_params, path, {"phase": 2})
    back, meta = load_checkpoint(path)
    assert back.arch == small_arch
    assert np.array_equal(back.flat, small_params.flat)
    assert meta == {"phase": 2}


def test_checkpoint_rejects_other_architecture(tmp_path, small_arch, small_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_params, path)
    with pytest.raises(ValueError, match="does not match"):
        load_checkpoint(path, Architecture())
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk")


def test_cv_predict_and_integrate():
    inp = ModelInput(np.array([1.0, -0.5]), OccupancyPatch(np.zeros((4, 4), bool)), SocialVector(np.zeros((2, 4))))
    pred = cv_predict(inp, pred_steps=4)
    assert pred.velocities.shape == (4, 2)
    pos = integrate(pred.velocities, [2.0, 1.0], dt=0.5)
    assert np.allclose(pos, [[2.5, 0.75], [3.0, 0.5], [3.5, 0.25], [4.0, 0.0]])
