import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vqplan import diffcore as dc
from vqplan import trajgen as tg
from vqplan import vqvae as vq
import gradcheck as gc


def test_quantize_picks_nearest_row():
    E = np.array([[0.0, 0.0], [1.0, 1.0]])
    g = vq.quantize(np.array([[[0.4, 0.4], [0.6, 0.6]]]), E)
    np.testing.assert_array_equal(g.h_q, [[0, 1]])
    np.testing.assert_array_equal(g.Z_q, [[[0, 0], [1, 1]]])


def test_quantize_tie_goes_to_lowest_index():
    E = np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    assert vq.quantize(np.array([[0.5, 0.5]]), E).h_q[0] == 0
    assert vq.quantize(np.array([[1.0, 1.0]]), E).h_q[0] == 0


def test_quantize_rejects_dim_mismatch():
    with pytest.raises(dc.ContractError):
        vq.quantize(np.zeros((2, 3)), np.zeros((4, 2)))


finite = st.floats(-5, 5, allow_nan=False)


@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_quantize_matches_brute_force(Z, E):
    g = vq.quantize(Z, E)
    for l in range(3):
        d = [float(np.sum((Z[l] - E[k]) ** 2)) for k in range(4)]
        best = min(d)
        assert g.h_q[l] == next(k for k in range(4) if d[k] == best)
        np.testing.assert_array_equal(g.Z_q[l], E[g.h_q[l]])


@given(arrays(np.float64, (5, 3), elements=finite), arrays(np.float64, (6, 3), elements=finite))
def test_quantize_idempotent(Z, E):
    g = vq.quantize(Z, E)
    g2 = vq.quantize(g.Z_q, E)
    np.testing.assert_array_equal(g2.Z_q, g.Z_q)


def _constant_decoder(model, p):
    """Zero the decoder so it emits the setpoint ``p`` for every input."""
    for W, b in model.decoder.layers:
        W.value = np.zeros_like(W.value)
        b.value = np.zeros_like(b.value)
    mid = np.array([model.cfg.v_mid, model.cfg.y_offset])
    half = np.array([model.cfg.v_half, model.cfg.pos_scale[1]])
    model.decoder.layers[-1][1].value = (np.asarray(p, dtype=float) - mid) / half


def test_forward_at_rest_gives_stationary_trajectory():
    qp, model = gc.small_vqvae(0)
    _constant_decoder(model, [0.0, 0.0])
    N = qp.basis.n + 1
    tau = np.zeros((1, 2 * N))
    xi, grid, p, Z_e = vq.vqvae_forward(model, tau, np.zeros((1, 6)))
    np.testing.assert_allclose(p.value, [[0.0, 0.0]], atol=1e-12)
    pos = vq.positions_from_xi(qp, xi).value
    assert np.max(np.abs(pos)) <= 1e-6
    assert grid.h_q.shape == (1, model.cfg.L)


def test_forward_rejects_wrong_length():
    qp, model = gc.small_vqvae(0)
    with pytest.raises(dc.ContractError):
        vq.vqvae_forward(model, np.zeros((1, 5)), np.zeros((1, 6)))


def test_straight_through_reaches_encoder():
    rng = np.random.default_rng(3)
    qp, model = gc.small_vqvae(3)
    tau, init = gc.small_batch(qp, rng)
    with dc.Tape() as tape:
        tape.watch(*model.params.values())
        xi, grid, _, Z_e = vq.vqvae_forward(model, tau, init)
        _, (recon, _, _) = vq.vqvae_loss(qp, xi, tau, Z_e, model.codebook.E[grid.h_q], 0.0, 5.0)
        grads = tape.backward(recon)
    for W, b in model.encoder.layers:
        assert np.any(grads[W] != 0)
    # reconstruction never touches the codebook
    np.testing.assert_array_equal(grads[model.codebook.E], 0.0)


def test_loss_gradients_match_surrogate_differences():
    errs = [gc.vqvae_case(s) for s in range(20)]
    assert max(errs) <= 1e-4


def test_beta_zero_drops_commitment():
    rng = np.random.default_rng(4)
    qp, model = gc.small_vqvae(4)
    tau, init = gc.small_batch(qp, rng)
    xi, grid, _, Z_e = vq.vqvae_forward(model, tau, init)
    _, (_, d, c) = vq.vqvae_loss(qp, xi, tau, Z_e, model.codebook.E[grid.h_q], 0.0, 5.0)
    assert c.item() == 0.0 and d.item() > 0.0


def test_dictionary_gradient_pulls_rows_toward_assigned_latents():
    E = dc.Tensor(np.array([[0.0, 0.0], [3.0, 3.0], [9.0, 9.0]]))
    Z = dc.Tensor(np.array([[[1.0, 0.0], [2.0, 2.0], [0.0, 1.0]]]))
    g = vq.quantize(Z, E)
    with dc.Tape() as tape:
        tape.watch(E)
        E_used = E[g.h_q]
        d = dc.sum(dc.square(dc.stop_gradient(Z) - E_used))
        gE = tape.backward(d)[E]
    # row 0 serves latents 0 and 2, row 1 serves latent 1, row 2 is unused
    np.testing.assert_allclose(gE, [[-2.0, -2.0], [2.0, 2.0], [0.0, 0.0]])


def test_decode_indices_matches_decoder():
    qp, model = gc.small_vqvae(5)
    h = np.array([[0, 3], [2, 1]])
    np.testing.assert_array_equal(model.decode_indices(h), model.decode(model.codebook.E.value[h]).value)


def _tiny_cfg(**kw):
    base = dict(L=1, D=2, K=1, hidden=16, lr=3e-3, batch_size=8, steps=200, seed=0, recon_scale=5.0)
    base.update(kw)
    return vq.VqVaeConfig(**base)


def test_single_trajectory_loss_decreases():
    qp = tg.SetpointQP(tg.build_basis(**gc.SMALL_BASIS))
    init = np.array([[0, 4.0, 12.0, 0, 0, 0]])
    tau = vq.flatten_waypoints(qp.trajectory(np.array([[16.0, 6.0]]), init).waypoints)
    _, hist = vq.train_vqvae(tau, init, _tiny_cfg(), qp)
    assert hist.loss[-1] < 0.05 * hist.loss[0]
    assert hist.rmse < 0.5


def test_two_clusters_use_two_codes():
    qp = tg.SetpointQP(tg.build_basis(**gc.SMALL_BASIS))
    init = np.tile([0, 4.0, 12.0, 0, 0, 0], (2, 1))
    p = np.array([[10.0, 2.0], [22.0, 10.0]])
    tau = vq.flatten_waypoints(qp.trajectory(p, init).waypoints)
    model, hist = vq.train_vqvae(tau, init, _tiny_cfg(K=2, steps=400), qp)
    h = vq.quantize(model.encode(tau), model.codebook.E).h_q
    assert h[0, 0] != h[1, 0]
    assert hist.rmse < 1.0


def test_empty_dataset_rejected():
    qp = tg.SetpointQP(tg.build_basis(**gc.SMALL_BASIS))
    with pytest.raises(dc.ContractError):
        vq.train_vqvae(np.zeros((0, 22)), np.zeros((0, 6)), _tiny_cfg(), qp)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    qp, model = gc.small_vqvae(6)
    tau, init = gc.small_batch(qp, rng)
    path = tmp_path / "m.ckpt"
    model.save(path)
    again = vq.VqVaeModel.load(path, qp)

    def loss(m):
        xi, g, _, Z = vq.vqvae_forward(m, tau, init)
        return vq.vqvae_loss(qp, xi, tau, Z, m.codebook.E[g.h_q], m.beta, m.cfg.recon_scale)[0].item()

    assert loss(model) == loss(again)
    assert again.cfg == model.cfg


@pytest.mark.slow
def test_trained_reconstruction_within_half_metre():
    import acceptance_pipeline
    from vqplan import expert_gen as eg

    wd = acceptance_pipeline.ensure("vqvae")
    qp = tg.SetpointQP(tg.build_basis())
    model = vq.VqVaeModel.load(wd / "vqvae.ckpt", qp)
    ds = eg.load_dataset(wd / "dataset.bin")
    assert vq.reconstruction_rmse(model, ds.flat_tau(), ds.initial) <= 0.5
