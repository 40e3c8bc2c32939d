import numpy as np
import pytest
from conftest import assert_grad_close, numeric_grad

from disentango.model import (LatentPosterior, ModelError, ModelState,
                              load_checkpoint, save_checkpoint)
from disentango.tensor import Tensor


def make_model(num_tasks=3, grid=(16,), d_z=2, channels=4, modes=(3,), depth=2,
               num_classes=0, seed=0):
    return ModelState(num_tasks, grid, d_z, channels, modes, depth,
                      enc_hidden=8, dec_hidden=8, num_classes=num_classes,
                      rng=np.random.default_rng(seed))


def test_depth_zero_is_projection_of_lifting():
    m = make_model(depth=0)
    rng = np.random.default_rng(1)
    f = rng.standard_normal((2, 3, 16))
    out = m.full_forward([0, 1], Tensor(f), mode="metano")
    # recompute Q(P(x)) pointwise by hand
    coords = m.coords_channels((16,))
    for t_i, task in enumerate([0, 1]):
        x = np.concatenate([f[t_i][..., None],
                            np.broadcast_to(coords, (3, 16, 1))], axis=-1)
        h = x @ m.theta_p_w.data[task] + m.theta_p_b.data[task]
        from scipy.special import erf
        act = lambda a: 0.5 * a * (1 + erf(a / np.sqrt(2)))
        y = act(h @ m.q_w1.data + m.q_b1.data) @ m.q_w2.data + m.q_b2.data
        assert np.allclose(out.u_hat.data[t_i], y[..., 0])


def test_zero_shared_weights_propagate_q_bias():
    m = make_model(depth=2)
    for t in (m.spectral.real, m.spectral.imag, m.j_point, m.j_bias,
              m.q_w1, m.q_b1, m.q_w2):
        t.data[...] = 0.0
    f = np.random.default_rng(2).standard_normal((1, 2, 16))
    out = m.full_forward([0], Tensor(f), mode="metano")
    assert np.allclose(out.u_hat.data, m.q_b2.data[0])


def test_metano_ignores_vae_parameters():
    m = make_model()
    f = np.random.default_rng(3).standard_normal((2, 2, 16))
    out1 = m.full_forward([0, 1], Tensor(f), mode="metano").u_hat.data.copy()
    for t in (m.enc_w1, m.enc_b1, m.enc_w2, m.enc_b2,
              m.dec_w1, m.dec_b1, m.dec_w2, m.dec_b2):
        t.data[...] = np.random.default_rng(4).standard_normal(t.shape)
    out2 = m.full_forward([0, 1], Tensor(f), mode="metano").u_hat.data
    assert np.array_equal(out1, out2)


def test_task_wise_isolation_metano():
    m = make_model()
    f = np.random.default_rng(5).standard_normal((3, 2, 16))
    base = m.full_forward([0, 1, 2], Tensor(f), mode="metano").u_hat.data.copy()
    m.theta_p_w.data[1] += 0.37
    pert = m.full_forward([0, 1, 2], Tensor(f), mode="metano").u_hat.data
    assert np.array_equal(base[0], pert[0])
    assert np.array_equal(base[2], pert[2])
    assert not np.allclose(base[1], pert[1])


def test_batching_consistency():
    m = make_model()
    f = np.random.default_rng(6).standard_normal((1, 4, 16))
    batched = m.full_forward([1], Tensor(f), mode="metano").u_hat.data
    singles = [m.full_forward([1], Tensor(f[:, i:i + 1]), mode="metano").u_hat.data
               for i in range(4)]
    assert np.allclose(batched, np.concatenate(singles, axis=1), atol=1e-12)


def test_encoder_zero_weights_standard_posterior():
    m = make_model()
    for t in (m.enc_w1, m.enc_b1, m.enc_w2, m.enc_b2):
        t.data[...] = 0.0
    _, _, flat = m.theta_rows([0, 1])
    post = m.encode(flat)
    assert np.allclose(post.mean.data, 0.0)
    assert np.allclose(post.std.data, 1.0)


def test_encode_deterministic():
    m = make_model()
    _, _, flat = m.theta_rows([0, 0])
    post = m.encode(flat)
    assert np.array_equal(post.mean.data[0], post.mean.data[1])
    assert np.array_equal(post.std.data[0], post.std.data[1])


def test_reparameterized_sample_moments():
    rng = np.random.default_rng(7)
    mu = np.array([[0.3, -1.2]])
    std = np.array([[0.7, 1.5]])
    post = LatentPosterior(Tensor(mu), Tensor(std))
    draws = np.stack([post.sample(rng.standard_normal((1, 2))).data[0]
                      for _ in range(100_000)])
    assert np.max(np.abs(draws.mean(axis=0) - mu[0])) < 0.01 * max(1, np.abs(mu).max())
    assert np.max(np.abs(draws.std(axis=0) / std[0] - 1)) < 0.01


def test_decoder_zero_weights_gives_bias():
    m = make_model()
    m.init_theta_stats()
    for t in (m.dec_w1, m.dec_b1, m.dec_w2):
        t.data[...] = 0.0
    m.dec_b2.data[...] = 0.25
    out = m.decode(Tensor(np.zeros((1, 2))))
    expected = 0.25 * m.theta_std + m.theta_mean
    assert np.allclose(out.data[0], expected)


def test_decode_encode_smoke():
    m = make_model()
    m.init_theta_stats()
    _, _, flat = m.theta_rows([0, 1, 2])
    post = m.encode(flat)
    out = m.decode(post.mean)
    assert out.shape == (3, m.d_theta)
    assert np.all(np.isfinite(out.data))


def test_unknown_task_index_rejected():
    m = make_model(num_tasks=2)
    with pytest.raises(ModelError, match="task index"):
        m.full_forward([0, 5], Tensor(np.zeros((2, 1, 16))), mode="metano")


def test_unknown_mode_rejected():
    m = make_model()
    with pytest.raises(ModelError, match="mode"):
        m.full_forward([0], Tensor(np.zeros((1, 1, 16))), mode="nonsense")


def test_full_gradient_flow_disentango():
    m = make_model()
    m.init_theta_stats()
    rng = np.random.default_rng(8)
    f = rng.standard_normal((2, 2, 16))
    eps = rng.standard_normal((2, m.d_z))
    res = m.full_forward([0, 1], Tensor(f), mode="disentango", eps=eps)
    loss = res.u_hat.square().sum() + res.theta_hat.square().sum() \
        + res.posterior.mean.square().sum()
    loss.backward()
    for name, p in m.parameters().items():
        assert p.grad is not None, f"no grad on {name}"
        assert np.any(p.grad != 0.0), f"zero grad on {name}"


def test_shared_parameters_independent_of_task_count():
    m1 = make_model(num_tasks=2, seed=11)
    m2 = make_model(num_tasks=7, seed=11)
    for name in m1.shared_parameter_names():
        assert m1.parameters()[name].shape == m2.parameters()[name].shape


def test_ifno_gradcheck_all_parameter_groups():
    m = make_model(num_tasks=2, grid=(8,), channels=2, modes=(2,), depth=2, seed=12)
    rng = np.random.default_rng(13)
    f = rng.standard_normal((2, 1, 8))

    groups = ["theta_p_w", "theta_p_b", "spectral_real", "spectral_imag",
              "j_point", "j_bias", "q_w1", "q_b1", "q_w2", "q_b2"]
    params = m.parameters()

    def loss_fn():
        res = m.full_forward([0, 1], Tensor(f), mode="metano")
        return res.u_hat.square().sum()

    loss_fn().backward()
    analytic = {g: params[g].grad.copy() for g in groups}

    for g in groups:
        arr = params[g].data

        def f_of(arrays):
            old = arr.copy()
            arr[...] = arrays[0]
            val = loss_fn().item()
            arr[...] = old
            return val

        assert_grad_close(analytic[g], numeric_grad(f_of, [arr.copy()], 0),
                          tol=1e-5)


def test_disentango_gradcheck_vae_groups():
    m = make_model(num_tasks=2, grid=(8,), channels=2, modes=(2,), depth=1, seed=14)
    m.init_theta_stats()
    rng = np.random.default_rng(15)
    f = rng.standard_normal((2, 1, 8))
    eps = rng.standard_normal((2, m.d_z))
    params = m.parameters()
    groups = ["enc_w1", "enc_b1", "enc_w2", "enc_b2",
              "dec_w1", "dec_b1", "dec_w2", "dec_b2", "theta_p_w"]

    def loss_fn():
        res = m.full_forward([0, 1], Tensor(f), mode="disentango", eps=eps)
        return res.u_hat.square().sum() + res.theta_hat.square().sum()

    loss_fn().backward()
    analytic = {g: params[g].grad.copy() for g in groups}
    for g in groups:
        arr = params[g].data

        def f_of(arrays):
            old = arr.copy()
            arr[...] = arrays[0]
            val = loss_fn().item()
            arr[...] = old
            return val

        assert_grad_close(analytic[g], numeric_grad(f_of, [arr.copy()], 0),
                          tol=1e-5)


def test_resolution_transfer_shapes():
    m = make_model(grid=(16,), modes=(3,))
    f = np.random.default_rng(16).standard_normal((1, 2, 32))
    out = m.full_forward([0], Tensor(f), mode="metano", extents=(32,))
    assert out.u_hat.shape == (1, 2, 32)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = make_model(num_classes=4)
    m.init_theta_stats()
    path = str(tmp_path / "m.ckpt")
    opt_state = {"t": 3, "lr": 0.5,
                 "m": {n: np.random.default_rng(17).standard_normal(p.shape)
                       for n, p in m.parameters().items()},
                 "v": {n: np.abs(np.random.default_rng(18).standard_normal(p.shape))
                       for n, p in m.parameters().items()}}
    rng = np.random.default_rng(19)
    save_checkpoint(path, m, {"note": "test"}, opt_state,
                    rng.bit_generator.state, {"step": 12})
    m2, run_cfg, opt2, rng_state, extra = load_checkpoint(path)
    assert run_cfg == {"note": "test"}
    assert extra == {"step": 12}
    assert rng_state == rng.bit_generator.state
    for n, p in m.parameters().items():
        assert np.array_equal(p.data, m2.parameters()[n].data), n
    assert np.array_equal(m.theta_mean, m2.theta_mean)
    for n in m.parameters():
        assert np.array_equal(opt_state["m"][n], opt2["m"][n])
        assert np.array_equal(opt_state["v"][n], opt2["v"][n])
