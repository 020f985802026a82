import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from gradcheck import numeric_grad, rel_error
from povl.tensor import Tensor
from povl.transformer import (
    GaussianTrajectory,
    ModelConfig,
    Normalizer,
    RHO_MAX,
    POVLModel,
    attention,
    gaussian_nll,
    layer_norm,
    load_checkpoint,
    nll_loss,
    positional_encoding,
    save_checkpoint,
)

SMALL = ModelConfig(d_model=16, n_heads=2, d_ff=32, seed=1)


def window(rng, B=2, t_obs=(15, 4)):
    x = rng.normal(size=(B, 15, 28))
    mask = np.zeros((B, 15), bool)
    for b, t in enumerate(t_obs):
        mask[b, 15 - t:] = True
    return np.where(mask[..., None], x, 0.0), mask


def naive_attention(q, k, v, mask):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i, qi in enumerate(q):
        s = np.array([qi @ kj / math.sqrt(len(qi)) if mask[j] else -np.inf for j, kj in enumerate(k)])
        w = np.exp(s - s[mask].max())
        out[i] = (w / w.sum()) @ v
    return out


def test_attention_matches_naive_oracle():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 4))
    mask = np.array([False, True, True, False, True, True])
    ctx, w = attention(Tensor(q), Tensor(k), Tensor(v), mask[None])
    assert np.allclose(ctx.data, naive_attention(q, k, v, mask), atol=1e-10)
    assert np.all(w[:, ~mask] == 0.0)


def test_attention_single_valid_key():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    mask = np.zeros(5, bool)
    mask[3] = True
    ctx, w = attention(Tensor(q), Tensor(k), Tensor(v), mask[None])
    assert np.all(w[:, 3] == 1.0)
    assert np.allclose(ctx.data, v[3])


def test_encoder_shape_and_pad_invariance():
    rng = np.random.default_rng(2)
    m = POVLModel(ModelConfig(seed=0))
    x, mask = window(rng, B=1, t_obs=(6,))
    z = m.encode(x, mask).data
    assert z.shape == (1, 15, 64)
    # garbage in the padded rows changes nothing
    x2 = x.copy()
    x2[~mask] = rng.normal(size=(int((~mask).sum()), 28)) * 50
    assert np.allclose(m.encode(x2, mask).data[mask], z[mask], atol=1e-12)
    # a shorter padded tensor with the same valid rows gives the same latents
    zs = m.encode(x[:, -8:], mask[:, -8:]).data
    assert np.allclose(zs[:, -6:], z[:, -6:], atol=1e-12)


def test_encoder_zero_weights_give_normalised_positions():
    m = POVLModel(SMALL)
    for k, t in m.params.items():
        if k.startswith("enc.") and not k.endswith(".g"):
            t.data[...] = 0.0
    x, mask = window(np.random.default_rng(3), B=1, t_obs=(15,))
    z = m.encode(x, mask).data[0]
    pe = positional_encoding(np.arange(14, -1, -1), 16)
    ones = Tensor(np.ones(16))
    ref = layer_norm(Tensor(pe), ones, Tensor(np.zeros(16))).data
    assert np.allclose(z, ref, atol=1e-10)


def test_decoder_output_and_head_ranges():
    rng = np.random.default_rng(4)
    m = POVLModel(SMALL)
    for trial in range(10):
        for t in m.params.values():
            t.data[...] = rng.normal(size=t.shape) * rng.uniform(0.1, 2.0)
        x, mask = window(rng, B=100, t_obs=rng.integers(2, 16, 100))
        raw = m.generate(x, mask)
        assert raw.shape == (100, 25, 5)
        for r in raw:
            g = m.to_physical(r)
            assert np.all(g.sigma > 0) and np.all(np.abs(g.rho) < 1)


def test_decoder_is_causal():
    rng = np.random.default_rng(5)
    m = POVLModel(SMALL)
    x, mask = window(rng)
    mem = m.encode(x, mask)
    tok = rng.normal(size=(2, 25, 3))
    full = m.decode(mem, mask, tok).data
    prefix = m.decode(mem, mask, tok[:, :10]).data
    assert np.allclose(full[:, :10], prefix, atol=1e-12)
    tok[:, 12:] += 5.0
    assert np.allclose(m.decode(mem, mask, tok).data[:, :12], full[:, :12], atol=1e-12)


def test_nll_closed_form_and_factorisation():
    raw = np.zeros((1, 1, 5))
    truth = np.zeros((1, 1, 2))
    assert float(nll_loss(Tensor(raw), truth).data) == pytest.approx(math.log(2 * math.pi))
    raw = np.array([[[0.3, -0.2, 0.4, -0.5, 0.0]]])
    truth = np.array([[[1.0, 0.5]]])
    s1, s2 = math.exp(0.4), math.exp(-0.5)
    uni = lambda x, m, s: 0.5 * math.log(2 * math.pi) + math.log(s) + 0.5 * ((x - m) / s) ** 2
    assert float(nll_loss(Tensor(raw), truth).data) == pytest.approx(uni(1.0, 0.3, s1) + uni(0.5, -0.2, s2))


def test_nll_matches_density_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        mu, sig, rho = rng.normal(size=2), np.exp(rng.normal(size=2)), rng.uniform(-0.95, 0.95)
        x = rng.normal(size=2)
        cov = [[sig[0] ** 2, rho * sig[0] * sig[1]], [rho * sig[0] * sig[1], sig[1] ** 2]]
        ref = -multivariate_normal(mu, cov).logpdf(x)
        assert gaussian_nll(mu, sig, np.array(rho), x) == pytest.approx(ref, rel=1e-10)
        raw = np.array([[[mu[0], mu[1], math.log(sig[0]), math.log(sig[1]), math.atanh(rho / RHO_MAX)]]])
        assert float(nll_loss(Tensor(raw), x[None, None]).data) == pytest.approx(ref, rel=1e-10)


def test_covariance_from_gaussian():
    g = GaussianTrajectory(np.zeros((1, 2)), np.array([[2.0, 3.0]]), np.array([0.5]))
    assert np.allclose(g.covariance()[0], [[4.0, 3.0], [3.0, 9.0]])


def test_model_gradient_spot_check():
    rng = np.random.default_rng(7)
    m = POVLModel(ModelConfig(d_model=8, n_heads=2, d_ff=16, seed=2, T_pred=4))
    for t in m.params.values():
        t.data[...] += rng.normal(size=t.shape) * 0.1
    x, mask = window(rng)
    y = rng.normal(size=(2, 4, 2))
    loss = lambda: float(m.forward_train(x, mask, y).data)
    m.zero_grad()
    m.forward_train(x, mask, y).backward()
    for name in ["enc.0.attn.q.w", "enc.1.ff.1.b", "dec.0.cross.k.w", "dec.1.ln3.g", "head.w"]:
        p = m.params[name]
        idx = rng.choice(p.data.size, size=min(6, p.data.size), replace=False)
        num = numeric_grad(loss, p.data, index=idx)
        assert np.all(rel_error(p.grad.reshape(-1)[idx], num.reshape(-1)[idx]) < 1e-4), name


def test_padded_rows_get_no_gradient():
    rng = np.random.default_rng(8)
    m = POVLModel(SMALL)
    x, mask = window(rng)
    y = rng.normal(size=(2, 25, 2))

    def grads(inp):
        m.zero_grad()
        loss = m.forward_train(inp, mask, y)
        loss.backward()
        return float(loss.data), m.grads()

    l1, g1 = grads(x)
    x2 = x.copy()
    x2[~mask] += rng.normal(size=(int((~mask).sum()), 28)) * 10
    l2, g2 = grads(x2)
    assert l1 == pytest.approx(l2, abs=1e-12)
    assert all(np.allclose(g1[k], g2[k], atol=1e-12) for k in g1)


def test_untrained_residual_model_starts_at_cv():
    rng = np.random.default_rng(9)
    m = POVLModel(SMALL)
    m.params["head.w"].data[...] = 0.0
    m.params["head.b"].data[...] = 0.0
    x, mask = window(rng, B=1, t_obs=(5,))
    (g,) = m.predict_gaussian(x, mask)
    assert np.allclose(g.mu, x[0, -1, 1:3] * 0.2)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    m = POVLModel(SMALL, normalizer=Normalizer(rng.normal(size=28), np.ones(28) * 2, np.ones(2), np.ones(2) * 3))
    for t in m.params.values():
        t.data[...] += rng.normal(size=t.shape)
    path = save_checkpoint(tmp_path / "m.npz", m, {"note": "x"})
    m2, meta = load_checkpoint(path)
    assert meta["note"] == "x" and m2.config == m.config
    x, mask = window(rng)
    assert np.array_equal(m.generate(x, mask), m2.generate(x, mask))
    assert all(np.array_equal(m.arrays()[k], m2.arrays()[k]) for k in m.arrays())


def test_checkpoint_rejects_wrong_shapes(tmp_path):
    m = POVLModel(SMALL)
    path = save_checkpoint(tmp_path / "m.npz", m)
    with np.load(path) as z:
        arrays = dict(z)
    arrays["head.w"] = np.zeros((3, 3))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError, match="head.w"):
        load_checkpoint(tmp_path / "bad.npz")
