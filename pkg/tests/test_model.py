import math

import numpy as np
import pytest

from mimae.autodiff import Tensor, directional_check, grad_check
from mimae.errors import ContractError, ShapeError
from mimae.masking import apply_mask, gen_orthogonal
from mimae.model import (
    MAE,
    ApproxNet,
    GaussianPosterior,
    ModelConfig,
    approx_forward,
    gaussian_log_prob,
    masked_inputs,
    patchify,
    sincos_2d,
    unpatchify,
)


def test_default_config_geometry():
    c = ModelConfig()
    assert (c.num_patches, c.patch_dim, c.input_dim) == (16, 64, 1024)


@pytest.mark.parametrize("kwargs", [dict(patch_size=5), dict(num_heads=3), dict(sigma_floor=0.0),
                                    dict(latent_dim=32), dict(latent_pool="max")])
def test_config_invariants(kwargs):
    with pytest.raises(ContractError):
        ModelConfig(**kwargs)


def test_patchify_roundtrip_and_order(rng):
    x = rng.random((2, 3, 8, 8))
    p = patchify(x, 4)
    assert p.shape == (2, 4, 48)
    np.testing.assert_array_equal(unpatchify(p, 4, 3), x)
    # patch 1 is the top-right block; its first pixel is (row 0, col 4), channel-last
    np.testing.assert_array_equal(p[0, 1, :3], x[0, :, 0, 4])


def test_sincos_table():
    t = sincos_2d(8, 4)
    assert t.shape == (17, 8) and not t[0].any()
    assert len({tuple(r) for r in t[1:].round(6)}) == 16


def test_patch_embed_shape_and_errors(rng):
    model = MAE(ModelConfig(), seed=0)
    assert model.patch_embed(rng.random((3, 1, 32, 32))).shape == (3, 16, 64)
    with pytest.raises(ShapeError):
        model.patch_embed(rng.random((3, 1, 16, 16)))


def test_parameter_groups_partition():
    model = MAE(ModelConfig(), seed=0)
    enc, dec = model.encoder_parameters(), model.decoder_parameters()
    assert not set(enc) & set(dec)
    assert set(enc) | set(dec) == set(model.parameters())
    assert "mask_token" in dec and "cls_token" in enc
    assert all(k.startswith("decoder") or k == "mask_token" for k in dec)


def test_forward_view_shapes(rng):
    model = MAE(ModelConfig(), seed=0)
    emb = model.patch_embed(rng.random((2, 1, 32, 32)))
    latent, pred, index = model.forward_view(emb, gen_orthogonal(16, 4, seed=0).masks[0], mask_id=0)
    assert latent.tokens.shape == (2, 5, 64) and latent.z_vec.shape == (2, 64)
    assert pred.shape == (2, 16, 64) and index.shape == (2, 4) and latent.mask_id == 0
    np.testing.assert_array_equal(latent.z_vec.data, latent.tokens.data[:, 0])


def test_class_token_is_order_agnostic(rng):
    """Permuting visible tokens together with their position embeddings leaves z unchanged."""
    model = MAE(ModelConfig(), seed=1)
    emb = model.patch_embed(rng.random((2, 1, 32, 32)))
    vis, _ = apply_mask(emb, gen_orthogonal(16, 2, seed=4).masks[0])
    perm = np.random.default_rng(0).permutation(vis.shape[1])
    z1 = model.encode(vis).z_vec.data
    z2 = model.encode(vis[:, perm, :]).z_vec.data
    np.testing.assert_allclose(z1, z2, atol=1e-5)


def test_decode_places_tokens_at_their_indices(rng):
    """Visible tokens change only when the content at their own index changes."""
    cfg = ModelConfig(decoder_depth=1)
    model = MAE(cfg, seed=2)
    # drop decoder attention to make positions independent
    for blk in model.decoder_blocks:
        blk.attn.proj.weight.data[:] = 0
        blk.attn.proj.bias.data[:] = 0
    emb = model.patch_embed(rng.random((1, 1, 32, 32)))
    mask = gen_orthogonal(16, 4, seed=5).masks[0]
    latent, pred, index = model.forward_view(emb, mask)
    tokens = latent.tokens.data.copy()
    tokens[0, 2] += 1.0  # second visible token
    from mimae.model import LatentBatch

    pred2 = model.decode(LatentBatch(Tensor(tokens), None, None), index)
    changed = np.flatnonzero(np.abs(pred2.data - pred.data).max(axis=-1)[0] > 1e-7)
    assert changed.tolist() == [int(index[0, 1])]


def test_decode_rejects_bad_index():
    model = MAE(ModelConfig(), seed=0)
    latent = model.encode(Tensor(np.zeros((1, 4, 64), np.float32)))
    with pytest.raises(ShapeError):
        model.decode(latent, np.zeros((1, 3), np.int64))


def test_masked_inputs_zero_masked_patches(rng):
    images = rng.random((2, 1, 32, 32)).astype(np.float32)
    masks = np.stack([gen_orthogonal(16, 4, seed=s).masks for s in range(2)])
    x = masked_inputs(images, masks, 8)
    assert x.shape == (4, 2, 1024)
    np.testing.assert_allclose(x.sum(axis=0), images.reshape(2, -1), rtol=1e-6)  # complete masks tile the image
    per_patch = patchify(x[1].reshape(2, 1, 32, 32), 8)
    assert not per_patch[masks[:, 1] == 1].any()


# ------------------------------------------------------ approximation net
def test_approx_shapes_and_sigma_floor(rng):
    net = ApproxNet(1024, 32, 64, sigma_floor=1e-4, seed=0)
    for blk in (net.sig3,):
        blk.bias.data[:] = -50.0  # force the ReLU branch to zero
    post = approx_forward(net, rng.normal(size=(10_000 // 100, 1024)) * 10)
    assert post.mu.shape == post.sigma.shape == (100, 64)
    assert (post.sigma.data >= 1e-4).all()
    post = approx_forward(ApproxNet(16, 8, 4, seed=1), rng.normal(size=(10_000, 16)) * 5)
    assert (post.sigma.data >= 1e-4 * (1 - 1e-6)).all()


def test_gaussian_log_prob_closed_forms():
    z = Tensor(np.array([[0.3]]))
    one = Tensor(np.array([[1.0]]))
    assert gaussian_log_prob(GaussianPosterior(z, one), z).item() == pytest.approx(-0.5 * math.log(2 * math.pi))
    lp = gaussian_log_prob(GaussianPosterior(Tensor([[0.3]]), one), Tensor([[1.3]])).item()
    assert lp == pytest.approx(-0.5 * (1 + math.log(2 * math.pi)))


def test_gaussian_log_prob_errors():
    post = GaussianPosterior(Tensor(np.zeros((1, 2))), Tensor(np.full((1, 2), 1e-6)))
    with pytest.raises(ContractError):
        gaussian_log_prob(post, np.zeros((1, 2)), sigma_floor=1e-4)
    with pytest.raises(ShapeError):
        gaussian_log_prob(GaussianPosterior(Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2)))), np.zeros((1, 3)))


def test_gaussian_log_prob_stationary_and_concave_in_mu(rng):
    z = rng.normal(size=(1, 3))
    sigma = np.abs(rng.normal(size=(1, 3))) + 0.1
    mu = Tensor(z.copy(), requires_grad=True)
    gaussian_log_prob(GaussianPosterior(mu, Tensor(sigma)), z).sum().backward()
    np.testing.assert_allclose(mu.grad, 0.0, atol=1e-12)

    def lp(m):
        return gaussian_log_prob(GaussianPosterior(Tensor(m), Tensor(sigma)), z).item()

    for _ in range(200):
        a, b = rng.normal(size=(2, 1, 3)) * 3
        assert lp((a + b) / 2) >= (lp(a) + lp(b)) / 2 - 1e-12


def test_approx_gradient_check(rng):
    net = ApproxNet(6, 5, 3, seed=0, sigma_bias=3.0).astype(np.float64)  # keep sigma off the floor
    x = rng.normal(size=(4, 6)) * 0.5
    z = rng.normal(size=(4, 3))
    params = list(net.parameters().values())

    def f():
        return gaussian_log_prob(approx_forward(net, x), z).sum()

    for k in range(10):
        assert directional_check(f, params, rng=np.random.default_rng(k)).max_rel_err < 1e-3
    report = grad_check(lambda t: gaussian_log_prob(approx_forward(net, t[0]), z).sum(), [x])
    assert report.max_rel_err < 1e-3


def test_full_decode_gradient_check(toy_config, rng):
    model = MAE(toy_config, seed=0).astype(np.float64)
    images = rng.random((2, 1, 8, 8))
    mask = np.array([0, 1, 1, 0], np.uint8)
    target = rng.random((2, 4, 16))

    def f():
        _, pred, _ = model.forward_view(model.patch_embed(images), mask)
        d = pred - target
        return (d * d).mean()

    params = list(model.parameters().values())
    for k in range(10):
        assert directional_check(f, params, rng=np.random.default_rng(k)).max_rel_err < 1e-3


def test_every_parameter_gets_gradient(rng):
    from mimae.objectives import LossWeights
    from mimae.trainer import compute_losses, routed_objective

    model, approx = MAE(ModelConfig(), seed=0), ApproxNet(1024, 128, 64, seed=1)
    masks = np.stack([gen_orthogonal(16, 4, seed=s).masks for s in range(8)])
    parts = compute_losses(model, approx, rng.random((8, 1, 32, 32)).astype(np.float32), masks, LossWeights())
    routed_objective(parts, LossWeights(), gate_open=True)[1].backward()
    for name, p in {**model.parameters(), **{"approx." + k: v for k, v in approx.parameters().items()}}.items():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name


def test_astype_and_buffers():
    model = MAE(ModelConfig(), seed=0).astype(np.float64)
    assert all(p.dtype == np.float64 for p in model.parameters().values())
    assert model.pos_embed.dtype == np.float64
