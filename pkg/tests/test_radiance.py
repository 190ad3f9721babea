import numpy as np
import pytest
import torch
import torch.nn.functional as F

from handfield.deformation import CanonicalBox
from handfield.mathcore import FrustumGaussian, integrated_positional_encoding, positional_encoding
from handfield.radiance import NOVEL, CanonicalField, FieldConfig

BOX = CanonicalBox(-np.ones(3), np.ones(3))


def _field(cfg=None, frames=(0, 1, 2), dtype=torch.float64, seed=0):
    return CanonicalField(cfg or FieldConfig(), list(frames), BOX, dtype, seed)


def _gaussians(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        A = rng.normal(0, 0.05, (3, 3))
        out.append(FrustumGaussian(rng.uniform(-1, 1, 3), A @ A.T, 1.0, 1.1))
    return out


def test_density_nonnegative_and_deterministic():
    fld = _field()
    gs = _gaussians(1000)
    s1, f1 = fld.query_density(gs)
    s2, f2 = fld.query_density(gs)
    assert torch.all(s1 >= 0)
    assert torch.equal(s1, s2) and torch.equal(f1, f2)
    assert f1.shape == (1000, 128)


def test_tiny_density_by_hand():
    cfg = FieldConfig(pos_degree=1, width=2, depth=1, skip=0)
    fld = _field(cfg)
    W = np.array([[0.5, -0.2], [0.1, 0.3], [-0.4, 0.2], [0.2, 0.2], [0.3, -0.1], [0.0, 0.4]])
    with torch.no_grad():
        fld.density_store["density.0.weight"].copy_(torch.as_tensor(W))
        fld.density_store["density.0.bias"].copy_(torch.tensor([0.1, -0.1], dtype=torch.float64))
        fld.density_store["sigma.0.weight"].copy_(torch.tensor([[1.5], [-0.7]], dtype=torch.float64))
        fld.density_store["sigma.0.bias"].copy_(torch.tensor([0.2], dtype=torch.float64))
    g = FrustumGaussian(np.array([0.3, -0.2, 0.5]), np.diag([0.01, 0.02, 0.03]), 1.0, 1.1)
    sigma, _ = fld.query_density(g)
    m = BOX.normalize(g.mean)
    v = BOX.normalize_var(np.diag(g.cov))
    enc = np.concatenate([np.sin(m) * np.exp(-v / 2), np.cos(m) * np.exp(-v / 2)])
    h = np.maximum(enc @ W + [0.1, -0.1], 0)
    expected = np.log1p(np.exp(h @ [1.5, -0.7] + 0.2))
    assert sigma.item() == pytest.approx(expected, abs=1e-12)
    assert np.allclose(enc, integrated_positional_encoding(m, v, 1))


def test_tiny_color_by_hand():
    cfg = FieldConfig(dir_degree=1, width=2, depth=1, skip=0, color_width=2, color_depth=1, latent_dim=1, feature_dim=1)
    fld = _field(cfg, frames=(7,))
    n_in = 6 + 2 + 1
    W = np.linspace(-0.5, 0.5, n_in * 2).reshape(n_in, 2)
    with torch.no_grad():
        fld.color_store["color.0.weight"].copy_(torch.as_tensor(W))
        fld.color_store["color.0.bias"].zero_()
        fld.color_store["rgb.0.weight"].copy_(torch.tensor([[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]], dtype=torch.float64))
        fld.color_store["rgb.0.bias"].copy_(torch.tensor([0.0, -0.5, 0.1], dtype=torch.float64))
        fld.latent_store["latent"].fill_(0.3)
    d = np.array([0.0, 0.6, 0.8])
    f_sigma = torch.tensor([0.4, -0.2], dtype=torch.float64)
    c, _ = fld.query_color(d, f_sigma, 7)
    inp = np.concatenate([np.sin(d), np.cos(d), [0.4, -0.2], [0.3]])
    h = np.maximum(inp @ W, 0)
    expected = 1 / (1 + np.exp(-(h @ np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]]) + [0.0, -0.5, 0.1])))
    assert np.allclose(c.detach().numpy(), expected, atol=1e-12)
    assert np.allclose(positional_encoding(d, 1), inp[:6])


def test_color_in_unit_range():
    fld = _field()
    rng = np.random.default_rng(1)
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    f = torch.as_tensor(rng.normal(0, 3, (1000, 128)))
    c, feat = fld.query_color(d, f, 1)
    assert torch.all((c >= 0) & (c <= 1))
    assert feat.shape == (1000, 16)


def test_density_ignores_view_direction():
    """The density path has no direction input at all; rendering from two directions shares it."""
    fld = _field()
    gs = _gaussians(50, 3)
    s, f = fld.query_density(gs)
    for d in ([1.0, 0, 0], [0, 0, -1.0]):
        fld.query_color(np.tile(d, (50, 1)), f, 0)
        s2, f2 = fld.query_density(gs)
        assert torch.equal(s, s2) and torch.equal(f, f2)


def test_density_ignores_latent():
    fld = _field()
    gs = _gaussians(20, 4)
    s, _ = fld.query_density(gs)
    with torch.no_grad():
        fld.latent_store["latent"].normal_()
    assert torch.equal(s, fld.query_density(gs)[0])


def test_novel_latent_is_mean_and_logged():
    fld = _field()
    fld.latent_reads.clear()
    assert torch.allclose(fld.latent(NOVEL), fld.latent_store["latent"].mean(0))
    assert torch.allclose(fld.latent(None), fld.latent_store["latent"].mean(0))
    assert fld.latent_reads == [NOVEL, NOVEL]
    fld.latent(2)
    assert fld.latent_reads[-1] == 2
    with pytest.raises(KeyError):
        fld.latent(99)


def test_duplicate_frames_rejected():
    with pytest.raises(ValueError):
        _field(frames=(0, 0))


def test_softplus_sigma_bias_sets_initial_density():
    fld = _field(FieldConfig(sigma_bias=2.0))
    with torch.no_grad():
        fld.density_store["sigma.0.weight"].zero_()
    s, _ = fld.query_density(_gaussians(3))
    assert torch.allclose(s, F.softplus(torch.tensor(2.0, dtype=torch.float64)).expand(3))


def test_latent_sensitivity_after_training(tiny_scene):
    from handfield.train import TrainConfig, restore, train

    ckpt, _ = train(tiny_scene, TrainConfig(iterations=30, seed=0, weights={"distill": 0.0}))
    fld = restore(ckpt).field
    gs = _gaussians(200, 5)
    with torch.no_grad():
        _, f = fld.query_density(gs)
        d = np.tile([0.0, 0.0, 1.0], (200, 1))
        c0, _ = fld.query_color(d, f, 0)
        c1, _ = fld.query_color(d, f, 1)
    assert (c0 - c1).abs().max().item() > 1e-4
