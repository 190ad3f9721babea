import math

import numpy as np
import pytest
import torch

from gradcheck import TOL, check_loss
from handfield.losses import (
    TERMS,
    LossWeights,
    NonFiniteLossError,
    TrainBatch,
    hard_surface_term,
    loss_color_variance,
    loss_deform,
    loss_depth,
    loss_distill,
    loss_hard_surface,
    loss_rgb,
    smooth_l1,
    total_loss,
)

f64 = torch.float64


def _batch(R=4, seed=0, **over):
    g = torch.Generator().manual_seed(seed)
    kw = dict(
        target_color=torch.rand(R, 3, generator=g, dtype=f64),
        target_depth=torch.full((R,), 2.0, dtype=f64),
        rendered_color=torch.rand(R, 3, generator=g, dtype=f64),
        rendered_depth=torch.full((R,), 2.0, dtype=f64),
        weights=torch.rand(R, 5, generator=g, dtype=f64) / 5,
        real=torch.ones(R, 5, dtype=torch.bool),
        residuals=torch.zeros(7, 3, dtype=f64),
        target_feature=torch.zeros(R, 2, dtype=f64),
        rendered_feature=torch.zeros(R, 2, dtype=f64),
    )
    kw.update(over)
    return TrainBatch(**kw)


def test_rgb_values():
    b = _batch()
    assert loss_rgb(_batch(rendered_color=b.target_color)).item() == 0.0
    one = _batch(1, target_color=torch.zeros(1, 3, dtype=f64), rendered_color=torch.tensor([[0.1, 0, 0]], dtype=f64))
    assert loss_rgb(one).item() == pytest.approx(0.01)
    doubled = _batch(8, target_color=b.target_color.repeat(2, 1), rendered_color=b.rendered_color.repeat(2, 1))
    assert loss_rgb(doubled).item() == pytest.approx(loss_rgb(b).item(), abs=1e-15)


def test_depth_values():
    beta = 0.01
    assert loss_depth(_batch()).item() == 0.0
    at = _batch(1, rendered_depth=torch.tensor([2.0 - beta], dtype=f64))
    assert loss_depth(at, beta).item() == pytest.approx(0.5 * beta, abs=1e-15)
    assert smooth_l1(torch.tensor(beta, dtype=f64), beta).item() == pytest.approx(0.5 * beta, abs=1e-15)
    two = _batch(1, rendered_depth=torch.tensor([2.0 - 2 * beta], dtype=f64))
    assert loss_depth(two, beta).item() == pytest.approx(0.015, abs=1e-12)


def test_depth_ignores_background_rays():
    b = _batch(2, target_depth=torch.tensor([2.0, np.inf], dtype=f64), rendered_depth=torch.tensor([2.0, 9.0], dtype=f64))
    assert loss_depth(b).item() == 0.0
    empty = _batch(2, target_depth=torch.full((2,), np.inf, dtype=f64))
    with pytest.warns(RuntimeWarning):
        assert loss_depth(empty).item() == 0.0


def test_distill_values():
    assert loss_distill(_batch()).item() == 0.0
    off = _batch(1, rendered_feature=torch.tensor([[0.5, 0.0]], dtype=f64), target_feature=torch.zeros(1, 2, dtype=f64))
    # mean over the ray's channels: 0.25 / 2
    assert loss_distill(off).item() == pytest.approx(0.125)
    with pytest.raises(KeyError):
        loss_distill(_batch(target_feature=None))


def test_distill_skips_rays_without_surface():
    # second ray lies in the dilated mask band: foreground, but no pseudo depth
    b = _batch(
        2,
        target_depth=torch.tensor([2.0, np.inf], dtype=f64),
        rendered_feature=torch.tensor([[0.5, 0.0], [3.0, 3.0]], dtype=f64),
        target_feature=torch.zeros(2, 2, dtype=f64),
        foreground=torch.tensor([True, True]),
    )
    assert loss_distill(b).item() == pytest.approx(0.125)


def test_distill_weight_zero_contributes_no_gradient():
    feat = torch.ones(4, 2, dtype=f64, requires_grad=True)
    color = torch.rand(4, 3, dtype=f64, requires_grad=True)
    b = _batch(rendered_color=color, rendered_feature=feat, target_feature=torch.zeros(4, 2, dtype=f64))
    total, _ = total_loss(b, LossWeights(distill=0.0))
    total.backward()
    assert feat.grad is None or torch.count_nonzero(feat.grad) == 0


def test_deform_values():
    assert loss_deform(_batch()).item() == 0.0
    assert loss_deform(_batch(residuals=torch.tensor([[3.0, 4.0, 0.0]], dtype=f64))).item() == pytest.approx(5.0)
    r = torch.randn(10, 3, dtype=f64)
    assert loss_deform(_batch(residuals=2 * r)).item() == pytest.approx(2 * loss_deform(_batch(residuals=r)).item())


def test_hard_surface_values():
    val0 = -math.log(1 + math.exp(-1))
    assert hard_surface_term(torch.tensor(0.0, dtype=f64)).item() == pytest.approx(-0.31326, abs=1e-5)
    assert hard_surface_term(torch.tensor(0.0, dtype=f64)).item() == pytest.approx(val0, abs=1e-15)
    assert hard_surface_term(torch.tensor(1.0, dtype=f64)).item() == pytest.approx(val0, abs=1e-15)
    assert hard_surface_term(torch.tensor(0.5, dtype=f64)).item() == pytest.approx(-0.19315, abs=1e-5)
    w = torch.linspace(0, 1, 1001, dtype=f64)
    vals = hard_surface_term(w)
    assert vals.argmax().item() == 500
    assert vals.min().item() == pytest.approx(val0)


def test_hard_surface_skips_padding():
    w = torch.tensor([[0.5, 0.0]], dtype=f64)
    b = _batch(1, weights=w, real=torch.tensor([[True, False]]))
    assert loss_hard_surface(b).item() == pytest.approx(-0.19315, abs=1e-5)


def test_color_variance_values():
    beta = 0.01
    b = _batch(6)
    assert loss_color_variance(_batch(6, rendered_color=b.target_color), beta).item() == 0.0
    flat = _batch(6, rendered_color=torch.full((6, 3), 0.3, dtype=f64))
    v = b.target_color.var(0, unbiased=False)
    expected = sum(smooth_l1(x, beta).item() for x in v)
    assert loss_color_variance(_batch(6, target_color=b.target_color, rendered_color=flat.rendered_color), beta).item() == pytest.approx(expected)
    perm = torch.randperm(6, generator=torch.Generator().manual_seed(0))
    shuffled = _batch(6, target_color=b.target_color[perm], rendered_color=b.rendered_color[perm])
    assert loss_color_variance(shuffled).item() == pytest.approx(loss_color_variance(b).item(), abs=1e-15)


def test_total_loss_weights():
    b = _batch(residuals=torch.randn(5, 3, dtype=f64))
    zero = LossWeights(depth=0, distill=0, deform=0, hard_surface=0, color_variance=0)
    total, parts = total_loss(b, zero)
    assert total.item() == pytest.approx(parts["rgb"])
    # affine in each weight
    for name in ("depth", "deform", "hard_surface", "color_variance", "distill"):
        one = total_loss(b, LossWeights(**{**zero.to_dict(), name: 1.0}))[0].item()
        two = total_loss(b, LossWeights(**{**zero.to_dict(), name: 2.0}))[0].item()
        assert two - one == pytest.approx(parts[name], abs=1e-12)


def test_perfect_prediction_leaves_hard_surface_floor():
    b = _batch()
    b = _batch(rendered_color=b.target_color)
    weights = LossWeights()
    total, parts = total_loss(b, weights)
    assert total.item() == pytest.approx(weights.hard_surface * loss_hard_surface(b).item(), abs=1e-15)
    assert all(parts[k] >= 0 for k in parts if k not in ("hard_surface", "total"))
    assert parts["hard_surface"] >= -math.log(1 + math.exp(-1)) - 1e-12


def test_nonfinite_loss_raises():
    b = _batch(rendered_color=torch.full((4, 3), np.nan, dtype=f64))
    with pytest.raises(NonFiniteLossError) as info:
        total_loss(b, LossWeights())
    assert "rgb" in str(info.value)


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(depth=-1.0)
    with pytest.raises(ValueError):
        LossWeights(beta=0.0)
    with pytest.raises(ValueError):
        _batch(target_color=torch.full((4, 3), np.inf, dtype=f64))


@pytest.mark.parametrize("term", TERMS)
def test_gradients_through_pipeline(two_hand_scene, term):
    worst, n = check_loss(two_hand_scene, term, seed=0)
    assert n == 20
    assert worst < TOL
