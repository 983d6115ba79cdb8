import math
import warnings

import numpy as np
import pytest
import torch

from conftest import tiny_siren
from neurss.surface import (BeamPattern, LineGains, Reflectivity, SirenSurface,
                            eval_beam, eval_reflectivity, grad_xy, height,
                            load_checkpoint, param_gradients, pretrain_to_grid,
                            save_checkpoint, surface_normal)


def numpy_forward(net: SirenSurface, xy: np.ndarray) -> np.ndarray:
    """Independent duplicate of the network forward pass in plain numpy."""
    z = (xy - net.in_center.numpy()) / net.in_half.numpy()
    z = np.clip(z, -1.0, 1.0)
    for layer in net.sine_layers:
        W = layer.weight.detach().numpy()
        b = layer.bias.detach().numpy()
        z = np.sin(net.omega0 * (z @ W.T + b))
    W = net.final.weight.detach().numpy()
    b = net.final.bias.detach().numpy()
    out = (z @ W.T + b).squeeze(-1)
    return out * float(net.out_half) + float(net.out_mid)


def test_forward_matches_numpy_oracle():
    net = tiny_siren(seed=3)
    xy = np.random.default_rng(0).uniform(-35, 35, size=(64, 2))
    with torch.no_grad():
        ours = net.height(torch.tensor(xy)).numpy()
    assert np.allclose(ours, numpy_forward(net, xy), atol=1e-12)


def test_init_weight_ranges():
    torch.manual_seed(0)
    net = SirenSurface(n_layers=4, hidden=64, omega0=30.0)
    first = net.sine_layers[0]
    assert float(first.weight.detach().abs().max()) <= 1.0 / first.weight.shape[1]
    for layer in list(net.sine_layers[1:]) + [net.final]:
        bound = math.sqrt(6.0 / layer.weight.shape[1]) / 30.0
        assert float(layer.weight.detach().abs().max()) <= bound


def test_spatial_gradient_matches_finite_differences():
    net = tiny_siren(seed=1)
    rng = np.random.default_rng(2)
    xy = rng.uniform(-30, 30, size=(32, 2))
    with torch.no_grad():
        _, g = net.height_and_grad(torch.tensor(xy))
    eps = 1e-6
    for j in range(2):
        step = np.zeros(2)
        step[j] = eps
        with torch.no_grad():
            hp = net.height(torch.tensor(xy + step))
            hm = net.height(torch.tensor(xy - step))
        fd = (hp - hm).numpy() / (2 * eps)
        assert np.allclose(g[:, j].numpy(), fd, atol=1e-5)


def test_gradient_differentiable_wrt_parameters():
    net = tiny_siren(seed=2)
    xy = torch.tensor([[3.0, -4.0], [10.0, 5.0]])
    _, g = net.height_and_grad(xy)
    loss = (g ** 2).sum()
    loss.backward()
    grads = [p.grad for p in net.parameters() if p.grad is not None]
    assert grads, "no parameter received a gradient"
    total = sum(float(g.abs().sum()) for g in grads)
    assert np.isfinite(total) and total > 0


def test_out_of_domain_clamp_warns_once():
    net = tiny_siren(seed=0, extent=10.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        net.height(torch.tensor([[500.0, 0.0]]))
        net.height(torch.tensor([[500.0, 0.0]]))
    msgs = [w for w in caught if "clamp" in str(w.message)]
    assert len(msgs) == 1
    # clamped query equals the boundary query
    a = height(net, 500.0, 0.0)
    b = height(net, 10.0, 0.0)
    assert math.isclose(a, b, abs_tol=1e-12)


def test_non_finite_query_rejected():
    net = tiny_siren()
    with pytest.raises(ValueError):
        net.height(torch.tensor([[np.nan, 0.0]]))


def test_surface_normal_is_unit_upward():
    net = tiny_siren(seed=5)
    n = surface_normal(net, 2.0, 3.0)
    assert math.isclose(np.linalg.norm(n), 1.0, abs_tol=1e-12)
    assert n[2] > 0


def test_beam_pattern_positive_and_baseline():
    bp = BeamPattern(0.0, 1.5)
    phis = torch.linspace(0.0, 1.5, 20)
    with torch.no_grad():
        v = bp(phis)
    assert (v > 0).all()
    # zero weights -> softplus(0) everywhere
    assert np.allclose(v.numpy(), math.log(2.0))
    assert math.isclose(eval_beam(bp, 0.7), math.log(2.0))


def test_reflectivity_positive():
    r = Reflectivity((-10.0, 10.0), (-10.0, 10.0), n_x=8, n_y=8)
    with torch.no_grad():
        r.weights.uniform_(-3.0, 3.0)
    v = eval_reflectivity(r, np.linspace(-9, 9, 13), np.linspace(-9, 9, 13))
    assert (v > 0).all()


def test_line_gains_lookup():
    g = LineGains(4)
    with torch.no_grad():
        g.gains.copy_(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    out = g(torch.tensor([2, 0, 2]))
    assert np.allclose(out.detach().numpy(), [3.0, 1.0, 3.0])


def test_param_gradients_match_autograd_and_validate():
    net = tiny_siren(seed=7)
    bp = BeamPattern(0.0, 1.5, n_kernels=4)
    xy = torch.tensor([[1.0, 2.0]])
    t1 = net.height(xy).sum()
    t2 = bp(torch.tensor([0.3])).sum()
    grads = param_gradients({"surface": net, "beam": bp}, [t1, t2])
    assert "beam.weights" in grads
    assert all(torch.isfinite(g).all() for g in grads.values())
    with pytest.raises(ValueError, match="index 1"):
        param_gradients({"surface": net},
                        [net.height(xy).sum(), torch.tensor(float("nan"))])


def test_pretrain_fits_plane():
    net = tiny_siren(seed=4, hidden=32, n_layers=3, extent=20.0)
    xs = np.linspace(-15, 15, 24)
    gx, gy = np.meshgrid(xs, xs)
    grid = -12.0 + 0.05 * gx
    net.set_domain((-20, 20), (-20, 20), (grid.min() - 2, grid.max() + 2))
    pretrain_to_grid(net, grid, float(xs[0]), float(xs[0]),
                     float(xs[1] - xs[0]), epochs=150, lr=1e-3, seed=0)
    probe = np.random.default_rng(1).uniform(-14, 14, size=(50, 2))
    with torch.no_grad():
        pred = net.height(torch.tensor(probe)).numpy()
    truth = -12.0 + 0.05 * probe[:, 0]
    assert np.abs(pred - truth).mean() < 0.2


def test_checkpoint_roundtrip(tmp_path):
    net = tiny_siren(seed=9, hidden=24, n_layers=4)
    bp = BeamPattern(0.0, 1.5, n_kernels=6)
    refl = Reflectivity((-5.0, 5.0), (-8.0, 8.0), n_x=4, n_y=5)
    gains = LineGains(3)
    with torch.no_grad():
        bp.weights.uniform_(-1, 1)
        refl.weights.uniform_(-1, 1)
        gains.gains.uniform_(0.5, 1.5)
    path = tmp_path / "surf.nrss"
    save_checkpoint(path, net, bp, refl, gains)
    net2, bp2, refl2, gains2 = load_checkpoint(path)
    xy = np.random.default_rng(0).uniform(-20, 20, (16, 2))
    with torch.no_grad():
        a = net.height(torch.tensor(xy)).numpy()
        b = net2.height(torch.tensor(xy)).numpy()
    # weights go through f32 serialization
    assert np.allclose(a, b, atol=1e-4)
    assert np.allclose(eval_beam(bp2, np.array([0.2, 1.0])),
                       eval_beam(bp, np.array([0.2, 1.0])), atol=1e-5)
    assert np.allclose(gains2.gains.detach().numpy(),
                       gains.gains.detach().numpy(), atol=1e-6)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.nrss"
    path.write_bytes(b"JUNKxxxx")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
