import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from rcnf.distributions import DiagGaussian, UniformSphere, WrappedNormal
from rcnf.evaluation import ball_polar_grid, normalization, sphere_grid
from rcnf.geometry import PoincareBall, Sphere
from rcnf.netfield import FieldConfig
from rcnf.projected import (
    NaiveModel,
    StereographicModel,
    WrappedModel,
    build_model,
    model_log_prob,
    stereographic_inv,
    stereographic_logdet,
    stereographic_proj,
    wrapped_inv,
    wrapped_model_logdet,
    wrapped_proj,
)

D = torch.float64
SMALL = FieldConfig(hidden_sizes=(8, 8))


def _t(x):
    return torch.tensor(x, dtype=D)


def _zero(model):
    with torch.no_grad():
        model.field.output.weight.zero_()
        model.field.output.bias.zero_()
    return model


def _fd_jac(f, y, h=1e-6):
    cols = []
    for j in range(y.shape[-1]):
        dy = torch.zeros_like(y)
        dy[j] = h
        cols.append((f(y + dy) - f(y - dy)) / (2 * h))
    return torch.stack(cols, -1)


def test_stereographic_examples():
    assert torch.equal(stereographic_proj(_t([[1.0, 0.0, 0.0]])), _t([[0.0, 0.0]]))
    assert torch.equal(stereographic_proj(_t([[0.0, 1.0, 0.0]])), _t([[1.0, 0.0]]))
    assert torch.allclose(stereographic_inv(_t([[1.0, 0.0]])), _t([[0.0, 1.0, 0.0]]), atol=1e-12)


def test_stereographic_antipode_error():
    with pytest.raises(ValueError):
        stereographic_proj(_t([[-1.0, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        stereographic_proj(_t([[-1.0, 5e-13, 0.0]]))


def test_stereographic_round_trip():
    S = Sphere(2)
    z = UniformSphere(S).sample(10_000, torch.Generator().manual_seed(0))
    z = z[(z - _t([-1.0, 0, 0])).norm(dim=-1) > 1e-6]
    assert float((stereographic_inv(stereographic_proj(z)) - z).abs().max()) <= 1e-9
    y = torch.randn(10_000, 2, dtype=D, generator=torch.Generator().manual_seed(1)) * 3
    back = stereographic_proj(stereographic_inv(y))
    assert float(((back - y).abs() / (1 + y.abs())).max()) <= 1e-9
    assert float((stereographic_inv(y).norm(dim=-1) - 1).abs().max()) <= 1e-12


@pytest.mark.parametrize("K", [1.0, 4.0])
@pytest.mark.parametrize("y", [[0.0, 0.0], [0.7, -0.2], [-3.0, 1.5]])
def test_stereographic_logdet_vs_frame_oracle(K, y):
    y = _t(y)
    J = _fd_jac(lambda u: stereographic_inv(u[None], K)[0], y)
    # volume change of an embedding: sqrt det(J^T J)
    ref = 0.5 * float(torch.linalg.slogdet(J.T @ J)[1])
    got = float(stereographic_logdet(y[None], K))
    assert got == pytest.approx(ref, rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("v", [[0.0, 0.0], [0.4, 0.3], [-2.0, 1.0]])
def test_wrapped_logdet_vs_fd(v):
    B = PoincareBall(2)
    v = _t(v)
    J = _fd_jac(lambda u: wrapped_proj(u[None])[0], v)
    z = wrapped_proj(v[None])
    ref = float(torch.linalg.slogdet(J)[1]) + 2 * math.log(float(B.conformal_factor(z)))
    assert float(wrapped_model_logdet(v[None])) == pytest.approx(ref, rel=1e-5, abs=1e-8)


def test_wrapped_maps_are_inverse():
    u = torch.randn(10_000, 2, dtype=D, generator=torch.Generator().manual_seed(2)) * 2
    assert float((wrapped_inv(wrapped_proj(u)) - u).abs().max()) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.0, 2 * math.pi), st.floats(0.0, 2 * math.pi))
def test_logdets_are_radial(r, a, b):
    ya = _t([[r * math.cos(a), r * math.sin(a)]])
    yb = _t([[r * math.cos(b), r * math.sin(b)]])
    assert float(stereographic_logdet(ya)) == pytest.approx(float(stereographic_logdet(yb)), abs=1e-12)
    assert float(wrapped_model_logdet(ya)) == pytest.approx(float(wrapped_model_logdet(yb)), abs=1e-12)


def test_pushforward_gaussians_normalize():
    g = DiagGaussian.standard(2)
    _, z, w = sphere_grid(Sphere(2), 200, 400)
    y = stereographic_proj(z)
    lp = g.log_prob(y) - stereographic_logdet(y)
    assert float((lp.exp() * w).sum()) == pytest.approx(1.0, abs=1e-2)
    zb, wb, _ = ball_polar_grid(PoincareBall(2), 200, 200)
    u = wrapped_inv(zb)
    lpb = g.log_prob(u) - wrapped_model_logdet(u)
    assert float((lpb.exp() * wb).sum()) == pytest.approx(1.0, abs=1e-2)


def test_zero_field_coincidences():
    B = PoincareBall(2)
    wm = _zero(build_model("wrapped", B, SMALL, seed=0))
    z = WrappedNormal.standard(B).sample(50, torch.Generator().manual_seed(3))
    assert torch.allclose(wm.log_prob(z), WrappedNormal.standard(B).log_prob(z), atol=1e-6)

    sm = _zero(build_model("stereographic", Sphere(2), SMALL, seed=0))
    mu0 = _t([[1.0, 0.0, 0.0]])
    # density of the pushforward is base density divided by the volume change
    ref = DiagGaussian.standard(2).log_prob(_t([[0.0, 0.0]])) - stereographic_logdet(_t([[0.0, 0.0]]))
    assert torch.allclose(sm.log_prob(mu0), ref, atol=1e-12)

    nm = _zero(build_model("naive", B, SMALL, seed=0))
    zb = _t([[0.1, -0.3], [0.5, 0.2]])
    assert torch.allclose(nm.log_prob(zb), DiagGaussian.standard(2).log_prob(zb), atol=1e-12)


def test_naive_accounting_identity():
    B = PoincareBall(2)
    nm = build_model("naive", B, SMALL, seed=1)
    z = _t([[0.1, -0.3], [0.5, 0.2], [0.0, 0.9]])
    lp = nm.log_prob(z)
    lpv = model_log_prob(nm, z)
    # log p~ - log p = log sqrt|G|
    assert torch.allclose(lp - lpv, B.log_sqrt_det_g(z), atol=1e-14)


def test_family_preconditions():
    with pytest.raises(ValueError):
        NaiveModel(Sphere(2), None)
    with pytest.raises(ValueError):
        WrappedModel(Sphere(2), None)
    with pytest.raises(ValueError):
        StereographicModel(PoincareBall(2), None)
    with pytest.raises(ValueError):
        build_model("hyperboloid", PoincareBall(2))


@pytest.mark.parametrize("family, kind", [("riemannian", "sphere"), ("stereographic", "sphere"),
                                          ("riemannian", "ball"), ("wrapped", "ball")])
def test_proper_families_normalize(family, kind):
    M = Sphere(2) if kind == "sphere" else PoincareBall(2)
    model = build_model(family, M, FieldConfig(hidden_sizes=(16, 16)), seed=2)
    res = (100, 200) if kind == "sphere" else (100, 100)
    assert normalization(model, res) == pytest.approx(1.0, abs=1e-2)


def test_stereographic_sampling_on_sphere_and_counter():
    sm = build_model("stereographic", Sphere(2), SMALL, seed=0)
    z, lp = sm.sample(200, generator=torch.Generator().manual_seed(0))
    assert float((z.norm(dim=-1) - 1).abs().max()) <= 1e-12
    assert sm.n_rejected == 0
    assert torch.allclose(lp, sm.log_prob(z), atol=1e-3)
