"""Projected baselines: naive, wrapped (exp-map) and stereographic models.

Each wraps a conventional CNF on R^d. Wrapped and stereographic models push
it onto the manifold through a fixed bijection and report densities with
respect to the manifold volume measure. The naive model is the Euclidean CNF
itself (Lebesgue density); ``log_prob_volume`` applies the
p / sqrt|G| accounting that makes it comparable with the others.
"""
from __future__ import annotations

import logging
import math

import torch

from .distributions import DiagGaussian, UniformSphere, WrappedNormal
from .flow import RiemannianCNF
from .geometry import DTYPE, Euclidean, Manifold, PoincareBall, Sphere, as_tensor
from .netfield import FieldConfig, VectorField

log = logging.getLogger(__name__)

FAMILIES = ("riemannian", "naive", "wrapped", "stereographic")

# samples closer than this to the projection point are redrawn
STEREO_REJECT = 1e-6


# ---------------------------------------------------------------------------
# Stereographic projection from -mu0, mu0 = (R, 0, ..., 0)
# ---------------------------------------------------------------------------

def stereographic_proj(z, K: float = 1.0):
    """rho(z) = z[1:] / (1 + z[0]) on the unit sphere (rescaled for radius 1/sqrt(K))."""
    u = as_tensor(z) * math.sqrt(K)
    den = 1 + u[..., 0]
    south = torch.zeros_like(u)
    south[..., 0] = -1.0
    if (torch.linalg.vector_norm(u - south, dim=-1) < 1e-12).any():
        raise ValueError("stereographic projection undefined at the projection point -mu0")
    return u[..., 1:] / den[..., None]


def stereographic_inv(y, K: float = 1.0):
    y = as_tensor(y)
    n2 = (y * y).sum(-1, keepdim=True)
    u = torch.cat([(1 - n2) / (1 + n2), 2 * y / (1 + n2)], -1)
    return u / math.sqrt(K)


def stereographic_logdet(y, K: float = 1.0):
    """log |det D rho^{-1}(y)| from Lebesgue on R^d to the sphere volume measure (conformal map)."""
    y = as_tensor(y)
    d = y.shape[-1]
    n2 = (y * y).sum(-1)
    return d * (math.log(2.0) - torch.log1p(n2) - 0.5 * math.log(K))


# ---------------------------------------------------------------------------
# Exp-map projection at the origin of the ball, orthonormal tangent coordinates
# ---------------------------------------------------------------------------

def wrapped_proj(u, K: float = -1.0):
    """exp_0(u / lambda_0): orthonormal T_0 coordinates to the ball."""
    u = as_tensor(u)
    s = math.sqrt(-K)
    r = (u * u).sum(-1, keepdim=True).clamp_min(1e-30).sqrt()
    return torch.tanh(s * r / 2) / (s * r) * u


def wrapped_inv(z, K: float = -1.0):
    z = as_tensor(z)
    s = math.sqrt(-K)
    r = (z * z).sum(-1, keepdim=True).clamp_min(1e-30).sqrt()
    return 2 * torch.atanh((s * r).clamp_max(1 - 1e-15)) / (s * r) * z


def wrapped_model_logdet(v, K: float = -1.0):
    """log |det D exp_0(. / lambda_0)| at v, w.r.t. the ball volume measure."""
    v = as_tensor(v)
    d = v.shape[-1]
    s = math.sqrt(-K)
    sr = (s * torch.linalg.vector_norm(v, dim=-1)).clamp_min(1e-15)
    return (d - 1) * torch.log(torch.sinh(sr) / sr)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class _ProjectedModel:
    family = ""

    def __init__(self, manifold: Manifold, field):
        self.manifold = manifold
        self.field = field
        self.flow = RiemannianCNF(Euclidean(manifold.dim), field, DiagGaussian.standard(manifold.dim))

    def parameters(self):
        return self.flow.parameters()

    # subclasses define the chart: to_plane, from_plane, logdet (of from_plane at y)
    def log_prob(self, z, solver=None, div=None, generator=None, train=False, return_result=False):
        y = self.to_plane(z)
        lp, res = self.flow.log_prob(y, solver, div, generator, train=train, return_result=True)
        lp = lp - self.logdet(y)
        return (lp, res) if return_result else lp

    def rsample(self, n, solver=None, div=None, generator=None, train=False, return_result=False):
        y, lp, res = self.flow.rsample(n, solver, div, generator, train=train, return_result=True)
        z = self.from_plane(y)
        lp = lp - self.logdet(y)
        return (z, lp, res) if return_result else (z, lp)

    def sample(self, n, solver=None, div=None, generator=None):
        z, lp = self.rsample(n, solver, div, generator)
        return z.detach(), lp.detach()


class WrappedModel(_ProjectedModel):
    """(exp_0 o phi)_# N(0, I) on the Poincare ball."""

    family = "wrapped"

    def __init__(self, manifold: Manifold, field):
        if not isinstance(manifold, PoincareBall):
            raise ValueError("wrapped model needs a globally bijective exp map (Poincare ball only)")
        super().__init__(manifold, field)

    def to_plane(self, z):
        return wrapped_inv(z, self.manifold.curvature)

    def from_plane(self, y):
        return wrapped_proj(y, self.manifold.curvature)

    def logdet(self, y):
        return wrapped_model_logdet(y, self.manifold.curvature)


class StereographicModel(_ProjectedModel):
    """(rho^{-1} o phi)_# N(0, I) on the sphere."""

    family = "stereographic"

    def __init__(self, manifold: Manifold, field):
        if not isinstance(manifold, Sphere):
            raise ValueError("stereographic model is defined on the sphere only")
        super().__init__(manifold, field)
        self.n_rejected = 0

    def to_plane(self, z):
        return stereographic_proj(z, self.manifold.curvature)

    def from_plane(self, y):
        return stereographic_inv(y, self.manifold.curvature)

    def logdet(self, y):
        return stereographic_logdet(y, self.manifold.curvature)

    def _near_pole(self, z):
        south = -self.manifold.origin()
        return torch.linalg.vector_norm(z.detach() - south, dim=-1) < STEREO_REJECT

    def rsample(self, n, solver=None, div=None, generator=None, train=False, return_result=False):
        z, lp, res = super().rsample(n, solver, div, generator, train=train, return_result=True)
        bad = self._near_pole(z)
        while bad.any():
            m = int(bad.sum())
            self.n_rejected += m
            log.info("stereographic: redrawing %d samples near the projection point", m)
            z2, lp2, _ = super().rsample(m, solver, div, generator, train=train, return_result=True)
            z = z.clone()
            lp = lp.clone()
            z[bad] = z2
            lp[bad] = lp2
            bad = self._near_pole(z)
        return (z, lp, res) if return_result else (z, lp)


class NaiveModel(_ProjectedModel):
    """Euclidean CNF applied to the ball's Cartesian coordinates with no geometric accounting."""

    family = "naive"

    def __init__(self, manifold: Manifold, field):
        if isinstance(manifold, Sphere):
            raise ValueError("naive model is misspecified on the sphere (different ambient dimension)")
        super().__init__(manifold, field)

    def to_plane(self, z):
        return as_tensor(z)

    def from_plane(self, y):
        return y

    def logdet(self, y):
        return torch.zeros(y.shape[:-1], dtype=DTYPE)

    def log_prob_volume(self, z, solver=None, div=None, generator=None, train=False):
        """Lebesgue density turned into a density against dVol: log p - log sqrt|G(z)|."""
        z = as_tensor(z)
        lp = self.log_prob(z, solver, div, generator, train=train)
        return lp - self.manifold.log_sqrt_det_g(self.manifold.to_local(z))


def riemannian_base(manifold: Manifold):
    if isinstance(manifold, Sphere):
        return UniformSphere(manifold)
    if isinstance(manifold, PoincareBall):
        return WrappedNormal.standard(manifold)
    return DiagGaussian.standard(manifold.dim)


def build_model(family: str, manifold: Manifold, cfg: FieldConfig | None = None, seed: int = 0):
    """Construct a model of the given family with a freshly initialised field."""
    family = family.lower()
    cfg = cfg or FieldConfig()
    if family == "riemannian":
        field = VectorField(manifold, cfg, seed=seed)
        return RiemannianCNF(manifold, field, riemannian_base(manifold))
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    euc_cfg = FieldConfig(**{**cfg.to_dict(), "input_layer": "linear"})
    field = VectorField(Euclidean(manifold.dim), euc_cfg, seed=seed)
    cls = {"naive": NaiveModel, "wrapped": WrappedModel, "stereographic": StereographicModel}[family]
    return cls(manifold, field)


def model_log_prob(model, z, solver=None, div=None, generator=None, train=False):
    """Log-density w.r.t. the manifold volume measure, for any family."""
    if isinstance(model, NaiveModel):
        return model.log_prob_volume(z, solver, div, generator, train=train)
    return model.log_prob(z, solver, div, generator, train=train)


def model_sample(model, n, solver=None, div=None, generator=None):
    return model.sample(n, solver, div, generator)
