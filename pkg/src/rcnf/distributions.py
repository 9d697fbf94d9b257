"""Base and target distributions with exact sampling and log-densities.

Every ``log_prob`` is with respect to the Riemannian volume measure of the
distribution's manifold (Lebesgue measure for Euclidean space).
"""
from __future__ import annotations

import math

import torch

from .geometry import DTYPE, Euclidean, PoincareBall, Sphere, as_tensor

LOG_2PI = math.log(2 * math.pi)


def _log_sinh(k: torch.Tensor) -> torch.Tensor:
    # log sinh(k) = k + log(1 - exp(-2k)) - log 2, stable for large k
    return k + torch.log(-torch.expm1(-2 * k)) - math.log(2)


class DiagGaussian:
    """Gaussian on R^d with diagonal standard deviations."""

    def __init__(self, mean, std):
        self.mean = as_tensor(mean)
        self.std = as_tensor(std)
        if (self.std <= 0).any():
            raise ValueError("standard deviations must be positive")
        self.manifold = Euclidean(self.mean.shape[-1])

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(torch.zeros(dim, dtype=DTYPE), torch.ones(dim, dtype=DTYPE))

    def sample(self, n: int, generator=None):
        eps = torch.randn(n, self.mean.shape[-1], dtype=DTYPE, generator=generator)
        return self.mean + self.std * eps

    def log_prob(self, z):
        z = as_tensor(z)
        u = (z - self.mean) / self.std
        d = self.mean.shape[-1]
        return -0.5 * (u * u).sum(-1) - torch.log(self.std).sum() - 0.5 * d * LOG_2PI


class UniformSphere:
    def __init__(self, manifold: Sphere):
        self.manifold = manifold

    def sample(self, n: int, generator=None):
        g = torch.randn(n, self.manifold.ambient_dim, dtype=DTYPE, generator=generator)
        return self.manifold.project(g)

    def log_prob(self, z):
        z = as_tensor(z)
        return torch.full(z.shape[:-1], -math.log(self.manifold.volume), dtype=DTYPE)


class WrappedNormal:
    """Wrapped Gaussian on the Poincare ball.

    v ~ N(0, cov) in orthonormal coordinates of T_0, transported to T_mu and
    pushed through exp_mu. With mu = 0 and cov = I this is the standard
    wrapped normal exp_0(v / lambda_0).
    """

    def __init__(self, manifold: PoincareBall, mu, cov):
        self.manifold = manifold
        self.mu = as_tensor(mu)
        cov = as_tensor(cov)
        if cov.dim() == 1:
            cov = torch.diag(cov)
        if not torch.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        self.cov = cov
        self.chol = torch.linalg.cholesky(cov)  # raises if not positive definite
        self._prec_logdet = 2 * torch.log(torch.diagonal(self.chol)).sum()

    @classmethod
    def standard(cls, manifold: PoincareBall) -> "WrappedNormal":
        d = manifold.dim
        return cls(manifold, torch.zeros(d, dtype=DTYPE), torch.eye(d, dtype=DTYPE))

    def tangent_to_point(self, v):
        """Map orthonormal T_0 coordinates to the ball: exp_mu(transport(v / lambda_0))."""
        m = self.manifold
        u = m.transport_from_origin(self.mu, v / 2.0)
        return m.exp_map(self.mu.expand_as(u), u)

    def point_to_tangent(self, z):
        m = self.manifold
        u = m.log_map(self.mu.expand_as(z), z)
        return m.conformal_factor(self.mu) * u

    def sample(self, n: int, generator=None):
        d = self.mu.shape[-1]
        eps = torch.randn(n, d, dtype=DTYPE, generator=generator)
        return self.tangent_to_point(eps @ self.chol.T)

    def log_jacobian(self, r):
        """log |det D exp| w.r.t. dVol at Riemannian radius r (orthonormal tangent coords)."""
        s = math.sqrt(-self.manifold.curvature)
        sr = (s * r).clamp_min(1e-15)
        return (self.manifold.dim - 1) * (torch.log(torch.sinh(sr) / sr))

    def log_prob(self, z):
        z = as_tensor(z)
        v = self.point_to_tangent(z)
        d = v.shape[-1]
        sol = torch.linalg.solve_triangular(self.chol, v.unsqueeze(-1), upper=False).squeeze(-1)
        lp = -0.5 * (sol * sol).sum(-1) - 0.5 * self._prec_logdet - 0.5 * d * LOG_2PI
        r = torch.linalg.vector_norm(v, dim=-1)
        return lp - self.log_jacobian(r)


class VonMisesFisher:
    """vMF(mu, kappa) on the unit 2-sphere: density kappa exp(kappa <mu, z>) / (4 pi sinh kappa)."""

    def __init__(self, mu, kappa):
        self.mu = as_tensor(mu)
        self.kappa = as_tensor(kappa)
        if self.mu.shape[-1] != 3:
            raise ValueError("closed-form vMF is implemented for S^2 only")
        if abs(float(self.mu.norm()) - 1) > 1e-9:
            raise ValueError("mu must be a unit vector")
        if float(self.kappa) < 0:
            raise ValueError("kappa must be nonnegative")
        self.manifold = Sphere(2)

    def log_normalizer(self):
        """log C(kappa), density = C exp(kappa t)."""
        k = self.kappa
        if float(k) < 1e-8:
            return torch.tensor(-math.log(4 * math.pi), dtype=DTYPE)
        return torch.log(k) - math.log(2 * math.pi) - _log_sinh(k) - math.log(2)

    def log_prob(self, z):
        z = as_tensor(z)
        return self.kappa * (z @ self.mu) + self.log_normalizer()

    def sample(self, n: int, generator=None):
        u = torch.rand(n, dtype=DTYPE, generator=generator)
        psi = 2 * math.pi * torch.rand(n, dtype=DTYPE, generator=generator)
        k = float(self.kappa)
        if k < 1e-8:
            t = 2 * u - 1
        else:
            # inverse CDF of the cosine, density proportional to exp(k t) on [-1, 1]
            t = 1 + torch.log1p((1 - u) * math.expm1(-2 * k)) / k
        t = t.clamp(-1.0, 1.0)
        r = torch.sqrt((1 - t * t).clamp_min(0))
        local = torch.stack([t, r * torch.cos(psi), r * torch.sin(psi)], -1)
        return _rotate_e1_to(local, self.mu)

    def entropy(self):
        k = float(self.kappa)
        if k < 1e-8:
            return math.log(4 * math.pi)
        mean_t = 1 / math.tanh(k) - 1 / k
        return -(float(self.log_normalizer()) + k * mean_t)


def _rotate_e1_to(x, mu):
    """Apply the Householder reflection mapping e1 to mu."""
    e1 = torch.zeros_like(mu)
    e1[0] = 1.0
    v = e1 - mu
    vn2 = float(v @ v)
    if vn2 < 1e-24:
        return x
    return x - 2 * (x @ v)[..., None] * v / vn2


class VmfMixture:
    """Mixture of vMF components on S^2.

    Parameters are stored as free tensors (``logits``, ``log_kappa``) plus
    unit-norm locations ``mus`` so the mixture can be fitted by (Riemannian)
    gradient methods.
    """

    def __init__(self, weights, mus, kappas):
        weights = as_tensor(weights)
        if (weights <= 0).any() or abs(float(weights.sum()) - 1) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        self.logits = torch.log(weights)
        self.mus = as_tensor(mus).clone()
        self.log_kappa = torch.log(as_tensor(kappas).clamp_min(1e-12))
        self.manifold = Sphere(2)

    @classmethod
    def from_components(cls, components):
        """Build from a list of (weight, VonMisesFisher)."""
        w = [c[0] for c in components]
        mus = torch.stack([c[1].mu for c in components])
        ks = torch.stack([c[1].kappa.reshape(()) for c in components])
        return cls(w, mus, ks)

    @property
    def weights(self):
        return torch.softmax(self.logits, 0)

    @property
    def kappas(self):
        return self.log_kappa.exp()

    def parameters(self):
        return [self.logits, self.mus, self.log_kappa]

    def log_prob(self, z):
        z = as_tensor(z)
        k = self.kappas
        small = k < 1e-8
        ks = torch.where(small, torch.ones_like(k), k)
        lognorm = torch.where(small, torch.full_like(k, -math.log(4 * math.pi)),
                              torch.log(ks) - math.log(2 * math.pi) - _log_sinh(ks) - math.log(2))
        comp = k * (z @ self.mus.T) + lognorm
        return torch.logsumexp(torch.log_softmax(self.logits, 0) + comp, -1)

    def sample(self, n: int, generator=None):
        with torch.no_grad():
            idx = torch.multinomial(self.weights, n, replacement=True, generator=generator)
            out = torch.empty(n, 3, dtype=DTYPE)
            for j in range(self.mus.shape[0]):
                sel = idx == j
                m = int(sel.sum())
                if m:
                    mu = self.mus[j] / self.mus[j].norm()
                    out[sel] = VonMisesFisher(mu, self.kappas[j]).sample(m, generator)
        return out
