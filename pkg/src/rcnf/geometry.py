"""Constant-curvature manifolds: Euclidean space, Poincare ball and hypersphere.

Points are stored in Cartesian coordinates (ambient Cartesian for the sphere).
Tangent vectors are stored as ambient vectors attached to a base point.
Local (chart) coordinates are only used where a formula needs them: the
divergence of a vector field and the volume density.

All functions broadcast over leading batch dimensions and are differentiable
with torch autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import ClassVar

import torch

DTYPE = torch.float64

# Clamp distance to the ball boundary, as a fraction of the radius.
BALL_EPS = 1e-6
# sqrt(det g) below this value marks a chart singularity.
SINGULAR_TOL = 1e-12
_TINY = 1e-30


class ChartSingularityError(ValueError):
    """Local coordinates sit on (or numerically at) a chart singularity."""


class AntipodalError(ValueError):
    """Logarithm map requested between antipodal points of the sphere."""


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def _norm(v: torch.Tensor, keepdim: bool = False) -> torch.Tensor:
    # sqrt with a floor so the gradient at v = 0 stays finite
    return (v * v).sum(-1, keepdim=keepdim).clamp_min(_TINY).sqrt()


def _dot(u: torch.Tensor, v: torch.Tensor, keepdim: bool = False) -> torch.Tensor:
    return (u * v).sum(-1, keepdim=keepdim)


# ---------------------------------------------------------------------------
# Poincare ball primitives
# ---------------------------------------------------------------------------

def conformal_factor(z: torch.Tensor, K: float) -> torch.Tensor:
    """lambda_z^K = 2 / (1 + K |z|^2), shape (..., 1)."""
    return 2.0 / (1.0 + K * _dot(z, z, keepdim=True))


def mobius_add(x: torch.Tensor, y: torch.Tensor, K: float) -> torch.Tensor:
    """Mobius addition x (+)_K y in the Poincare ball of curvature K < 0."""
    xy = _dot(x, y, keepdim=True)
    x2 = _dot(x, x, keepdim=True)
    y2 = _dot(y, y, keepdim=True)
    num = (1 - 2 * K * xy - K * y2) * x + (1 + K * x2) * y
    den = 1 - 2 * K * xy + K * K * x2 * y2
    return num / den


def parallel_transport_from_origin(p: torch.Tensor, a0: torch.Tensor, K: float) -> torch.Tensor:
    """Levi-Civita transport of a0 in T_0 to T_p; it is the scaling lambda_0 / lambda_p."""
    return (1.0 + K * _dot(p, p, keepdim=True)) * a0


def parallel_transport_to_origin(p: torch.Tensor, a: torch.Tensor, K: float) -> torch.Tensor:
    return a / (1.0 + K * _dot(p, p, keepdim=True))


# ---------------------------------------------------------------------------
# Manifolds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Manifold:
    """Base class. ``dim`` is the intrinsic dimension d."""

    dim: int
    curvature: float = 0.0

    kind: ClassVar[str] = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")

    @property
    def ambient_dim(self) -> int:
        return self.dim

    # -- metric ---------------------------------------------------------------
    def inner(self, z, u, v):
        raise NotImplementedError

    def norm(self, z, v):
        return self.inner(z, v, v).clamp_min(0).sqrt()

    def sqrt_det_g(self, x):
        """Riemannian volume density dVol/dLeb at local coordinates x."""
        return self.log_sqrt_det_g(x).exp()

    def log_sqrt_det_g(self, x):
        raise NotImplementedError

    def chart_singular(self, x) -> torch.Tensor:
        return torch.zeros(as_tensor(x).shape[:-1], dtype=torch.bool)

    # -- charts -----------------------------------------------------------------
    def to_local(self, z):
        return as_tensor(z)

    def to_ambient(self, x):
        return as_tensor(x)

    def local_frame(self, x):
        """Unit-length coordinate frame at x and its scale factors.

        Returns ``(E, h)`` where ``E[..., i, :]`` is the unit ambient vector
        along the i-th coordinate direction and ``h[..., i] = sqrt(G_ii)``.
        All charts used here are orthogonal, so sqrt|G| = prod(h).
        """
        x = as_tensor(x)
        eye = torch.eye(self.dim, dtype=x.dtype).expand(*x.shape[:-1], self.dim, self.dim)
        return eye, self._scales(x)

    def _scales(self, x):
        return torch.ones_like(x)

    # -- maps -------------------------------------------------------------------
    def project(self, z):
        return as_tensor(z)

    def project_tangent(self, z, v):
        return as_tensor(v)

    def exp_map(self, z, v):
        raise NotImplementedError

    def log_map(self, z, y):
        raise NotImplementedError

    def dist(self, x, y):
        raise NotImplementedError

    def origin(self):
        return torch.zeros(self.ambient_dim, dtype=DTYPE)

    def contains(self, z, tol: float = 1e-9) -> torch.Tensor:
        raise NotImplementedError


@dataclass(frozen=True)
class Euclidean(Manifold):
    kind: ClassVar[str] = "euclidean"

    def __post_init__(self):
        super().__post_init__()
        if self.curvature != 0.0:
            raise ValueError("Euclidean space has curvature 0")

    def inner(self, z, u, v):
        return _dot(as_tensor(u), as_tensor(v))

    def log_sqrt_det_g(self, x):
        return torch.zeros(as_tensor(x).shape[:-1], dtype=DTYPE)

    def exp_map(self, z, v):
        return as_tensor(z) + as_tensor(v)

    def log_map(self, z, y):
        return as_tensor(y) - as_tensor(z)

    def dist(self, x, y):
        return torch.linalg.vector_norm(as_tensor(x) - as_tensor(y), dim=-1)

    def contains(self, z, tol=1e-9):
        return torch.isfinite(as_tensor(z)).all(-1)


@dataclass(frozen=True)
class PoincareBall(Manifold):
    """Open ball of radius 1/sqrt(-K) with metric lambda_z^2 * Euclidean."""

    curvature: float = -1.0
    kind: ClassVar[str] = "ball"

    def __post_init__(self):
        super().__post_init__()
        if not self.curvature < 0:
            raise ValueError(f"Poincare ball needs K < 0, got {self.curvature}")

    @property
    def radius(self) -> float:
        return 1.0 / math.sqrt(-self.curvature)

    def conformal_factor(self, z):
        return conformal_factor(as_tensor(z), self.curvature)

    def inner(self, z, u, v):
        lam = self.conformal_factor(z)[..., 0]
        return lam ** 2 * _dot(as_tensor(u), as_tensor(v))

    def log_sqrt_det_g(self, x):
        lam = self.conformal_factor(x)[..., 0]
        return self.dim * torch.log(lam)

    def _scales(self, x):
        return self.conformal_factor(x).expand_as(x)

    def project(self, z):
        z = as_tensor(z)
        rmax = (1.0 - BALL_EPS) * self.radius
        n = _norm(z, keepdim=True)
        return torch.where(n > rmax, z * (rmax / n), z)

    def mobius_add(self, x, y):
        return mobius_add(as_tensor(x), as_tensor(y), self.curvature)

    def exp_map(self, z, v):
        z, v = as_tensor(z), as_tensor(v)
        s = math.sqrt(-self.curvature)
        vn = _norm(v, keepdim=True)
        lam = self.conformal_factor(z)
        second = torch.tanh(s * lam * vn / 2) / (s * vn) * v
        return mobius_add(z, second, self.curvature)

    def log_map(self, z, y):
        z, y = as_tensor(z), as_tensor(y)
        s = math.sqrt(-self.curvature)
        w = mobius_add(-z, y, self.curvature)
        wn = _norm(w, keepdim=True)
        lam = self.conformal_factor(z)
        return 2.0 / (s * lam) * torch.atanh((s * wn).clamp_max(1 - 1e-15)) / wn * w

    def dist(self, x, y):
        s = math.sqrt(-self.curvature)
        w = mobius_add(-as_tensor(x), as_tensor(y), self.curvature)
        wn = torch.linalg.vector_norm(w, dim=-1)
        return 2.0 / s * torch.atanh((s * wn).clamp_max(1 - 1e-15))

    def transport_from_origin(self, p, a0):
        return parallel_transport_from_origin(as_tensor(p), as_tensor(a0), self.curvature)

    def transport_to_origin(self, p, a):
        return parallel_transport_to_origin(as_tensor(p), as_tensor(a), self.curvature)

    def contains(self, z, tol=1e-9):
        z = as_tensor(z)
        return self.curvature * _dot(z, z) > -1.0


@dataclass(frozen=True)
class Sphere(Manifold):
    """Hypersphere {z in R^(d+1) : <z, z> = 1/K} with the induced metric.

    Local coordinates are n-spherical angles. For d = 2 they are the usual
    polar/azimuth pair with r(theta, phi) = (sin t cos p, sin t sin p, cos t).
    """

    curvature: float = 1.0
    kind: ClassVar[str] = "sphere"

    def __post_init__(self):
        super().__post_init__()
        if not self.curvature > 0:
            raise ValueError(f"sphere needs K > 0, got {self.curvature}")

    @property
    def radius(self) -> float:
        return 1.0 / math.sqrt(self.curvature)

    @property
    def ambient_dim(self) -> int:
        return self.dim + 1

    @property
    def volume(self) -> float:
        n = self.dim + 1
        return 2 * math.pi ** (n / 2) / math.gamma(n / 2) * self.radius ** self.dim

    def origin(self):
        o = torch.zeros(self.ambient_dim, dtype=DTYPE)
        o[0] = self.radius
        return o

    def inner(self, z, u, v):
        return _dot(as_tensor(u), as_tensor(v))

    # n-spherical chart. "u-order" is (cos p1, sin p1 cos p2, ..., prod sin);
    # the ambient order rolls the first entry to the end when d >= 2.
    def _u_to_ambient(self, u):
        return torch.roll(u, -1, dims=-1) if self.dim >= 2 else u

    def _ambient_to_u(self, z):
        return torch.roll(z, 1, dims=-1) if self.dim >= 2 else z

    def to_ambient(self, x):
        x = as_tensor(x)
        d = self.dim
        if d == 2:
            st = torch.sin(x[..., 0])
            return self.radius * torch.stack(
                [st * torch.cos(x[..., 1]), st * torch.sin(x[..., 1]), torch.cos(x[..., 0])], -1)
        parts = []
        sin_prod = torch.ones_like(x[..., 0])
        for i in range(d):
            parts.append(sin_prod * torch.cos(x[..., i]))
            sin_prod = sin_prod * torch.sin(x[..., i])
        parts.append(sin_prod)
        u = torch.stack(parts, -1)
        return self.radius * self._u_to_ambient(u)

    def to_local(self, z):
        u = self._ambient_to_u(as_tensor(z)) / self.radius
        d = self.dim
        angles = []
        for i in range(d - 1):
            tail = _norm(u[..., i + 1:])
            angles.append(torch.atan2(tail, u[..., i]))
        last = torch.atan2(u[..., d], u[..., d - 1])
        angles.append(torch.remainder(last, 2 * math.pi))
        return torch.stack(angles, -1)

    def _scales(self, x):
        scales = []
        sin_prod = torch.full_like(x[..., 0], self.radius)
        for i in range(self.dim):
            scales.append(sin_prod)
            sin_prod = sin_prod * torch.sin(x[..., i])
        return torch.stack(scales, -1)

    def local_frame(self, x):
        x = as_tensor(x)
        d = self.dim
        if d == 2:
            ct, st = torch.cos(x[..., 0]), torch.sin(x[..., 0])
            cp, sp = torch.cos(x[..., 1]), torch.sin(x[..., 1])
            e_theta = torch.stack([ct * cp, ct * sp, -st], -1)
            e_phi = torch.stack([-sp, cp, torch.zeros_like(sp)], -1)
            h = torch.stack([torch.full_like(st, self.radius), self.radius * st], -1)
            return torch.stack([e_theta, e_phi], -2), h
        rows = []
        for i in range(d):
            # unit point on the (d - i)-sphere built from the remaining angles
            tail = []
            sp = torch.ones_like(x[..., 0])
            for j in range(i + 1, d):
                tail.append(sp * torch.cos(x[..., j]))
                sp = sp * torch.sin(x[..., j])
            tail.append(sp)
            tail = torch.stack(tail, -1) * torch.cos(x[..., i:i + 1])
            zeros = torch.zeros(*x.shape[:-1], i, dtype=x.dtype)
            row = torch.cat([zeros, -torch.sin(x[..., i:i + 1]), tail], -1)
            rows.append(self._u_to_ambient(row))
        return torch.stack(rows, -2), self._scales(x)

    def log_sqrt_det_g(self, x):
        x = as_tensor(x)
        d = self.dim
        out = torch.full_like(x[..., 0], d * math.log(self.radius))
        for i in range(d - 1):
            out = out + (d - 1 - i) * torch.log(torch.sin(x[..., i]).abs())
        return out

    def sqrt_det_g(self, x):
        x = as_tensor(x)
        out = torch.full_like(x[..., 0], self.radius ** self.dim)
        for i in range(self.dim - 1):
            out = out * torch.sin(x[..., i]) ** (self.dim - 1 - i)
        return out

    def chart_singular(self, x):
        return self.sqrt_det_g(x).abs() < SINGULAR_TOL

    def project(self, z):
        z = as_tensor(z)
        n = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
        if (n == 0).any():
            raise ValueError("cannot project the zero vector onto the sphere")
        return z / (math.sqrt(self.curvature) * n)

    def project_tangent(self, z, v):
        z, v = as_tensor(z), as_tensor(v)
        return v - self.curvature * _dot(v, z, keepdim=True) * z

    def exp_map(self, z, v):
        z, v = as_tensor(z), as_tensor(v)
        s = math.sqrt(self.curvature)
        vn = _norm(v, keepdim=True)
        return torch.cos(s * vn) * z + torch.sin(s * vn) / (s * vn) * v

    def _angle(self, x, y):
        K = self.curvature
        c = K * _dot(x, y, keepdim=True)
        u = y - c * x
        sn = math.sqrt(K) * _norm(u, keepdim=True)
        return torch.atan2(sn, c), u, sn, c

    def log_map(self, z, y):
        z, y = as_tensor(z), as_tensor(y)
        ang, u, sn, c = self._angle(z, y)
        if ((sn < 1e-12) & (c < 0)).any():
            raise AntipodalError("log map undefined at the antipode of the base point")
        return ang / (math.sqrt(self.curvature) * _norm(u, keepdim=True)) * u

    def dist(self, x, y):
        ang, *_ = self._angle(as_tensor(x), as_tensor(y))
        return ang[..., 0] / math.sqrt(self.curvature)

    def transport(self, x, y, v):
        """Parallel transport of v in T_x along the minimising geodesic to y."""
        x, y, v = as_tensor(x), as_tensor(y), as_tensor(v)
        lxy = self.log_map(x, y)
        lyx = self.log_map(y, x)
        d2 = (_dot(lxy, lxy, keepdim=True)).clamp_min(_TINY)
        return v - _dot(lxy, v, keepdim=True) / d2 * (lxy + lyx)

    def contains(self, z, tol=1e-9):
        z = as_tensor(z)
        return (_dot(z, z) - 1.0 / self.curvature).abs() <= tol


def make_manifold(kind: str, dim: int, curvature: float | None = None) -> Manifold:
    """Build a manifold from its kind name ('euclidean', 'ball', 'sphere')."""
    kind = kind.lower()
    if kind in ("euclidean", "r", "rd"):
        return Euclidean(dim)
    if kind in ("ball", "poincare", "poincareball", "hyperbolic"):
        return PoincareBall(dim, -1.0 if curvature is None else curvature)
    if kind in ("sphere", "hypersphere"):
        return Sphere(dim, 1.0 if curvature is None else curvature)
    raise ValueError(f"unknown manifold kind {kind!r}")
