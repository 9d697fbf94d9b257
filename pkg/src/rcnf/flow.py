"""Projective Dormand-Prince integration of manifold ODEs with log-density tracking.

The augmented state is (z, dlogp) with d(dlogp)/dt = -div f(z, t). Positions
are integrated in ambient coordinates; every stage position is projected onto
the manifold before the field is evaluated and every accepted step is
projected. The divergence is computed in local coordinates with the
unit-frame formula

    div f = |G|^(-1/2) sum_i d/dx^i ( sqrt(|G| / G_ii) fhat^i ),

either exactly (d reverse sweeps) or with Hutchinson probes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field, replace

import torch

from .geometry import (
    DTYPE,
    ChartSingularityError,
    Manifold,
    Sphere,
    as_tensor,
)
from .netfield import ScaledField, unit_components

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class MaxNFEError(SolverError):
    pass


class StepUnderflowError(SolverError):
    pass


@dataclass
class SolverConfig:
    rtol: float = 1e-5
    atol: float = 1e-5
    h_init: float = 0.05
    h_min: float = 1e-6
    max_nfe: int = 10_000
    train_rtol: float | None = None
    train_atol: float | None = None
    # fixed number of equal steps (no error control); used for gradient checks
    fixed_steps: int | None = None
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not self.h_min < self.h_init:
            raise ValueError("h_min must be smaller than h_init")
        if self.fixed_steps is not None and self.fixed_steps < 1:
            raise ValueError("fixed_steps must be >= 1")

    def for_training(self) -> "SolverConfig":
        return replace(self,
                       rtol=self.train_rtol if self.train_rtol is not None else self.rtol,
                       atol=self.train_atol if self.train_atol is not None else self.atol)


@dataclass
class DivergenceMode:
    kind: str = "exact"  # or "hutchinson"
    probe_dist: str = "rademacher"  # or "gaussian"
    probes_per_eval: int = 1

    def __post_init__(self):
        if self.kind not in ("exact", "hutchinson"):
            raise ValueError(f"divergence kind must be 'exact' or 'hutchinson', got {self.kind!r}")
        if self.probe_dist not in ("rademacher", "gaussian"):
            raise ValueError(f"probe_dist must be 'rademacher' or 'gaussian', got {self.probe_dist!r}")
        if self.probes_per_eval < 1:
            raise ValueError("probes_per_eval must be >= 1")


@dataclass
class FlowResult:
    endpoint: torch.Tensor
    delta_logp: torch.Tensor
    nfe: int
    steps: list = dc_field(default_factory=list)  # accepted knots (t, z)
    n_rejected: int = 0


def sample_probes(shape, dist: str, generator=None) -> torch.Tensor:
    if dist == "rademacher":
        return torch.randint(0, 2, shape, generator=generator).to(DTYPE) * 2 - 1
    return torch.randn(shape, dtype=DTYPE, generator=generator)


# ---------------------------------------------------------------------------
# Divergence
# ---------------------------------------------------------------------------

def _weighted_components(manifold, field, x, t, chart_roll=None):
    f, fhat, h = unit_components(manifold, field, x, t, chart_roll)
    sqrtg = h.prod(-1)
    g = fhat * (sqrtg[..., None] / h)
    return f, g, sqrtg


def _exact_div(g, x, sqrtg, create_graph):
    if x.shape[-1] > 3:
        raise ValueError("exact divergence is limited to d <= 3; use the Hutchinson estimator")
    total = torch.zeros_like(sqrtg)
    if not g.requires_grad:  # field independent of position
        return total
    for i in range(x.shape[-1]):
        (gi,) = torch.autograd.grad(g[..., i].sum(), x, create_graph=create_graph,
                                    retain_graph=True, allow_unused=True)
        if gi is not None:
            total = total + gi[..., i]
    return total / sqrtg


def _hutchinson_div(g, x, sqrtg, probes, create_graph):
    # probes: (P, ..., d)
    total = torch.zeros_like(sqrtg)
    if not g.requires_grad:
        return total
    for eps in probes:
        (v,) = torch.autograd.grad(g, x, eps, create_graph=create_graph, retain_graph=True,
                                   allow_unused=True)
        if v is not None:
            total = total + (v * eps).sum(-1)
    return total / (len(probes) * sqrtg)


def divergence_exact(manifold: Manifold, field, x, t, create_graph: bool = False):
    """Exact Riemannian divergence of ``field`` at local coordinates x."""
    x = as_tensor(x)
    if manifold.chart_singular(x).any():
        raise ChartSingularityError("divergence requested at a chart singularity")
    with torch.enable_grad():
        x = x if x.requires_grad else x.detach().requires_grad_(True)
        _, g, sqrtg = _weighted_components(manifold, field, x, t)
        return _exact_div(g, x, sqrtg, create_graph)


def divergence_hutchinson(manifold: Manifold, field, x, t, mode: DivergenceMode | None = None,
                          generator=None, probes=None, create_graph: bool = False):
    """Unbiased stochastic estimate of the divergence at local coordinates x."""
    mode = mode or DivergenceMode("hutchinson")
    x = as_tensor(x)
    if manifold.chart_singular(x).any():
        raise ChartSingularityError("near-singular metric: sqrt|G| below tolerance")
    if probes is None:
        probes = sample_probes((mode.probes_per_eval, *x.shape), mode.probe_dist, generator)
    with torch.enable_grad():
        x = x if x.requires_grad else x.detach().requires_grad_(True)
        _, g, sqrtg = _weighted_components(manifold, field, x, t)
        return _hutchinson_div(g, x, sqrtg, probes, create_graph)


def _chart_for(manifold: Manifold, z):
    """Local coordinates for ambient points, switching to the rolled sphere chart near poles."""
    if not isinstance(manifold, Sphere):
        return manifold.to_local(z), None
    x_def = manifold.to_local(z)
    scale = manifold.radius ** manifold.dim
    with torch.no_grad():
        near = manifold.sqrt_det_g(x_def) / scale < 0.5
    if not near.any():
        return x_def, None
    x_rot = manifold.to_local(torch.roll(z, 1, -1))
    with torch.no_grad():
        roll = near & (manifold.sqrt_det_g(x_rot) > manifold.sqrt_det_g(x_def))
    x = torch.where(roll[..., None], x_rot, x_def)
    return x, roll


def divergence_at(manifold: Manifold, field, z, t, mode: DivergenceMode, probes=None,
                  create_graph: bool = False):
    """Field value and divergence at ambient points z (chart chosen per point)."""
    with torch.enable_grad():
        if not z.requires_grad:
            z = z.detach().requires_grad_(True)
        x, roll = _chart_for(manifold, z)
        f, g, sqrtg = _weighted_components(manifold, field, x, t, roll)
        if mode.kind == "exact":
            div = _exact_div(g, x, sqrtg, create_graph)
        else:
            div = _hutchinson_div(g, x, sqrtg, probes, create_graph)
    return f, div


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)
# ---------------------------------------------------------------------------

_C = [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0]
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = _A[6] + [0.0]
# difference between the 5th and embedded 4th order weights
_E = [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]


class _Dynamics:
    """Augmented right-hand side (f, -div) with NFE accounting."""

    def __init__(self, manifold, field, div: DivergenceMode | None, probes, create_graph, max_nfe):
        self.manifold = manifold
        self.field = field
        self.div = div
        self.probes = probes
        self.create_graph = create_graph
        self.max_nfe = max_nfe
        self.nfe = 0

    def __call__(self, t, z):
        self.nfe += 1
        if self.nfe > self.max_nfe:
            raise MaxNFEError(f"exceeded max_nfe={self.max_nfe}")
        z = self.manifold.project(z)
        if self.div is None:
            return self.field(z, t), None
        f, d = divergence_at(self.manifold, self.field, z, t, self.div, self.probes, self.create_graph)
        if not self.create_graph:
            f, d = f.detach(), d.detach()
        return f, -d


def _combine(y, ks, coeffs, h):
    out = y
    for c, k in zip(coeffs, ks):
        if c != 0.0:
            out = out + (h * c) * k
    return out


def integrate(manifold: Manifold, field, z0, direction: str = "forward", cfg: SolverConfig | None = None,
              div: DivergenceMode | None = None, generator: torch.Generator | None = None,
              with_logp: bool = True, train: bool = False, record_steps: bool = True,
              probes=None) -> FlowResult:
    """Integrate dz/dt = f(z, t) from t=0 to 1 (or the reversed flow) for a batch z0.

    ``train=True`` keeps the autograd graph through every accepted stage so a
    loss on the result can be differentiated with respect to the field
    parameters, and switches to the training tolerances.
    """
    cfg = cfg or SolverConfig()
    if train:
        cfg = cfg.for_training()
    div = div or DivergenceMode()
    if direction not in ("forward", "reverse"):
        raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")
    rhs_field = field if direction == "forward" else ScaledField(field, -1.0, reflect_at=1.0)

    z = manifold.project(as_tensor(z0))
    if not train:
        z = z.detach()
    n, d = z.shape[0], manifold.dim
    if with_logp and div.kind == "hutchinson" and probes is None:
        probes = sample_probes((div.probes_per_eval, n, d), div.probe_dist, generator)
    dyn = _Dynamics(manifold, rhs_field, div if with_logp else None, probes, train, cfg.max_nfe)
    logp = torch.zeros(n, dtype=DTYPE)

    ctx = torch.enable_grad() if train else torch.no_grad()
    steps = [(0.0, z)] if record_steps else []
    t = 0.0
    n_rej = 0
    with ctx:
        k1 = dyn(t, z)
        if cfg.fixed_steps is not None:
            h = 1.0 / cfg.fixed_steps
            for i in range(cfg.fixed_steps):
                z, logp, k1, _ = _dopri_step(dyn, t, z, logp, k1, h)
                z = manifold.project(z)
                t = (i + 1) * h
                if record_steps:
                    steps.append((t, z))
            return FlowResult(z, logp, dyn.nfe, steps, 0)

        h = min(cfg.h_init, 1.0)
        err_prev = 1e-4
        while t < 1.0 - 1e-12:
            h = min(h, 1.0 - t)
            z1, logp1, k7, err_parts = _dopri_step(dyn, t, z, logp, k1, h)
            with torch.no_grad():
                err = _error_norm(err_parts, (z, logp), (z1, logp1), cfg, with_logp)
            if err <= 1.0:
                t = 1.0 if 1.0 - (t + h) < 1e-12 else t + h
                z = manifold.project(z1)
                logp = logp1
                k1 = k7
                if record_steps:
                    steps.append((t, z))
                fac = cfg.safety * max(err, 1e-10) ** -0.17 * err_prev ** 0.04
                h = h * min(cfg.max_factor, max(cfg.min_factor, fac))
                err_prev = max(err, 1e-4)
            else:
                n_rej += 1
                fac = cfg.safety * err ** -0.2
                h = h * min(1.0, max(cfg.min_factor, fac))
            if t < 1.0 - 1e-12 and h < cfg.h_min:
                raise StepUnderflowError(f"step size {h:.3g} below h_min={cfg.h_min} at t={t:.6f}")
    return FlowResult(z, logp, dyn.nfe, steps, n_rej)


def _dopri_step(dyn, t, z, logp, k1, h):
    kz = [k1[0]]
    kl = [k1[1]]
    for s in range(1, 7):
        zs = _combine(z, kz, _A[s], h)
        ks = dyn(t + _C[s] * h, zs)
        kz.append(ks[0])
        kl.append(ks[1])
    z1 = _combine(z, kz, _B, h)
    ez = _combine(torch.zeros_like(z), kz, _E, h)
    if kl[0] is not None:
        logp1 = _combine(logp, kl, _B, h)
        el = _combine(torch.zeros_like(logp), kl, _E, h)
    else:
        logp1, el = logp, None
    return z1, logp1, (kz[-1], kl[-1]), (ez, el)


def _error_norm(err_parts, y0, y1, cfg, with_logp) -> float:
    # RMS over each trajectory's components, max over the batch: every item
    # gets its own error control instead of being averaged away by the others
    ez, el = err_parts
    z0, l0 = y0
    z1, l1 = y1
    sz = cfg.atol + cfg.rtol * torch.maximum(z0.abs(), z1.abs())
    total = ((ez / sz) ** 2).sum(-1)
    count = ez.shape[-1]
    if with_logp and el is not None:
        sl = cfg.atol + cfg.rtol * torch.maximum(l0.abs(), l1.abs())
        total = total + (el / sl) ** 2
        count += 1
    val = math.sqrt(float(total.max()) / count)
    if not math.isfinite(val):
        return math.inf
    return val


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class RiemannianCNF:
    """Pushforward of a base distribution on M by the time-1 flow of a vector field on M.

    Densities are with respect to the Riemannian volume measure.
    """

    family = "riemannian"

    def __init__(self, manifold: Manifold, field, base):
        self.manifold = manifold
        self.field = field
        self.base = base

    def parameters(self):
        return list(self.field.parameters()) if hasattr(self.field, "parameters") else []

    def log_prob(self, z, solver: SolverConfig | None = None, div: DivergenceMode | None = None,
                 generator=None, train: bool = False, return_result: bool = False):
        res = integrate(self.manifold, self.field, z, "reverse", solver, div, generator, train=train)
        # reverse integration accumulates +int div f dt
        lp = self.base.log_prob(res.endpoint) - res.delta_logp
        return (lp, res) if return_result else lp

    def rsample(self, n: int, solver=None, div=None, generator=None, train: bool = False,
                return_result: bool = False):
        """Reparametrised samples with their log-density (differentiable when train=True)."""
        z0 = self.base.sample(n, generator)
        res = integrate(self.manifold, self.field, z0, "forward", solver, div, generator, train=train)
        lp = self.base.log_prob(z0) + res.delta_logp
        return (res.endpoint, lp, res) if return_result else (res.endpoint, lp)

    def sample(self, n: int, solver=None, div=None, generator=None):
        z, lp = self.rsample(n, solver, div, generator)
        return z.detach(), lp.detach()


def flow_log_prob(model, z, solver=None, div=None, generator=None):
    return model.log_prob(z, solver, div, generator)


def flow_sample(model, n, solver=None, div=None, generator=None):
    return model.sample(n, solver, div, generator)
