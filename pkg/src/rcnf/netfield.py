"""Neural vector fields f_theta : M x R -> TM and their derivatives.

The network is a geodesic-distance input layer (or a plain linear layer), a
tanh MLP trunk with the time appended after the input layer, and a
geometry-aware output layer (tangent projection on the sphere, division by
the conformal factor on the ball).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .geometry import (
    DTYPE,
    ChartSingularityError,
    Manifold,
    PoincareBall,
    Sphere,
    as_tensor,
    conformal_factor,
    parallel_transport_from_origin,
)


# added to the user seed for parameter initialisation
INIT_SEED_OFFSET = 0x5EED_F1E1D


@dataclass
class FieldConfig:
    hidden_sizes: tuple[int, ...] = (64, 64, 64)
    activation: str = "tanh"
    input_layer: str = "geodesic"  # or "linear"
    time_mode: str = "concat_time"
    last_layer_bound: float = 10.0
    # "metric": ball output divided by lambda_z; "none": raw output (ablation)
    output_scaling: str = "metric"
    # keep the ||w|| factor of the spherical geodesic neuron
    sphere_neuron_norm: bool = True
    hyperplane_init_std: float = 0.1

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a non-empty list of positive ints")
        if self.activation != "tanh":
            raise ValueError("only the bounded C1 activation 'tanh' is supported")
        if self.input_layer not in ("geodesic", "linear"):
            raise ValueError(f"input_layer must be 'geodesic' or 'linear', got {self.input_layer!r}")
        if self.time_mode != "concat_time":
            raise ValueError("only time_mode='concat_time' is supported")
        if self.output_scaling not in ("metric", "none"):
            raise ValueError(f"output_scaling must be 'metric' or 'none', got {self.output_scaling!r}")
        if not self.last_layer_bound > 0:
            raise ValueError("last_layer_bound must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


class BallGeodesicLayer(nn.Module):
    """Signed distances to gyroplanes through p = exp_0(a0) with normal a = transport(a0).

    The ||a||_p prefactor of the original neuron is dropped.
    """

    def __init__(self, dim: int, width: int, K: float, init_std: float, generator=None):
        super().__init__()
        self.K = K
        a0 = torch.randn(width, dim, dtype=DTYPE, generator=generator) * init_std
        self.a0 = nn.Parameter(a0)

    def forward(self, z):
        K = self.K
        s = math.sqrt(-K)
        a0 = self.a0
        a0n = a0.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        # p = exp_0(a0), lambda_0 = 2
        p = torch.tanh(s * a0n) / (s * a0n) * a0
        a = parallel_transport_from_origin(p, a0, K)
        an = a.norm(dim=-1).clamp_min(1e-12)
        # w = (-p) (+) z expanded in closed form so only (..., width) tensors appear
        pz = z @ p.T
        za = z @ a.T
        z2 = (z * z).sum(-1, keepdim=True)
        p2 = (p * p).sum(-1)
        pa = (p * a).sum(-1)
        alpha = 1 + 2 * K * pz - K * z2
        beta = 1 + K * p2
        den = 1 + 2 * K * pz + K * K * p2 * z2
        wa = (-alpha * pa + beta * za) / den
        w2 = (alpha * alpha * p2 - 2 * alpha * beta * pz + beta * beta * z2) / (den * den)
        arg = 2 * s * wa / ((1 + K * w2) * an)
        return torch.asinh(arg) / s


class SphereGeodesicLayer(nn.Module):
    """Neurons ||w|| asin(<w, z> / ||w||): signed distance to great spheres <w, z> = 0."""

    def __init__(self, dim: int, width: int, K: float, init_std: float, scale_by_norm: bool = True,
                 generator=None):
        super().__init__()
        self.K = K
        self.scale_by_norm = scale_by_norm
        w = torch.randn(width, dim + 1, dtype=DTYPE, generator=generator) * init_std
        self.w = nn.Parameter(w)

    def forward(self, z):
        wn = self.w.norm(dim=-1).clamp_min(1e-12)
        cos = math.sqrt(self.K) * (z @ self.w.T) / wn
        # exactly at a pole of w the derivative of asin is infinite; use a zero subgradient there
        cos = torch.where(cos.abs() >= 1.0, cos.detach().clamp(-1.0, 1.0), cos)
        h = torch.asin(cos) / math.sqrt(self.K)
        return wn * h if self.scale_by_norm else h


def _uniform_linear(fan_in: int, fan_out: int, generator=None) -> nn.Linear:
    lin = nn.Linear(fan_in, fan_out, dtype=DTYPE)
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=generator)
        lin.bias.uniform_(-bound, bound, generator=generator)
    return lin


class VectorField(nn.Module):
    """Time-dependent neural vector field on a manifold.

    ``field(z, t)`` takes points of shape (n, D) in ambient coordinates and a
    scalar time and returns ambient tangent vectors of shape (n, D).
    """

    def __init__(self, manifold: Manifold, cfg: FieldConfig | None = None, seed: int | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.manifold = manifold
        self.cfg = cfg = cfg or FieldConfig()
        if generator is None:
            # offset so that init does not replay the data/sampling stream of the same seed
            generator = torch.Generator().manual_seed((0 if seed is None else seed) + INIT_SEED_OFFSET)
        D = manifold.ambient_dim
        width = cfg.hidden_sizes[0]
        if cfg.input_layer == "geodesic" and isinstance(manifold, PoincareBall):
            self.input = BallGeodesicLayer(manifold.dim, width, manifold.curvature,
                                           cfg.hyperplane_init_std, generator)
            trunk_in = width + 1
        elif cfg.input_layer == "geodesic" and isinstance(manifold, Sphere):
            self.input = SphereGeodesicLayer(manifold.dim, width, manifold.curvature,
                                             cfg.hyperplane_init_std, cfg.sphere_neuron_norm, generator)
            trunk_in = width + 1
        else:
            # linear input layer (also used for Euclidean space)
            self.input = _uniform_linear(D + 1, width, generator)
            trunk_in = width
        layers = []
        sizes = list(cfg.hidden_sizes)
        prev = trunk_in
        for h in sizes[1:]:
            layers.append(_uniform_linear(prev, h, generator))
            prev = h
        self.hidden = nn.ModuleList(layers)
        self.output = _uniform_linear(prev, D, generator)
        self.clamp_last_layer()

    @property
    def uses_linear_input(self) -> bool:
        return isinstance(self.input, nn.Linear)

    def raw(self, z, t):
        """Unconstrained network output in R^D."""
        z = as_tensor(z)
        tcol = torch.as_tensor(t, dtype=z.dtype).expand(*z.shape[:-1], 1)
        if self.uses_linear_input:
            h = torch.tanh(self.input(torch.cat([z, tcol], -1)))
        else:
            h = torch.cat([torch.tanh(self.input(z)), tcol], -1)
        for layer in self.hidden:
            h = torch.tanh(layer(h))
        return self.output(h)

    def forward(self, z, t):
        out = self.raw(z, t)
        m = self.manifold
        if isinstance(m, Sphere):
            return m.project_tangent(z, out)
        if isinstance(m, PoincareBall) and self.cfg.output_scaling == "metric":
            return out / conformal_factor(z, m.curvature)
        return out

    @torch.no_grad()
    def clamp_last_layer(self):
        B = self.cfg.last_layer_bound
        self.output.weight.clamp_(-B, B)
        self.output.bias.clamp_(-B, B)

    def output_bound(self) -> float:
        """Upper bound on the Euclidean norm of the raw output (tanh features are in [-1, 1])."""
        B = self.cfg.last_layer_bound
        H = self.output.in_features
        return B * (H + 1) * math.sqrt(self.output.out_features)


class LinearField(nn.Module):
    """f(z, t) = A z + b, mostly for Euclidean oracles and tests."""

    def __init__(self, A, b=None):
        super().__init__()
        A = as_tensor(A)
        self.A = nn.Parameter(A.clone())
        self.b = nn.Parameter(torch.zeros(A.shape[0], dtype=DTYPE) if b is None else as_tensor(b).clone())

    def forward(self, z, t):
        return z @ self.A.T + self.b


class RotationField(nn.Module):
    """Rigid rotation of S^2 about the z-axis at angular rate omega (divergence free)."""

    def __init__(self, omega: float):
        super().__init__()
        self.omega = omega

    def forward(self, z, t):
        x, y = z[..., 0], z[..., 1]
        return self.omega * torch.stack([-y, x, torch.zeros_like(x)], -1)


class ScaledField(nn.Module):
    """alpha * f, optionally with time reflection t -> t1 - t (used for reverse flows)."""

    def __init__(self, base, alpha: float = 1.0, reflect_at: float | None = None):
        super().__init__()
        self.base = base
        self.alpha = alpha
        self.reflect_at = reflect_at

    def forward(self, z, t):
        if self.reflect_at is not None:
            t = self.reflect_at - t
        return self.alpha * self.base(z, t)


# ---------------------------------------------------------------------------
# Derivatives in local coordinates
# ---------------------------------------------------------------------------

def unit_components(manifold: Manifold, field, x, t, chart_roll=None):
    """Field components in the unit-length local frame, as a function of local coords x.

    Returns ``(f, fhat, h)``: the ambient field at r(x), its unit-frame
    components and the frame scale factors sqrt(G_ii). ``chart_roll`` is an
    optional boolean mask selecting points expressed in the rolled chart of
    the sphere (ambient coordinates cyclically shifted by one).
    """
    if not isinstance(manifold, Sphere):
        # identity chart with a conformal metric: the frame is the standard basis
        h = manifold._scales(x)
        f = field(x, t)
        return f, f * h, h
    z = manifold.to_ambient(x)
    E, h = manifold.local_frame(x)
    if chart_roll is not None:
        z = torch.where(chart_roll[..., None], torch.roll(z, -1, -1), z)
        E = torch.where(chart_roll[..., None, None], torch.roll(E, -1, -1), E)
    f = field(z, t)
    fhat = (E * f[..., None, :]).sum(-1)
    return f, fhat, h


def _check_chart(manifold, x):
    if manifold.chart_singular(x).any():
        raise ChartSingularityError("local coordinates at a chart singularity")


def input_jacobian(manifold: Manifold, field, x, t, create_graph: bool = False):
    """d x d Jacobian d fhat^i / d x^j of the unit-frame components at local coords x."""
    x = as_tensor(x)
    _check_chart(manifold, x)
    squeeze = x.dim() == 1
    if squeeze:
        x = x[None]
    with torch.enable_grad():
        x = x.detach().requires_grad_(True) if not x.requires_grad else x
        _, fhat, _ = unit_components(manifold, field, x, t)
        rows = []
        for i in range(manifold.dim):
            (g,) = torch.autograd.grad(fhat[..., i].sum(), x, create_graph=create_graph,
                                       retain_graph=True, allow_unused=True)
            rows.append(torch.zeros_like(x) if g is None else g)
    J = torch.stack(rows, -2)
    return J[0] if squeeze else J


def input_vjp(manifold: Manifold, field, x, t, probe, weighted: bool = False,
              create_graph: bool = False):
    """probe^T J at local coords x, J the unit-frame Jacobian.

    With ``weighted=True`` the components are first multiplied by
    sqrt(|G| / G_ii), the quantity whose Jacobian the divergence needs.
    """
    x = as_tensor(x)
    _check_chart(manifold, x)
    probe = as_tensor(probe)
    with torch.enable_grad():
        x = x.detach().requires_grad_(True) if not x.requires_grad else x
        _, fhat, h = unit_components(manifold, field, x, t)
        if weighted:
            fhat = fhat * (h.prod(-1, keepdim=True) / h)
        (g,) = torch.autograd.grad(fhat, x, probe.expand_as(fhat), create_graph=create_graph,
                                   allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def param_gradient(loss: torch.Tensor, params) -> list[torch.Tensor]:
    """Gradient of a scalar loss with respect to every tensor in ``params``."""
    if loss.numel() != 1:
        raise ValueError(f"param_gradient needs a scalar root, got shape {tuple(loss.shape)}")
    params = list(params)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# ---------------------------------------------------------------------------
# Checkpoint text format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "rcnf-checkpoint 1"


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Write named tensors as a plain-text checkpoint.

    Layout::

        rcnf-checkpoint 1
        meta <key> <value>              (zero or more, value is the rest of the line)
        tensor <name> <ndim> <d1> ... <dk>
        <row-major values, one per line, repr() so the round trip is bit-exact>
        end
    """
    lines = [CHECKPOINT_MAGIC]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in k):
            raise ValueError(f"meta key may not contain whitespace: {k!r}")
        lines.append(f"meta {k} {v}")
    for name, t in tensors.items():
        t = t.detach().to(DTYPE).contiguous()
        shape = list(t.shape)
        lines.append(f"tensor {name} {len(shape)} " + " ".join(str(s) for s in shape))
        lines.extend(repr(float(v)) for v in t.reshape(-1).tolist())
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an rcnf checkpoint")
    meta, tensors = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line == "end":
            break
        if line.startswith("meta "):
            _, key, *rest = line.split(" ", 2)
            meta[key] = rest[0] if rest else ""
            i += 1
        elif line.startswith("tensor "):
            parts = line.split()
            name, ndim = parts[1], int(parts[2])
            shape = [int(s) for s in parts[3:3 + ndim]]
            n = math.prod(shape)
            vals = [float(v) for v in lines[i + 1:i + 1 + n]]
            if len(vals) != n:
                raise ValueError(f"{path}: truncated tensor {name}")
            tensors[name] = torch.tensor(vals, dtype=DTYPE).reshape(shape)
            i += 1 + n
        else:
            raise ValueError(f"{path}:{i + 1}: unexpected line {line[:40]!r}")
    return tensors, meta
