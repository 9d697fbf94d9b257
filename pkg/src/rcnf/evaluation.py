"""Quadrature grids, normalisation checks and density-grid export."""
from __future__ import annotations

import csv
import math

import torch

from .geometry import DTYPE, PoincareBall, Sphere
from .projected import model_log_prob


def sphere_grid(manifold: Sphere, n_theta: int = 200, n_phi: int = 400):
    """Midpoint grid in (theta, phi) on S^2 with volume weights sqrt|G| dtheta dphi."""
    if manifold.dim != 2:
        raise ValueError("sphere_grid is for S^2")
    dt, dp = math.pi / n_theta, 2 * math.pi / n_phi
    th = (torch.arange(n_theta, dtype=DTYPE) + 0.5) * dt
    ph = (torch.arange(n_phi, dtype=DTYPE) + 0.5) * dp
    T, P = torch.meshgrid(th, ph, indexing="ij")
    x = torch.stack([T.reshape(-1), P.reshape(-1)], -1)
    z = manifold.to_ambient(x)
    w = manifold.sqrt_det_g(x) * dt * dp
    return x, z, w


def ball_polar_grid(manifold: PoincareBall, n_rho: int = 200, n_phi: int = 200, r_max: float = 0.999):
    """Midpoint grid in geodesic polar coordinates covering the disc of Euclidean radius r_max.

    Returns points, weights (volume elements sinh(s rho)/s drho dphi) and
    the (rho, phi) coordinates.
    """
    if manifold.dim != 2:
        raise ValueError("ball_polar_grid is for the 2-dimensional ball")
    s = math.sqrt(-manifold.curvature)
    rho_max = 2 / s * math.atanh(r_max)
    dr, dp = rho_max / n_rho, 2 * math.pi / n_phi
    rho = (torch.arange(n_rho, dtype=DTYPE) + 0.5) * dr
    ph = (torch.arange(n_phi, dtype=DTYPE) + 0.5) * dp
    R, P = torch.meshgrid(rho, ph, indexing="ij")
    R, P = R.reshape(-1), P.reshape(-1)
    r_euc = torch.tanh(s * R / 2) / s
    z = torch.stack([r_euc * torch.cos(P), r_euc * torch.sin(P)], -1)
    w = torch.sinh(s * R) / s * dr * dp
    return z, w, torch.stack([R, P], -1)


def ball_cartesian_grid(manifold: PoincareBall, nx: int, ny: int, r_max: float = 0.999):
    """Cell-centred grid on [-R, R]^2; returns points, inside mask and cell centres."""
    R = manifold.radius
    xs = (torch.arange(nx, dtype=DTYPE) + 0.5) / nx * 2 * R - R
    ys = (torch.arange(ny, dtype=DTYPE) + 0.5) / ny * 2 * R - R
    X, Y = torch.meshgrid(xs, ys, indexing="ij")
    z = torch.stack([X.reshape(-1), Y.reshape(-1)], -1)
    inside = torch.linalg.vector_norm(z, dim=-1) < r_max * R
    return z, inside


def chunked_log_prob(model, z, solver=None, div=None, generator=None, chunk: int = 20000):
    out = []
    for i in range(0, z.shape[0], chunk):
        lp = model_log_prob(model, z[i:i + chunk], solver, div, generator)
        out.append(lp.detach())
    return torch.cat(out) if out else torch.zeros(0, dtype=DTYPE)


def normalization(model, resolution=None, solver=None, div=None, generator=None) -> float:
    """Quadrature estimate of the total mass of the model density on its manifold."""
    m = model.manifold
    if isinstance(m, Sphere):
        nt, npf = resolution or (200, 400)
        _, z, w = sphere_grid(m, nt, npf)
    elif isinstance(m, PoincareBall):
        nr, npf = resolution or (200, 200)
        z, w, _ = ball_polar_grid(m, nr, npf)
    else:
        raise ValueError("normalization check needs a compact chart grid (sphere or ball)")
    lp = chunked_log_prob(model, z, solver, div, generator)
    return float((lp.exp() * w).sum())


def density_grid(model, resolution, solver=None, div=None, generator=None):
    """Log-density on a regular grid.

    Sphere: midpoint grid in (theta, phi), coordinates in radians.
    Ball: cell-centred Cartesian grid; cells outside radius 0.999 get -inf.
    Returns (coords (n, 2), logp (n,), shape).
    """
    m = model.manifold
    n1, n2 = resolution
    if isinstance(m, Sphere):
        x, z, _ = sphere_grid(m, n1, n2)
        lp = chunked_log_prob(model, z, solver, div, generator)
        return x, lp, (n1, n2)
    if isinstance(m, PoincareBall):
        z, inside = ball_cartesian_grid(m, n1, n2)
        lp = torch.full((z.shape[0],), -math.inf, dtype=DTYPE)
        lp[inside] = chunked_log_prob(model, z[inside], solver, div, generator)
        return z, lp, (n1, n2)
    raise ValueError("density grids are defined for the sphere and the ball")


def write_grid_csv(path, coords, logp):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coord1", "coord2", "logp"])
        for (a, b), v in zip(coords.tolist(), logp.tolist()):
            w.writerow([repr(a), repr(b), repr(v)])


def read_grid_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["coord1", "coord2", "logp"]:
            raise ValueError(f"{path}: unexpected grid header {header}")
        rows = [[float(c) for c in row] for row in r]
    t = torch.tensor(rows, dtype=DTYPE).reshape(-1, 3)
    return t[:, :2], t[:, 2]


def write_pgm(path, values, shape):
    """8-bit binary PGM (P5): rows = first grid axis, min-max scaled over finite values.

    Header is ``P5\\n<width> <height>\\n255\\n`` with width = shape[1] and
    height = shape[0]; non-finite cells are written as 0.
    """
    v = values.reshape(shape)
    finite = torch.isfinite(v)
    if finite.any():
        lo, hi = float(v[finite].min()), float(v[finite].max())
    else:
        lo, hi = 0.0, 0.0
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = torch.where(finite, ((v - lo) * scale).round().clamp(0, 255), torch.zeros_like(v))
    data = bytes(img.to(torch.uint8).reshape(-1).tolist())
    with open(path, "wb") as fh:
        fh.write(f"P5\n{shape[1]} {shape[0]}\n255\n".encode("ascii"))
        fh.write(data)


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = (int(x) for x in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pix = torch.tensor(list(parts[3]), dtype=torch.uint8)
    if pix.numel() != width * height:
        raise ValueError(f"{path}: expected {width * height} pixels, found {pix.numel()}")
    return pix.reshape(height, width)
