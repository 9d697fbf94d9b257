"""Datasets: geographic lat/lon CSV ingestion, seeded splits and synthetic targets."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field

import torch

from .distributions import VmfMixture, VonMisesFisher, WrappedNormal
from .geometry import DTYPE, PoincareBall, Sphere, as_tensor


class MalformedHeaderError(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass
class RowError:
    line: int  # 1-based line number in the file, header is line 1
    reason: str


@dataclass
class GeoDataset:
    points: torch.Tensor  # (n, 3) unit vectors
    source: str = ""
    split_seed: int | None = None
    train_frac: float | None = None
    n_rows: int = 0
    rejected: list = dc_field(default_factory=list)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)


def latlon_to_xyz(lat_deg, lon_deg):
    """Geographic degrees to unit vectors: x = cos lat cos lon, y = cos lat sin lon, z = sin lat."""
    lat = torch.deg2rad(as_tensor(lat_deg))
    lon = torch.deg2rad(as_tensor(lon_deg))
    return torch.stack([torch.cos(lat) * torch.cos(lon), torch.cos(lat) * torch.sin(lon), torch.sin(lat)], -1)


def xyz_to_latlon(z):
    """Inverse of latlon_to_xyz; longitude in (-180, 180]."""
    z = as_tensor(z)
    lat = torch.atan2(z[..., 2], torch.linalg.vector_norm(z[..., :2], dim=-1))
    lon = torch.atan2(z[..., 1], z[..., 0])
    return torch.rad2deg(lat), torch.rad2deg(lon)


def _parse_row(row, i_lat, i_lon):
    if len(row) <= max(i_lat, i_lon):
        return None, "missing column"
    raw_lat, raw_lon = row[i_lat].strip(), row[i_lon].strip()
    if raw_lat == "" or raw_lon == "":
        return None, "missing value"
    try:
        lat, lon = float(raw_lat), float(raw_lon)
    except ValueError:
        return None, f"not a number: lat={raw_lat!r} lon={raw_lon!r}"
    if not (math.isfinite(lat) and math.isfinite(lon)):
        return None, "non-finite value"
    if not -90.0 <= lat <= 90.0:
        return None, f"lat {lat} outside [-90, 90]"
    if not -180.0 <= lon < 360.0:
        return None, f"lon {lon} outside [-180, 360)"
    return (lat, lon), None


def load_latlon_csv(path, convention: str = "geographic") -> GeoDataset:
    """Read a CSV with ``lat`` and ``lon`` columns (degrees) into points on S^2.

    Invalid rows are skipped and listed in ``dataset.rejected``; duplicate
    coordinates are kept.
    """
    if convention != "geographic":
        raise ValueError(f"unsupported coordinate convention {convention!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedHeaderError(f"{path}: empty file") from None
        names = [h.strip().lower() for h in header]
        if "lat" not in names or "lon" not in names:
            raise MalformedHeaderError(f"{path}: header must contain 'lat' and 'lon' columns, got {header}")
        i_lat, i_lon = names.index("lat"), names.index("lon")
        lats, lons, rejected = [], [], []
        n_rows = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            n_rows += 1
            val, err = _parse_row(row, i_lat, i_lon)
            if err:
                rejected.append(RowError(lineno, err))
                continue
            lats.append(val[0])
            lons.append(val[1])
    pts = latlon_to_xyz(torch.tensor(lats, dtype=DTYPE), torch.tensor(lons, dtype=DTYPE)) if lats \
        else torch.zeros(0, 3, dtype=DTYPE)
    return GeoDataset(pts, str(path), n_rows=n_rows, rejected=rejected)


def split(ds: GeoDataset, seed: int = 0, train_frac: float = 0.8):
    """Seeded random train/test split (disjoint and exhaustive)."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie in (0, 1)")
    n = len(ds)
    n_train = int(round(train_frac * n))
    if n_train == 0 or n_train == n:
        raise EmptySplitError(f"split of {n} points at train_frac={train_frac} leaves an empty part")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    tr, te = perm[:n_train], perm[n_train:]
    mk = lambda idx: GeoDataset(ds.points[idx], ds.source, seed, train_frac, len(idx), [])  # noqa: E731
    return mk(tr), mk(te)


def write_manifest(path, ds: GeoDataset, train=None, test=None, extra: dict | None = None):
    """JSON manifest: source, row counts, rejections, split seed and fraction."""
    out = {
        "source": ds.source,
        "rows_read": ds.n_rows,
        "rows_accepted": len(ds),
        "rows_rejected": ds.n_rejected,
        "rejections": [{"line": r.line, "reason": r.reason} for r in ds.rejected],
    }
    if train is not None and test is not None:
        out.update(split_seed=train.split_seed, train_frac=train.train_frac,
                   n_train=len(train), n_test=len(test))
    out.update(extra or {})
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    return out


# ---------------------------------------------------------------------------
# Synthetic targets
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTargetSpec:
    """kind: 'wrapped_gaussian_ball' (alpha, sigma), 'vmf_sphere' (mu, kappa) or
    'vmf_mixture_sphere' (components: list of (weight, mu, kappa))."""

    kind: str
    alpha: float = 0.0
    sigma: tuple = (0.3, 1.0)
    mu: tuple = (-1.0, 0.0, 0.0)
    kappa: float = 10.0
    components: list = dc_field(default_factory=list)
    curvature: float | None = None

    def build(self):
        if self.kind == "wrapped_gaussian_ball":
            ball = PoincareBall(2, self.curvature if self.curvature is not None else -1.0)
            # mu = exp_0(alpha e_x) with the Euclidean tangent vector alpha e_x
            v = torch.tensor([self.alpha, 0.0], dtype=DTYPE)
            mu = ball.exp_map(torch.zeros(2, dtype=DTYPE), v)
            return WrappedNormal(ball, mu, torch.tensor(self.sigma, dtype=DTYPE))
        if self.kind == "vmf_sphere":
            return VonMisesFisher(torch.tensor(self.mu, dtype=DTYPE), torch.tensor(self.kappa, dtype=DTYPE))
        if self.kind == "vmf_mixture_sphere":
            if not self.components:
                raise ValueError("vmf_mixture_sphere needs at least one component")
            w = [c[0] for c in self.components]
            mus = torch.tensor([c[1] for c in self.components], dtype=DTYPE)
            ks = torch.tensor([c[2] for c in self.components], dtype=DTYPE)
            return VmfMixture(w, mus / mus.norm(dim=-1, keepdim=True), ks)
        raise ValueError(f"unknown synthetic target kind {self.kind!r}")

    def manifold(self):
        if self.kind == "wrapped_gaussian_ball":
            return PoincareBall(2, self.curvature if self.curvature is not None else -1.0)
        return Sphere(2)


def make_synthetic(spec: SyntheticTargetSpec, n: int, generator=None):
    """n exact samples and the target distribution (which has ``log_prob``)."""
    target = spec.build()
    return target.sample(n, generator), target
