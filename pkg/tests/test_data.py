import json
import math
from pathlib import Path

import pytest
import torch
from hypothesis import given, settings, strategies as st

from rcnf.data import (
    EmptySplitError,
    GeoDataset,
    MalformedHeaderError,
    SyntheticTargetSpec,
    latlon_to_xyz,
    load_latlon_csv,
    make_synthetic,
    split,
    write_manifest,
    xyz_to_latlon,
)
from rcnf.geometry import PoincareBall, Sphere

D = torch.float64
FIX = Path(__file__).parent / "fixtures"


def _t(x):
    return torch.tensor(x, dtype=D)


def test_latlon_examples():
    for lon in (0.0, 45.0, -120.0, 300.0):
        assert torch.allclose(latlon_to_xyz(_t(90.0), _t(lon)), _t([0.0, 0.0, 1.0]), atol=1e-15)
    assert torch.allclose(latlon_to_xyz(_t(0.0), _t(0.0)), _t([1.0, 0.0, 0.0]), atol=1e-15)
    assert torch.allclose(latlon_to_xyz(_t(0.0), _t(90.0)), _t([0.0, 1.0, 0.0]), atol=1e-15)


def test_latlon_grid_round_trip():
    lat = torch.linspace(-89.5, 89.5, 180, dtype=D)
    lon = torch.linspace(-179.5, 179.5, 360, dtype=D)
    LA, LO = torch.meshgrid(lat, lon, indexing="ij")
    z = latlon_to_xyz(LA, LO)
    assert float((z.norm(dim=-1) - 1).abs().max()) < 1e-15
    la2, lo2 = xyz_to_latlon(z)
    assert float((la2 - LA).abs().max()) <= 1e-9
    assert float((lo2 - LO).abs().max()) <= 1e-9


def test_load_clean_fixture():
    ds = load_latlon_csv(FIX / "events_clean.csv")
    assert len(ds) == 8 and ds.n_rows == 8 and ds.n_rejected == 0
    assert torch.allclose(ds.points[0], _t([1.0, 0.0, 0.0]), atol=1e-15)
    assert torch.allclose(ds.points[1], _t([0.0, 0.0, 1.0]), atol=1e-15)
    assert torch.allclose(ds.points[5], _t([0.0, 0.0, -1.0]), atol=1e-15)
    assert float((ds.points.norm(dim=-1) - 1).abs().max()) < 1e-15


def test_load_dirty_fixture_rejection_accounting():
    ds = load_latlon_csv(FIX / "events_dirty.csv")
    # blank line 8 is skipped, not rejected; the duplicate is kept
    assert ds.n_rows == 12
    assert len(ds) == 5
    assert [r.line for r in ds.rejected] == [3, 4, 5, 6, 7, 10, 11]
    reasons = [r.reason for r in ds.rejected]
    assert reasons[0] == "missing value"
    assert reasons[1].startswith("not a number")
    assert "lat 90.5" in reasons[2]
    assert "lon 360.0" in reasons[3] and "lon -180.5" in reasons[4]
    assert reasons[5] == "non-finite value" and reasons[6] == "missing column"
    assert len(ds) + ds.n_rejected == ds.n_rows
    lat, lon = xyz_to_latlon(ds.points[0])
    assert float(lat) == pytest.approx(37.751, abs=1e-9) and float(lon) == pytest.approx(14.9934, abs=1e-9)
    assert torch.equal(ds.points[0], ds.points[4])


def test_malformed_headers():
    with pytest.raises(MalformedHeaderError):
        load_latlon_csv(FIX / "no_header.csv")
    with pytest.raises(MalformedHeaderError):
        load_latlon_csv(FIX / "empty.csv")
    with pytest.raises(OSError):
        load_latlon_csv(FIX / "does_not_exist.csv")
    with pytest.raises(ValueError):
        load_latlon_csv(FIX / "events_clean.csv", convention="colatitude")


def test_manifest(tmp_path):
    ds = load_latlon_csv(FIX / "events_dirty.csv")
    tr, te = split(ds, seed=3, train_frac=0.6)
    out = write_manifest(tmp_path / "m.json", ds, tr, te)
    on_disk = json.loads((tmp_path / "m.json").read_text())
    assert on_disk == out
    assert on_disk["rows_rejected"] == 7 and on_disk["rows_accepted"] == 5
    assert on_disk["split_seed"] == 3 and on_disk["n_train"] == 3 and on_disk["n_test"] == 2


def _ds(n):
    g = torch.Generator().manual_seed(n)
    return GeoDataset(torch.nn.functional.normalize(torch.randn(n, 3, dtype=D, generator=g), dim=-1))


def test_split_examples():
    tr, te = split(_ds(10), seed=0, train_frac=0.5)
    assert len(tr) == 5 and len(te) == 5
    with pytest.raises(EmptySplitError):
        split(_ds(1), seed=0, train_frac=0.5)
    with pytest.raises(ValueError):
        split(_ds(10), seed=0, train_frac=1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_split_properties(n, seed, frac):
    ds = _ds(n)
    n_train = round(frac * n)
    if n_train in (0, n):
        with pytest.raises(EmptySplitError):
            split(ds, seed, frac)
        return
    tr, te = split(ds, seed, frac)
    tr2, te2 = split(ds, seed, frac)
    assert torch.equal(tr.points, tr2.points) and torch.equal(te.points, te2.points)
    assert len(tr) + len(te) == n
    both = torch.cat([tr.points, te.points])
    key = lambda t: sorted(map(tuple, t.tolist()))  # noqa: E731
    assert key(both) == key(ds.points)


def test_synthetic_wrapped_alpha_zero():
    spec = SyntheticTargetSpec("wrapped_gaussian_ball", alpha=0.0, sigma=(0.3, 1.0))
    n = 20_000
    z, target = make_synthetic(spec, n, torch.Generator().manual_seed(0))
    B = PoincareBall(2)
    v = B.log_map(torch.zeros_like(z), z)
    se = v.std(0) / math.sqrt(n)
    assert bool((v.mean(0).abs() <= 3 * se).all())
    assert float(z.norm(dim=-1).max()) < 1
    assert torch.isfinite(target.log_prob(z)).all()


def test_synthetic_wrapped_location():
    spec = SyntheticTargetSpec("wrapped_gaussian_ball", alpha=2.0)
    target = spec.build()
    assert torch.allclose(target.mu, _t([math.tanh(2.0), 0.0]), atol=1e-15)
    assert isinstance(spec.manifold(), PoincareBall)


def test_synthetic_vmf_concentration():
    spec = SyntheticTargetSpec("vmf_sphere", mu=(0.0, 0.6, 0.8), kappa=10.0)
    z, target = make_synthetic(spec, 100_000, torch.Generator().manual_seed(1))
    mean_dir = torch.nn.functional.normalize(z.mean(0), dim=0)
    assert float(Sphere(2).dist(mean_dir[None], target.mu[None])) < 0.05


def test_synthetic_mixture_and_errors():
    spec = SyntheticTargetSpec("vmf_mixture_sphere",
                               components=[(0.3, (1.0, 0.0, 0.0), 5.0), (0.7, (0.0, 0.0, 2.0), 20.0)])
    z, target = make_synthetic(spec, 100, torch.Generator().manual_seed(2))
    assert z.shape == (100, 3)
    assert torch.allclose(target.mus[1], _t([0.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        SyntheticTargetSpec("vmf_mixture_sphere").build()
    with pytest.raises(ValueError):
        SyntheticTargetSpec("gaussian_plane").build()
