"""Losses, regularisers, Adam / Riemannian Adam and the training loop.

The optimisers are written out by hand rather than taken from ``torch.optim``
so the update rule, the last-layer clamp and the spherical retraction are
explicit and bit-reproducible; ``tests/test_training.py`` checks the Euclidean
step against ``torch.optim.Adam``.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import torch

from .flow import DivergenceMode, SolverConfig, SolverError, _chart_for, sample_probes
from .geometry import DTYPE, Sphere, as_tensor
from .netfield import ScaledField, param_gradient, save_checkpoint, unit_components
from .projected import NaiveModel, model_log_prob

log = logging.getLogger(__name__)

LOSSES = ("nll", "reverse_kl")
METRIC_COLUMNS = ("iter", "loss", "nfe_mean", "lr", "wall_ms")


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss/gradient or the solver gave up."""


@dataclass
class TrainConfig:
    loss: str = "nll"
    batch_size: int = 400
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iters: int = 1000
    anneal: str = "exp"  # or "none"
    anneal_rate: float = 0.98
    anneal_period: float = 300.0
    reg_kinetic: float = 0.0
    reg_frobenius: float = 0.0
    seed: int = 0
    train_divergence: DivergenceMode = dc_field(default_factory=DivergenceMode)
    eval_divergence: DivergenceMode = dc_field(default_factory=DivergenceMode)
    # max global gradient norm; None disables clipping
    grad_clip: float | None = None

    def __post_init__(self):
        self.loss = self.loss.lower().replace("-", "_")
        if self.loss == "reversekl":
            self.loss = "reverse_kl"
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.anneal not in ("exp", "none"):
            raise ValueError(f"anneal must be 'exp' or 'none', got {self.anneal!r}")
        if self.reg_kinetic < 0 or self.reg_frobenius < 0:
            raise ValueError("regularisation weights must be >= 0")

    def lr_at(self, it: int) -> float:
        if self.anneal == "none":
            return self.lr
        return self.lr * self.anneal_rate ** (it / self.anneal_period)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def nll_loss(model, batch, solver: SolverConfig | None = None, div: DivergenceMode | None = None,
             generator=None, train: bool = True):
    """Monte Carlo negative log-likelihood (nats, w.r.t. the volume measure).

    Returns ``(loss, result)``; ``result`` holds the solver trajectory, NFE
    count and endpoint of the reverse solve.
    """
    batch = as_tensor(batch)
    if batch.shape[0] == 0:
        raise ValueError("nll_loss needs a non-empty batch")
    lp, res = model.log_prob(batch, solver, div, generator, train=train, return_result=True)
    if isinstance(model, NaiveModel):
        lp = lp - model.manifold.log_sqrt_det_g(model.manifold.to_local(batch))
    return -lp.mean(), res


def model_rsample(model, n, solver=None, div=None, generator=None, train=True):
    """Reparametrised samples and log-densities w.r.t. the manifold volume measure."""
    z, lp, res = model.rsample(n, solver, div, generator, train=train, return_result=True)
    if isinstance(model, NaiveModel):
        if not bool(model.manifold.contains(z.detach()).all()):
            raise ValueError("naive model produced samples outside the manifold support")
        lp = lp - model.manifold.log_sqrt_det_g(model.manifold.to_local(z))
    return z, lp, res


def reverse_kl_loss(model, target, n: int, solver=None, div=None, generator=None, train: bool = True):
    """E_{z ~ model}[log p_model(z) - log p_target(z)] by reparametrisation."""
    if not hasattr(target, "log_prob"):
        raise TypeError("reverse KL needs a target with a log_prob")
    z, lp, res = model_rsample(model, n, solver, div, generator, train)
    lt = target.log_prob(z)
    if not bool(torch.isfinite(lt.detach()).all()):
        raise ValueError("target log-density is not finite at model samples (unsupported region)")
    return (lp - lt).mean(), res


def kinetic_regularizer(manifold, field, knots, reverse: bool = False):
    """Trapezoid estimate of int_0^1 E ||f(z(t), t)||_z^2 dt over solver knots.

    ``knots`` is a list of ``(t, z)``. With ``reverse=True`` the knots come
    from a reverse solve and t is mapped back to the field's own clock.
    """
    if len(knots) < 2:
        return torch.zeros((), dtype=DTYPE)
    vals, ts = [], []
    for t, z in knots:
        tt = 1.0 - t if reverse else t
        f = field(z, tt)
        vals.append(manifold.inner(z, f, f).mean())
        ts.append(tt)
    total = torch.zeros((), dtype=DTYPE)
    for i in range(1, len(vals)):
        total = total + 0.5 * abs(ts[i] - ts[i - 1]) * (vals[i] + vals[i - 1])
    return total


def frobenius_regularizer(manifold, field, z, t, probes=None, generator=None, exact: bool = False,
                          create_graph: bool = True):
    """Mean squared Frobenius norm of the unit-frame input Jacobian at ambient points z.

    The default is the unbiased estimate E||eps^T J||^2 with one Rademacher
    probe per point (or the supplied ``probes`` of shape (P, n, d)).
    """
    z = as_tensor(z)
    with torch.enable_grad():
        zz = z if z.requires_grad else z.detach().requires_grad_(True)
        x, roll = _chart_for(manifold, zz)
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        _, fhat, _ = unit_components(manifold, field, x, t, roll)
        if exact:
            total = torch.zeros(x.shape[:-1], dtype=DTYPE)
            for i in range(manifold.dim):
                (g,) = torch.autograd.grad(fhat[..., i].sum(), x, create_graph=create_graph,
                                           retain_graph=True, allow_unused=True)
                if g is not None:
                    total = total + (g * g).sum(-1)
            return total.mean()
        if probes is None:
            probes = sample_probes((1, *x.shape), "rademacher", generator)
        total = torch.zeros((), dtype=DTYPE)
        for eps in probes:
            (g,) = torch.autograd.grad(fhat, x, eps, create_graph=create_graph, retain_graph=True,
                                       allow_unused=True)
            if g is not None:
                total = total + (g * g).sum(-1).mean()
        return total / len(probes)


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: OptimState, cfg: TrainConfig, lr: float | None = None):
    """One bias-corrected Adam update, in place."""
    params, grads = list(params), list(grads)
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimiser state have different lengths")
    lr = cfg.lr if lr is None else lr
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    return params, state


def riemannian_adam_step(points, egrads, state: OptimState, cfg: TrainConfig, sphere: Sphere,
                         lr: float | None = None, transport: str = "projection"):
    """Adam on a product of spheres: rows of each tensor in ``points`` lie on ``sphere``.

    The Euclidean gradient is projected to the tangent space, the Adam
    direction is re-projected (the elementwise preconditioner is not
    tangent-preserving), the step is taken with the exponential map and the
    first moment is moved to the new tangent space by re-projection or, with
    ``transport='parallel'``, by parallel transport.
    """
    if transport not in ("projection", "parallel"):
        raise ValueError("transport must be 'projection' or 'parallel'")
    lr = cfg.lr if lr is None else lr
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for x, g, m, v in zip(points, egrads, state.m, state.v):
            if x.shape != g.shape:
                raise ValueError("shape mismatch between point and gradient")
            rg = sphere.project_tangent(x, g)
            m.mul_(b1).add_(rg, alpha=1 - b1)
            v.mul_(b2).addcmul_(rg, rg, value=1 - b2)
            step = -lr * (m / c1) / ((v / c2).sqrt() + cfg.eps)
            step = sphere.project_tangent(x, step)
            new = sphere.project(sphere.exp_map(x, step))
            # a zero step leaves the point bit-identical (exp/project would round)
            new = torch.where((step == 0).all(-1, keepdim=True), x, new)
            if transport == "parallel":
                moved = sphere.transport(x, new, m)
            else:
                moved = sphere.project_tangent(new, m)
            m.copy_(moved)
            x.copy_(new)
    return points, state


def _clip(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        return [g * (max_norm / total) for g in grads]
    return grads


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    metrics: list
    state: OptimState
    aborted: bool = False


def model_state(model) -> dict:
    return {k: v.detach().clone() for k, v in model.field.state_dict().items()}


def _draw_batch(data, target, n, generator):
    if data is not None:
        idx = torch.randint(0, data.shape[0], (n,), generator=generator)
        return data[idx]
    return target.sample(n, generator)


def train(model, cfg: TrainConfig, data=None, target=None, solver: SolverConfig | None = None,
          metrics_path=None, checkpoint_path=None, meta: dict | None = None,
          callback=None) -> TrainResult:
    """Fit ``model`` by Adam on the configured loss.

    For the NLL loss minibatches come from ``data`` (sampled with replacement)
    or, if no data is given, fresh exact samples from ``target``. Reverse KL
    needs ``target``. Everything random is drawn from one generator seeded
    with ``cfg.seed``, so equal seeds give bit-identical parameter and loss
    traces. On a non-finite loss or gradient, or a solver failure, the last
    good parameters are written to ``checkpoint_path`` and NumericalAbort is
    raised.
    """
    if cfg.loss == "nll" and data is None and target is None:
        raise ValueError("NLL training needs data or a target to sample from")
    if cfg.loss == "reverse_kl" and target is None:
        raise ValueError("reverse KL training needs a target density")
    solver = solver or SolverConfig()
    gen = torch.Generator().manual_seed(cfg.seed)
    params = model.parameters()
    state = OptimState.zeros_like(params)
    metrics = []
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(METRIC_COLUMNS)
    last_good = model_state(model)
    div = cfg.train_divergence
    try:
        for it in range(cfg.iters):
            t0 = time.perf_counter()
            lr = cfg.lr_at(it)
            try:
                if cfg.loss == "nll":
                    batch = _draw_batch(data, target, cfg.batch_size, gen)
                    loss, res = nll_loss(model, batch, solver, div, gen)
                    knots_reverse = True
                else:
                    loss, res = reverse_kl_loss(model, target, cfg.batch_size, solver, div, gen)
                    knots_reverse = False
                total = loss
                if cfg.reg_kinetic > 0:
                    total = total + cfg.reg_kinetic * kinetic_regularizer(
                        model.flow.manifold if hasattr(model, "flow") else model.manifold,
                        model.field, res.steps, reverse=knots_reverse)
                if cfg.reg_frobenius > 0:
                    k = int(torch.randint(0, len(res.steps), (1,), generator=gen))
                    t_k, z_k = res.steps[k]
                    fm = model.flow.manifold if hasattr(model, "flow") else model.manifold
                    field = ScaledField(model.field, -1.0, 1.0) if knots_reverse else model.field
                    total = total + cfg.reg_frobenius * frobenius_regularizer(
                        fm, field, z_k, t_k, generator=gen)
                grads = param_gradient(total, params)
            except SolverError as exc:
                raise NumericalAbort(f"iteration {it}: solver failure: {exc}") from exc
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val) or not all(bool(torch.isfinite(g).all()) for g in grads):
                raise NumericalAbort(f"iteration {it}: non-finite loss or gradient (loss={loss_val})")
            if cfg.grad_clip is not None:
                grads = _clip(grads, cfg.grad_clip)
            adam_step(params, grads, state, cfg, lr)
            if hasattr(model.field, "clamp_last_layer"):
                model.field.clamp_last_layer()
            last_good = model_state(model)
            row = {"iter": it, "loss": loss_val, "nfe_mean": float(res.nfe), "lr": lr,
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            metrics.append(row)
            if writer:
                writer.writerow(_format_row(row))
                fh.flush()
            if callback is not None:
                callback(it, row)
    except NumericalAbort as exc:
        log.error("%s", exc)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, last_good, {**(meta or {}), "status": "aborted"})
            log.error("last good parameters written to %s", checkpoint_path)
        raise
    finally:
        if fh:
            fh.close()
    return TrainResult(metrics, state)


def _format_row(row):
    return [row["iter"], repr(row["loss"]), repr(row["nfe_mean"]), repr(row["lr"]),
            f"{row['wall_ms']:.3f}"]


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(_format_row(r))


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {r.fieldnames}")
        return [{"iter": int(row["iter"]), "loss": float(row["loss"]), "nfe_mean": float(row["nfe_mean"]),
                 "lr": float(row["lr"]), "wall_ms": float(row["wall_ms"])} for row in r]


# ---------------------------------------------------------------------------
# vMF mixture baseline
# ---------------------------------------------------------------------------

def fit_vmf_mixture(data, n_components: int, lr: float = 1e-2, iters: int = 500, batch_size: int = 400,
                    seed: int = 0, kappa_init: float = 10.0, transport: str = "projection"):
    """Maximum-likelihood vMF mixture by Adam (weights, log kappa) and Riemannian Adam (locations)."""
    from .distributions import VmfMixture

    data = as_tensor(data)
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randperm(data.shape[0], generator=gen)[:n_components]
    if idx.numel() < n_components:
        raise ValueError("more mixture components than data points")
    mix = VmfMixture(torch.full((n_components,), 1.0 / n_components, dtype=DTYPE),
                     data[idx].clone(), torch.full((n_components,), kappa_init, dtype=DTYPE))
    for t in (mix.logits, mix.mus, mix.log_kappa):
        t.requires_grad_(True)
    cfg = TrainConfig(lr=lr, iters=iters, batch_size=batch_size, anneal="none", seed=seed)
    euc = [mix.logits, mix.log_kappa]
    s_euc = OptimState.zeros_like(euc)
    s_sph = OptimState.zeros_like([mix.mus])
    sphere = Sphere(2)
    losses = []
    for _ in range(iters):
        b = data[torch.randint(0, data.shape[0], (batch_size,), generator=gen)]
        loss = -mix.log_prob(b).mean()
        g_logits, g_mus, g_lk = torch.autograd.grad(loss, [mix.logits, mix.mus, mix.log_kappa])
        adam_step(euc, [g_logits, g_lk], s_euc, cfg)
        riemannian_adam_step([mix.mus], [g_mus], s_sph, cfg, sphere, transport=transport)
        losses.append(float(loss))
    for t in (mix.logits, mix.mus, mix.log_kappa):
        t.requires_grad_(False)
    return mix, losses


def vmf_mixture_grid_search(train_data, test_data, lrs=(1e-1, 5e-2, 1e-2), components=(50, 100, 150, 200),
                            iters: int = 500, batch_size: int = 400, seed: int = 0):
    """Fit one mixture per (lr, components) pair; returns rows sorted by test NLL."""
    rows = []
    test_data = as_tensor(test_data)
    for lr in lrs:
        for k in components:
            mix, _ = fit_vmf_mixture(train_data, k, lr, iters, batch_size, seed)
            with torch.no_grad():
                nll = float(-mix.log_prob(test_data).mean())
            rows.append({"lr": lr, "components": k, "test_nll": nll, "mixture": mix})
    rows.sort(key=lambda r: r["test_nll"])
    return rows


def evaluate_nll(model, points, solver=None, div=None, generator=None, chunk: int = 4096):
    """Mean NLL (volume measure) and NFE list over ``points``, evaluated in chunks."""
    points = as_tensor(points)
    vals, nfes = [], []
    for i in range(0, points.shape[0], chunk):
        lp, res = model.log_prob(points[i:i + chunk], solver, div, generator, return_result=True)
        if isinstance(model, NaiveModel):
            lp = lp - model.manifold.log_sqrt_det_g(model.manifold.to_local(points[i:i + chunk]))
        vals.append(lp.detach())
        nfes.append(res.nfe)
    lp = torch.cat(vals)
    return float(-lp.mean()), nfes


__all__ = [
    "NumericalAbort", "TrainConfig", "OptimState", "TrainResult", "nll_loss", "reverse_kl_loss",
    "model_rsample", "kinetic_regularizer", "frobenius_regularizer", "adam_step",
    "riemannian_adam_step", "train", "write_metrics_csv", "read_metrics_csv", "fit_vmf_mixture",
    "vmf_mixture_grid_search", "evaluate_nll", "model_state", "model_log_prob",
]
