"""Command-line interface: ``rcnf {train,eval,sample,density-grid,compare}``.

Exit status is 0 on success, 2 for invalid input (configuration, flags,
files) and 3 when a run aborts numerically (non-finite loss, solver failure).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time

import torch

from .config import ConfigError, RunConfig, config_from_meta, load_config
from .data import load_latlon_csv, split, write_manifest
from .evaluation import density_grid, normalization, write_grid_csv, write_pgm
from .flow import SolverError
from .geometry import Euclidean
from .netfield import load_checkpoint, save_checkpoint
from .projected import FAMILIES, build_model
from .training import NumericalAbort, model_rsample, model_state, train

log = logging.getLogger("rcnf")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
TASK_PREFIXES = ("manifold.", "target.", "data.")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _overrides(args) -> dict:
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "tolerance", None) is not None:
        over["solver.rtol"] = args.tolerance
        over["solver.atol"] = args.tolerance
    if getattr(args, "divergence", None) is not None:
        over["divergence.train"] = args.divergence
        over["divergence.eval"] = args.divergence
    if getattr(args, "family", None) is not None:
        over["model.family"] = args.family
    if getattr(args, "resolution", None) is not None:
        over["eval.resolution"] = args.resolution
    return over


def _parse_resolution(s: str):
    parts = s.lower().replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 200x400, got {s!r}") from None
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"resolution must be two positive integers, got {s!r}")
    return vals


def _out_dir(args) -> str:
    d = args.out_dir or "."
    os.makedirs(d, exist_ok=True)
    return d


def _load_data(cfg: RunConfig):
    """(train points, test points, dataset manifest dict) for a CSV-backed run, else Nones."""
    path = cfg["data.path"]
    if not path:
        return None, None, None
    ds = load_latlon_csv(path)
    if ds.n_rejected:
        log.warning("%s: rejected %d of %d rows", path, ds.n_rejected, ds.n_rows)
    seed = cfg["data.split_seed"] if cfg["data.split_seed"] is not None else cfg["seed"]
    tr, te = split(ds, seed, cfg["data.train_frac"])
    man = {"source": ds.source, "rows_read": ds.n_rows, "rows_accepted": len(ds),
           "rows_rejected": ds.n_rejected, "split_seed": seed, "train_frac": cfg["data.train_frac"],
           "n_train": len(tr), "n_test": len(te)}
    return tr.points, te.points, (ds, tr, te, man)


def _target(cfg: RunConfig):
    spec = cfg.target_spec()
    return spec.build() if spec is not None else None


def _test_points(cfg: RunConfig, target, test):
    if test is not None:
        return test
    gen = torch.Generator().manual_seed(cfg["seed"] + 1_000_003)
    return target.sample(cfg["eval.n_samples"], gen)


def _build(cfg: RunConfig):
    return build_model(cfg["model.family"], cfg.manifold(), cfg.field_config(), seed=cfg["seed"])


def load_model(path, family: str | None = None):
    tensors, meta = load_checkpoint(path)
    cfg = config_from_meta(meta)
    if family is not None and family != cfg["model.family"]:
        raise UsageError(f"checkpoint holds a {cfg['model.family']} model, not {family}")
    model = _build(cfg)
    try:
        model.field.load_state_dict(tensors)
    except RuntimeError as exc:
        raise UsageError(f"{path}: parameters do not match the stored configuration: {exc}") from None
    return model, cfg, meta


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_training(cfg: RunConfig, out_dir: str):
    model = _build(cfg)
    train_pts, _, data_info = _load_data(cfg)
    target = _target(cfg)
    meta = {"family": cfg["model.family"], **cfg.as_meta()}
    ckpt = os.path.join(out_dir, "checkpoint.txt")
    t0 = time.perf_counter()
    result = train(model, cfg.train_config(), data=train_pts, target=target, solver=cfg.solver(),
                   metrics_path=os.path.join(out_dir, "metrics.csv"), checkpoint_path=ckpt, meta=meta)
    wall = time.perf_counter() - t0
    save_checkpoint(ckpt, model_state(model), {**meta, "status": "ok"})
    manifest = {"config": {k: v for k, v in cfg.as_meta().items()}, "iterations": len(result.metrics),
                "initial_loss": result.metrics[0]["loss"] if result.metrics else None,
                "final_loss": result.metrics[-1]["loss"] if result.metrics else None,
                "checkpoint": "checkpoint.txt", "metrics": "metrics.csv"}
    if data_info is not None:
        ds, tr, te, man = data_info
        write_manifest(os.path.join(out_dir, "data_manifest.json"), ds, tr, te)
        manifest["data"] = man
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return model, result, wall


def cmd_train(args) -> int:
    cfg = load_config(args.config).with_overrides(**_overrides(args))
    out = _out_dir(args)
    _, result, _ = run_training(cfg, out)
    if result.metrics:
        log.info("trained %d iterations: loss %.4f -> %.4f", len(result.metrics),
                 result.metrics[0]["loss"], result.metrics[-1]["loss"])
    return EXIT_OK


def evaluate(model, cfg: RunConfig, resolution=None, with_normalization: bool = True):
    """Metric records: test NLL, reverse KL (synthetic targets), NFE statistics, normalisation."""
    solver, div = cfg.solver(), cfg.divergence("eval")
    gen = torch.Generator().manual_seed(cfg["seed"] + 7)
    _, test, _ = _load_data(cfg)
    target = _target(cfg)
    pts = _test_points(cfg, target, test)
    records = []
    lp_parts, nfes = [], []
    for i in range(0, pts.shape[0], 4096):
        chunk = pts[i:i + 4096]
        lp, res = model.log_prob(chunk, solver, div, gen, return_result=True)
        if model.family == "naive":
            lp = lp - model.manifold.log_sqrt_det_g(model.manifold.to_local(chunk))
        lp_parts.append(lp.detach())
        nfes.append(res.nfe)
    lp = torch.cat(lp_parts)
    n = lp.numel()
    records.append({"metric": "nll", "value": float(-lp.mean()), "stderr": float(lp.std() / math.sqrt(n)),
                    "n": n})
    if target is not None:
        try:
            z, lq, res = model_rsample(model, cfg["eval.n_samples"], solver, div, gen, train=False)
            diff = (lq - target.log_prob(z)).detach()
            records.append({"metric": "kl", "value": float(diff.mean()),
                            "stderr": float(diff.std() / math.sqrt(diff.numel())), "n": diff.numel()})
            nfes.append(res.nfe)
        except ValueError as exc:
            records.append({"metric": "kl", "value": None, "error": str(exc)})
    records.append({"metric": "nfe", "mean": sum(nfes) / len(nfes), "min": min(nfes), "max": max(nfes),
                    "solves": len(nfes)})
    if with_normalization and not isinstance(model.manifold, Euclidean):
        res = resolution or tuple(cfg["eval.resolution"])
        if model.manifold.kind == "ball" and resolution is None:
            res = (200, 200)
        records.append({"metric": "normalization", "value": normalization(model, res, solver, div, gen),
                        "resolution": list(res)})
    return records


def cmd_eval(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, args.family)
    cfg = cfg.with_overrides(**_overrides(args))
    records = evaluate(model, cfg, args.resolution, not args.no_normalization)
    lines = [json.dumps(r, sort_keys=True) for r in records]
    for line in lines:
        print(line)
    if args.out_dir:
        with open(os.path.join(_out_dir(args), "eval.jsonl"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, args.family)
    cfg = cfg.with_overrides(**_overrides(args))
    gen = torch.Generator().manual_seed(cfg["seed"])
    z, lp = model.sample(args.n, cfg.solver(), cfg.divergence("eval"), gen)
    if model.family == "naive":
        # volume-measure density where the sample lies in the ball, NaN outside
        inside = model.manifold.contains(z)
        lp = torch.where(inside, lp - model.manifold.log_sqrt_det_g(model.manifold.project(z)),
                         torch.full_like(lp, math.nan))
    path = os.path.join(_out_dir(args), "samples.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(z.shape[1])] + ["logp"])
        for row, v in zip(z.detach().tolist(), lp.detach().tolist()):
            w.writerow([repr(c) for c in row] + [repr(v)])
    log.info("wrote %d samples to %s", args.n, path)
    return EXIT_OK


def cmd_density_grid(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, args.family)
    cfg = cfg.with_overrides(**_overrides(args))
    res = args.resolution or tuple(cfg["eval.resolution"])
    gen = torch.Generator().manual_seed(cfg["seed"])
    coords, lp, shape = density_grid(model, res, cfg.solver(), cfg.divergence("eval"), gen)
    out = _out_dir(args)
    write_grid_csv(os.path.join(out, "grid.csv"), coords, lp)
    write_pgm(os.path.join(out, "heatmap.pgm"), lp, shape)
    return EXIT_OK


COMPARE_COLUMNS = ("config", "family", "seed", "test_nll", "kl", "nfe_mean", "wall_s")


def cmd_compare(args) -> int:
    cfgs = [(p, load_config(p)) for p in args.config]
    families = args.families.split(",") if args.families else None
    runs = []
    for path, c in cfgs:
        fams = families or [c["model.family"]]
        for fam in fams:
            if fam not in FAMILIES:
                raise UsageError(f"unknown family {fam!r}")
            runs.append((path, c.with_overrides(**{**_overrides(args), "model.family": fam})))
    if len(runs) < 2:
        raise UsageError("compare needs at least two runs (configs x families)")
    task0 = {k: v for k, v in runs[0][1].values.items() if k.startswith(TASK_PREFIXES)}
    for path, c in runs[1:]:
        task = {k: v for k, v in c.values.items() if k.startswith(TASK_PREFIXES)}
        if task != task0:
            diff = sorted(k for k in task if task[k] != task0.get(k))
            raise ConfigError(diff[0] if diff else "task", f"{path} describes a different task than "
                                                        f"{runs[0][0]}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = _out_dir(args)
    rows = []
    for path, c in runs:
        for seed in seeds or [c["seed"]]:
            rc = c.with_overrides(seed=seed)
            run_dir = os.path.join(out, f"{os.path.splitext(os.path.basename(path))[0]}-{rc['model.family']}-s{seed}")
            os.makedirs(run_dir, exist_ok=True)
            t0 = time.perf_counter()
            model, result, _ = run_training(rc, run_dir)
            recs = {r["metric"]: r for r in evaluate(model, rc, with_normalization=False)}
            wall = time.perf_counter() - t0
            kl = recs.get("kl", {}).get("value")
            rows.append({"config": path, "family": rc["model.family"], "seed": seed,
                         "test_nll": recs["nll"]["value"], "kl": "" if kl is None else kl,
                         "nfe_mean": sum(r["nfe_mean"] for r in result.metrics) / max(1, len(result.metrics)),
                         "wall_s": round(wall, 3)})
            log.info("%s seed %d: test NLL %.4f", rc["model.family"], seed, rows[-1]["test_nll"])
    with open(os.path.join(out, "compare.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _common(p, with_config=True):
    if with_config:
        p.add_argument("--config", required=True, help="run configuration (dotted key = value file)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out-dir", help="output directory (created if missing)")
    p.add_argument("--tolerance", type=float, help="solver rtol = atol for evaluation solves")
    p.add_argument("--divergence", choices=("exact", "hutchinson"), help="divergence estimator")
    p.add_argument("--family", choices=FAMILIES, help="model family")
    p.add_argument("--resolution", type=_parse_resolution, help="grid size, e.g. 200x400")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcnf", description="Continuous normalizing flows on manifolds")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (JSON lines on stdout)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-normalization", action="store_true", help="skip the quadrature check")
    _common(p, with_config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=1000)
    _common(p, with_config=False)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("density-grid", help="log-density grid CSV and PGM heatmap")
    p.add_argument("--checkpoint", required=True)
    _common(p, with_config=False)
    p.set_defaults(func=cmd_density_grid)

    p = sub.add_parser("compare", help="train and evaluate several configs/families/seeds")
    p.add_argument("--config", nargs="+", required=True)
    p.add_argument("--families", help="comma-separated families to run for every config")
    p.add_argument("--seeds", help="comma-separated seeds (default: each config's seed)")
    _common(p, with_config=False)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalAbort, SolverError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
