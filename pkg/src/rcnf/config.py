"""Flat dotted key-value run configuration.

Syntax, one entry per line::

    # comment
    seed = 0
    manifold.kind = sphere
    field.hidden_sizes = 64, 64, 64
    train.lr = 1e-3

Whitespace around ``=`` is ignored, ``#`` starts a comment, lists are
comma-separated and booleans are ``true``/``false``. Unknown keys and
ill-typed values raise ConfigError naming the offending key.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from .data import SyntheticTargetSpec
from .flow import DivergenceMode, SolverConfig
from .geometry import make_manifold
from .netfield import FieldConfig
from .projected import FAMILIES
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config error at {key}: {msg}")
        self.key = key


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


def _opt_int(s):
    return None if s.strip().lower() in ("", "none") else int(s)


def _components(s):
    # "w mx my mz kappa; w mx my mz kappa; ..."
    out = []
    for part in s.split(";"):
        if not part.strip():
            continue
        vals = [float(x) for x in part.split()]
        if len(vals) != 5:
            raise ValueError("each component needs 'weight mx my mz kappa'")
        out.append((vals[0], tuple(vals[1:4]), vals[4]))
    return out


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "manifold.kind": (str, "sphere"),
    "manifold.dim": (int, 2),
    "manifold.curvature": (_opt_float, None),
    "model.family": (str, "riemannian"),
    "field.hidden_sizes": (_ints, (64, 64, 64)),
    "field.input_layer": (str, "geodesic"),
    "field.output_scaling": (str, "metric"),
    "field.last_layer_bound": (float, 10.0),
    "field.sphere_neuron_norm": (_bool, True),
    "field.hyperplane_init_std": (float, 0.1),
    "target.kind": (str, "none"),
    "target.mu": (_floats, (-1.0, 0.0, 0.0)),
    "target.kappa": (float, 10.0),
    "target.alpha": (float, 1.0),
    "target.sigma": (_floats, (0.3, 1.0)),
    "target.components": (_components, []),
    "data.path": (str, ""),
    "data.train_frac": (float, 0.8),
    "data.split_seed": (_opt_int, None),
    "train.loss": (str, "nll"),
    "train.batch_size": (int, 400),
    "train.lr": (float, 1e-3),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.iters": (int, 1000),
    "train.anneal": (str, "exp"),
    "train.anneal_rate": (float, 0.98),
    "train.anneal_period": (float, 300.0),
    "train.reg_kinetic": (float, 0.0),
    "train.reg_frobenius": (float, 0.0),
    "train.grad_clip": (_opt_float, None),
    "solver.rtol": (float, 1e-5),
    "solver.atol": (float, 1e-5),
    "solver.train_rtol": (_opt_float, 1e-3),
    "solver.train_atol": (_opt_float, 1e-3),
    "solver.h_init": (float, 0.05),
    "solver.h_min": (float, 1e-6),
    "solver.max_nfe": (int, 10000),
    "divergence.train": (str, "exact"),
    "divergence.eval": (str, "exact"),
    "divergence.probe_dist": (str, "rademacher"),
    "eval.n_samples": (int, 2000),
    "eval.resolution": (_ints, (200, 400)),
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], tuple):
            return "; ".join(f"{w!r} {m[0]!r} {m[1]!r} {m[2]!r} {k!r}" for w, m, k in v)
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **over) -> "RunConfig":
        vals = dict(self.values)
        for k, v in over.items():
            if v is not None:
                vals[k] = v
        cfg = RunConfig(vals)
        cfg.validate()
        return cfg

    def dump(self) -> str:
        return "\n".join(f"{k} = {_fmt(self.values[k])}" for k in SCHEMA) + "\n"

    def as_meta(self) -> dict:
        return {f"config.{k}": _fmt(self.values[k]) for k in SCHEMA}

    # -- builders --------------------------------------------------------------
    def manifold(self):
        return make_manifold(self["manifold.kind"], self["manifold.dim"], self["manifold.curvature"])

    def field_config(self) -> FieldConfig:
        return FieldConfig(hidden_sizes=self["field.hidden_sizes"], input_layer=self["field.input_layer"],
                           output_scaling=self["field.output_scaling"],
                           last_layer_bound=self["field.last_layer_bound"],
                           sphere_neuron_norm=self["field.sphere_neuron_norm"],
                           hyperplane_init_std=self["field.hyperplane_init_std"])

    def target_spec(self) -> SyntheticTargetSpec | None:
        kind = self["target.kind"]
        if kind == "none":
            return None
        return SyntheticTargetSpec(kind, alpha=self["target.alpha"], sigma=self["target.sigma"],
                                   mu=self["target.mu"], kappa=self["target.kappa"],
                                   components=self["target.components"],
                                   curvature=self["manifold.curvature"])

    def solver(self) -> SolverConfig:
        return SolverConfig(rtol=self["solver.rtol"], atol=self["solver.atol"],
                            train_rtol=self["solver.train_rtol"], train_atol=self["solver.train_atol"],
                            h_init=self["solver.h_init"], h_min=self["solver.h_min"],
                            max_nfe=self["solver.max_nfe"])

    def divergence(self, phase: str) -> DivergenceMode:
        return DivergenceMode(self[f"divergence.{phase}"], self["divergence.probe_dist"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(loss=self["train.loss"], batch_size=self["train.batch_size"], lr=self["train.lr"],
                           beta1=self["train.beta1"], beta2=self["train.beta2"], eps=self["train.eps"],
                           iters=self["train.iters"], anneal=self["train.anneal"],
                           anneal_rate=self["train.anneal_rate"], anneal_period=self["train.anneal_period"],
                           reg_kinetic=self["train.reg_kinetic"], reg_frobenius=self["train.reg_frobenius"],
                           seed=self["seed"], train_divergence=self.divergence("train"),
                           eval_divergence=self.divergence("eval"), grad_clip=self["train.grad_clip"])

    def validate(self):
        """Build every component once so invalid values surface with their key path."""
        checks = [
            ("manifold", self.manifold),
            ("field", self.field_config),
            ("solver", self.solver),
            ("divergence.train", lambda: self.divergence("train")),
            ("divergence.eval", lambda: self.divergence("eval")),
            ("train", self.train_config),
        ]
        for section, fn in checks:
            try:
                fn()
            except ValueError as exc:
                raise ConfigError(_guess_key(section, str(exc)), str(exc)) from None
        fam = self["model.family"]
        if fam not in FAMILIES:
            raise ConfigError("model.family", f"expected one of {FAMILIES}, got {fam!r}")
        kind = self["manifold.kind"]
        if fam == "naive" and kind == "sphere":
            raise ConfigError("model.family", "naive family is not defined on the sphere")
        if fam == "wrapped" and kind != "ball":
            raise ConfigError("model.family", "wrapped family needs manifold.kind = ball")
        if fam == "stereographic" and kind != "sphere":
            raise ConfigError("model.family", "stereographic family needs manifold.kind = sphere")
        if self["target.kind"] != "none":
            try:
                spec = self.target_spec()
                spec.build()
            except ValueError as exc:
                raise ConfigError("target", str(exc)) from None
            if type(spec.manifold()) is not type(self.manifold()):
                raise ConfigError("target.kind", f"target {spec.kind} does not live on manifold {kind}")
        if not 0 < self["data.train_frac"] < 1:
            raise ConfigError("data.train_frac", "must lie in (0, 1)")
        if self["data.path"] == "" and self["target.kind"] == "none":
            raise ConfigError("target.kind", "need either data.path or a synthetic target")
        if len(self["eval.resolution"]) != 2 or min(self["eval.resolution"]) < 1:
            raise ConfigError("eval.resolution", "expected two positive integers")
        return self


def _guess_key(section: str, msg: str) -> str:
    """Best-effort key path for a builder error: the first field of the section named in it."""
    if section in SCHEMA:
        return section
    for key in SCHEMA:
        if key.startswith(section + ".") and re.search(rf"\b{key.split('.', 1)[1]}\b", msg):
            return key
    return section


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(key, f"cannot parse {val!r}: {exc}") from None
    cfg = RunConfig(values)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def config_from_meta(meta: dict) -> RunConfig:
    """Rebuild the resolved configuration stored in a checkpoint's meta lines."""
    lines = [f"{k[len('config.'):]} = {v}" for k, v in meta.items() if k.startswith("config.")]
    return parse_config("\n".join(lines), "<checkpoint>")
