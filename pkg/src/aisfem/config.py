"""Run configuration: INI files with dotted keys mapped onto the run settings.

Example::

    [run]
    problem = lshape-dcr
    degree = 2
    seed = 0

    [adaptive]
    theta = 0.5
    lambda_sym = 0.1
    lambda_alg = 0.1
    max_dim = 100000

    [solver]
    kind = mg-vcycle
    coarse_cap = 500

    [zarantonello]
    delta = 0.5
    samples = 200

Every key may also be written as ``section.key`` (``solver.kind``).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .driver import AdaptiveConfig

__all__ = ["ExperimentConfig", "load_config", "KEYS"]

_NONE = ("", "none")


def _opt(conv):
    def f(s):
        return None if s.strip().lower() in _NONE else conv(s)
    return f


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"expected an integer, got {s!r}")
    return int(v)


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


# (section, key) -> (target attribute, converter)
KEYS = {
    ("run", "problem"): ("problem", str),
    ("run", "degree"): ("degree", _int),
    ("run", "seed"): ("seed", _int),
    ("run", "diagnostics"): ("diagnostics", _bool),
    ("run", "out"): ("out", str),
    ("adaptive", "theta"): ("theta", float),
    ("adaptive", "lambda_sym"): ("lambda_sym", float),
    ("adaptive", "lambda_alg"): ("lambda_alg", float),
    ("adaptive", "c_mark"): ("C_mark", float),
    ("adaptive", "max_dim"): ("max_dim", _opt(_int)),
    ("adaptive", "eta_tol"): ("eta_tol", _opt(float)),
    ("adaptive", "tau"): ("tau", _opt(float)),
    ("adaptive", "max_steps"): ("max_steps", _opt(_int)),
    ("adaptive", "max_levels"): ("max_levels", _opt(_int)),
    ("adaptive", "j_cap"): ("j_cap", _int),
    ("adaptive", "k_cap"): ("k_cap", _int),
    ("adaptive", "q_data"): ("q_data", _int),
    ("adaptive", "zero_floor"): ("zero_floor", float),
    ("solver", "kind"): ("solver_kind", str),
    ("solver", "coarse_cap"): ("coarse_cap", _int),
    ("solver", "q_cap"): ("q_cap", float),
    ("zarantonello", "delta"): ("delta", float),
    ("zarantonello", "samples"): ("samples", _int),
}


@dataclass
class ExperimentConfig:
    problem: str = "lshape-dcr"
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    out: str = "out"
    diagnostics: bool = False
    seed: int = 0
    samples: int = 200

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with run-level or adaptive-level attributes replaced (``None`` values ignored)."""
        kw = {k: v for k, v in kw.items() if v is not None}
        top = {k: kw.pop(k) for k in ("problem", "out", "diagnostics", "seed", "samples") if k in kw}
        if "diagnostics" in top:
            kw["diagnostics"] = top["diagnostics"]
        ad = self.adaptive.replace(**kw) if kw else self.adaptive
        base = dict(problem=self.problem, out=self.out, diagnostics=self.diagnostics, seed=self.seed, samples=self.samples)
        base.update(top)
        return ExperimentConfig(adaptive=ad, **base)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI file on top of ``base`` (defaults if omitted)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise FileNotFoundError(f"config file {path} not found")
    values = {}
    for section in cp.sections():
        for key, raw in cp[section].items():
            if "." in key:
                sec, k = key.split(".", 1)
            else:
                sec, k = section.lower(), key
            entry = KEYS.get((sec, k.lower()))
            if entry is None:
                raise ValueError(f"{path}: unknown key {sec}.{k}")
            attr, conv = entry
            try:
                values[attr] = conv(raw)
            except ValueError as exc:
                raise ValueError(f"{path}: bad value for {sec}.{k}: {exc}") from exc
    base = base or ExperimentConfig()
    # explicit None for stop rules must survive, so apply adaptive keys directly
    top = {k: values.pop(k) for k in ("problem", "out", "diagnostics", "seed", "samples") if k in values}
    if "diagnostics" in top:
        values["diagnostics"] = top["diagnostics"]
    ad = base.adaptive.replace(**values) if values else base.adaptive
    fields_ = dict(problem=base.problem, out=base.out, diagnostics=base.diagnostics, seed=base.seed, samples=base.samples)
    fields_.update(top)
    return ExperimentConfig(adaptive=ad, **fields_)
