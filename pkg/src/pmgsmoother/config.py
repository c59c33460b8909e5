"""Run configuration: flat ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields

SMOOTHER_ALIASES = {"cartesian": "cartesian_reinforced", "cr": "cartesian_reinforced"}


@dataclass
class RunConfig:
    dim: int = 2
    degree: int = 3
    refinements: int = 2
    delta: float = 0.0
    seed: int = 0
    mode: str = "half"
    smoother: str = "jacobi"
    local_iters: int = 1
    omega: float | None = None
    distributor: str = "lookup"
    variant: str = "even_odd"
    workers: int = 1
    patch_batch: int = 32
    pre_sweeps: int = 1
    post_sweeps: int = 1
    tol: float = 1e-8
    max_iter: int = 200
    repetitions: int = 20
    count_flops: bool = True
    csv: str | None = None

    def validate(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.refinements < 0:
            raise ValueError("refinements must be >= 0")
        if not 0.0 <= self.delta < 0.5:
            raise ValueError("delta must lie in [0, 0.5)")
        self.smoother = SMOOTHER_ALIASES.get(self.smoother, self.smoother)
        if self.mode not in ("full", "half"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.smoother not in ("jacobi", "cartesian_reinforced", "fdm"):
            raise ValueError(f"unknown smoother {self.smoother!r}")
        if self.distributor not in ("dynamic", "lookup"):
            raise ValueError(f"unknown distributor {self.distributor!r}")
        if self.variant not in ("even_odd", "dense"):
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.local_iters < 1 or self.workers < 1 or self.repetitions < 1:
            raise ValueError("iteration, worker and repetition counts must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        return self


# file keys mirror the documented dotted names
FILE_KEYS = {
    "local.mode": "mode",
    "local.smoother": "smoother",
    "local.iterations": "local_iters",
    "local.omega": "omega",
    "local.distributor": "distributor",
    "kernel.variant": "variant",
    "mg.pre_sweeps": "pre_sweeps",
    "mg.post_sweeps": "post_sweeps",
    "solver.tol": "tol",
    "solver.max_iter": "max_iter",
    "bench.repetitions": "repetitions",
    "bench.count_flops": "count_flops",
}


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    t = str(kinds[name])
    raw = raw.strip()
    if raw.lower() in ("none", "") and "None" in t:
        return None
    if t.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    cp.read_string("[run]\n" + text)
    out = {}
    valid = {f.name for f in fields(RunConfig)}
    for key, value in cp.items("run"):
        name = FILE_KEYS.get(key, key.replace("-", "_"))
        if name not in valid:
            raise ValueError(f"unknown configuration key {key!r}")
        out[name] = _coerce(name, value)
    return out


def load_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()
