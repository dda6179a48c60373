"""``key=value`` configuration files.

Precedence is command-line flag, then config file, then the defaults below.
The file comes from ``--config`` or the ``SVB_CONFIG`` environment variable.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace

from .errors import DataError

ENV_VAR = "SVB_CONFIG"


class ConfigError(DataError):
    pass


def _ks(text: str) -> tuple:
    return tuple(int(k) for k in text.split(",") if k.strip())


@dataclass(frozen=True)
class Config:
    as_norm_top_n: int = 400
    as_norm_sigma_floor: float = 1e-6
    qmf_d_min_margin: float = 0.01
    qmf_l2: float = 1e-4
    dcf_p_target: float = 0.05
    dcf_c_miss: float = 1.0
    dcf_c_fa: float = 1.0
    cluster_ks: tuple = (1600, 1800, 2000)
    cluster_restarts: int = 3
    cluster_max_iters: int = 100
    cohort_size: int = 20000
    loss_m: float = 0.2
    loss_s: float = 32.0
    loss_sub_centers: int = 3
    seed: int = 0
    threads: int = 1

    def validate(self) -> "Config":
        checks = [
            (self.as_norm_top_n >= 2, "as_norm.top_n must be >= 2"),
            (self.as_norm_sigma_floor > 0, "as_norm.sigma_floor must be > 0"),
            (self.qmf_d_min_margin > 0, "qmf.d_min_margin must be > 0"),
            (self.qmf_l2 >= 0, "qmf.l2 must be >= 0"),
            (0 < self.dcf_p_target < 1, "dcf.p_target must be in (0, 1)"),
            (self.dcf_c_miss > 0 and self.dcf_c_fa > 0, "dcf costs must be > 0"),
            (len(self.cluster_ks) > 0 and min(self.cluster_ks) >= 1, "cluster.ks must be positive"),
            (list(self.cluster_ks) == sorted(set(self.cluster_ks)), "cluster.ks must be ascending"),
            (self.cluster_restarts >= 1, "cluster.restarts must be >= 1"),
            (self.cluster_max_iters >= 1, "cluster.max_iters must be >= 1"),
            (self.cohort_size >= 2, "cohort.size must be >= 2"),
            (0 <= self.loss_m < math.pi, "loss.m must be in [0, pi)"),
            (self.loss_s > 0, "loss.s must be > 0"),
            (self.loss_sub_centers >= 1, "loss.sub_centers must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


_PARSERS = {f.name: (_ks if f.name == "cluster_ks" else f.type) for f in fields(Config)}
_CASTS = {"int": int, "float": float}


def parse_config(text: str, base: Config = Config()) -> Config:
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key=value")
        name = key.strip().replace(".", "_")
        if name not in _PARSERS:
            raise ConfigError(f"config line {lineno}: unknown key {key.strip()!r}")
        cast = _PARSERS[name]
        cast = _CASTS.get(cast, cast) if isinstance(cast, str) else cast
        try:
            updates[name] = cast(value.strip())
        except ValueError:
            raise ConfigError(f"config line {lineno}: bad value {value.strip()!r}") from None
    return replace(base, **updates).validate()


def load_config(path: str | os.PathLike | None = None) -> Config:
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return Config()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
