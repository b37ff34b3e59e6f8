"""Benchmark configuration: one dataclass, INI files and CLI flags mirror it."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

SECTION = "bench"


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` maps field name to a diagnostic."""

    def __init__(self, errors: dict[str, str]):
        self.errors = errors
        msg = "; ".join(f"{k}: {v}" for k, v in errors.items())
        super().__init__(msg)


@dataclass
class BenchConfig:
    workload: str = "kvs"
    mode: str = "lotus"
    cns: int = 3
    mns: int = 3
    coordinators: int = 8
    txns: Optional[int] = 10_000
    duration_ms: Optional[float] = None
    rw_ratio: Optional[float] = None
    zipf: float = 0.99
    isolation: str = "sr"
    versions: int = 2
    cache_entries: int = 65536
    seed: int = 0
    crash: list[tuple[int, float]] = field(default_factory=list)
    reshard: bool = False
    history: Optional[str] = None
    out: str = "table"
    scale: Optional[int] = None
    lock_slots: int = 1 << 20
    metrics_interval_ms: float = 100.0
    hotspot_shard: Optional[int] = None
    shadow_check: bool = False
    drop_probability: float = 0.0
    check: bool = True
    timeline_ms: float = 1.0

    def validate(self) -> "BenchConfig":
        e: dict[str, str] = {}
        if self.workload not in ("kvs", "smallbank"):
            e["workload"] = f"unknown workload {self.workload!r} (kvs|smallbank)"
        if self.mode not in ("lotus", "mn-lock"):
            e["mode"] = f"unknown mode {self.mode!r} (lotus|mn-lock)"
        if self.isolation not in ("sr", "si"):
            e["isolation"] = f"unknown isolation {self.isolation!r} (sr|si)"
        if self.out not in ("json", "csv", "table"):
            e["out"] = f"unknown output format {self.out!r} (json|csv|table)"
        for name in ("cns", "mns", "coordinators", "versions", "cache_entries", "lock_slots"):
            if getattr(self, name) < 1:
                e[name] = "must be >= 1"
        if self.versions < 2 and "versions" not in e:
            e["versions"] = "need at least 2 cells per version table"
        if self.txns is None and self.duration_ms is None:
            e["txns"] = "give --txns or --duration"
        if self.txns is not None and self.txns < 1:
            e["txns"] = "must be >= 1"
        if self.duration_ms is not None and self.duration_ms <= 0:
            e["duration_ms"] = "must be > 0"
        if self.rw_ratio is not None and not 0 <= self.rw_ratio <= 1:
            e["rw_ratio"] = "must be in [0, 1]"
        if self.zipf < 0:
            e["zipf"] = "theta must be >= 0"
        if self.scale is not None and self.scale < 1:
            e["scale"] = "must be >= 1"
        if self.hotspot_shard is not None and not 0 <= self.hotspot_shard < 4096:
            e["hotspot_shard"] = "must be a shard number in [0, 4096)"
        if not 0 <= self.drop_probability < 1:
            e["drop_probability"] = "must be in [0, 1)"
        for cn, at in self.crash:
            if not 0 <= cn < self.cns:
                e["crash"] = f"cn {cn} outside [0, {self.cns})"
            elif at < 0:
                e["crash"] = "crash time must be >= 0"
        if self.crash and self.mode != "lotus":
            e["crash"] = "crash injection is supported in lotus mode only"
        if e:
            raise ConfigError(e)
        return self

    @property
    def effective_scale(self) -> int:
        if self.scale is not None:
            return self.scale
        return 100_000 if self.workload == "kvs" else 200_000


def parse_crash(spec: str) -> list[tuple[int, float]]:
    """``"cn:1@20,cn:2@20"`` -> ``[(1, 20.0), (2, 20.0)]`` (times in ms)."""
    out = []
    for part in spec.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        try:
            node, at = part.split("@")
            kind, idx = node.split(":")
            if kind.strip() != "cn":
                raise ValueError
            out.append((int(idx), float(at)))
        except ValueError:
            raise ConfigError({"crash": f"cannot parse {part!r}; expected cn:<id>@<ms>"}) from None
    return out


def _coerce(name: str, raw: str, ftype) -> object:
    t = str(ftype)
    raw = raw.strip()
    if name == "crash":
        return parse_crash(raw)
    if raw.lower() in ("none", "") and "Optional" in t:
        return None
    if "bool" in t:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in t:
        return int(raw.replace("_", ""))
    if "float" in t:
        return float(raw)
    return raw


def load_config(path: str, base: Optional[BenchConfig] = None) -> BenchConfig:
    """Read an INI file with a ``[bench]`` section; keys are flag names."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError({"config": f"cannot read {path}"})
    if not cp.has_section(SECTION):
        raise ConfigError({"config": f"missing [{SECTION}] section"})
    cfg = dataclasses.replace(base or BenchConfig())
    fields = {f.name: f for f in dataclasses.fields(BenchConfig)}
    errors = {}
    for key, raw in cp.items(SECTION):
        name = key.replace("-", "_")
        if name == "duration":
            name = "duration_ms"
        if name not in fields:
            errors[name] = "unknown key"
            continue
        try:
            setattr(cfg, name, _coerce(name, raw, fields[name].type))
        except (ValueError, ConfigError) as exc:
            errors[name] = str(exc)
    if errors:
        raise ConfigError(errors)
    return cfg.validate()
