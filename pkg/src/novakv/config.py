"""Cluster parameters, range partitioning, and key routing.

A database is split into omega*eta equal-width ranges, omega consecutive
ranges per LTC. ClusterConfig snapshots are immutable; every membership or
assignment change produces a new snapshot with a higher version.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field, replace


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ClusterParams:
    eta: int = 1  # LTCs
    beta: int = 1  # StoCs
    omega: int = 1  # ranges per LTC
    theta: int = 8  # Dranges per range
    gamma: int = 16  # max Tranges per Drange
    alpha: int = 8  # active memtables per range
    delta: int = 16  # total memtables per range
    tau_mib: float = 16.0  # memtable/SSTable size in MiB
    rho: int = 1  # StoCs per SSTable

    def validate(self) -> None:
        for name in ("eta", "beta", "omega", "theta", "gamma", "alpha", "delta", "rho"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.tau_mib <= 0:
            raise ConfigError("tau_mib must be positive")
        if self.theta != self.alpha:
            raise ConfigError("one active memtable per Drange requires theta == alpha")
        if self.delta % self.theta != 0 or self.delta // self.theta < 1:
            raise ConfigError("delta must be a positive multiple of theta")
        if not (1 <= self.rho <= self.beta):
            raise ConfigError("rho must be within [1, beta]")

    @property
    def tau_bytes(self) -> int:
        return int(self.tau_mib * 1024 * 1024)

    def ltc_ids(self) -> list[str]:
        return [f"ltc{i}" for i in range(self.eta)]

    def stoc_ids(self) -> list[str]:
        return [f"stoc{i}" for i in range(self.beta)]


@dataclass(frozen=True)
class ClusterConfig:
    params: ClusterParams
    key_space: tuple[int, int]
    ranges: tuple[tuple[int, int], ...]
    assignment: tuple[tuple[int, str], ...]  # (range_id, ltc_id)
    stoc_members: tuple[str, ...]
    version: int = 1

    def assignment_map(self) -> dict[int, str]:
        return dict(self.assignment)

    def ranges_of(self, ltc_id: str) -> list[int]:
        return [rid for rid, owner in self.assignment if owner == ltc_id]

    def live_ltcs(self) -> list[str]:
        return sorted({owner for _, owner in self.assignment})

    def with_assignment(self, new_assignment: dict[int, str]) -> "ClusterConfig":
        return replace(
            self,
            assignment=tuple(sorted(new_assignment.items())),
            version=self.version + 1,
        )

    def with_stocs(self, stocs) -> "ClusterConfig":
        return replace(self, stoc_members=tuple(sorted(stocs)), version=self.version + 1)


def build_config(params: ClusterParams, key_space: tuple[int, int], seed: int = 0) -> ClusterConfig:
    params.validate()
    lo, hi = key_space
    if hi <= lo:
        raise ConfigError("empty key space")
    n = params.omega * params.eta
    if hi - lo < n:
        raise ConfigError(f"key space narrower than {n} ranges")
    width = hi - lo
    cuts = [lo + (width * i) // n for i in range(n)] + [hi]
    ranges = tuple((cuts[i], cuts[i + 1]) for i in range(n))
    assignment = tuple(
        (rid, f"ltc{rid // params.omega}") for rid in range(n)
    )
    return ClusterConfig(
        params=params,
        key_space=(lo, hi),
        ranges=ranges,
        assignment=assignment,
        stoc_members=tuple(params.stoc_ids()),
        version=1,
    )


def route_key(config: ClusterConfig, key: int) -> tuple[str, int]:
    lo, hi = config.key_space
    if not (lo <= key < hi):
        raise ConfigError(f"key {key} outside key space [{lo},{hi})")
    lowers = [r[0] for r in config.ranges]
    rid = bisect_right(lowers, key) - 1
    return config.assignment_map()[rid], rid


CONFIG_KEYS = {
    "eta": int,
    "beta": int,
    "omega": int,
    "theta": int,
    "gamma": int,
    "alpha": int,
    "delta": int,
    "tau_mib": float,
    "rho": int,
    "key_space_min": int,
    "key_space_max": int,
    "seed": int,
}


def parse_config_text(text: str) -> tuple[ClusterParams, tuple[int, int], int]:
    """key = value lines; '#' starts a comment."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](val.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    key_space = (int(values.pop("key_space_min", 0)), int(values.pop("key_space_max", 1 << 20)))
    seed = int(values.pop("seed", 0))
    params = ClusterParams(**values)  # type: ignore[arg-type]
    params.validate()
    return params, key_space, seed


def load_config_file(path: str) -> tuple[ClusterParams, tuple[int, int], int]:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())
