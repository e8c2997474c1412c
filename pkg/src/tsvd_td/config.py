"""Run configuration: defaults, flat ``key = value`` files, and validation."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

ALGORITHMS = ("tsvd", "td", "feature-td")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    states: int = 200
    tasks: int = 40
    rank: int = 8
    trunc_k: int | None = None  # None -> min(rank + 1, tasks)
    gamma: float = 0.95
    iters: int = 5000
    trials: int = 5
    seed: int = 0
    schedule: str = "simple"
    noise: float = 0.0
    algos: tuple[str, ...] = ALGORITHMS
    out: str = "out"
    ranks: tuple[int, ...] | None = None  # sweep only

    @property
    def k(self) -> int:
        if self.trunc_k is not None:
            return self.trunc_k
        return min(self.rank + 1, self.tasks)

    def _validate_rank(self) -> None:
        if not 1 <= self.rank <= min(self.states, self.tasks):
            raise ConfigError(
                f"rank must satisfy 1 <= rank <= min(states, tasks) = "
                f"{min(self.states, self.tasks)} (got rank={self.rank})"
            )
        if not self.rank <= self.k <= self.tasks:
            raise ConfigError(
                f"trunc_k must satisfy rank <= trunc_k <= tasks "
                f"({self.rank} <= k <= {self.tasks}, got k={self.k})"
            )

    def validate(self, sweep: bool = False) -> "Config":
        """Raise ``ConfigError`` on the first violated bound.

        A sweep chooses its own ranks and truncation, so ``rank`` and
        ``trunc_k`` are not checked when ``sweep`` is set.
        """
        if self.states < 1:
            raise ConfigError(f"states must be >= 1 (got {self.states})")
        if self.tasks < 1:
            raise ConfigError(f"tasks must be >= 1 (got {self.tasks})")
        if not sweep:
            self._validate_rank()
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must satisfy 0 <= gamma < 1 (got {self.gamma})")
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0 (got {self.iters})")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1 (got {self.trials})")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be in [0, 2**64) (got {self.seed})")
        if self.schedule not in ("theory", "simple"):
            raise ConfigError(f"schedule must be 'theory' or 'simple' (got {self.schedule!r})")
        if self.noise < 0:
            raise ConfigError(f"noise half-width must be >= 0 (got {self.noise})")
        if not self.algos:
            raise ConfigError("at least one algorithm is required")
        for a in self.algos:
            if a not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r}; choose from {', '.join(ALGORITHMS)}")
        if self.ranks is not None:
            for r in self.ranks:
                if not 1 <= r <= min(self.tasks, self.states):
                    raise ConfigError(
                        f"sweep rank {r} outside [1, min(states, tasks)] = "
                        f"[1, {min(self.tasks, self.states)}]"
                    )
        return self


def _parse_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


_CONVERTERS = {
    "states": int,
    "tasks": int,
    "rank": int,
    "trunc_k": lambda v: None if str(v).lower() in ("", "none", "auto") else int(v),
    "gamma": float,
    "iters": int,
    "trials": int,
    "seed": int,
    "schedule": str,
    "noise": float,
    "algos": lambda v: _parse_list(v) if isinstance(v, str) else tuple(v),
    "out": str,
    "ranks": lambda v: tuple(int(x) for x in (_parse_list(v) if isinstance(v, str) else v)),
}
assert set(_CONVERTERS) == {f.name for f in fields(Config)}


def coerce(values: dict) -> dict:
    """Normalize keys (``trunc-k`` -> ``trunc_k``) and convert string values."""
    out = {}
    for key, raw in values.items():
        name = key.strip().replace("-", "_")
        if name not in _CONVERTERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[name] = _CONVERTERS[name](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    return out


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return coerce(values)


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> Config:
    """Defaults < config file < explicit overrides."""
    cfg = Config()
    if file_values:
        cfg = replace(cfg, **file_values)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg
