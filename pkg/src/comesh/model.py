"""Core domain types shared across the control plane."""

from __future__ import annotations

import dataclasses
import enum
import math
import operator
from dataclasses import dataclass, field
from typing import Any, Mapping, Union


class ConfigError(ValueError):
    """Raised for invalid scenario or protocol configuration."""


class InvalidParameter(ValueError):
    pass


class Status(enum.Enum):
    ALIVE = "ALIVE"
    FAILED = "FAILED"


class EntityKind(enum.Enum):
    DEVICE_CLUSTER = "DEVICE_CLUSTER"
    ROUTINE = "ROUTINE"


class Stage(enum.Enum):
    NOT_TRIGGERED = "NOT_TRIGGERED"
    ACQUIRING_LOCKS = "ACQUIRING_LOCKS"
    EXECUTING = "EXECUTING"
    RELEASING_LOCKS = "RELEASING_LOCKS"


# stage -> the only stage it may move to
NEXT_STAGE = {
    Stage.NOT_TRIGGERED: Stage.ACQUIRING_LOCKS,
    Stage.ACQUIRING_LOCKS: Stage.EXECUTING,
    Stage.EXECUTING: Stage.RELEASING_LOCKS,
    Stage.RELEASING_LOCKS: Stage.NOT_TRIGGERED,
}


class Availability(enum.Enum):
    UP = "UP"
    DOWN = "DOWN"


class SelectionPolicy(enum.Enum):
    RANDOM = "RANDOM"
    LSH_MIX = "LSH_MIX"


class Locking(enum.Enum):
    SLA = "SLA"
    OLA = "OLA"


class DownPolicy(enum.Enum):
    SKIP = "SKIP"
    ABORT = "ABORT"


class LshLeader(enum.Enum):
    # leader drawn from the locality (stage-1) members only
    LOCAL = "LOCAL"
    # leader is the lowest hash across every selected member
    ALL = "ALL"


@dataclass
class NodeRecord:
    id: int
    location: tuple[float, ...]
    is_smart: bool
    status: Status = Status.ALIVE
    power_domain: int = -1

    def __post_init__(self) -> None:
        if len(self.location) not in (2, 3):
            raise InvalidParameter(f"node {self.id}: location must be 2-D or 3-D")


@dataclass(frozen=True)
class MembershipView:
    """Alive node ids as known at some point; smart flags ride along."""

    epoch_of_view: int
    alive: frozenset[int]
    smart: frozenset[int]

    @property
    def alive_smart(self) -> list[int]:
        return sorted(self.alive & self.smart)

    def without(self, *failed: int) -> "MembershipView":
        return MembershipView(self.epoch_of_view, self.alive - set(failed), self.smart)


@dataclass(frozen=True)
class EntityId:
    kind: EntityKind
    id: int
    representative_device: int

    def key(self) -> str:
        return f"{self.kind.value}:{self.id}"

    def __lt__(self, other: "EntityId") -> bool:  # stable ordering across runs
        return (self.kind.value, self.id) < (other.kind.value, other.id)


# --- trigger expressions -------------------------------------------------

_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}


@dataclass(frozen=True)
class Leaf:
    device: int
    op: str
    threshold: float

    def __post_init__(self) -> None:
        if self.op not in _OPS:
            raise InvalidParameter(f"unknown comparison {self.op!r}")

    def evaluate(self, readings: Mapping[int, float]) -> bool:
        value = readings.get(self.device)
        if value is None:
            return False
        return _OPS[self.op](value, self.threshold)

    def devices(self) -> set[int]:
        return {self.device}


@dataclass(frozen=True)
class And:
    children: tuple["Expr", ...]

    def evaluate(self, readings: Mapping[int, float]) -> bool:
        return all(c.evaluate(readings) for c in self.children)

    def devices(self) -> set[int]:
        return set().union(*(c.devices() for c in self.children))


@dataclass(frozen=True)
class Or:
    children: tuple["Expr", ...]

    def evaluate(self, readings: Mapping[int, float]) -> bool:
        return any(c.evaluate(readings) for c in self.children)

    def devices(self) -> set[int]:
        return set().union(*(c.devices() for c in self.children))


Expr = Union[Leaf, And, Or]


@dataclass(frozen=True)
class TimeWindow:
    """Active while ``start <= t mod period < end``; wraps when end < start."""

    start: float
    end: float
    period: float

    def contains(self, t: float) -> bool:
        x = t % self.period
        if self.start <= self.end:
            return self.start <= x < self.end
        return x >= self.start or x < self.end


@dataclass(frozen=True)
class Trigger:
    expr: Expr
    window: TimeWindow | None = None

    def evaluate(self, readings: Mapping[int, float], now: float) -> bool:
        if self.window is not None and not self.window.contains(now):
            return False
        return self.expr.evaluate(readings)

    def devices(self) -> set[int]:
        return self.expr.devices()


def expr_to_obj(expr: Expr) -> Any:
    if isinstance(expr, Leaf):
        return [expr.device, expr.op, expr.threshold]
    tag = "and" if isinstance(expr, And) else "or"
    return {tag: [expr_to_obj(c) for c in expr.children]}


def expr_from_obj(obj: Any) -> Expr:
    if isinstance(obj, (list, tuple)):
        device, op, threshold = obj
        return Leaf(int(device), str(op), float(threshold))
    if isinstance(obj, dict) and len(obj) == 1:
        (tag, kids), = obj.items()
        children = tuple(expr_from_obj(k) for k in kids)
        if tag == "and":
            return And(children)
        if tag == "or":
            return Or(children)
    raise ConfigError(f"bad trigger expression: {obj!r}")


@dataclass(frozen=True)
class Command:
    device: int
    payload: bytes = b"\x00" * 16
    duration: float = 5.0


@dataclass
class Routine:
    id: int
    trigger: Trigger
    commands: tuple[Command, ...]
    stage: Stage = Stage.NOT_TRIGGERED
    locked: set[int] = field(default_factory=set)
    released: set[int] = field(default_factory=set)

    @property
    def command_devices(self) -> list[int]:
        return sorted({c.device for c in self.commands})

    @property
    def touched(self) -> set[int]:
        return set(self.command_devices) | self.trigger.devices()

    def advance(self, to: Stage) -> None:
        if NEXT_STAGE[self.stage] is not to:
            raise InvalidParameter(f"routine {self.id}: illegal stage move {self.stage.value} -> {to.value}")
        if to is Stage.ACQUIRING_LOCKS:
            self.locked.clear()
            self.released.clear()
        self.stage = to

    def check(self, max_length: int) -> None:
        if len(self.commands) > max_length:
            raise InvalidParameter(f"routine {self.id} has {len(self.commands)} commands > {max_length}")
        if self.stage is Stage.EXECUTING and self.locked & self.released:
            raise InvalidParameter(f"routine {self.id}: locked and released overlap while executing")


@dataclass
class DeviceState:
    device: int
    availability: Availability = Availability.UP
    reading: float = 0.0
    version: int = 0

    def record(self, availability: Availability, reading: float) -> bool:
        """Apply an observation; returns True (and bumps version) on change."""
        if availability is self.availability and reading == self.reading:
            return False
        self.availability = availability
        self.reading = reading
        self.version += 1
        return True


# --- configuration -------------------------------------------------------


@dataclass
class Config:
    N: int = 250
    smart_fraction: float = 0.4
    f: int = 2
    k: int | None = None
    allow_k_override: bool = False
    centralized: bool = False
    epoch_length: float = 200.0
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    max_routine_length: int = 5
    avg_devices_per_routine: int = 5
    devices_per_kgroup: int = 25
    node_bandwidth: float = 625_000.0
    lsh_m: int = 2
    lsh_l: int = 2
    lsh_r: float = 4.0
    lsh_jitter: float = 0.0
    lsh_neighbors: int = 2
    lsh_leader: LshLeader = LshLeader.LOCAL
    selection_policy: SelectionPolicy = SelectionPolicy.LSH_MIX
    locking: Locking = Locking.SLA
    down_policy: DownPolicy = DownPolicy.SKIP
    monitor_period: float = 10.0
    refractory_periods: int = 10
    ola_backoff_base: float = 4.0
    ola_backoff_cap: float = 128.0
    detection_delay: float = 2.0
    loss_prob: float = 0.0
    quorum_timeout_rtts: float = 10.0
    reading_change_prob: float = 0.0
    reading_step: float = 1.0

    @property
    def smart_count(self) -> int:
        return math.ceil(self.smart_fraction * self.N - 1e-9)

    @property
    def quorum(self) -> int:
        return self.f + 1

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for fld in dataclasses.fields(self):
            v = getattr(self, fld.name)
            out[fld.name] = v.value if isinstance(v, enum.Enum) else (list(v) if isinstance(v, list) else v)
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Config":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        enums = {
            "selection_policy": SelectionPolicy,
            "locking": Locking,
            "down_policy": DownPolicy,
            "lsh_leader": LshLeader,
        }
        for name, value in raw.items():
            if name in enums and not isinstance(value, enum.Enum):
                try:
                    value = enums[name](str(value).upper())
                except ValueError as exc:
                    raise ConfigError(f"{name}: {exc}") from None
            kwargs[name] = value
        return cls(**kwargs)


def validate_config(raw: Config) -> Config:
    """Normalize a config, deriving ``k`` from ``f`` when it is absent."""
    cfg = dataclasses.replace(raw, seeds=list(raw.seeds))
    if cfg.N < 1:
        raise ConfigError("N must be >= 1")
    if not 0.0 < cfg.smart_fraction <= 1.0:
        raise ConfigError("smart_fraction must lie in (0, 1]")
    if cfg.f < 0:
        raise ConfigError("f must be >= 0")
    if cfg.centralized:
        cfg.k = 1 if cfg.k is None else cfg.k
        if cfg.k != 1:
            raise ConfigError("centralized mode requires k = 1")
        cfg.f = 0
        cfg.devices_per_kgroup = max(cfg.devices_per_kgroup, cfg.N)
    elif cfg.k is None:
        cfg.k = 2 * cfg.f + 1
    elif cfg.k != 2 * cfg.f + 1 and not cfg.allow_k_override:
        raise ConfigError(f"k={cfg.k} but 2f+1={2 * cfg.f + 1}; set allow_k_override for baselines")
    if cfg.smart_count < 3:
        raise ConfigError(f"only {cfg.smart_count} smart devices; at least 3 are required")
    if cfg.k > cfg.smart_count:
        raise ConfigError(f"k={cfg.k} exceeds smart device count {cfg.smart_count}")
    if cfg.lsh_r <= 0 or cfg.lsh_m < 1 or cfg.lsh_l < 1:
        raise ConfigError("LSH parameters need m >= 1, l >= 1, r > 0")
    if cfg.devices_per_kgroup < 1:
        raise ConfigError("devices_per_kgroup must be >= 1")
    if cfg.max_routine_length < 1:
        raise ConfigError("max_routine_length must be >= 1")
    if cfg.epoch_length <= 0 or cfg.monitor_period <= 0:
        raise ConfigError("epoch_length and monitor_period must be positive")
    if not 0.0 <= cfg.loss_prob < 1.0:
        raise ConfigError("loss_prob must lie in [0, 1)")
    if cfg.ola_backoff_base <= 0 or cfg.ola_backoff_cap < cfg.ola_backoff_base:
        raise ConfigError("OLA backoff needs 0 < base <= cap")
    return cfg
