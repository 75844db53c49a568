"""Scenario files, workload generation and failure injection.

A scenario is a YAML mapping::

    name: client-delay
    experiment: CLIENT_DELAY
    topology: GRID3D
    horizon: 800
    config: {N: 250, locking: SLA}
    sweep: {N: [50, 250], locking: [SLA, OLA]}     # cartesian, in file order
    workload: {routines: 10, structure: DISJOINT, first_trigger: 20}
    churn: {fraction: 0.4, start: 50, end: 600, downtime: 100}
    seeds: [0, 1, 2]

Sweep keys are Config field names or ``workload.<field>`` / ``churn.<field>``
/ ``horizon`` / ``topology``.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import numpy as np
import yaml

from .model import Command, Config, ConfigError, Leaf, Routine, Trigger, validate_config
from .selection import Cluster, cluster_devices
from .simnet import ChurnEvent, ChurnKind, Topology, TopologyKind, build_topology

if TYPE_CHECKING:
    from .world import World


class Experiment(enum.Enum):
    CLIENT_DELAY = "CLIENT_DELAY"
    SYNC_DELAY = "SYNC_DELAY"
    LOAD = "LOAD"
    KGROUP_MICRO = "KGROUP_MICRO"
    AVAILABILITY = "AVAILABILITY"
    BANDWIDTH_BASELINE = "BANDWIDTH_BASELINE"
    QUORUM_DISTANCE = "QUORUM_DISTANCE"


class Structure(enum.Enum):
    DISJOINT = "DISJOINT"
    CHAINED = "CHAINED"
    ALL_CONFLICT = "ALL_CONFLICT"


class ChurnMode(enum.Enum):
    NONE = "NONE"
    RANDOM = "RANDOM"  # fraction of smart nodes fail once, rejoin after downtime
    POWER_DOMAIN = "POWER_DOMAIN"  # every node of one power domain fails at `start`
    CHAOS = "CHAOS"  # protocol-aware kills (see ChaosInjector)


TRIGGER_THRESHOLD = 50.0


@dataclass
class WorkloadSpec:
    routines: int = 10
    structure: Structure = Structure.DISJOINT
    devices_per_routine: int | None = None  # default: Config.avg_devices_per_routine
    first_trigger: float = 20.0
    stagger: float = 0.0  # delay between successive routines' first triggers
    triggers_per_routine: int = 1
    trigger_interval: float = 150.0
    command_duration: float = 5.0
    simple_devices_only: bool = False
    # trigger reading falls back below threshold this many monitor periods later; 0 keeps it high
    pulse_periods: float = 4.0


@dataclass
class ChurnSpec:
    mode: ChurnMode = ChurnMode.NONE
    fraction: float = 0.0
    start: float = 50.0
    end: float = 500.0
    downtime: float = 100.0  # 0 = never rejoin
    # chaos mode
    cases: tuple[str, ...] = ("mid_lock",)
    prob: float = 0.3
    max_kills: int = 4


@dataclass
class Scenario:
    name: str
    experiment: Experiment
    topology: TopologyKind = TopologyKind.GRID3D
    config: Config = field(default_factory=Config)
    horizon: float = 1000.0
    sweep: dict[str, list[Any]] = field(default_factory=dict)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    churn: ChurnSpec = field(default_factory=ChurnSpec)
    seeds: list[int] | None = None
    trace_messages: bool = False
    epochs: int = 10  # selection-only experiments
    availability: dict[str, Any] = field(default_factory=dict)  # AVAILABILITY: S, G, k, f, F list, mc_trials

    def points(self) -> list[tuple[dict[str, Any], "Scenario"]]:
        """One concrete scenario per sweep combination, labels in sweep order."""
        if not self.sweep:
            return [({}, self)]
        keys = list(self.sweep)
        out = []
        for combo in itertools.product(*(self.sweep[k] for k in keys)):
            label = dict(zip(keys, combo))
            out.append((label, self.with_overrides(label)))
        return out

    def with_overrides(self, overrides: Mapping[str, Any]) -> "Scenario":
        cfg_raw = self.config.to_dict()
        wl = dataclasses.replace(self.workload)
        ch = dataclasses.replace(self.churn)
        top = self.topology
        horizon = self.horizon
        for key, value in overrides.items():
            if key.startswith("workload."):
                wl = _replace_spec(wl, key.split(".", 1)[1], value)
            elif key.startswith("churn."):
                ch = _replace_spec(ch, key.split(".", 1)[1], value)
            elif key == "topology":
                top = TopologyKind(str(value).upper())
            elif key == "horizon":
                horizon = float(value)
            else:
                cfg_raw[key] = value
        if "k" not in overrides and ("f" in overrides or "centralized" in overrides) and not cfg_raw.get("allow_k_override"):
            cfg_raw["k"] = None
        cfg = validate_config(Config.from_dict(cfg_raw))
        return dataclasses.replace(self, config=cfg, workload=wl, churn=ch, topology=top, horizon=horizon, sweep={})

    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(self.config.seeds)

    def build(self, seed: int, monitors: bool = True) -> "World":
        from .world import World

        cfg = self.config
        topo = build_topology(self.topology, cfg.N, cfg.smart_fraction, seed)
        clusters = cluster_devices(topo.positions, cfg.devices_per_kgroup, seed)
        routines, injections, arrivals_end = make_workload(self.workload, topo, clusters, cfg, seed)
        churn = make_churn(self.churn, topo, seed) if self.churn.mode in (ChurnMode.RANDOM, ChurnMode.POWER_DOMAIN) else []
        if self.churn.mode is not ChurnMode.NONE:
            arrivals_end = None  # liveness is only promised once failures stop
        world = World(cfg, seed, topo, routines, injections, churn, self.horizon, self.trace_messages, monitors,
                      arrivals_end)
        if self.churn.mode is ChurnMode.CHAOS:
            ChaosInjector(world, self.churn, seed).attach()
        return world


def _replace_spec(spec: Any, name: str, value: Any) -> Any:
    fields = {f.name: f for f in dataclasses.fields(spec)}
    if name not in fields:
        raise ConfigError(f"unknown field {name!r} for {type(spec).__name__}")
    return dataclasses.replace(spec, **{name: _coerce(spec, name, value)})


def _coerce(spec: Any, name: str, value: Any) -> Any:
    cur = getattr(spec, name)
    if isinstance(cur, enum.Enum):
        return type(cur)(str(value).upper())
    if isinstance(cur, tuple):
        return tuple(value)
    return value


def _spec_from(cls: type, raw: Mapping[str, Any] | None) -> Any:
    spec = cls()
    for k, v in (raw or {}).items():
        spec = _replace_spec(spec, k, v)
    return spec


SCENARIO_KEYS = {"name", "experiment", "topology", "config", "horizon", "sweep", "workload", "churn", "seeds",
                 "trace_messages", "epochs", "availability"}
AVAILABILITY_KEYS = {"S", "G", "k", "f", "F", "mc_trials"}


def scenario_from_dict(raw: Mapping[str, Any]) -> Scenario:
    unknown = set(raw) - SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if "experiment" not in raw:
        raise ConfigError("scenario needs an 'experiment'")
    try:
        exp = Experiment(str(raw["experiment"]).upper())
        topo = TopologyKind(str(raw.get("topology", "GRID3D")).upper())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = validate_config(Config.from_dict(raw.get("config") or {}))
    sweep = {str(k): list(v) for k, v in (raw.get("sweep") or {}).items()}
    sc = Scenario(
        name=str(raw.get("name", exp.value.lower())),
        experiment=exp,
        topology=topo,
        config=cfg,
        horizon=float(raw.get("horizon", 1000.0)),
        sweep=sweep,
        workload=_spec_from(WorkloadSpec, raw.get("workload")),
        churn=_spec_from(ChurnSpec, raw.get("churn")),
        seeds=[int(s) for s in raw["seeds"]] if raw.get("seeds") is not None else None,
        trace_messages=bool(raw.get("trace_messages", False)),
        epochs=int(raw.get("epochs", 10)),
        availability=_availability_block(raw.get("availability")),
    )
    sc.points()  # validate every sweep combination up front
    return sc


def _availability_block(raw: Any) -> dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError("'availability' must be a mapping")
    unknown = set(raw) - AVAILABILITY_KEYS
    if unknown:
        raise ConfigError(f"unknown availability keys: {sorted(unknown)}")
    out = dict(raw)
    F = out.get("F")
    if isinstance(F, str):
        # "lo:hi" or "lo:hi:step", inclusive of hi
        parts = [int(x) for x in F.split(":")]
        if len(parts) not in (2, 3):
            raise ConfigError(f"bad F range {F!r}")
        step = parts[2] if len(parts) == 3 else 1
        out["F"] = list(range(parts[0], parts[1] + 1, step))
    elif isinstance(F, int):
        out["F"] = [F]
    return out


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return scenario_from_dict(raw)


# --- workload ------------------------------------------------------------------------


def make_workload(
    spec: WorkloadSpec, topo: Topology, clusters: Sequence[Cluster], cfg: Config, seed: int
) -> tuple[list[Routine], list[tuple[float, int, float]], float | None]:
    """Routines, scheduled reading injections and the time after which no
    more triggers can arrive."""
    rng = np.random.default_rng([seed, 0x301])
    d = min(spec.devices_per_routine or cfg.avg_devices_per_routine, cfg.max_routine_length)
    smart = set(topo.smart_ids())
    order = [int(c) for c in rng.permutation(len(clusters))]
    pool: list[int] = []
    for ci in order:
        members = [m for m in clusters[ci].members if not (spec.simple_devices_only and m in smart)]
        pool.extend(int(x) for x in rng.permutation(members))
    n = spec.routines
    if spec.structure is Structure.DISJOINT:
        need = n * d
        sets = [pool[i * d:(i + 1) * d] for i in range(n)]
    elif spec.structure is Structure.CHAINED:
        need = n * (d - 1) + 1
        sets = [pool[i * (d - 1):i * (d - 1) + d] for i in range(n)]
    else:
        need = d
        sets = [pool[:d] for _ in range(n)]
    if need + n > len(pool):
        raise ConfigError(f"workload needs {need + n} distinct devices, topology has {len(pool)} eligible")
    if spec.triggers_per_routine > 1 and spec.pulse_periods * cfg.monitor_period >= spec.trigger_interval:
        raise ConfigError("trigger pulse must end before the next trigger of the same routine")
    used = {x for s in sets for x in s}
    spare = [x for x in pool if x not in used]
    routines = []
    injections = []
    last = None
    for i, devs in enumerate(sets):
        trig_dev = spare[i]
        cmds = tuple(Command(int(x), duration=spec.command_duration) for x in rng.permutation(devs))
        routines.append(Routine(i, Trigger(Leaf(trig_dev, ">=", TRIGGER_THRESHOLD)), cmds))
        for j in range(spec.triggers_per_routine):
            t = spec.first_trigger + i * spec.stagger + j * spec.trigger_interval
            injections.append((t, trig_dev, 2 * TRIGGER_THRESHOLD + j))
            if spec.pulse_periods > 0:
                injections.append((t + spec.pulse_periods * cfg.monitor_period, trig_dev, 0.0))
            last = t if last is None else max(last, t)
    arrivals_end = None if last is None else last + 4 * cfg.monitor_period + cfg.epoch_length / 4
    return routines, injections, arrivals_end


def make_churn(spec: ChurnSpec, topo: Topology, seed: int) -> list[ChurnEvent]:
    rng = np.random.default_rng([seed, 0xC4])
    smart = topo.smart_ids()
    events = []
    if spec.mode is ChurnMode.RANDOM:
        count = int(round(spec.fraction * len(smart)))
        victims = sorted(int(v) for v in rng.choice(smart, size=count, replace=False))
        times = rng.uniform(spec.start, spec.end, size=count)
        for v, t in zip(victims, times):
            events.append(ChurnEvent(float(t), v, ChurnKind.FAIL))
            if spec.downtime > 0:
                events.append(ChurnEvent(float(t) + spec.downtime, v, ChurnKind.JOIN))
    elif spec.mode is ChurnMode.POWER_DOMAIN:
        domains = sorted({int(topo.power_domain[s]) for s in smart})
        dom = domains[int(rng.integers(len(domains)))]
        for s in smart:
            if int(topo.power_domain[s]) == dom:
                events.append(ChurnEvent(spec.start, s, ChurnKind.FAIL))
                if spec.downtime > 0:
                    events.append(ChurnEvent(spec.start + spec.downtime, s, ChurnKind.JOIN))
    return sorted(events)


class ChaosInjector:
    """Kills protocol participants at protocol-relevant moments.

    Cases (any subset):

    * ``mid_lock``   - a routine or device leader right after a lock grant/commit
    * ``leader``     - a routine leader during normal operation
    * ``old_leader`` - the previous epoch's leader once the new leader is elected
    * ``new_leader`` - the new leader right after its epoch-start election
    * ``old_member`` - a non-leader member of the previous epoch's group during transfer
    * ``new_member`` - a non-leader member of the new group during migration

    No group (current or previous epoch) ever loses more than ``f`` members
    to injected kills.
    """

    def __init__(self, world: "World", spec: ChurnSpec, seed: int) -> None:
        self.world = world
        self.spec = spec
        self.rng = np.random.default_rng([seed, 0xCA05])
        self.kills = 0
        self.tally: dict[tuple[str, int], int] = {}
        self.pending: set[int] = set()

    def attach(self) -> None:
        self.world.trace.listeners.append(self)

    def _groups_of(self, node: int) -> list[tuple[str, int]]:
        d = self.world.directory
        return sorted(k for k in d.by_node.get(node, ()) if k[1] >= d.epoch - 1)

    def _allowed(self, node: int) -> bool:
        if node in self.pending or not self.world.net.is_alive(node) or node not in self.world.nodes:
            return False
        f = self.world.cfg.f
        return all(self.tally.get(k, 0) < f for k in self._groups_of(node))

    def kill(self, node: int, delay: float = 0.0) -> bool:
        if self.kills >= self.spec.max_kills or not self._allowed(node):
            return False
        for k in self._groups_of(node):
            self.tally[k] = self.tally.get(k, 0) + 1
        self.kills += 1
        self.pending.add(node)
        now = self.world.sim.now
        evs = [ChurnEvent(now + delay, node, ChurnKind.FAIL)]
        if self.spec.downtime > 0:
            evs.append(ChurnEvent(now + delay + self.spec.downtime, node, ChurnKind.JOIN))
        self.world.membership.inject(evs)
        self.world.trace.emit("chaos_kill", node=node, at=now + delay)
        return True

    def __call__(self, rec: Mapping[str, Any]) -> None:
        ev = rec["ev"]
        if ev in ("restart",):
            self.pending.discard(rec["node"])
            return
        if self.kills >= self.spec.max_kills or rec["t"] < self.spec.start or rec["t"] > self.spec.end:
            return
        cases = self.spec.cases
        victims: list[int] = []
        if ev in ("locked", "lock_grant") and "mid_lock" in cases:
            victims = [rec["node"]]
        elif ev == "stage" and "leader" in cases:
            victims = [rec["node"]]
        elif ev == "election" and rec.get("cause") == "EPOCH_START" and rec["epoch"] > 0:
            d = self.world.directory
            new = d.record(rec["entity"], rec["epoch"])
            old = d.record(rec["entity"], rec["epoch"] - 1)
            alive = self.world.membership.alive
            if "new_leader" in cases:
                victims.append(rec["node"])
            if "old_leader" in cases and old is not None and old.leader(alive) is not None:
                victims.append(old.leader(alive))
            if "old_member" in cases and old is not None:
                victims.extend(m for m in old.alive_members(alive)[1:2])
            if "new_member" in cases and new is not None:
                victims.extend(m for m in new.alive_members(alive)[1:2])
        if not victims:
            return
        if self.rng.random() >= self.spec.prob:
            return
        victim = victims[int(self.rng.integers(len(victims)))]
        self.kill(victim, float(self.rng.uniform(0.0, 2.0)))
