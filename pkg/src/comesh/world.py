"""One simulated deployment: topology, nodes, k-groups and workload wired together."""

from __future__ import annotations

import math
from typing import Any, Iterable, Sequence

import numpy as np

from .kgroup import Cause, Directory, ReplicatedState, SmartNode
from .model import Config, EntityId, EntityKind, Routine
from .monitors import Hooks, MonitorSuite, ProgressMonitor
from .selection import cluster_devices
from .simnet import ChurnEvent, ChurnKind, MembershipService, Message, Network, Simulator, Topology, Trace
from .sta import DeviceApp, DeviceEndpoint, RoutineApp, TriggerSubscription, fold_device, fold_routine, DeviceProjection, RoutineProjection


class World:
    first_epoch = 0

    def __init__(
        self,
        cfg: Config,
        seed: int,
        topology: Topology,
        routines: Sequence[Routine],
        injections: Iterable[tuple[float, int, float]] = (),
        churn: Iterable[ChurnEvent] = (),
        horizon: float = 1000.0,
        trace_messages: bool = False,
        monitors: bool = True,
        arrivals_end: float | None = None,
    ) -> None:
        self.cfg = cfg
        self.seed = seed
        self.topo = topology
        self.horizon = horizon
        self.sim = Simulator()
        self.trace = Trace(self.sim, messages=trace_messages)
        self.net = Network(self.sim, topology, cfg.node_bandwidth, cfg.loss_prob, seed, self.trace)
        self.net.window = cfg.epoch_length / 2
        self.membership = MembershipService(self.sim, self.net, topology.smart_ids(), cfg.detection_delay)
        self.routines = {r.id: r for r in routines}
        self.subscriptions = TriggerSubscription(routines)
        self.clusters = cluster_devices(topology.positions, cfg.devices_per_kgroup, seed)
        self._cluster_of = {d: c.id for c in self.clusters for d in c.members}
        entities = [EntityId(EntityKind.DEVICE_CLUSTER, c.id, c.center) for c in self.clusters]
        rng = np.random.default_rng([seed, 0x7E])
        for r in sorted(routines, key=lambda r: r.id):
            touched = sorted(r.touched)
            entities.append(EntityId(EntityKind.ROUTINE, r.id, touched[int(rng.integers(len(touched)))]))
        self.entities = entities
        self.directory = Directory(cfg, topology.positions, topology.smart_ids(), self.clusters, entities, seed,
                                   lambda: self.net.hops)
        for ent in entities:
            if ent.kind is EntityKind.ROUTINE:
                self.directory.set_entity_devices(ent, self.routines[ent.id].touched)
        self.nodes: dict[int, SmartNode] = {n: SmartNode(self, n) for n in topology.smart_ids()}
        self.endpoints = [DeviceEndpoint(self, n) for n in range(topology.n)]
        for n in range(topology.n):
            self.net.handlers[n] = self.nodes[n].on_message if n in self.nodes else self.endpoints[n].on_message
        self.suite: MonitorSuite | None = None
        if monitors:
            self.suite = MonitorSuite(progress=ProgressMonitor(arrivals_end))
            self.trace.listeners.append(self.suite)
            self.hooks = Hooks([self.suite.inheritance])
        else:
            self.hooks = Hooks()
        self.membership.listeners.append(self._on_detect)
        self.membership.on_crash.append(self._on_crash)
        self.membership.on_restart.append(self._on_restart)
        self.membership.inject(churn)
        for t, dev, value in sorted(injections):
            self.sim.at(t, self._inject, dev, value)
        self._walk_rng = np.random.default_rng([seed, 0x3A])

    # factories used by kgroup ----------------------------------------------------------
    def new_state(self, entity: EntityId) -> ReplicatedState:
        if entity.kind is EntityKind.DEVICE_CLUSTER:
            return ReplicatedState(DeviceProjection, fold_device)
        return ReplicatedState(RoutineProjection, fold_routine)

    def new_app(self, ld: Any) -> Any:
        if ld.entity.kind is EntityKind.DEVICE_CLUSTER:
            return DeviceApp(ld)
        return RoutineApp(ld)

    # lookups -------------------------------------------------------------------------
    def routine_key(self, rid: int) -> str:
        return f"{EntityKind.ROUTINE.value}:{rid}"

    def device_group_key(self, device: int) -> str:
        return f"{EntityKind.DEVICE_CLUSTER.value}:{self._cluster_of[device]}"

    def leader_of(self, key: str) -> int | None:
        return self.directory.leader(key, self.membership.alive)

    # message routing ----------------------------------------------------------------
    def route_app_message(self, node: SmartNode, msg: Message) -> None:
        kind = msg.kind
        if kind == "PING" or (kind == "COMMAND" and msg.payload.get("to_device")):
            self.endpoints[node.id].on_message(msg)
            return
        if msg.group is None:
            # device availability broadcast: hand to every routine this node leads
            for ld in list(node.leaderships.values()):
                if ld.entity.kind is EntityKind.ROUTINE and ld.epoch == self.directory.epoch:
                    ld.deliver(msg)
            return
        ld = node.current_leadership(msg.group) or node.leaderships.get((msg.group, msg.epoch))
        if ld is not None:
            ld.deliver(msg)

    # time-driven events ----------------------------------------------------------------
    def _inject(self, dev: int, value: float) -> None:
        self.endpoints[dev].set_reading(value)
        self.trace.emit("inject", device=dev, value=value)

    def _walk(self) -> None:
        p, step = self.cfg.reading_change_prob, self.cfg.reading_step
        draws = self._walk_rng.random(self.topo.n)
        signs = self._walk_rng.integers(0, 2, self.topo.n) * 2 - 1
        for d in range(self.topo.n):
            if draws[d] < p:
                self.endpoints[d].reading += float(signs[d]) * step
        self.sim.schedule(self.cfg.monitor_period, self._walk)

    def _epoch(self, epoch: int) -> None:
        for node in self.nodes.values():
            for ld in node.leaderships.values():
                if ld.epoch < epoch:
                    ld.freeze()
        alive = self.membership.alive
        records = self.directory.start_epoch(epoch, self.membership.view(), self.sim.now)
        for rec in records:
            leader = rec.leader(alive)
            self.trace.emit("group", entity=rec.entity.key(), epoch=epoch, members=list(rec.members),
                            local=list(rec.local), candidates=rec.candidates, leader=leader,
                            qdist=self.directory.quorum_distance(rec, alive))
            if leader is not None and self.net.is_alive(leader):
                self.nodes[leader].lead(rec, Cause.EPOCH_START)
        self.trace.emit("epoch", epoch=epoch)

    def _on_crash(self, node: int) -> None:
        if node in self.nodes:
            self.nodes[node].reset()
        self.endpoints[node].reset()
        self.trace.emit("crash", node=node)

    def _on_restart(self, node: int) -> None:
        self.trace.emit("restart", node=node)

    def _on_detect(self, ev: ChurnEvent) -> None:
        alive = self.membership.alive
        if ev.kind is ChurnKind.FAIL:
            for ch in self.directory.on_failure(ev.node, alive):
                rec = ch.record
                if ch.new_leader != ch.old_leader:
                    self.trace.emit("leader", entity=rec.entity.key(), epoch=rec.epoch, leader=ch.new_leader,
                                    failed=ev.node)
                    if ch.new_leader is None:
                        self.trace.emit("group_dead", entity=rec.entity.key(), epoch=rec.epoch)
                    elif self.net.is_alive(ch.new_leader):
                        self.nodes[ch.new_leader].lead(rec, Cause.LEADER_FAILURE, failed_at=ev.time)
                elif ch.recruits and ch.new_leader is not None:
                    ld = self.nodes[ch.new_leader].leaderships.get(rec.key)
                    if ld is not None:
                        ld.recruit(ch.recruits)
                if ch.recruits:
                    self.trace.emit("recruits", entity=rec.entity.key(), epoch=rec.epoch, nodes=list(ch.recruits))
        for n in sorted(alive & self.nodes.keys()):
            if not self.net.is_alive(n):
                continue
            for ld in list(self.nodes[n].leaderships.values()):
                ld.on_view_change()

    # running ----------------------------------------------------------------------------
    def run(self) -> list[dict[str, Any]]:
        cfg = self.cfg
        self.trace.emit("run", seed=self.seed, N=self.topo.n, smart=len(self.nodes), f=cfg.f, k=cfg.k,
                        locking=cfg.locking.value, policy=cfg.selection_policy.value, centralized=cfg.centralized)
        n_epochs = max(1, math.ceil(self.horizon / cfg.epoch_length))
        for e in range(n_epochs):
            self.sim.at(e * cfg.epoch_length, self._epoch, e)
        if cfg.reading_change_prob > 0:
            self.sim.at(cfg.monitor_period / 2, self._walk)
        self.sim.run(self.horizon)
        pe, ph = self.net.peak_rate("e2e"), self.net.peak_rate("h2h")
        for n in range(self.topo.n):
            e2e, h2h = self.net.e2e[n], self.net.h2h[n]
            self.trace.emit("bandwidth", node=n, smart=n in self.nodes, e2e_bg=float(e2e[0]), e2e_fg=float(e2e[1]),
                            h2h_bg=float(h2h[0]), h2h_fg=float(h2h[1]), e2e_peak=float(pe[n]), h2h_peak=float(ph[n]),
                            window=self.net.window)
        st = self.net.stats
        self.trace.emit("end", horizon=self.horizon, sent=st.sent, delivered=st.delivered,
                        dropped=dict(sorted(st.dropped.items())), events=self.sim.processed)
        if self.suite is not None:
            self.suite.finish(self.horizon)
        return self.trace.records
