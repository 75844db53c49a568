"""Sense-trigger-actuate logic hosted by k-group leaders.

Device-cluster leaders ping their devices, commit availability and reading
changes, forward them to subscribed routine leaders, and own the per-device
lock queues.  Routine leaders evaluate triggers, walk the routine stage
machine, acquire locks (sequentially or optimistically) and issue commands
through the device leaders.

Lock tokens are ``(routine, instance, round_epoch, round_term, round_n)``.
Sequential locking always uses round ``(0, 0, 0)``; every optimistic attempt
gets a fresh round so stale grants can be told apart and released exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Mapping

import numpy as np

from .kgroup import Entry, Leadership
from .model import Availability, DownPolicy, Locking, NEXT_STAGE, Routine, Stage
from .simnet import Message, message_size

if TYPE_CHECKING:
    from .world import World

Token = tuple[int, int, int, int, int]

COMMAND_BYTES = 16

STA_KINDS = frozenset(
    {"PING", "PING_ACK", "STATE_UPDATE", "LOCK_REQ", "PRELOCK_REQ", "LOCK_GRANT", "LOCK_REFUSE", "LOCK_RELEASE",
     "RELEASE_ACK", "COMMAND", "COMMAND_ACK"}
)

# lock-queue operations recorded as state entries
ENQ, GRANT, PRELOCK, REL, DEQ = "ENQ", "GRANT", "PRELOCK", "REL", "DEQ"


# --- projections ------------------------------------------------------------------


@dataclass
class LockQueue:
    device: int
    holder: Token | None = None
    waiters: list[tuple[Token, int]] = field(default_factory=list)  # (token, enqueue seq)

    def waiting(self, token: Token) -> bool:
        return any(t == token for t, _ in self.waiters)

    def routine_present(self, routine: int) -> bool:
        if self.holder is not None and self.holder[0] == routine:
            return True
        return any(t[0] == routine for t, _ in self.waiters)

    def enqueue_seq(self, token: Token) -> int | None:
        for t, s in self.waiters:
            if t == token:
                return s
        return None


@dataclass
class DeviceRecord:
    availability: Availability
    reading: float
    version: int


@dataclass
class DeviceProjection:
    devices: dict[int, DeviceRecord] = field(default_factory=dict)
    queues: dict[int, LockQueue] = field(default_factory=dict)

    def queue(self, device: int) -> LockQueue:
        q = self.queues.get(device)
        if q is None:
            q = self.queues[device] = LockQueue(device)
        return q


def fold_device(proj: DeviceProjection, e: Entry) -> None:
    p = e.payload
    if p[0] == "avail":
        _, dev, status, reading = p
        rec = proj.devices.get(dev)
        version = 1 if rec is None else rec.version + 1
        proj.devices[dev] = DeviceRecord(Availability(status), reading, version)
    elif p[0] == "lock":
        _, dev, op, token = p
        token = tuple(token)
        q = proj.queue(dev)
        if op == ENQ:
            if q.holder != token and not q.waiting(token):
                q.waiters.append((token, e.seq))
        elif op == GRANT:
            q.waiters = [(t, s) for t, s in q.waiters if t != token]
            q.holder = token
        elif op == PRELOCK:
            q.holder = token
        elif op == REL:
            if q.holder == token:
                q.holder = None
        elif op == DEQ:
            q.waiters = [(t, s) for t, s in q.waiters if t != token]
    else:
        raise ValueError(f"not a device entry: {p!r}")


@dataclass
class RoutineProjection:
    stage: Stage = Stage.NOT_TRIGGERED
    instance: int = 0
    locked: dict[int, Token] = field(default_factory=dict)
    released: set[int] = field(default_factory=set)
    skipped: set[int] = field(default_factory=set)


def fold_routine(proj: RoutineProjection, e: Entry) -> None:
    p = e.payload
    if p[0] == "stage":
        _, _rid, stage, instance = p
        to = Stage(stage)
        if NEXT_STAGE[proj.stage] is not to:
            raise ValueError(f"illegal stage move {proj.stage.value} -> {to.value} at seq {e.seq}")
        proj.stage = to
        if to is Stage.ACQUIRING_LOCKS:
            proj.instance = instance
            proj.locked.clear()
            proj.released.clear()
            proj.skipped.clear()
    elif p[0] == "locked":
        _, _rid, dev, token = p
        proj.locked[dev] = tuple(token)
        proj.released.discard(dev)
    elif p[0] == "released":
        _, _rid, dev, _token = p
        proj.locked.pop(dev, None)
        proj.released.add(dev)
    elif p[0] == "skipped":
        _, _rid, dev, instance = p
        if instance == proj.instance:
            proj.skipped.add(dev)
    else:
        raise ValueError(f"not a routine entry: {p!r}")


# --- subscriptions ------------------------------------------------------------------


class TriggerSubscription:
    """Forward map routine -> trigger devices and its reverse index."""

    def __init__(self, routines: Iterable[Routine]) -> None:
        self.forward: dict[int, frozenset[int]] = {r.id: frozenset(r.trigger.devices()) for r in routines}
        self.reverse: dict[int, list[int]] = {}
        for rid in sorted(self.forward):
            for d in sorted(self.forward[rid]):
                self.reverse.setdefault(d, []).append(rid)

    def subscribers(self, device: int) -> list[int]:
        return self.reverse.get(device, [])

    def consistent(self) -> bool:
        back = {(d, r) for d, rs in self.reverse.items() for r in rs}
        fwd = {(d, r) for r, ds in self.forward.items() for d in ds}
        return back == fwd


# --- simple-device side ----------------------------------------------------------------


class DeviceEndpoint:
    """What every device runs: answer pings and execute commands."""

    def __init__(self, world: "World", node: int, reading: float = 0.0) -> None:
        self.world = world
        self.id = node
        self.reading = reading
        self.done: set[tuple[Token, int]] = set()
        self.running: dict[tuple[Token, int], list[Message]] = {}
        self.busy_with: Token | None = None

    def reset(self) -> None:
        self.done.clear()
        self.running.clear()
        self.busy_with = None

    def set_reading(self, value: float) -> None:
        self.reading = value

    def _reply(self, msg: Message, kind: str, payload: Any, extra: int = 0) -> None:
        self.world.net.send(Message(kind, self.id, msg.src, msg.group, msg.epoch, -1, payload, message_size(kind, extra=extra)))

    def on_message(self, msg: Message) -> None:
        if msg.kind == "PING":
            self._reply(msg, "PING_ACK", {"device": self.id, "reading": self.reading})
        elif msg.kind == "COMMAND":
            p = {k: v for k, v in msg.payload.items() if k != "to_device"}
            key = (tuple(p["token"]), p["idx"])
            if key in self.done:
                self._reply(msg, "COMMAND_ACK", p)
                return
            if key in self.running:
                self.running[key].append(msg)
                return
            token = key[0]
            if self.busy_with is not None and self.busy_with[:2] != token[:2]:
                # two routine instances driving one device at once
                self.world.trace.emit("device_conflict", device=self.id, token=list(token), other=list(self.busy_with))
            self.busy_with = token
            self.running[key] = [msg]
            inc = self.world.net.incarnation[self.id]
            self.world.sim.schedule(p["duration"], self._finish, key, inc)

    def _finish(self, key: tuple[Token, int], inc: int) -> None:
        if self.world.net.incarnation[self.id] != inc or not self.world.net.is_alive(self.id):
            return
        waiting = self.running.pop(key, [])
        self.done.add(key)
        if not self.running:
            self.busy_with = None
        for m in waiting:
            self._reply(m, "COMMAND_ACK", {k: v for k, v in m.payload.items() if k != "to_device"})


# --- device-cluster leader -------------------------------------------------------------


class DeviceApp:
    def __init__(self, ld: Leadership) -> None:
        self.ld = ld
        self.world: World = ld.world
        self.devices: list[int] = self.world.directory.entity_devices[ld.ekey]
        self.pinging: dict[int, Any] = {}
        self.ping_rtt: dict[int, float] = {}
        self.committing: dict[int, tuple[str, float]] = {}
        self.granted_at: dict[int, float] = {}
        self.granting: set[int] = set()  # grant written but not yet on a quorum

    # helpers
    @property
    def proj(self) -> DeviceProjection:
        return self.ld.working

    def _send(self, kind: str, dst: int | None, group: str | None, payload: Any, extra: int = 0) -> None:
        if dst is None:
            return
        self.ld.node.send(Message(kind, self.ld.node.id, dst, group, self.world.directory.epoch, -1, payload,
                                  message_size(kind, extra=extra)))

    def _to_routine(self, kind: str, rid: int, payload: Any) -> None:
        rkey = self.world.routine_key(rid)
        self._send(kind, self.world.leader_of(rkey), rkey, payload)

    def trace(self, ev: str, **kw: Any) -> None:
        self.world.trace.emit(ev, node=self.ld.node.id, **kw)

    def soft_state(self) -> Any:
        return None

    def load_soft(self, soft: Any) -> None:
        pass

    # lifecycle
    def on_active(self, resumed: bool) -> None:
        now = self.world.sim.now
        if resumed:
            grants = []
            for dev in sorted(self.proj.queues):
                q = self.proj.queues[dev]
                if q.holder is not None:
                    self.granted_at[dev] = now
                    self._to_routine("LOCK_GRANT", q.holder[0], {"device": dev, "token": list(q.holder)})
                elif q.waiters:
                    grants.append(dev)
            for dev in grants:
                self._grant_head(dev, after=None)
        self.ld.node.timer(0.0, self.tick)

    def on_freeze(self) -> None:
        self.pinging.clear()
        self.granting.clear()

    def on_view_change(self) -> None:
        pass

    # monitoring
    def tick(self) -> None:
        if not self.ld.active:
            return
        now = self.world.sim.now
        for dev in self.devices:
            if dev not in self.pinging:
                self._ping(dev)
        # a holder that never released may belong to a dead round: remind its routine
        stale_after = 3 * self.world.cfg.monitor_period
        for dev in sorted(self.proj.queues):
            q = self.proj.queues[dev]
            if q.holder is not None and dev not in self.granting and now - self.granted_at.get(dev, now) >= stale_after:
                self.granted_at[dev] = now
                self._to_routine("LOCK_GRANT", q.holder[0], {"device": dev, "token": list(q.holder)})
        self.ld.node.timer(self.world.cfg.monitor_period, self.tick)

    def _ping(self, dev: int) -> None:
        me = self.ld.node.id
        self._send("PING", dev, self.ld.ekey, {"device": dev})
        rtt = self.world.net.rtt(me, dev) if dev != me else 0.0
        if math.isinf(rtt):
            # a dead device has no live path; time out on what we last measured
            rtt = self.ping_rtt.get(dev, 2.0 * self.world.net.hop_count(me, dev))
        else:
            self.ping_rtt[dev] = rtt
        wait = 2 * rtt
        self.pinging[dev] = self.ld.node.timer(wait, self._ping_timeout, dev)

    def _ping_timeout(self, dev: int) -> None:
        if dev not in self.pinging or not self.ld.active:
            return
        del self.pinging[dev]
        rec = self.proj.devices.get(dev)
        if rec is not None and rec.availability is Availability.DOWN:
            return
        self._commit_avail(dev, Availability.DOWN, rec.reading if rec else 0.0)

    def _on_ping_ack(self, msg: Message) -> None:
        dev = msg.payload["device"]
        t = self.pinging.pop(dev, None)
        if t is None:
            return
        t.cancel()
        reading = msg.payload["reading"]
        rec = self.proj.devices.get(dev)
        if rec is None or rec.availability is Availability.DOWN or rec.reading != reading:
            self._commit_avail(dev, Availability.UP, reading)

    def _commit_avail(self, dev: int, status: Availability, reading: float) -> None:
        if self.committing.get(dev) == (status.value, reading):
            return
        prev = self.proj.devices.get(dev)
        was_down = prev is not None and prev.availability is Availability.DOWN
        self.committing[dev] = (status.value, reading)

        def done() -> None:
            self.committing.pop(dev, None)
            self._propagate(dev, status, reading, broadcast=status is Availability.DOWN or was_down)

        self.ld.replicate([("avail", dev, status.value, reading)], done)

    def _propagate(self, dev: int, status: Availability, reading: float, broadcast: bool) -> None:
        payload = {"device": dev, "status": status.value, "reading": reading}
        self.trace("device_state", device=dev, status=status.value, reading=reading)
        if broadcast:
            for n in self.world.membership.alive_smart():
                self._send("STATE_UPDATE", n, None, payload)
            return
        for rid in self.world.subscriptions.subscribers(dev):
            self._to_routine("STATE_UPDATE", rid, payload)

    # locking
    def handle(self, msg: Message) -> None:
        kind = msg.kind
        if kind == "PING_ACK":
            self._on_ping_ack(msg)
        elif kind == "LOCK_REQ":
            self._on_lock_req(msg.payload["device"], tuple(msg.payload["token"]))
        elif kind == "PRELOCK_REQ":
            self._on_prelock(msg.payload["device"], tuple(msg.payload["token"]))
        elif kind == "LOCK_RELEASE":
            self._on_release(msg.payload["device"], tuple(msg.payload["token"]))
        elif kind == "COMMAND":
            self._on_command(msg)
        elif kind == "COMMAND_ACK":
            p = msg.payload
            self._to_routine("COMMAND_ACK", p["token"][0], p)

    def _lock_commit(self, dev: int, entries: list[tuple], then: Any) -> list[Entry]:
        grants = any(p[2] in (GRANT, PRELOCK) for p in entries)

        def done() -> None:
            if grants:
                self.granting.discard(dev)
            for p in entries:
                _, d, op, token = p
                self.trace("lock", device=d, op=op, token=list(token))
            then()

        if grants:
            self.granting.add(dev)
        return self.ld.replicate(entries, done)

    def _on_lock_req(self, dev: int, token: Token) -> None:
        q = self.proj.queue(dev)
        if q.holder == token:
            # only repeat a grant that survives a leader change; a pending one answers on commit
            if dev not in self.granting:
                self._to_routine("LOCK_GRANT", token[0], {"device": dev, "token": list(token)})
            return
        if q.waiting(token):
            return
        if q.routine_present(token[0]):
            self._to_routine("LOCK_REFUSE", token[0], {"device": dev, "token": list(token), "holder": None})
            return
        free = q.holder is None and not q.waiters
        entries = [("lock", dev, ENQ, token)]
        if free:
            entries.append(("lock", dev, GRANT, token))
        else:
            self.trace("lock_wait", device=dev, token=list(token), holder=list(q.holder) if q.holder else None)

        def then() -> None:
            if free:
                self.granted_at[dev] = self.world.sim.now
                self.trace("lock_grant", device=dev, token=list(token), after=None, enq_seq=issued[0].seq)
                self._to_routine("LOCK_GRANT", token[0], {"device": dev, "token": list(token)})

        issued = self._lock_commit(dev, entries, then)

    def _grant_head(self, dev: int, after: Token | None) -> None:
        q = self.proj.queue(dev)
        if q.holder is not None or not q.waiters or self.world.cfg.locking is not Locking.SLA:
            return
        token, enq = q.waiters[0]

        def then() -> None:
            self.granted_at[dev] = self.world.sim.now
            self.trace("lock_grant", device=dev, token=list(token), after=list(after) if after else None, enq_seq=enq)
            self._to_routine("LOCK_GRANT", token[0], {"device": dev, "token": list(token)})

        self._lock_commit(dev, [("lock", dev, GRANT, token)], then)

    def _on_prelock(self, dev: int, token: Token) -> None:
        q = self.proj.queue(dev)
        if q.holder == token:
            # only repeat a grant that survives a leader change; a pending one answers on commit
            if dev not in self.granting:
                self._to_routine("LOCK_GRANT", token[0], {"device": dev, "token": list(token)})
            return
        if q.holder is not None or q.waiters:
            self.trace("lock_refuse", device=dev, token=list(token), holder=list(q.holder) if q.holder else None)
            self._to_routine("LOCK_REFUSE", token[0], {"device": dev, "token": list(token),
                                                       "holder": list(q.holder) if q.holder else None})
            return

        def then() -> None:
            self.granted_at[dev] = self.world.sim.now
            self.trace("lock_grant", device=dev, token=list(token), after=None, enq_seq=None)
            self._to_routine("LOCK_GRANT", token[0], {"device": dev, "token": list(token)})

        self._lock_commit(dev, [("lock", dev, PRELOCK, token)], then)

    def _on_release(self, dev: int, token: Token) -> None:
        q = self.proj.queue(dev)
        ack = {"device": dev, "token": list(token)}
        if q.holder == token:
            entries: list[tuple] = [("lock", dev, REL, token)]
            nxt = None
            enq = None
            if q.waiters and self.world.cfg.locking is Locking.SLA:
                nxt, enq = q.waiters[0]
                entries.append(("lock", dev, GRANT, nxt))

            def then() -> None:
                self.trace("lock_rel", device=dev, token=list(token))
                self._to_routine("RELEASE_ACK", token[0], ack)
                if nxt is not None:
                    self.granted_at[dev] = self.world.sim.now
                    self.trace("lock_grant", device=dev, token=list(nxt), after=list(token), enq_seq=enq)
                    self._to_routine("LOCK_GRANT", nxt[0], {"device": dev, "token": list(nxt)})

            self._lock_commit(dev, entries, then)
        elif q.waiting(token):
            self._lock_commit(dev, [("lock", dev, DEQ, token)], lambda: self._to_routine("RELEASE_ACK", token[0], ack))
        else:
            self._to_routine("RELEASE_ACK", token[0], ack)

    def _on_command(self, msg: Message) -> None:
        p = msg.payload
        dev = p["device"]
        q = self.proj.queue(dev)
        if q.holder is None or tuple(p["token"]) != q.holder:
            self.trace("cmd_rejected", device=dev, token=p["token"])
            self._to_routine("COMMAND_ACK", p["token"][0], {**p, "rejected": True})
            return
        self._send("COMMAND", dev, self.ld.ekey, {**p, "to_device": True}, extra=COMMAND_BYTES)


# --- routine leader ------------------------------------------------------------------


class RoutineApp:
    def __init__(self, ld: Leadership) -> None:
        self.ld = ld
        self.world: World = ld.world
        self.routine: Routine = self.world.routines[ld.entity.id]
        self.rid = self.routine.id
        self.cfg = self.world.cfg
        self.readings: dict[int, float] = {}
        self.down: set[int] = set()
        self.last_fire = -float("inf")
        self.token: Token | None = None
        self.round_n = 0
        self.attempt = 0
        self.stage_pending = False
        self.lock_pending: set[int] = set()
        self.requested: dict[int, Any] = {}
        self.aborting = False
        self.cmd_idx = 0
        self.cmd_timer: Any = None
        self.first_cmd_sent: set[int] = set()
        self.release_timers: dict[int, Any] = {}
        self.skipping: set[int] = set()  # skip decisions not yet committed

    # helpers
    @property
    def proj(self) -> RoutineProjection:
        return self.ld.working

    @property
    def now(self) -> float:
        return self.world.sim.now

    def _device_leader(self, dev: int) -> tuple[int | None, str]:
        gkey = self.world.device_group_key(dev)
        return self.world.leader_of(gkey), gkey

    def _to_device_leader(self, kind: str, dev: int, payload: Any, extra: int = 0) -> None:
        dst, gkey = self._device_leader(dev)
        if dst is None:
            return
        self.ld.node.send(Message(kind, self.ld.node.id, dst, gkey, self.world.directory.epoch, -1, payload,
                                  message_size(kind, extra=extra)))

    def trace(self, ev: str, **kw: Any) -> None:
        self.world.trace.emit(ev, routine=self.rid, node=self.ld.node.id, **kw)

    def soft_state(self) -> Any:
        return {"readings": dict(self.readings), "down": sorted(self.down), "last_fire": self.last_fire,
                "token": list(self.token) if self.token else None, "round_n": self.round_n}

    def load_soft(self, soft: Any) -> None:
        self.readings.update(soft["readings"])
        self.down = set(soft["down"])
        self.last_fire = soft["last_fire"]
        self.token = tuple(soft["token"]) if soft["token"] else None
        self.round_n = soft["round_n"]

    def _commit_stage(self, stage: Stage, then: Any) -> None:
        self.stage_pending = True

        def done() -> None:
            self.stage_pending = False
            then()

        self.ld.replicate([("stage", self.rid, stage.value, self.proj.instance)], done)

    # lifecycle
    def on_active(self, resumed: bool) -> None:
        st = self.proj.stage
        if st is Stage.ACQUIRING_LOCKS:
            self._resume_acquire()
        elif st is Stage.EXECUTING:
            self.trace("executing", instance=self.proj.instance, devices=sorted(self.proj.locked), resumed=True)
            self.cmd_idx = 0
            self._issue_command()
        elif st is Stage.RELEASING_LOCKS:
            self.trace("releasing", instance=self.proj.instance, resumed=True)
            self._release_all()

    def on_freeze(self) -> None:
        for t in list(self.requested.values()) + list(self.release_timers.values()) + [self.cmd_timer]:
            if t is not None:
                t.cancel()

    def on_view_change(self) -> None:
        pass

    # messages
    def handle(self, msg: Message) -> None:
        kind = msg.kind
        p = msg.payload
        if kind == "STATE_UPDATE":
            self._on_update(p["device"], p["status"], p["reading"])
        elif kind == "LOCK_GRANT":
            self._on_grant(p["device"], tuple(p["token"]))
        elif kind == "LOCK_REFUSE":
            self._on_refuse(p["device"], tuple(p["token"]))
        elif kind == "RELEASE_ACK":
            self._on_release_ack(p["device"], tuple(p["token"]))
        elif kind == "COMMAND_ACK":
            self._on_command_ack(p)

    # triggering
    def _on_update(self, dev: int, status: str, reading: float) -> None:
        if status == Availability.DOWN.value:
            self.down.add(dev)
        else:
            self.down.discard(dev)
            self.readings[dev] = reading
        if dev not in self.routine.trigger.devices():
            return
        if self.proj.stage is not Stage.NOT_TRIGGERED or self.stage_pending:
            return
        if self.now - self.last_fire < self.cfg.refractory_periods * self.cfg.monitor_period:
            return
        live = {d: v for d, v in self.readings.items() if d not in self.down}
        if not self.routine.trigger.evaluate(live, self.now):
            return
        self.last_fire = self.now
        instance = self.proj.instance + 1
        self.trace("trigger", instance=instance)
        self.stage_pending = True

        def fired() -> None:
            self.stage_pending = False
            self.trace("stage", instance=instance, stage=Stage.ACQUIRING_LOCKS.value)
            self.token = None
            self.attempt = 0
            self._acquire()

        self.ld.replicate([("stage", self.rid, Stage.ACQUIRING_LOCKS.value, instance)], fired)

    # acquisition
    def _needed(self) -> list[int]:
        """Devices to hold, in command order, up to the first skip still being committed.

        A skip is durable before acquisition moves past it, so a successor leader
        never asks for a device below one its predecessor is already queued on.
        """
        out = []
        # SLA must never ask below a device it already holds, or ordering breaks
        floor = max(self.proj.locked, default=-1) if self.cfg.locking is Locking.SLA else -1
        for d in self.routine.command_devices:
            if d in self.proj.locked:
                out.append(d)
                continue
            if d in self.proj.skipped:
                continue
            if d in self.down or d < floor:
                self._skip(d)
                break
            out.append(d)
        return out

    def _skip(self, dev: int) -> None:
        if dev in self.skipping:
            return
        self.skipping.add(dev)
        self.trace("skip", instance=self.proj.instance, device=dev, policy=self.cfg.down_policy.value)
        self._withdraw(dev)

        def done() -> None:
            self.skipping.discard(dev)
            self._acquire()

        self.ld.replicate([("skipped", self.rid, dev, self.proj.instance)], done)

    def _withdraw(self, dev: int) -> None:
        # a queued request left behind would later look like a wait on a device we no longer want
        t = self.requested.pop(dev, None)
        if t is not None:
            t.cancel()
        # only sequential requests queue; a release for a token that is not waiting is just acked
        if self.cfg.locking is Locking.SLA:
            self._to_device_leader("LOCK_RELEASE", dev, {"device": dev, "token": list(self._sla_token())})

    def _sla_token(self) -> Token:
        return (self.rid, self.proj.instance, 0, 0, 0)

    def _resume_acquire(self) -> None:
        if self.cfg.locking is Locking.OLA:
            held = list(self.proj.locked.values())
            if held:
                self.token = held[0]
            elif self.token is None or self.token[1] != self.proj.instance:
                self.token = None
        self._acquire()

    def _acquire(self) -> None:
        if not self.ld.active or self.proj.stage is not Stage.ACQUIRING_LOCKS:
            return
        if self.cfg.down_policy is DownPolicy.ABORT and any(d in self.down for d in self.routine.command_devices):
            self.trace("aborted", instance=self.proj.instance)
            for d in self.routine.command_devices:
                if d not in self.proj.locked and d not in self.proj.skipped:
                    self._withdraw(d)
            self._to_executing()
            return
        if self.cfg.locking is Locking.SLA:
            self._sla_step()
        else:
            self._ola_round()

    def _request(self, kind: str, dev: int, token: Token) -> None:
        old = self.requested.pop(dev, None)
        if old is not None:
            old.cancel()
        self._to_device_leader(kind, dev, {"device": dev, "token": list(token)})
        dst, _ = self._device_leader(dev)
        rtt = self.world.net.rtt(self.ld.node.id, dst) if dst is not None else 0.0
        wait = max(self.cfg.quorum_timeout_rtts * rtt, self.cfg.monitor_period)
        self.requested[dev] = self.ld.node.timer(wait, self._request_timeout, kind, dev, token)

    def _request_timeout(self, kind: str, dev: int, token: Token) -> None:
        if not self.ld.active or self.proj.stage is not Stage.ACQUIRING_LOCKS or dev in self.proj.locked:
            return
        if self.token != token or self.aborting:
            return
        self.requested.pop(dev, None)
        if dev in self.down and self.cfg.down_policy is DownPolicy.SKIP:
            self._acquire()
            return
        self._request(kind, dev, token)

    def _sla_step(self) -> None:
        self.token = self._sla_token()
        for d in self._needed():
            if d in self.proj.locked:
                continue
            if d in self.lock_pending:
                return
            self._request("LOCK_REQ", d, self.token)
            return
        if not self.skipping:
            self._to_executing()

    def _ola_round(self) -> None:
        if self.aborting:
            return
        if self.token is None or self.token[1] != self.proj.instance:
            self.round_n += 1
            self.token = (self.rid, self.proj.instance, self.ld.epoch, self.ld.term, self.round_n)
            self.trace("ola_round", instance=self.proj.instance, token=list(self.token))
        missing = [d for d in self._needed() if d not in self.proj.locked and d not in self.lock_pending]
        if not missing and not self.lock_pending and not self.skipping:
            self._to_executing()
            return
        for d in missing:
            if d not in self.requested:
                self._request("PRELOCK_REQ", d, self.token)

    def _on_grant(self, dev: int, token: Token) -> None:
        st = self.proj.stage
        current = (
            st is Stage.ACQUIRING_LOCKS
            and not self.stage_pending
            and token == self.token
            and token[1] == self.proj.instance
            and not self.aborting
            and dev in self.routine.command_devices
            and dev not in self.proj.skipped
            and dev not in self.skipping
        )
        if not current:
            if self.proj.locked.get(dev) == token or dev in self.lock_pending:
                return
            # a grant nobody is waiting for: hand it straight back
            self._to_device_leader("LOCK_RELEASE", dev, {"device": dev, "token": list(token)})
            return
        if dev in self.proj.locked or dev in self.lock_pending:
            return
        t = self.requested.pop(dev, None)
        if t is not None:
            t.cancel()
        self.lock_pending.add(dev)

        def done() -> None:
            self.lock_pending.discard(dev)
            self.trace("locked", instance=self.proj.instance, device=dev)
            if self.aborting:
                self._release_for_retry()
            else:
                self._acquire()

        self.ld.replicate([("locked", self.rid, dev, token)], done)

    def _on_refuse(self, dev: int, token: Token) -> None:
        if token != self.token or self.proj.stage is not Stage.ACQUIRING_LOCKS:
            return
        if self.cfg.locking is Locking.SLA:
            return  # the retry timer asks again
        t = self.requested.pop(dev, None)
        if t is not None:
            t.cancel()
        if self.aborting:
            return
        self.aborting = True
        self.trace("ola_abort", instance=self.proj.instance, device=dev)
        self._release_for_retry()

    def _release_for_retry(self) -> None:
        if self.lock_pending:
            return
        for t in self.requested.values():
            t.cancel()
        self.requested.clear()
        if not self.proj.locked:
            self.aborting = False
            self.attempt += 1
            self.token = None
            delay = min(self.cfg.ola_backoff_cap, self.cfg.ola_backoff_base * 2 ** (self.attempt - 1))
            rng = np.random.default_rng([self.world.seed, self.rid, self.proj.instance, self.attempt, 0xB0])
            delay *= rng.uniform(0.5, 1.5)
            self.trace("ola_backoff", instance=self.proj.instance, delay=delay)
            self.ld.node.timer(delay, self._acquire)
            return
        for dev in sorted(self.proj.locked):
            if dev not in self.release_timers:
                self._send_release(dev, self.proj.locked[dev])

    # execution
    def _to_executing(self) -> None:
        if self.stage_pending:
            return
        instance = self.proj.instance

        def done() -> None:
            self.trace("executing", instance=instance, devices=sorted(self.proj.locked))
            self.cmd_idx = 0
            self._issue_command()

        self._commit_stage(Stage.EXECUTING, done)

    def _issue_command(self) -> None:
        if not self.ld.active or self.proj.stage is not Stage.EXECUTING:
            return
        cmds = self.routine.commands
        while self.cmd_idx < len(cmds) and cmds[self.cmd_idx].device not in self.proj.locked:
            self.cmd_idx += 1
        if self.cmd_idx >= len(cmds):
            self._to_releasing()
            return
        cmd = cmds[self.cmd_idx]
        token = self.proj.locked[cmd.device]
        payload = {"token": list(token), "idx": self.cmd_idx, "device": cmd.device, "duration": cmd.duration}
        if self.proj.instance not in self.first_cmd_sent:
            self.first_cmd_sent.add(self.proj.instance)
            self.trace("first_cmd", instance=self.proj.instance)
        self._to_device_leader("COMMAND", cmd.device, payload, extra=COMMAND_BYTES + len(cmd.payload))
        dst, _ = self._device_leader(cmd.device)
        rtt = self.world.net.rtt(self.ld.node.id, dst) if dst is not None else 0.0
        wait = cmd.duration + max(self.cfg.quorum_timeout_rtts * rtt, self.cfg.monitor_period)
        if self.cmd_timer is not None:
            self.cmd_timer.cancel()
        self.cmd_timer = self.ld.node.timer(wait, self._command_timeout, self.proj.instance, self.cmd_idx)

    def _command_timeout(self, instance: int, idx: int) -> None:
        if self.proj.instance == instance and self.cmd_idx == idx and self.proj.stage is Stage.EXECUTING:
            self._issue_command()

    def _on_command_ack(self, p: Mapping[str, Any]) -> None:
        token = tuple(p["token"])
        if self.proj.stage is not Stage.EXECUTING or token[1] != self.proj.instance or p["idx"] != self.cmd_idx:
            return
        if p.get("rejected"):
            self.trace("cmd_rejected", instance=self.proj.instance, device=p["device"])
        if self.cmd_timer is not None:
            self.cmd_timer.cancel()
        self.cmd_idx += 1
        self._issue_command()

    # release
    def _to_releasing(self) -> None:
        if self.stage_pending:
            return
        instance = self.proj.instance

        def done() -> None:
            self.trace("releasing", instance=instance)
            self._release_all()

        self._commit_stage(Stage.RELEASING_LOCKS, done)

    def _release_all(self) -> None:
        if not self.proj.locked:
            self._finish()
            return
        for dev in sorted(self.proj.locked):
            if dev not in self.release_timers:
                self._send_release(dev, self.proj.locked[dev])

    def _send_release(self, dev: int, token: Token) -> None:
        self._to_device_leader("LOCK_RELEASE", dev, {"device": dev, "token": list(token)})
        dst, _ = self._device_leader(dev)
        rtt = self.world.net.rtt(self.ld.node.id, dst) if dst is not None else 0.0
        wait = max(self.cfg.quorum_timeout_rtts * rtt, self.cfg.monitor_period)
        self.release_timers[dev] = self.ld.node.timer(wait, self._release_timeout, dev, token)

    def _release_timeout(self, dev: int, token: Token) -> None:
        self.release_timers.pop(dev, None)
        if self.ld.active and self.proj.locked.get(dev) == token:
            self._send_release(dev, token)

    def _on_release_ack(self, dev: int, token: Token) -> None:
        if self.proj.locked.get(dev) != token or dev in self.lock_pending:
            return
        t = self.release_timers.pop(dev, None)
        if t is not None:
            t.cancel()
        self.lock_pending.add(dev)

        def done() -> None:
            self.lock_pending.discard(dev)
            if self.proj.stage is Stage.RELEASING_LOCKS:
                if not self.proj.locked and not self.lock_pending:
                    self._finish()
            elif self.aborting:
                self._release_for_retry()

        self.ld.replicate([("released", self.rid, dev, token)], done)

    def _finish(self) -> None:
        if self.stage_pending or self.proj.stage is not Stage.RELEASING_LOCKS:
            return
        instance = self.proj.instance

        def done() -> None:
            self.trace("done", instance=instance)

        self._commit_stage(Stage.NOT_TRIGGERED, done)


def new_projection(kind_is_device: bool) -> tuple[Any, Any]:
    if kind_is_device:
        return DeviceProjection, fold_device
    return RoutineProjection, fold_routine
