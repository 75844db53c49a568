"""k-group lifecycle: directory, election, quorum writes, migration, recovery.

Group membership is never negotiated.  Every smart node derives the same
``GroupRecord`` for an entity from the shared membership view: a selection at
the epoch boundary, then replacement of failed members by the next-lowest
sortition hashes once ``f`` of them have been detected as failed.  The leader
is the first alive member in priority order; the Bully exchange below only
confirms to the members that it is alive.

Leadership state machine for one (entity, epoch)::

    ELECTING -> ACTIVE                          (first epoch)
    ELECTING -> TRANSFERRING -> INSTALLING -> DECOMMISSIONING -> ACTIVE
    ELECTING -> RECOVERING  -> INSTALLING -> ACTIVE               (failover)
    any      -> FROZEN                          (epoch boundary passed)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Iterable, NamedTuple, Protocol, Sequence

import numpy as np

from .model import Config, EntityId, EntityKind, MembershipView, SelectionPolicy
from .selection import (
    Cluster,
    InsufficientSmartNodes,
    LocalityMap,
    LshParams,
    augmented_location,
    hop_quorum_distance,
    lsh_select,
    sortition_order,
)
from .simnet import Message, message_size

if TYPE_CHECKING:
    from .world import World


class GroupDead(RuntimeError):
    pass


class ReconstructionStalled(RuntimeError):
    pass


class GroupStatus(enum.Enum):
    ACTIVE = "ACTIVE"
    MIGRATING = "MIGRATING"
    DECOMMISSIONED = "DECOMMISSIONED"


class Phase(enum.Enum):
    ELECTING = "ELECTING"
    RECOVERING = "RECOVERING"
    TRANSFERRING = "TRANSFERRING"
    INSTALLING = "INSTALLING"
    DECOMMISSIONING = "DECOMMISSIONING"
    ACTIVE = "ACTIVE"
    FROZEN = "FROZEN"


class Cause(enum.Enum):
    EPOCH_START = "EPOCH_START"
    LEADER_FAILURE = "LEADER_FAILURE"


GROUP_KINDS = frozenset(
    {"ELECTION", "COORDINATOR", "ACK", "REPLICATE", "STATE_REQUEST", "STATE_REPLY", "DECOMMISSION", "DECOMMISSION_ACK", "RECRUIT"}
)


class Entry(NamedTuple):
    seq: int
    term: int
    payload: tuple

    def as_list(self) -> list:
        return [self.seq, self.term, list(self.payload)]


class ReplicatedState:
    """Committed entries plus a projection that is a pure fold over them."""

    def __init__(self, factory: Callable[[], Any], fold: Callable[[Any, Entry], None]) -> None:
        self.factory = factory
        self.fold = fold
        self.entries: dict[int, Entry] = {}
        self.projection = factory()

    def add(self, entry: Entry) -> None:
        self.entries[entry.seq] = entry
        self.fold(self.projection, entry)

    def install(self, entries: Iterable[Entry]) -> None:
        self.entries = {e.seq: e for e in entries}
        self.projection = self.replay()

    def replay(self) -> Any:
        proj = self.factory()
        for seq in sorted(self.entries):
            self.fold(proj, self.entries[seq])
        return proj

    def ordered(self) -> list[Entry]:
        return [self.entries[s] for s in sorted(self.entries)]

    @property
    def last_seq(self) -> int:
        return max(self.entries, default=0)


def merge_states(replies: Sequence[Iterable[Entry]]) -> list[Entry]:
    """Union of replies; an entry survives if any reply holds it.  On a
    sequence-number clash the entry written under the higher term wins."""
    best: dict[int, Entry] = {}
    for reply in replies:
        for e in reply:
            cur = best.get(e.seq)
            if cur is None or e.term > cur.term:
                best[e.seq] = e
    return [best[s] for s in sorted(best)]


def reconstruct_state(replies: Sequence[Iterable[Entry]], f: int) -> list[Entry]:
    if len(replies) < f + 1:
        raise ReconstructionStalled(f"{len(replies)} replies < f+1={f + 1}")
    return merge_states(replies)


def bully_winner(priority: Sequence[int], alive: Iterable[int]) -> int:
    alive = set(alive)
    for n in priority:
        if n in alive:
            return n
    raise GroupDead("no alive member")


# --- directory --------------------------------------------------------------------


@dataclass
class GroupRecord:
    entity: EntityId
    epoch: int
    members: list[int]
    local: tuple[int, ...]
    candidates: int
    start: float
    failed: set[int] = field(default_factory=set)
    since_reselect: int = 0
    dead: bool = False

    @property
    def key(self) -> tuple[str, int]:
        return (self.entity.key(), self.epoch)

    def alive_members(self, alive: set[int] | frozenset[int]) -> list[int]:
        return [m for m in self.members if m in alive and m not in self.failed]

    def leader(self, alive: set[int] | frozenset[int]) -> int | None:
        for m in self.members:
            if m in alive and m not in self.failed:
                return m
        return None

    def term_of(self, node: int) -> int:
        return self.members.index(node)


@dataclass
class KGroupView:
    entity: EntityId
    epoch: int
    members: tuple[int, ...]
    leader: int
    status: GroupStatus


@dataclass
class GroupChange:
    record: GroupRecord
    old_leader: int | None
    new_leader: int | None
    recruits: list[int]


class Directory:
    """Zero-message group bookkeeping shared by all nodes of one simulation."""

    def __init__(self, cfg: Config, positions: np.ndarray, smart: Sequence[int], clusters: Sequence[Cluster],
                 entities: Sequence[EntityId], seed: int, hops: Callable[[], np.ndarray]) -> None:
        self.cfg = cfg
        self.positions = positions
        self.smart = sorted(smart)
        self.clusters = list(clusters)
        self.entities = sorted(entities)
        self.seed = seed
        self._hops = hops
        self.epoch = -1
        self.groups: dict[tuple[str, int], GroupRecord] = {}
        self.by_node: dict[int, set[tuple[str, int]]] = {}
        self.monitored: dict[int, list[int]] = {}  # smart node -> devices it monitored last epoch
        self.cluster_of_device: dict[int, int] = {d: c.id for c in clusters for d in c.members}
        self.centers = {c.id: c.center for c in clusters}
        self.entity_devices: dict[str, list[int]] = {}
        for c in clusters:
            self.entity_devices[EntityId(EntityKind.DEVICE_CLUSTER, c.id, c.center).key()] = list(c.members)

    def set_entity_devices(self, entity: EntityId, devices: Iterable[int]) -> None:
        self.entity_devices[entity.key()] = sorted(devices)

    # selection ----------------------------------------------------------------
    def locality(self, epoch: int) -> LocalityMap:
        cfg = self.cfg
        rng = np.random.default_rng([self.seed, epoch, 0xA7])
        aug = []
        for node in range(len(self.positions)):
            mon = self.monitored.get(node, [])
            aug.append(
                augmented_location(self.positions[node], node in self._smart_set, self.positions[mon] if mon else (),
                                   cfg.lsh_jitter, rng)
            )
        return LocalityMap(self.positions, np.asarray(aug), self.centers, self.seed, cfg.lsh_neighbors, cfg.lsh_leader)

    @property
    def _smart_set(self) -> set[int]:
        s = getattr(self, "_ss", None)
        if s is None:
            s = self._ss = set(self.smart)
        return s

    def select(self, view: MembershipView, entity: EntityId, epoch: int, loc: LocalityMap | None,
               params: LshParams | None) -> tuple[list[int], tuple[int, ...], int]:
        cfg = self.cfg
        if cfg.selection_policy is SelectionPolicy.RANDOM or cfg.k == 1 or loc is None:
            alive = view.alive_smart
            if len(alive) < cfg.k:
                raise InsufficientSmartNodes(f"{len(alive)} alive smart < k={cfg.k}")
            members = sortition_order(alive, epoch, entity)[: cfg.k]
            return members, tuple(members), 0
        sel = lsh_select(view, entity, epoch, cfg.f, params, loc)
        return list(sel.members), sel.local, sel.candidates

    def start_epoch(self, epoch: int, view: MembershipView, now: float) -> list[GroupRecord]:
        cfg = self.cfg
        self.epoch = epoch
        loc = params = None
        if cfg.selection_policy is SelectionPolicy.LSH_MIX and cfg.k > 1:
            loc = self.locality(epoch)
            params = LshParams.derive(self.seed, epoch, cfg.lsh_m, cfg.lsh_l, cfg.lsh_r, loc.augmented.shape[1])
        out = []
        hub: tuple[list[int], tuple[int, ...], int] | None = None
        monitored: dict[int, list[int]] = {}
        for ent in self.entities:
            if cfg.centralized:
                if hub is None:
                    # the hub stays put across epochs for as long as it lives
                    hub = self.select(view, EntityId(EntityKind.DEVICE_CLUSTER, 0, 0), 0, None, None)
                members, local, cands = hub
            else:
                members, local, cands = self.select(view, ent, epoch, loc, params)
            rec = GroupRecord(ent, epoch, list(members), tuple(local), cands, now)
            self.groups[rec.key] = rec
            for m in rec.members:
                self.by_node.setdefault(m, set()).add(rec.key)
                monitored.setdefault(m, []).extend(self.entity_devices.get(ent.key(), [ent.representative_device]))
            out.append(rec)
        self.monitored = monitored
        # forget records older than the previous epoch
        for key in [k for k in self.groups if k[1] < epoch - 2]:
            rec = self.groups.pop(key)
            for m in rec.members:
                self.by_node.get(m, set()).discard(key)
        return out

    def record(self, entity: EntityId | str, epoch: int | None = None) -> GroupRecord | None:
        key = entity if isinstance(entity, str) else entity.key()
        return self.groups.get((key, self.epoch if epoch is None else epoch))

    def leader(self, entity: EntityId | str, alive: set[int] | frozenset[int], epoch: int | None = None) -> int | None:
        rec = self.record(entity, epoch)
        return None if rec is None else rec.leader(alive)

    def view(self, entity: EntityId, alive: set[int], status: GroupStatus = GroupStatus.ACTIVE) -> KGroupView:
        rec = self.record(entity)
        assert rec is not None
        return KGroupView(entity, rec.epoch, tuple(rec.members), rec.leader(alive) or -1, status)

    def quorum_distance(self, rec: GroupRecord, alive: set[int]) -> float:
        leader = rec.leader(alive)
        if leader is None:
            return math.inf
        return hop_quorum_distance(leader, rec.members, self.cfg.f, self._hops())

    # failure response --------------------------------------------------------------
    def on_failure(self, node: int, alive: set[int]) -> list[GroupChange]:
        """Apply a detected failure to every group of the current epoch."""
        changes = []
        threshold = max(1, self.cfg.f)
        for key in sorted(self.by_node.get(node, ())):
            rec = self.groups.get(key)
            if rec is None or rec.epoch != self.epoch or node in rec.failed:
                continue
            before = rec.leader(alive | {node})
            rec.failed.add(node)
            rec.since_reselect += 1
            recruits: list[int] = []
            if rec.since_reselect >= threshold and not self.cfg.centralized:
                current = set(rec.members)
                spare = [n for n in sorted(alive & self._smart_set) if n not in current]
                want = len([m for m in rec.members if m in rec.failed])
                want = min(want, self.cfg.k - len(rec.alive_members(alive)))
                recruits = sortition_order(spare, rec.epoch, rec.entity)[: max(0, want)]
                rec.members.extend(recruits)
                for r in recruits:
                    self.by_node.setdefault(r, set()).add(key)
                rec.since_reselect = 0
            after = rec.leader(alive)
            if after is None:
                rec.dead = True
            changes.append(GroupChange(rec, before, after, recruits))
        # old-epoch groups only need their failed set for state requests
        for key in sorted(self.by_node.get(node, ())):
            rec = self.groups.get(key)
            if rec is not None and rec.epoch < self.epoch:
                rec.failed.add(node)
        return changes


# --- per-node replica and leadership ----------------------------------------------


class App(Protocol):
    def on_active(self, resumed: bool) -> None: ...
    def on_freeze(self) -> None: ...
    def handle(self, msg: Message) -> None: ...
    def on_view_change(self) -> None: ...
    def soft_state(self) -> Any: ...
    def load_soft(self, soft: Any) -> None: ...


@dataclass
class Replica:
    entity: str
    epoch: int
    entries: dict[int, Entry] = field(default_factory=dict)
    installed: bool = False
    term_seen: int = -1
    leader: int | None = None

    def store(self, e: Entry) -> None:
        cur = self.entries.get(e.seq)
        if cur is None or e.term >= cur.term:
            self.entries[e.seq] = e

    def install(self, entries: Iterable[Entry], term: int) -> None:
        # later writes of the installing leader may overtake the (larger)
        # snapshot message; keep those, drop leftovers of older leaders
        fresh = {e.seq: e for e in entries}
        for s, e in self.entries.items():
            if e.term >= term and s not in fresh:
                fresh[s] = e
        self.entries = fresh
        self.installed = True

    def ordered(self) -> list[Entry]:
        return [self.entries[s] for s in sorted(self.entries)]


@dataclass
class PendingWrite:
    entries: list[Entry]
    holders: set[int]
    cb: Callable[[], None] | None
    started: float
    install: bool
    wid: int = 0
    timer: Any = None


def _entries_from(raw: Iterable[Sequence]) -> list[Entry]:
    return [Entry(int(s), int(t), tuple(p)) for s, t, p in raw]


class Leadership:
    """Leader-side state of one k-group at one node."""

    def __init__(self, node: "SmartNode", rec: GroupRecord, cause: Cause, failed_at: float | None = None) -> None:
        self.node = node
        self.world: World = node.world
        self.rec = rec
        self.entity = rec.entity
        self.ekey = rec.entity.key()
        self.epoch = rec.epoch
        self.term = rec.term_of(node.id)
        self.cause = cause
        self.failed_at = failed_at
        self.phase = Phase.ELECTING
        self.state = self.world.new_state(self.entity)
        self.working = self.state.factory()  # fold over everything issued, committed or not
        self.next_seq = 1
        self.pending: list[PendingWrite] = []
        self.inbox: list[Message] = []
        self.app: App = self.world.new_app(self)
        self.was_active = False
        self._elect_wait: set[int] = set()
        self._elect_start = 0.0
        self._elect_rtt = 0.0
        self._replies: dict[int, dict] = {}
        self._src_epoch = self.epoch - 1
        self._src_leader: int | None = None
        self._src_mode = "leader"
        self._transfer_start = 0.0
        self._recruit_wait: dict[int, Any] = {}
        self._wid = 0

    # helpers ----------------------------------------------------------------------
    @property
    def cfg(self) -> Config:
        return self.world.cfg

    @property
    def now(self) -> float:
        return self.world.sim.now

    @property
    def alive(self) -> set[int]:
        return self.world.membership.alive

    def others(self) -> list[int]:
        return [m for m in self.rec.alive_members(self.alive) if m != self.node.id]

    def group_rtt(self, members: Iterable[int] | None = None) -> float:
        net = self.world.net
        ms = list(self.others() if members is None else members)
        return max((net.rtt(self.node.id, m) for m in ms), default=0.0)

    def send(self, kind: str, dst: int, payload: Any = None, entries: int = 0, epoch: int | None = None) -> None:
        self.node.send(Message(kind, self.node.id, dst, self.ekey, self.epoch if epoch is None else epoch, -1, payload,
                               message_size(kind, entries)))

    def trace(self, ev: str, **fields: Any) -> None:
        self.world.trace.emit(ev, entity=self.ekey, epoch=self.epoch, node=self.node.id, **fields)

    @property
    def active(self) -> bool:
        return self.phase is Phase.ACTIVE

    # election ------------------------------------------------------------------------
    def start(self) -> None:
        rep = self.node.replica(self.ekey, self.epoch)
        rep.term_seen = max(rep.term_seen, self.term)
        rep.leader = self.node.id
        self._elect_start = self.now
        self._elect_wait = set(self.others())
        self._elect_rtt = self.group_rtt(self._elect_wait)
        for m in sorted(self._elect_wait):
            self.send("COORDINATOR", m, {"term": self.term})
        if not self._elect_wait:
            self.world.sim.schedule(0.0, self._election_done)
        self._arm_resend()

    def _arm_resend(self) -> None:
        rtt = self.group_rtt(self.rec.members) or 1.0
        self.node.timer(self.cfg.quorum_timeout_rtts * rtt, self._resend)

    def _resend(self) -> None:
        # requests and replies can die with a relay node; ask again until settled
        if self.phase in (Phase.ACTIVE, Phase.FROZEN):
            return
        alive = self.alive
        if self.phase is Phase.ELECTING:
            for m in sorted(self._elect_wait & alive):
                self.send("COORDINATOR", m, {"term": self.term})
        elif self.phase is Phase.TRANSFERRING:
            if self._src_mode == "leader" and self._src_leader in alive:
                self.send("STATE_REQUEST", self._src_leader, {"mode": "leader"}, epoch=self._src_epoch)
            elif self._src_mode == "members":
                for m in sorted(self._members_wait & alive):
                    self.send("STATE_REQUEST", m, {"mode": "member"}, epoch=self._src_epoch)
        elif self.phase is Phase.RECOVERING:
            for m in sorted(self._members_wait & alive):
                self.send("STATE_REQUEST", m, {"mode": "member"})
        elif self.phase is Phase.DECOMMISSIONING and self._src_leader in alive:
            self.send("DECOMMISSION", self._src_leader, {"from_leader": False}, epoch=self._src_epoch)
        self._arm_resend()

    def on_coordinator_ack(self, src: int) -> None:
        if self.phase is not Phase.ELECTING or src not in self._elect_wait:
            return
        self._elect_wait.discard(src)
        if not self._elect_wait:
            self._election_done()

    def _election_done(self) -> None:
        if self.phase is not Phase.ELECTING:
            return
        fields: dict[str, Any] = dict(delay=self.now - self._elect_start, rtt=self._elect_rtt, cause=self.cause.value,
                                      size=len(self.rec.members))
        if self.failed_at is not None:
            fields["since_failure"] = self.now - self.failed_at
        self.trace("election", **fields)
        if self.cause is Cause.EPOCH_START:
            if self._first_epoch():
                self.state.install([])
                self._activate(resumed=False)
            else:
                self._begin_transfer(self.epoch - 1)
        else:
            self._begin_recovery()

    def _first_epoch(self) -> bool:
        return self.epoch == self.world.first_epoch

    # quorum writes ----------------------------------------------------------------
    def replicate(self, payloads: Sequence[tuple], cb: Callable[[], None] | None = None) -> list[Entry]:
        entries = []
        for p in payloads:
            entries.append(Entry(self.next_seq, self.term, tuple(p)))
            self.next_seq += 1
        self._write(entries, cb, install=False)
        return entries

    def _write(self, entries: list[Entry], cb: Callable[[], None] | None, install: bool) -> None:
        rep = self.node.replica(self.ekey, self.epoch)
        if install:
            rep.install(entries, self.term)
            self.working = self.state.factory()
            for e in entries:
                self.state.fold(self.working, e)
        else:
            for e in entries:
                rep.store(e)
                self.state.fold(self.working, e)
        self.world.hooks.issued(self.ekey, entries)
        self._wid += 1
        w = PendingWrite(entries, {self.node.id}, cb, self.now, install, self._wid)
        self.pending.append(w)
        self._push(w)
        if len(w.holders) >= self.cfg.f + 1:
            self.world.sim.schedule(0.0, self._drain)

    def _push(self, w: PendingWrite) -> None:
        targets = [m for m in self.others() if m not in w.holders]
        payload = {"entries": [e.as_list() for e in w.entries], "install": w.install, "term": self.term, "wid": w.wid}
        for m in targets:
            self.send("REPLICATE", m, payload, entries=len(w.entries))
        rtt = self.group_rtt() or 1.0
        w.timer = self.node.timer(self.cfg.quorum_timeout_rtts * rtt, self._retry, w)

    def _retry(self, w: PendingWrite) -> None:
        if w not in self.pending or self.phase is Phase.FROZEN:
            return
        self._push(w)

    def on_replicate_ack(self, src: int, wid: int) -> None:
        for w in self.pending:
            if w.wid == wid:
                w.holders.add(src)
                break
        self._drain()

    def _drain(self) -> None:
        q = self.cfg.f + 1
        done: list[PendingWrite] = []
        while self.pending and len(self.pending[0].holders) >= q:
            w = self.pending.pop(0)
            if w.timer is not None:
                w.timer.cancel()
            if w.install:
                self.state.install(w.entries)
            else:
                for e in w.entries:
                    self.state.add(e)
                self.world.hooks.committed(self.ekey, w.entries)
                self.trace("quorum", delay=self.now - w.started, n=len(w.entries))
            done.append(w)
        for w in done:
            if w.cb is not None:
                w.cb()

    def abandon_pending(self) -> None:
        for w in self.pending:
            if w.timer is not None:
                w.timer.cancel()
        self.pending.clear()

    # state transfer (epoch change) ------------------------------------------------
    def _begin_transfer(self, src_epoch: int) -> None:
        self.phase = Phase.TRANSFERRING
        self._transfer_start = self._transfer_start or self.now
        self._src_epoch = src_epoch
        self._replies = {}
        src = self.world.directory.record(self.ekey, src_epoch)
        if src is None:
            # nothing older to inherit from
            self._install_and_finish([], source_alive=False, soft=None)
            return
        self._src_leader = src.leader(self.alive)
        if self._src_leader is not None:
            self._src_mode = "leader"
            self.send("STATE_REQUEST", self._src_leader, {"mode": "leader"}, epoch=src_epoch)
        else:
            self._request_members(src)

    def _request_members(self, src: GroupRecord) -> None:
        self._src_mode = "members"
        self._replies = {}
        targets = src.alive_members(self.alive)
        self._members_wait = set(targets)
        if not targets:
            self._source_exhausted()
            return
        for m in targets:
            self.send("STATE_REQUEST", m, {"mode": "member"}, epoch=src.epoch)

    def on_state_reply(self, msg: Message) -> None:
        p = msg.payload
        if self.phase is Phase.TRANSFERRING and msg.epoch == self._src_epoch:
            if self._src_mode == "leader":
                if msg.src != self._src_leader:
                    return
                if p["complete"]:
                    self._install_and_finish(_entries_from(p["entries"]), source_alive=True, soft=p.get("soft"))
                else:
                    src = self.world.directory.record(self.ekey, self._src_epoch)
                    self._request_members(src)
            else:
                self._replies[msg.src] = p
                self._members_wait.discard(msg.src)
                self._check_member_replies()
        elif self.phase is Phase.RECOVERING and msg.epoch == self.epoch:
            self._replies[msg.src] = p
            self._members_wait.discard(msg.src)
            self._check_recovery()

    def read_quorum(self, rec: GroupRecord) -> int:
        # any f+1 write set must meet the installed replicas we read
        return max(self.cfg.f + 1, len(rec.members) - self.cfg.f)

    def _check_member_replies(self) -> None:
        src = self.world.directory.record(self.ekey, self._src_epoch)
        need = self.read_quorum(src)
        installed = [r for r in self._replies.values() if r["installed"]]
        if len(installed) < need and self._members_wait:
            return
        if not installed:
            self._source_exhausted()
            return
        if len(installed) < need:
            self.trace("underquorum", replies=len(installed))
        merged = merge_states([_entries_from(r["entries"]) for r in self._replies.values()])
        soft = next((r.get("soft") for r in installed if r.get("soft") is not None), None)
        self._install_and_finish(merged, source_alive=False, soft=soft)

    def _source_exhausted(self) -> None:
        # that group never finished its own changeover; inherit from its predecessor
        older = self._src_epoch - 1
        if older >= self.world.first_epoch and self.world.directory.record(self.ekey, older) is not None:
            self._begin_transfer(older)
        else:
            self.trace("state_lost")
            self._install_and_finish([], source_alive=False, soft=None)

    def _install_and_finish(self, entries: list[Entry], source_alive: bool, soft: Any) -> None:
        self.phase = Phase.INSTALLING
        self.next_seq = max((e.seq for e in entries), default=0) + 1
        if soft is not None:
            self.app.load_soft(soft)

        def installed() -> None:
            self.trace("transfer", delay=self.now - self._transfer_start, entries=len(entries))
            self.world.hooks.installed(self.ekey, self.epoch, self.state.ordered(), "migration")
            self._decommission_old(source_alive)

        self._write(list(entries), installed, install=True)

    def _decommission_old(self, source_alive: bool) -> None:
        src = self.world.directory.record(self.ekey, self._src_epoch)
        if src is None:
            self._activate(resumed=True)
            return
        leader = self._src_leader
        if source_alive and leader is not None and leader in self.alive:
            self.phase = Phase.DECOMMISSIONING
            self.send("DECOMMISSION", leader, {"from_leader": False}, epoch=src.epoch)
        else:
            for m in src.alive_members(self.alive):
                self.send("DECOMMISSION", m, {"from_leader": True}, epoch=src.epoch)
            self._activate(resumed=True)

    def on_decommission_ack(self, msg: Message) -> None:
        if self.phase is Phase.DECOMMISSIONING and msg.epoch == self._src_epoch:
            self._activate(resumed=True)

    # recovery after leader failure -----------------------------------------------
    def _begin_recovery(self) -> None:
        self.phase = Phase.RECOVERING
        self._transfer_start = self.now
        own = self.node.replica(self.ekey, self.epoch)
        self._replies = {self.node.id: {"entries": [e.as_list() for e in own.ordered()], "installed": own.installed}}
        self._members_wait = set(self.others())
        for m in sorted(self._members_wait):
            self.send("STATE_REQUEST", m, {"mode": "member"})
        self._check_recovery()

    def _check_recovery(self) -> None:
        if self.phase is not Phase.RECOVERING:
            return
        need = self.read_quorum(self.rec)
        installed = [r for r in self._replies.values() if r["installed"]]
        if len(installed) < need and self._members_wait:
            return
        if not installed:
            # the group never got its inherited state; fetch it from the old group again
            self._transfer_start = self.now
            self._begin_transfer(self.epoch - 1)
            return
        if len(installed) < need:
            self.trace("underquorum", replies=len(installed))
        merged = reconstruct_state([_entries_from(r["entries"]) for r in installed], 0)
        self.phase = Phase.INSTALLING
        self.next_seq = max((e.seq for e in merged), default=0) + 1

        def done() -> None:
            self.trace("reconstruct", delay=self.now - self._transfer_start, entries=len(merged))
            self.world.hooks.installed(self.ekey, self.epoch, self.state.ordered(), "failover")
            self._activate(resumed=True)

        self._write(merged, done, install=True)

    # activation, freeze, recruitment --------------------------------------------
    def _activate(self, resumed: bool) -> None:
        self.phase = Phase.ACTIVE
        self.was_active = True
        self.trace("active", boundary=self.rec.start, gap=self.now - self.rec.start, cause=self.cause.value)
        self.app.on_active(resumed)
        inbox, self.inbox = self.inbox, []
        for m in inbox:
            if self.phase is Phase.ACTIVE:
                self.app.handle(m)

    def freeze(self) -> None:
        if self.phase is Phase.FROZEN:
            return
        self.complete = self.phase is Phase.ACTIVE
        self.phase = Phase.FROZEN
        self.abandon_pending()
        self.inbox.clear()
        self.app.on_freeze()

    def deliver(self, msg: Message) -> None:
        if self.phase is Phase.ACTIVE:
            self.app.handle(msg)
        elif self.phase is not Phase.FROZEN:
            self.inbox.append(msg)

    def recruit(self, recruits: Sequence[int]) -> None:
        if self.phase is not Phase.ACTIVE:
            return  # the install round will reach them
        self.trace("recruit", recruits=list(recruits))
        for r in recruits:
            self._send_recruit(r)

    def _send_recruit(self, r: int) -> None:
        if self.phase is not Phase.ACTIVE or r not in self.alive:
            return
        entries = self.state.ordered()
        rep_entries = self.node.replica(self.ekey, self.epoch).ordered()
        self.send("RECRUIT", r, {"entries": [e.as_list() for e in rep_entries], "term": self.term}, entries=len(entries))
        rtt = self.world.net.rtt(self.node.id, r) or 1.0
        self._recruit_wait[r] = self.node.timer(self.cfg.quorum_timeout_rtts * rtt, self._send_recruit, r)

    def on_recruit_ack(self, src: int) -> None:
        t = self._recruit_wait.pop(src, None)
        if t is not None:
            t.cancel()

    def on_view_change(self) -> None:
        alive = self.alive
        if self.phase is Phase.ELECTING:
            self._elect_wait &= alive
            if not self._elect_wait:
                self._election_done()
        elif self.phase is Phase.TRANSFERRING:
            if self._src_mode == "leader" and self._src_leader is not None and self._src_leader not in alive:
                src = self.world.directory.record(self.ekey, self._src_epoch)
                self._request_members(src)
            elif self._src_mode == "members":
                self._members_wait &= alive
                self._check_member_replies()
        elif self.phase is Phase.RECOVERING:
            self._members_wait &= alive
            self._check_recovery()
        elif self.phase is Phase.DECOMMISSIONING:
            if self._src_leader not in alive:
                src = self.world.directory.record(self.ekey, self._src_epoch)
                for m in src.alive_members(alive):
                    self.send("DECOMMISSION", m, {"from_leader": True}, epoch=src.epoch)
                self._activate(resumed=True)
        if self.phase is Phase.ACTIVE:
            self.app.on_view_change()


# --- smart node -----------------------------------------------------------------------


class SmartNode:
    """Protocol host on one smart device."""

    def __init__(self, world: "World", node_id: int) -> None:
        self.world = world
        self.id = node_id
        self.replicas: dict[tuple[str, int], Replica] = {}
        self.leaderships: dict[tuple[str, int], Leadership] = {}

    @property
    def incarnation(self) -> int:
        return self.world.net.incarnation[self.id]

    def reset(self) -> None:
        self.replicas.clear()
        self.leaderships.clear()

    def timer(self, delay: float, fn: Callable, *args: Any):
        inc = self.incarnation

        def fire() -> None:
            if self.world.net.is_alive(self.id) and self.incarnation == inc:
                fn(*args)

        return self.world.sim.schedule(delay, fire)

    def send(self, msg: Message) -> None:
        self.world.net.send(msg)

    def replica(self, ekey: str, epoch: int) -> Replica:
        rep = self.replicas.get((ekey, epoch))
        if rep is None:
            rep = Replica(ekey, epoch, installed=epoch == self.world.first_epoch)
            self.replicas[(ekey, epoch)] = rep
        return rep

    def lead(self, rec: GroupRecord, cause: Cause, failed_at: float | None = None) -> Leadership:
        ld = Leadership(self, rec, cause, failed_at)
        self.leaderships[rec.key] = ld
        ld.start()
        return ld

    def current_leadership(self, ekey: str) -> Leadership | None:
        return self.leaderships.get((ekey, self.world.directory.epoch))

    # message handling ----------------------------------------------------------------
    def on_message(self, msg: Message) -> None:
        if msg.kind in GROUP_KINDS:
            self._on_group_message(msg)
            return
        self.world.route_app_message(self, msg)

    def _reply(self, msg: Message, kind: str, payload: Any, entries: int = 0) -> None:
        self.send(Message(kind, self.id, msg.src, msg.group, msg.epoch, -1, payload, message_size(kind, entries)))

    def _on_group_message(self, msg: Message) -> None:
        key = (msg.group, msg.epoch)
        kind = msg.kind
        p = msg.payload or {}
        if kind == "COORDINATOR":
            rep = self.replica(*key)
            if p["term"] < rep.term_seen:
                self._reply(msg, "ELECTION", {"term": rep.term_seen})
                return
            rep.term_seen = p["term"]
            rep.leader = msg.src
            self._reply(msg, "ACK", {"for": "COORDINATOR"})
        elif kind == "ACK":
            ld = self.leaderships.get(key)
            if ld is None:
                return
            what = p.get("for")
            if what == "COORDINATOR":
                ld.on_coordinator_ack(msg.src)
            elif what == "REPLICATE":
                ld.on_replicate_ack(msg.src, p["wid"])
            elif what == "RECRUIT":
                ld.on_recruit_ack(msg.src)
        elif kind == "REPLICATE":
            rep = self.replica(*key)
            if p["term"] < rep.term_seen:
                return
            rep.term_seen = p["term"]
            entries = _entries_from(p["entries"])
            if p["install"]:
                rep.install(entries, p["term"])
            else:
                for e in entries:
                    rep.store(e)
            self._reply(msg, "ACK", {"for": "REPLICATE", "wid": p["wid"]})
        elif kind == "RECRUIT":
            rep = self.replica(*key)
            rep.term_seen = max(rep.term_seen, p["term"])
            for e in _entries_from(p["entries"]):
                rep.store(e)
            rep.installed = True
            self._reply(msg, "ACK", {"for": "RECRUIT"})
        elif kind == "STATE_REQUEST":
            ld = self.leaderships.get(key)
            if p.get("mode") == "leader" and ld is not None:
                complete = ld.phase is Phase.ACTIVE or (ld.phase is Phase.FROZEN and getattr(ld, "complete", False))
                entries = ld.state.ordered() if complete else []
                soft = ld.app.soft_state() if complete else None
                self._reply(msg, "STATE_REPLY", {"entries": [e.as_list() for e in entries], "complete": complete,
                                                 "installed": complete, "soft": soft}, entries=len(entries))
            else:
                rep = self.replicas.get(key)
                entries = rep.ordered() if rep is not None else []
                installed = rep.installed if rep is not None else False
                self._reply(msg, "STATE_REPLY", {"entries": [e.as_list() for e in entries], "complete": False,
                                                 "installed": installed}, entries=len(entries))
        elif kind == "STATE_REPLY":
            for ld in list(self.leaderships.values()):
                if ld.ekey == msg.group and ld.phase in (Phase.TRANSFERRING, Phase.RECOVERING):
                    ld.on_state_reply(msg)
        elif kind == "DECOMMISSION":
            ld = self.leaderships.pop(key, None)
            if ld is not None:
                ld.freeze()
                self._reply(msg, "DECOMMISSION_ACK", None)
                rec = self.world.directory.record(msg.group, msg.epoch)
                if rec is not None:
                    for m in rec.alive_members(self.world.membership.alive):
                        if m != self.id:
                            self.send(Message("DECOMMISSION", self.id, m, msg.group, msg.epoch, -1, {"from_leader": True},
                                              message_size("DECOMMISSION")))
                self.world.trace.emit("decommissioned", entity=msg.group, epoch=msg.epoch, node=self.id)
            elif not p.get("from_leader"):
                self._reply(msg, "DECOMMISSION_ACK", None)  # our earlier ack may have been lost
            self.replicas.pop(key, None)
        elif kind == "DECOMMISSION_ACK":
            for ld in list(self.leaderships.values()):
                if ld.ekey == msg.group and ld.phase is Phase.DECOMMISSIONING:
                    ld.on_decommission_ack(msg)
        elif kind == "ELECTION":
            # a member has seen a newer leader: step aside
            ld = self.leaderships.get(key)
            if ld is not None and p.get("term", -1) > ld.term:
                ld.freeze()
