import pytest

from comesh.model import Command, Config, Leaf, Routine, Trigger, validate_config
from comesh.simnet import build_topology
from comesh.world import World

THRESHOLD = 50.0


class Bench:
    """A small grid with hand-written routines."""

    def __init__(self, N=60, seed=0, **cfg):
        cfg.setdefault("f", 1)
        cfg.setdefault("epoch_length", 400.0)
        self.cfg = validate_config(Config(N=N, **cfg))
        self.seed = seed
        self.topo = build_topology("GRID3D", N, self.cfg.smart_fraction, seed)
        smart = set(self.topo.smart_ids())
        self.simple = [n for n in range(N) if n not in smart]
        self.routines = []
        self.injections = []

    def routine(self, trigger_dev, devices, at=20.0, duration=5.0):
        rid = len(self.routines)
        cmds = tuple(Command(d, duration=duration) for d in devices)
        self.routines.append(Routine(rid, Trigger(Leaf(trigger_dev, ">=", THRESHOLD)), cmds))
        self.fire(trigger_dev, at)
        return rid

    def fire(self, dev, at, pulse=40.0):
        self.injections.append((at, dev, 2 * THRESHOLD))
        self.injections.append((at + pulse, dev, 0.0))

    def world(self, horizon=400.0, churn=(), messages=True, arrivals_end=None):
        return World(self.cfg, self.seed, self.topo, self.routines, self.injections, churn, horizon, messages, True,
                     arrivals_end)


@pytest.fixture
def bench():
    return Bench


def of(records, ev, **where):
    return [r for r in records if r["ev"] == ev and all(r.get(k) == v for k, v in where.items())]


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(name, ok, detail):
        line = f"{name:<4} {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
