import numpy as np
import pytest

from decompgail import nets
from decompgail.checks import _jitter_heads
from decompgail.expert import gen_demos
from decompgail.world import AgentSpec, MapGraph, Scenario, scenario_suite


def se2(points, rot, shift):
    """Rotate xy columns by ``rot`` then translate; a heading column (if any) turns with them."""
    p = np.array(points, dtype=float)
    c, s = np.cos(rot), np.sin(rot)
    xy = p[..., :2] @ np.array([[c, s], [-s, c]]) + shift
    if p.shape[-1] == 2:
        return xy
    return np.concatenate([xy, (p[..., 2:3] + rot + np.pi) % (2 * np.pi) - np.pi], axis=-1)


def transform_scenario(sc, rot, shift):
    mp = MapGraph([se2(c, rot, shift) for c in sc.map.centerlines],
                  [se2(e, rot, shift) for e in sc.map.road_edges], sc.map.lane_half_width)
    agents = [AgentSpec(a.id, tuple(se2(np.array(a.pose), rot, shift)), a.speed, a.length, a.width, a.route)
              for a in sc.agents]
    return Scenario(mp, agents, sc.horizon, sc.dt, sc.template)


def transform_history(h, rot, shift):
    return nets.History(transform_scenario(h.scenario, rot, shift), h.tokens.copy(), se2(h.poses, rot, shift))


def subset_history(h, agents):
    """History restricted to ``agents`` (re-indexed in the given order)."""
    sc = h.scenario
    specs = [AgentSpec(k, *[getattr(sc.agents[a], f) for f in ("pose", "speed", "length", "width", "route")])
             for k, a in enumerate(agents)]
    return nets.History(Scenario(sc.map, specs, sc.horizon, sc.dt, sc.template), h.tokens[:, agents],
                        h.poses[:, agents])


@pytest.fixture(scope="session")
def small_suite():
    return scenario_suite(24, 0)


@pytest.fixture(scope="session")
def small_demos(small_suite):
    return gen_demos(small_suite, K=64, seed=0)


@pytest.fixture(scope="session")
def ncfg():
    return nets.NetConfig()


@pytest.fixture(scope="session")
def jittered(ncfg):
    """All networks with every zero-initialised head replaced by random weights."""
    store = nets.init_all(ncfg, 0, disc="both")
    _jitter_heads(store, np.random.default_rng(7), scale=0.3)
    return store


ACCEPTANCE = []  # (criterion, passed, detail) filled by test_acceptance


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
