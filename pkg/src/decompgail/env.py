"""Token-driven multi-agent Markov game: dynamics, neighbourhoods, collisions, rollouts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .world import Scenario, TokenVocab, wrap_angle

NEIGHBOR_RADIUS = 60.0
OFFROAD_SLACK = 0.5


class StepFault(ValueError):
    pass


@dataclass
class WorldState:
    t: int
    poses: np.ndarray
    speeds: np.ndarray
    alive: np.ndarray
    dt: float = 0.5

    @classmethod
    def initial(cls, scenario: Scenario):
        n = scenario.n_agents
        return cls(0, scenario.initial_poses(), scenario.initial_speeds(), np.ones(n, dtype=bool), scenario.dt)


def apply_deltas(poses, deltas):
    """Rotate body-frame deltas by each heading and add them to the poses."""
    poses = np.asarray(poses, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    c, s = np.cos(poses[..., 2]), np.sin(poses[..., 2])
    out = np.empty(np.broadcast_shapes(poses.shape, deltas.shape))
    out[..., 0] = poses[..., 0] + c * deltas[..., 0] - s * deltas[..., 1]
    out[..., 1] = poses[..., 1] + s * deltas[..., 0] + c * deltas[..., 1]
    out[..., 2] = wrap_angle(poses[..., 2] + deltas[..., 2])
    return out


def step(state: WorldState, joint_tokens, vocab: TokenVocab) -> WorldState:
    tokens = np.asarray(joint_tokens)
    if tokens.shape != (len(state.poses),):
        raise StepFault(f"step {state.t}: expected {len(state.poses)} tokens, got shape {tokens.shape}")
    bad = np.flatnonzero((tokens < 0) | (tokens >= vocab.K))
    if len(bad):
        raise StepFault(f"step {state.t}: agent {int(bad[0])} emitted unknown token {int(tokens[bad[0]])}")
    deltas = vocab.deltas[tokens]
    deltas = np.where(state.alive[:, None], deltas, 0.0)
    poses = apply_deltas(state.poses, deltas)
    speeds = np.hypot(deltas[:, 0], deltas[:, 1]) / state.dt
    return WorldState(state.t + 1, poses, speeds, state.alive.copy(), state.dt)


def pairwise_distances(poses):
    xy = np.asarray(poses, dtype=float)[..., :2]
    diff = xy[..., :, None, :] - xy[..., None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def neighbor_matrix(poses, radius=NEIGHBOR_RADIUS, max_count=None):
    """Boolean (..., N, N) membership with row i holding the neighbours of ego i.

    With a cap, each ego keeps its ``max_count`` nearest (ties by id).
    """
    d = pairwise_distances(poses)
    n = d.shape[-1]
    member = (d <= radius) & ~np.eye(n, dtype=bool)
    if max_count is not None and max_count < n - 1:
        key = np.where(member, d, np.inf)
        order = np.argsort(key, axis=-1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(n) * np.ones_like(order), axis=-1)
        member &= rank < max_count
    return member, d


def neighbors(state: WorldState, radius: float = NEIGHBOR_RADIUS, max_count=None) -> dict:
    """Per-ego sorted list of (neighbour index, distance)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    member, d = neighbor_matrix(state.poses, radius, max_count)
    out = {}
    for i in range(len(d)):
        js = np.flatnonzero(member[i])
        out[i] = sorted(((int(j), float(d[i, j])) for j in js), key=lambda p: (p[1], p[0]))
    return out


def box_corners(poses, footprints):
    """Corners (..., 4, 2) of oriented rectangles."""
    poses = np.asarray(poses, dtype=float)
    fp = np.asarray(footprints, dtype=float)
    hl, hw = fp[..., 0] / 2, fp[..., 1] / 2
    c, s = np.cos(poses[..., 2]), np.sin(poses[..., 2])
    local = np.stack([np.stack([hl, hw], -1), np.stack([-hl, hw], -1),
                      np.stack([-hl, -hw], -1), np.stack([hl, -hw], -1)], axis=-2)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=-2)
    return np.einsum("...ij,...kj->...ki", rot, local) + poses[..., None, :2]


def collision_matrix(poses, footprints):
    """Separating-axis overlap test for every pair; (..., N, N) symmetric boolean, zero diagonal.

    Touching rectangles count as colliding.
    """
    corners = box_corners(poses, footprints)  # (..., N, 4, 2)
    theta = np.asarray(poses)[..., 2]
    axes = np.stack([np.stack([np.cos(theta), np.sin(theta)], -1),
                     np.stack([-np.sin(theta), np.cos(theta)], -1)], axis=-2)  # (..., N, 2, 2)
    n = corners.shape[-3]
    # candidate axes for pair (i, j): both boxes' two edge normals
    ax = np.concatenate([np.broadcast_to(axes[..., :, None, :, :], axes.shape[:-3] + (n, n, 2, 2)),
                         np.broadcast_to(axes[..., None, :, :, :], axes.shape[:-3] + (n, n, 2, 2))], axis=-2)
    pi = np.einsum("...ikd,...ijad->...ijak", corners, ax)  # projections of box i: (..., N, N, 4axes, 4)
    pj = np.einsum("...jkd,...ijad->...ijak", corners, ax)
    sep = (pi.max(-1) < pj.min(-1)) | (pj.max(-1) < pi.min(-1))
    hit = ~np.any(sep, axis=-1)
    hit &= ~np.eye(n, dtype=bool)
    return hit


def detect_collisions(state: WorldState, footprints) -> set:
    hit = collision_matrix(state.poses, footprints)
    i, j = np.nonzero(np.triu(hit, 1))
    return {(int(a), int(b)) for a, b in zip(i, j)}


def offroad_mask(poses, map_graph):
    d = map_graph.center_distance(np.asarray(poses)[..., :2])
    return d > map_graph.lane_half_width + OFFROAD_SLACK


def offroad(pose, map_graph) -> bool:
    return bool(offroad_mask(np.asarray(pose, dtype=float)[None], map_graph)[0])


@dataclass
class RolloutContext:
    """What a policy sees for one scenario at step ``t``."""

    scenario: Scenario
    vocab: TokenVocab
    tokens: np.ndarray  # (t, N) executed tokens so far
    poses: np.ndarray  # (t + 1, N, 3)
    speeds: np.ndarray  # (N,) current speeds

    @property
    def t(self):
        return len(self.tokens)


@dataclass
class Rollout:
    scenario: Scenario
    seed: int
    tokens: np.ndarray  # (T, N)
    logp: np.ndarray  # (T, N)
    values: np.ndarray  # (T, N)
    poses: np.ndarray  # (T + 1, N, 3), poses[0] is the initial state
    rewards: list = field(default_factory=list)

    @property
    def horizon(self):
        return len(self.tokens)

    def to_jsonl(self):
        lines = [json.dumps({"scenario": self.scenario.digest(), "seed": self.seed}, separators=(",", ":"))]
        for t in range(self.horizon):
            lines.append(json.dumps({
                "t": t,
                "tokens": self.tokens[t].tolist(),
                "logp": self.logp[t].tolist(),
                "values": self.values[t].tolist(),
                "poses": self.poses[t + 1].tolist(),
            }, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text, scenario):
        lines = text.strip().split("\n")
        head = json.loads(lines[0])
        if head["scenario"] != scenario.digest():
            raise ValueError("rollout log belongs to a different scenario")
        recs = [json.loads(ln) for ln in lines[1:]]
        poses = np.array([scenario.initial_poses()] + [r["poses"] for r in recs])
        return cls(scenario, int(head["seed"]), np.array([r["tokens"] for r in recs], dtype=int),
                   np.array([r["logp"] for r in recs]), np.array([r["values"] for r in recs]), poses)


def rollout_batch(policy, scenarios, seeds, vocab: TokenVocab) -> list:
    """Roll several scenarios forward in lockstep; each scenario owns its RNG."""
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    states = [WorldState.initial(sc) for sc in scenarios]
    T = max(sc.horizon for sc in scenarios)
    tok = [np.zeros((0, sc.n_agents), dtype=int) for sc in scenarios]
    pos = [st.poses[None].copy() for st in states]
    logp = [[] for _ in scenarios]
    vals = [[] for _ in scenarios]
    for t in range(T):
        active = [k for k, sc in enumerate(scenarios) if t < sc.horizon]
        ctxs = [RolloutContext(scenarios[k], vocab, tok[k], pos[k], states[k].speeds) for k in active]
        try:
            outs = policy.act(ctxs, [rngs[k] for k in active])
        except StepFault:
            raise
        except Exception as exc:
            raise StepFault(f"policy failed at step {t}: {exc}") from exc
        for k, (a, lp, v) in zip(active, outs):
            a = np.asarray(a, dtype=int)
            lp = np.asarray(lp, dtype=float)
            if not np.all(np.isfinite(lp)):
                bad = int(np.flatnonzero(~np.isfinite(lp))[0])
                raise StepFault(f"step {t}: agent {bad} has non-finite log-prob")
            states[k] = step(states[k], a, vocab)
            tok[k] = np.vstack([tok[k], a[None]])
            pos[k] = np.concatenate([pos[k], states[k].poses[None]])
            logp[k].append(lp)
            vals[k].append(np.asarray(v, dtype=float))
    return [Rollout(sc, int(s), tok[k], np.array(logp[k]), np.array(vals[k]), pos[k])
            for k, (sc, s) in enumerate(zip(scenarios, seeds))]


def rollout(policy, scenario: Scenario, seed: int, vocab: TokenVocab) -> Rollout:
    return rollout_batch(policy, [scenario], [seed], vocab)[0]


class UniformPolicy:
    """Samples every token with probability 1/K."""

    def act(self, ctxs, rngs):
        out = []
        for ctx, rng in zip(ctxs, rngs):
            n, K = ctx.scenario.n_agents, ctx.vocab.K
            a = rng.integers(0, K, size=n)
            out.append((a, np.full(n, -np.log(K)), np.zeros(n)))
        return out


class ConstantPolicy:
    """Always emits the same token (0 = stationary)."""

    def __init__(self, token=0):
        self.token = token

    def act(self, ctxs, rngs):
        return [(np.full(c.scenario.n_agents, self.token), np.zeros(c.scenario.n_agents),
                 np.zeros(c.scenario.n_agents)) for c in ctxs]
