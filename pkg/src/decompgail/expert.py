"""Rule-based expert (IDM + pure pursuit), demonstration sets and scripted misbehaviour."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .env import apply_deltas, rollout_batch
from .world import Scenario, TokenVocab, build_vocab, tokenize, wrap_angle

MAX_STEER = 0.3
LOOKAHEAD = 6.0
# half extent of the conflict zone around a crossing point (body half-length + half-width + margin)
CONFLICT_ZONE = 6.5


@dataclass(frozen=True)
class IdmParams:
    v0: float = 12.0
    T: float = 1.5
    a_max: float = 2.0
    b_comf: float = 2.0
    s0: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        if min(self.v0, self.T, self.a_max, self.b_comf, self.delta) <= 0 or self.s0 < 0:
            raise ValueError("IDM parameters must be positive")


def idm_accel(gap: float, v: float, v_lead: float, p: IdmParams) -> float:
    """Intelligent-driver acceleration, clamped to [-2 b_comf, a_max]."""
    lo = -2.0 * p.b_comf
    if gap <= 0:
        return lo
    free = (v / p.v0) ** p.delta
    if np.isinf(gap):
        inter = 0.0
    else:
        s_star = p.s0 + v * p.T + v * (v - v_lead) / (2.0 * np.sqrt(p.a_max * p.b_comf))
        inter = (max(s_star, 0.0) / gap) ** 2
    return float(np.clip(p.a_max * (1.0 - free - inter), lo, p.a_max))


def pure_pursuit(pose, route, lookahead: float, v: float, dt: float):
    """Body-frame (dx, dy, dtheta) that tracks ``route`` (a world.Polyline).

    Heading change follows the pure-pursuit curvature 2 sin(alpha) / lookahead
    over the travelled distance, clamped to +-MAX_STEER per step.
    """
    if lookahead <= 0:
        raise ValueError("lookahead must be positive")
    x, y, th = pose
    ds = v * dt
    s, _, _ = route.project((x, y))
    if s + lookahead > route.length:
        dth = 0.0
    else:
        tx, ty = route.point_at(s + lookahead)
        alpha = wrap_angle(np.arctan2(ty - y, tx - x) - th)
        dist = max(np.hypot(tx - x, ty - y), 1e-9)
        dth = float(np.clip(2.0 * np.sin(alpha) / dist * ds, -MAX_STEER, MAX_STEER))
    return (ds * np.cos(dth / 2.0), ds * np.sin(dth / 2.0), dth)


def _longitudinal(speed, a, dt):
    """Distance and speed of one step: the step is driven at the updated speed.

    The environment reads speed back as displacement / dt, so this keeps the
    observed speed equal to the IDM speed instead of lagging half a step.
    """
    v_end = max(speed + a * dt, 0.0)
    return v_end * dt, v_end


class ExpertPolicy:
    """IDM along each agent's route with a first-come yield rule at crossings.

    With ``vocab=None`` the raw continuous deltas are returned (used to build a
    vocabulary); otherwise the deltas are tokenized and executed as tokens.
    """

    def __init__(self, idm: IdmParams = IdmParams(), vocab: TokenVocab | None = None, lookahead=LOOKAHEAD):
        self.idm = idm
        self.vocab = vocab
        self.lookahead = lookahead

    def raw_deltas(self, scenario: Scenario, poses, speeds, dt):
        n = scenario.n_agents
        routes = [a.route for a in scenario.agents]
        lines = [scenario.map.polyline(r) for r in routes]
        arcs = np.array([lines[i].project(poses[i, :2])[0] for i in range(n)])
        lengths = np.array([a.length for a in scenario.agents])
        conflict = _conflict_arcs(scenario)

        accel = np.empty(n)
        for i in range(n):
            gap, v_lead = np.inf, 0.0
            for j in range(n):
                if j != i and routes[j] == routes[i] and arcs[j] > arcs[i]:
                    g = arcs[j] - arcs[i] - 0.5 * (lengths[i] + lengths[j])
                    if g < gap:
                        gap, v_lead = g, speeds[j]
            a = idm_accel(gap, speeds[i], v_lead, self.idm)
            stop = _yield_gap(i, routes, arcs, speeds, conflict, self.idm)
            if stop is not None:
                a = min(a, idm_accel(stop, speeds[i], 0.0, self.idm))
            accel[i] = a
        out = np.empty((n, 3))
        for i in range(n):
            ds, _ = _longitudinal(speeds[i], accel[i], dt)
            out[i] = pure_pursuit(poses[i], lines[i], self.lookahead, ds / dt, dt)
        return out

    def act(self, ctxs, rngs):
        out = []
        for ctx in ctxs:
            d = self.raw_deltas(ctx.scenario, ctx.poses[-1], ctx.speeds, ctx.scenario.dt)
            n = ctx.scenario.n_agents
            tokens = tokenize(d, self.vocab if self.vocab is not None else ctx.vocab)
            out.append((np.asarray(tokens), np.zeros(n), np.zeros(n)))
        return out


def _conflict_arcs(scenario: Scenario):
    """Arc length on each centerline where it meets another centerline (or None)."""
    res = {}
    cl = scenario.map.centerlines
    for r in range(len(cl)):
        for q in range(len(cl)):
            if q == r:
                continue
            d = np.linalg.norm(cl[r][:, None] - cl[q][None], axis=-1)
            if d.min() < 1.0:
                k = np.unravel_index(np.argmin(d), d.shape)[0]
                res[r] = scenario.map.polyline(r).cum[k]
    return res


def _yield_gap(i, routes, arcs, speeds, conflict, idm):
    """Distance to the conflict-zone entry if agent ``i`` must give way, else None."""
    if routes[i] not in conflict:
        return None
    to_zone = conflict[routes[i]] - arcs[i] - CONFLICT_ZONE
    if conflict[routes[i]] - arcs[i] < -CONFLICT_ZONE:
        return None

    def key(k):
        zone = conflict[routes[k]] - arcs[k] - CONFLICT_ZONE
        committed = zone <= speeds[k] ** 2 / (4.0 * idm.b_comf) + 0.5
        eta = max(zone, 0.0) / max(speeds[k], 1.0)
        return (0 if committed else 1, eta, k)

    mine = key(i)
    for j in range(len(routes)):
        if j == i or routes[j] == routes[i] or routes[j] not in conflict:
            continue
        if conflict[routes[j]] - arcs[j] < -CONFLICT_ZONE:
            continue  # already cleared
        if key(j) < mine:
            return max(to_zone, 1e-3)
    return None


def collect_raw_deltas(scenarios, idm: IdmParams = IdmParams(), noise=(0.3, 0.05), seed=0, mirror=True):
    """Run the expert with continuous deltas and return every body-frame delta (M, 3).

    ``noise`` = (lateral m, heading rad) standard deviations of perturbations
    injected into the state each step, so the set also covers the corrective
    motions needed off the nominal path. ``mirror`` adds the left/right
    reflection of every delta.
    """
    expert = ExpertPolicy(idm)
    rng = np.random.default_rng(seed)
    out = []
    for sc in scenarios:
        poses, speeds = sc.initial_poses(), sc.initial_speeds()
        for _ in range(sc.horizon):
            d = expert.raw_deltas(sc, poses, speeds, sc.dt)
            out.append(d)
            poses = apply_deltas(poses, d)
            speeds = np.hypot(d[:, 0], d[:, 1]) / sc.dt
            if noise is not None:
                n = len(poses)
                lat = rng.normal(0.0, noise[0], n)
                poses = apply_deltas(poses, np.column_stack([np.zeros(n), lat, rng.normal(0.0, noise[1], n)]))
    raw = np.concatenate(out)
    if mirror:
        raw = np.concatenate([raw, raw * np.array([1.0, -1.0, -1.0])])
    return raw


@dataclass
class DemoSet:
    scenarios: list
    tokens: list  # per scenario (T, N) int arrays
    vocab: TokenVocab

    def __post_init__(self):
        for sc, tok in zip(self.scenarios, self.tokens):
            if tok.shape != (sc.horizon, sc.n_agents):
                raise ValueError("demo length must equal scenario horizon")
            if tok.max(initial=0) >= self.vocab.K or tok.min(initial=0) < 0:
                raise ValueError("demo token outside the vocabulary")

    def __len__(self):
        return len(self.scenarios)

    def poses(self, k):
        """Pose history (T + 1, N, 3) obtained by replaying demo ``k``."""
        sc = self.scenarios[k]
        p = [sc.initial_poses()]
        for t in range(sc.horizon):
            p.append(apply_deltas(p[-1], self.vocab.deltas[self.tokens[k][t]]))
        return np.array(p)

    def to_jsonl(self):
        head = json.dumps({"vocab": {"k": self.vocab.K, "seed": self.vocab.seed}}, separators=(",", ":"))
        lines = [head] + [json.dumps({"scenario": sc.digest(), "tokens": tok.tolist()}, separators=(",", ":"))
                          for sc, tok in zip(self.scenarios, self.tokens)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text, scenarios, vocab):
        lines = text.strip().split("\n")
        head = json.loads(lines[0])
        if head["vocab"]["k"] != vocab.K:
            raise ValueError("demo file was tokenized with a different vocabulary")
        by_hash = {sc.digest(): sc for sc in scenarios}
        recs = [json.loads(ln) for ln in lines[1:]]
        return cls([by_hash[r["scenario"]] for r in recs], [np.array(r["tokens"], dtype=int) for r in recs], vocab)


def gen_demos(scenarios, idm: IdmParams = IdmParams(), vocab: TokenVocab | None = None, K=64, seed=0) -> DemoSet:
    """Closed-loop expert demonstrations executed in token space."""
    if vocab is None:
        vocab = build_vocab(collect_raw_deltas(scenarios, idm), K, seed)
    rolls = rollout_batch(ExpertPolicy(idm, vocab), scenarios, [0] * len(scenarios), vocab)
    return DemoSet(list(scenarios), [r.tokens for r in rolls], vocab)


class ColliderPolicy:
    """Drives one agent greedily at the target agent's current position, ignoring the map.

    Each step the controlled agent takes the token whose end point lands closest
    to the target; far from the target that is the fastest token pointing at it.
    Other agents are driven by ``others`` (default: the expert).
    """

    def __init__(self, agent: int, target: int, others=None):
        self.agent = agent
        self.target = target
        self.others = others if others is not None else ExpertPolicy()

    def act(self, ctxs, rngs):
        outs = self.others.act(ctxs, rngs)
        res = []
        for ctx, (a, lp, v) in zip(ctxs, outs):
            a = np.array(a, copy=True)
            a[self.agent] = self.choose(ctx.poses[-1], ctx.vocab)
            res.append((a, lp, v))
        return res

    def choose(self, poses, vocab):
        if self.agent == self.target:
            return 0
        ends = apply_deltas(np.broadcast_to(poses[self.agent], (vocab.K, 3)), vocab.deltas)
        d = np.hypot(ends[:, 0] - poses[self.target, 0], ends[:, 1] - poses[self.target, 1])
        return int(np.argmin(d))


def scripted_collider(agent: int, target: int, others=None) -> ColliderPolicy:
    return ColliderPolicy(agent, target, others)
