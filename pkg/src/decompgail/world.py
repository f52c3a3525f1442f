"""Synthetic road worlds, scenario generation and the motion-token vocabulary."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

TEMPLATES = ("straight", "curve", "crossing")
SAMPLE_SPACING = 2.0
CURVE_RADIUS = 30.0
MIN_GAP = 8.0
ANGLE_WEIGHT = 4.0  # m^2 / rad^2 in the token metric
HORIZON = 16
DT = 0.5
SCHEMA_VERSION = 1


class PlacementError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def wrap_angle(theta):
    """Map angles to (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    out = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    # in-range angles pass through untouched (the round trip above is not exact)
    out = np.where((theta > -np.pi) & (theta <= np.pi), theta, out)
    return float(out) if np.ndim(out) == 0 else out


class Polyline:
    """Arc-length parameterised polyline with projection helpers."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / self.seg_len[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])

    def project(self, xy):
        """Return (arc length, signed lateral offset, segment index) of the closest point."""
        p = np.asarray(xy, dtype=float)
        rel = p - self.points[:-1]
        u = np.clip(np.einsum("ij,ij->i", rel, self.seg_dir), 0.0, self.seg_len)
        foot = self.points[:-1] + u[:, None] * self.seg_dir
        d2 = np.sum((p - foot) ** 2, axis=1)
        k = int(np.argmin(d2))
        lat = float(self.seg_dir[k, 0] * rel[k, 1] - self.seg_dir[k, 1] * rel[k, 0])
        return float(self.cum[k] + u[k]), lat, k

    def point_at(self, s):
        s = float(np.clip(s, 0.0, self.length))
        k = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1))
        return self.points[k] + (s - self.cum[k]) * self.seg_dir[k]

    def heading_at(self, s):
        s = float(np.clip(s, 0.0, self.length))
        k = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1))
        return float(np.arctan2(self.seg_dir[k, 1], self.seg_dir[k, 0]))


# centerline samples per map token (2 m spacing -> 6 m tokens)
MAP_TOKEN_STRIDE = 3


@dataclass
class MapGraph:
    centerlines: list
    road_edges: list
    lane_half_width: float = 2.0
    token_mid: np.ndarray = field(default=None, repr=False)
    token_dir: np.ndarray = field(default=None, repr=False)
    token_len: np.ndarray = field(default=None, repr=False)
    token_lane: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.centerlines = [np.asarray(c, dtype=float) for c in self.centerlines]
        self.road_edges = [np.asarray(e, dtype=float) for e in self.road_edges]
        if self.token_mid is None:
            self._build_tokens()
        self._center_points = np.concatenate(self.centerlines, axis=0)
        self._polylines = [Polyline(c) for c in self.centerlines]

    def _build_tokens(self):
        # road edges sit at a fixed offset from their centerline, so only
        # centerline segments become tokens (lane_flag = 1)
        mids, dirs, lens, flags = [], [], [], []
        for flag, lines in ((1, self.centerlines),):
            for line in lines:
                idx = np.unique(np.r_[np.arange(0, len(line), MAP_TOKEN_STRIDE), len(line) - 1])
                line = line[idx]
                seg = np.diff(line, axis=0)
                ln = np.hypot(seg[:, 0], seg[:, 1])
                keep = ln > 1e-9
                mids.append(0.5 * (line[:-1] + line[1:])[keep])
                dirs.append(seg[keep] / ln[keep, None])
                lens.append(ln[keep])
                flags.append(np.full(int(keep.sum()), flag))
        self.token_mid = np.concatenate(mids)
        self.token_dir = np.concatenate(dirs)
        self.token_len = np.concatenate(lens)
        self.token_lane = np.concatenate(flags).astype(float)

    @property
    def n_tokens(self):
        return len(self.token_len)

    @property
    def token_poses(self):
        """Map tokens as (x, y, heading) poses."""
        theta = np.arctan2(self.token_dir[:, 1], self.token_dir[:, 0])
        return np.column_stack([self.token_mid, theta])

    def polyline(self, k):
        return self._polylines[k]

    def center_distance(self, xy):
        """Distance from each point in ``xy`` (..., 2) to the nearest centerline sample."""
        xy = np.asarray(xy, dtype=float)
        flat = xy.reshape(-1, 2)
        d2 = np.min(np.sum((flat[:, None, :] - self._center_points[None]) ** 2, axis=-1), axis=1)
        return np.sqrt(d2).reshape(xy.shape[:-1])

    def to_dict(self):
        return {
            "centerlines": [c.tolist() for c in self.centerlines],
            "road_edges": [e.tolist() for e in self.road_edges],
            "lane_half_width": self.lane_half_width,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["centerlines"], d["road_edges"], float(d["lane_half_width"]))


@dataclass
class AgentSpec:
    id: int
    pose: tuple
    speed: float
    length: float
    width: float
    route: int


@dataclass
class Scenario:
    map: MapGraph
    agents: list
    horizon: int = HORIZON
    dt: float = DT
    template: str = ""

    def __post_init__(self):
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for a in self.agents:
            if not 0 <= a.route < len(self.map.centerlines):
                raise ValueError(f"agent {a.id} routes to missing centerline {a.route}")

    @property
    def n_agents(self):
        return len(self.agents)

    def initial_poses(self):
        return np.array([a.pose for a in self.agents], dtype=float)

    def initial_speeds(self):
        return np.array([a.speed for a in self.agents], dtype=float)

    def footprints(self):
        return np.array([(a.length, a.width) for a in self.agents], dtype=float)

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "template": self.template,
            "map": self.map.to_dict(),
            "agents": [
                {
                    "id": a.id,
                    "pose": list(a.pose),
                    "speed": a.speed,
                    "length": a.length,
                    "width": a.width,
                    "route": a.route,
                }
                for a in self.agents
            ],
            "horizon": self.horizon,
            "dt": self.dt,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema {d.get('schema')!r}")
        agents = [
            AgentSpec(int(a["id"]), tuple(float(v) for v in a["pose"]), float(a["speed"]),
                      float(a["length"]), float(a["width"]), int(a["route"]))
            for a in d["agents"]
        ]
        return cls(MapGraph.from_dict(d["map"]), agents, int(d["horizon"]), float(d["dt"]),
                   d.get("template", ""))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _sample(points_fn, length):
    n = int(round(length / SAMPLE_SPACING))
    return np.array([points_fn(s) for s in np.linspace(0.0, length, n + 1)])


def _offset(line, dist):
    """Offset a polyline to its left by ``dist`` (negative = right)."""
    tang = np.gradient(line, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.column_stack([-tang[:, 1], tang[:, 0]])
    return line + dist * normal


def _template_centerlines(template):
    if template == "straight":
        return [_sample(lambda s: (s, 0.0), 240.0)]
    if template == "curve":
        lead, arc = 40.0, np.pi * CURVE_RADIUS
        centre = np.array([lead, CURVE_RADIUS])

        def pt(s):
            if s <= lead:
                return (s, 0.0)
            if s <= lead + arc:
                phi = (s - lead) / CURVE_RADIUS - np.pi / 2
                return tuple(centre + CURVE_RADIUS * np.array([np.cos(phi), np.sin(phi)]))
            return (lead - (s - lead - arc), 2 * CURVE_RADIUS)

        return [_sample(pt, lead + arc + 100.0)]
    if template == "crossing":
        return [_sample(lambda s: (s - 120.0, 0.0), 240.0), _sample(lambda s: (0.0, s - 120.0), 240.0)]
    raise ConfigError(f"unknown template {template!r}")


def _template_edges(centerlines, half_width):
    edges = []
    for k, line in enumerate(centerlines):
        for side in (1.0, -1.0):
            edge = _offset(line, side * half_width)
            others = [c for m, c in enumerate(centerlines) if m != k]
            if others:
                pts = np.concatenate(others)
                d = np.min(np.linalg.norm(edge[:, None] - pts[None], axis=-1), axis=1)
                inside = d < half_width + 1e-9
                # split the edge where it crosses another road
                runs, cur = [], []
                for p, bad in zip(edge, inside):
                    if bad:
                        if len(cur) >= 2:
                            runs.append(np.array(cur))
                        cur = []
                    else:
                        cur.append(p)
                if len(cur) >= 2:
                    runs.append(np.array(cur))
                edges.extend(runs)
            else:
                edges.append(edge)
    return edges


# travel headroom kept ahead of the lead agent so routes do not run out within a horizon
ROUTE_HEADROOM = 110.0
AGENT_LENGTH = 4.5
AGENT_WIDTH = 2.0


def gen_scenario(template: str, n_agents: int, seed: int, lane_half_width: float = 2.0) -> Scenario:
    """Deterministically build a scenario from a map template.

    Agents are placed along their routes with longitudinal gaps drawn from
    [12, 20] m (never below ``MIN_GAP``) and initial speeds from [6, 10] m/s.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    centerlines = _template_centerlines(template)
    rng = np.random.default_rng([seed, TEMPLATES.index(template), n_agents])
    routes = [k % len(centerlines) for k in range(n_agents)] if template == "crossing" else [0] * n_agents
    lines = [Polyline(c) for c in centerlines]

    arcs = {}
    for r in sorted(set(routes)):
        members = [k for k in range(n_agents) if routes[k] == r]
        if template == "crossing":
            # lead agent 30-50 m before the intersection, followers behind it
            s = lines[r].length / 2 - rng.uniform(30.0, 50.0)
            for k in members:
                arcs[k] = s
                s -= rng.uniform(12.0, 20.0)
            if s < -1e-9 or min(arcs[k] for k in members) < 0:
                raise PlacementError(f"template {template!r} cannot fit {n_agents} agents")
        else:
            s = 0.0
            for k in members:
                arcs[k] = s
                s += rng.uniform(12.0, 20.0)
            if max(arcs.values()) > lines[r].length - ROUTE_HEADROOM:
                raise PlacementError(f"template {template!r} cannot fit {n_agents} agents")

    agents = []
    for k in range(n_agents):
        line = lines[routes[k]]
        xy = line.point_at(arcs[k])
        theta = line.heading_at(arcs[k])
        agents.append(AgentSpec(k, (float(xy[0]), float(xy[1]), float(theta)),
                                float(rng.uniform(6.0, 10.0)), AGENT_LENGTH, AGENT_WIDTH, routes[k]))
    mp = MapGraph(centerlines, _template_edges(centerlines, lane_half_width), lane_half_width)
    return Scenario(mp, agents, HORIZON, DT, template)


def scenario_suite(n: int, seed: int, n_agents=(3, 5)) -> list:
    """A mixed bag of ``n`` scenarios cycling through the templates."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        template = TEMPLATES[k % len(TEMPLATES)]
        na = int(rng.integers(n_agents[0], n_agents[1] + 1))
        out.append(gen_scenario(template, na, int(rng.integers(2**31))))
    return out


def split_heldout(scenarios, frac=0.2):
    """Deterministic train / held-out split keyed by scenario hash."""
    train, held = [], []
    for sc in scenarios:
        bucket = int(sc.digest(), 16) % 1000
        (held if bucket < frac * 1000 else train).append(sc)
    return train, held


@dataclass
class TokenVocab:
    deltas: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=float)
        if self.K < 2:
            raise ConfigError("vocabulary needs K >= 2")
        if np.any(self.deltas[0] != 0.0):
            raise ValueError("token 0 must be the exact zero delta")

    @property
    def K(self):
        return len(self.deltas)

    @property
    def max_forward(self):
        return float(self.deltas[:, 0].max())

    def to_json(self):
        return json.dumps({"k": self.K, "seed": self.seed, "deltas": self.deltas.tolist()},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        vocab = cls(np.array(d["deltas"], dtype=float), int(d["seed"]))
        if vocab.K != d["k"]:
            raise ValueError("vocab file k does not match its deltas")
        return vocab


def _scaled(deltas):
    d = np.asarray(deltas, dtype=float)
    return d * np.array([1.0, 1.0, np.sqrt(ANGLE_WEIGHT)])


def kmeans(points, k, seed, iters=50, history=None):
    """Lloyd's algorithm with seeded k-means++ initialisation.

    ``history``, when given a list, receives the objective after every iteration.
    """
    x = np.asarray(points, dtype=float)
    rng = np.random.default_rng(seed)
    centres = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    c = np.array(centres)
    for _ in range(iters):
        dist = np.sum((x[:, None, :] - c[None]) ** 2, axis=-1)
        assign = np.argmin(dist, axis=1)
        if history is not None:
            history.append(float(dist[np.arange(len(x)), assign].sum()))
        for j in range(k):
            members = x[assign == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return c


def build_vocab(expert_deltas, K: int = 64, seed: int = 0) -> TokenVocab:
    """Cluster body-frame deltas into ``K`` motion tokens (slot 0 = stationary)."""
    if K < 2:
        raise ConfigError("vocabulary needs K >= 2")
    deltas = np.asarray(expert_deltas, dtype=float)
    if len(deltas) < K:
        raise ConfigError(f"need at least K={K} deltas, got {len(deltas)}")
    c = kmeans(_scaled(deltas), K, seed) / np.array([1.0, 1.0, np.sqrt(ANGLE_WEIGHT)])
    zero = int(np.argmin(np.sum(_scaled(c) ** 2, axis=1)))
    rest = np.delete(c, zero, axis=0)
    rest = rest[np.lexsort((rest[:, 2], rest[:, 1], rest[:, 0]))]
    return TokenVocab(np.vstack([np.zeros(3), rest]), seed)


def tokenize(delta, vocab: TokenVocab):
    """Nearest vocabulary entry under the weighted metric; ties go to the lowest id.

    Accepts a single delta (3,) or a stack (..., 3).
    """
    d = np.asarray(delta, dtype=float)
    diff = d[..., None, :] - vocab.deltas
    dist = diff[..., 0] ** 2 + diff[..., 1] ** 2 + ANGLE_WEIGHT * diff[..., 2] ** 2
    idx = np.argmin(dist, axis=-1)
    return int(idx) if idx.ndim == 0 else idx
