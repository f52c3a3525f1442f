"""Policy, value and discriminator networks on top of the autograd engine.

All networks read a ``Geometry``: a flat list of queries, one per
(scene, element, agent), with precomputed key indices and relative pose
features for temporal, map-agent and agent-agent attention. Element ``e`` of a
track pairs the token that was just executed with the pose it produced;
element 0 holds the stationary bootstrap token and the initial pose. The
policy predicts a_t from element t; discriminators score step t at element
t + 1.

Key-pad widths are fixed by the config rather than by the data, so a query's
arithmetic never depends on how many keys *other* queries have.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .env import NEIGHBOR_RADIUS
from .world import wrap_angle


@dataclass(frozen=True)
class NetConfig:
    K: int = 64
    hidden: int = 64
    layers: int = 2
    history: int = 8
    mlp_width: int = 128
    map_enc_radius: float = 20.0
    map_attn_radius: float = 30.0
    neighbor_radius: float = NEIGHBOR_RADIUS
    max_map_keys: int = 24
    max_neighbors: int = 7
    rpe_scale: float = 20.0

    def __post_init__(self):
        counts = ("K", "hidden", "layers", "history", "mlp_width", "max_map_keys", "max_neighbors")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"NetConfig.{name} must be a positive integer")
        for name in ("map_enc_radius", "map_attn_radius", "neighbor_radius", "rpe_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"NetConfig.{name} must be positive")


# ---------------------------------------------------------------------------
# scene histories and geometry


@dataclass
class History:
    """Executed tokens (T, N) and the pose trajectory (T + 1, N, 3) of one scenario."""

    scenario: object
    tokens: np.ndarray
    poses: np.ndarray

    @classmethod
    def from_rollout(cls, r):
        return cls(r.scenario, np.asarray(r.tokens), np.asarray(r.poses))

    @classmethod
    def from_demo(cls, demos, k):
        return cls(demos.scenarios[k], demos.tokens[k], demos.poses(k))

    @property
    def horizon(self):
        return len(self.tokens)

    def element_tokens(self):
        n = self.tokens.shape[1]
        return np.vstack([np.zeros((1, n), dtype=int), self.tokens])

    def prefix(self, t):
        """History truncated to the first ``t`` steps."""
        return History(self.scenario, self.tokens[:t], self.poses[: t + 1])


def relative_features(q_pose, k_pose, dt, cfg: NetConfig):
    """SE(2)-invariant descriptor of ``k_pose`` seen from ``q_pose``.

    Returns (..., 6): dx, dy (query frame, scaled), cos/sin of the heading
    difference, scaled distance and time offset.
    """
    q = np.asarray(q_pose, dtype=float)
    k = np.asarray(k_pose, dtype=float)
    c, s = np.cos(q[..., 2]), np.sin(q[..., 2])
    ex, ey = k[..., 0] - q[..., 0], k[..., 1] - q[..., 1]
    dx = c * ex + s * ey
    dy = -s * ex + c * ey
    dth = wrap_angle(k[..., 2] - q[..., 2])
    d = np.hypot(dx, dy)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), dx.shape)
    sc = cfg.rpe_scale
    return np.stack([dx / sc, dy / sc, np.cos(dth), np.sin(dth), d / sc, dt / cfg.history], axis=-1)


@dataclass
class Geometry:
    n: int
    tokens: np.ndarray  # (n,)
    poses: np.ndarray  # (n, 3)
    scene: np.ndarray  # (n,)
    element: np.ndarray  # (n,)
    agent: np.ndarray  # (n,)
    offsets: list  # per scene: (query offset, n_elements, n_agents)
    t_idx: np.ndarray
    t_mask: np.ndarray
    t_rel: np.ndarray
    m_idx: np.ndarray
    m_mask: np.ndarray
    m_rel: np.ndarray
    a_idx: np.ndarray
    a_mask: np.ndarray
    a_rel: np.ndarray
    a_dist: np.ndarray
    maps: list  # unique MapGraph objects
    map_offsets: list  # start of each unique map's tokens in the stacked map features
    scene_map: list  # scene -> unique map index
    extra: dict = field(default_factory=dict)

    def q(self, scene, element, agent):
        off, _, n = self.offsets[scene]
        return off + element * n + agent

    def rows(self, scene, element):
        off, _, n = self.offsets[scene]
        return np.arange(off + element * n, off + (element + 1) * n)


def build_geometry(histories, cfg: NetConfig, max_neighbors=None, last_only=False) -> Geometry:
    """Flatten element-major queries for a list of ``History`` objects.

    ``max_neighbors`` caps each ego's agent-attention keys to its M nearest
    (None = every agent within the neighbourhood radius). With ``last_only``
    only the newest element of each scene is a query; its temporal keys then
    index a source laid out as the scenes' earlier elements, concatenated.
    """
    cap = cfg.max_neighbors if max_neighbors is None else min(int(max_neighbors), cfg.max_neighbors)
    H, Pm, Pa = cfg.history, cfg.max_map_keys, cfg.max_neighbors
    uniq, map_of = [], []
    for h in histories:
        for u, m in enumerate(uniq):
            if map_key(m) == map_key(h.scenario.map):
                map_of.append(u)
                break
        else:
            uniq.append(h.scenario.map)
            map_of.append(len(uniq) - 1)
    moff = np.concatenate([[0], np.cumsum([m.n_tokens for m in uniq])]).astype(int)

    parts = {k: [] for k in ("tok", "pose", "scene", "elem", "agent", "t_idx", "t_mask", "t_rel",
                             "m_idx", "m_mask", "m_rel", "a_idx", "a_mask", "a_rel", "a_dist")}
    offsets = []
    off = toff = 0
    for s, h in enumerate(histories):
        all_tok = h.element_tokens()
        all_pose = np.asarray(h.poses, dtype=float)
        E, N = all_tok.shape
        if N - 1 > Pa:
            raise ValueError(f"scene has {N} agents; config allows {Pa + 1}")
        e0 = E - 1 if last_only else 0
        nq = (E - e0) * N
        offsets.append((off, E - e0, N))
        qpose = all_pose[e0:].reshape(-1, 3)
        ee, ii = np.divmod(np.arange(nq), N)
        ee = ee + e0
        parts["tok"].append(all_tok[e0:].reshape(-1))
        parts["pose"].append(qpose)
        parts["scene"].append(np.full(nq, s))
        parts["elem"].append(ee)
        parts["agent"].append(ii)

        # temporal keys: same agent, previous H elements
        tau = np.arange(1, H + 1)
        prev = ee[:, None] - tau[None]
        valid = prev >= 0
        prev = np.where(valid, prev, 0)
        base = toff if last_only else off
        parts["t_idx"].append(np.where(valid, base + prev * N + ii[:, None], 0))
        parts["t_mask"].append(valid)
        parts["t_rel"].append(relative_features(qpose[:, None, :], all_pose[prev, ii[:, None]], tau[None], cfg))

        # map keys within radius, nearest first
        mpose = uniq[map_of[s]].token_poses
        d = np.hypot(qpose[:, None, 0] - mpose[None, :, 0], qpose[:, None, 1] - mpose[None, :, 1])
        key = np.where(d <= cfg.map_attn_radius, d, np.inf)
        if key.shape[1] < Pm:
            key = np.concatenate([key, np.full((nq, Pm - key.shape[1]), np.inf)], axis=1)
        order = np.argsort(key, axis=1, kind="stable")[:, :Pm]
        valid = np.isfinite(np.take_along_axis(key, order, axis=1))
        order = np.where(valid, order, 0)
        parts["m_idx"].append(moff[map_of[s]] + order)
        parts["m_mask"].append(valid)
        parts["m_rel"].append(relative_features(qpose[:, None, :], mpose[order], 0.0, cfg))

        # agent keys: same element, within radius, nearest first, capped
        P = all_pose[e0:]
        dd = np.hypot(P[:, :, None, 0] - P[:, None, :, 0], P[:, :, None, 1] - P[:, None, :, 1])
        member = (dd <= cfg.neighbor_radius) & ~np.eye(N, dtype=bool)[None]
        key = np.where(member, dd, np.inf).reshape(nq, N)
        if N < Pa:
            key = np.concatenate([key, np.full((nq, Pa - N), np.inf)], axis=1)
        order = np.argsort(key, axis=1, kind="stable")[:, :Pa]
        dist = np.take_along_axis(key, order, axis=1)
        valid = np.isfinite(dist) & (np.arange(Pa)[None] < cap)
        order = np.where(valid, order, 0)
        local = (ee[:, None] - e0) * N + order
        parts["a_idx"].append(off + local)
        parts["a_mask"].append(valid)
        parts["a_rel"].append(relative_features(qpose[:, None, :], qpose[local], 0.0, cfg))
        parts["a_dist"].append(np.where(valid, dist, 0.0))
        off += nq
        toff += (E - 1) * N

    c = {k: np.concatenate(v) for k, v in parts.items()}
    return Geometry(off, c["tok"].astype(int), c["pose"], c["scene"], c["elem"], c["agent"], offsets,
                    c["t_idx"], c["t_mask"], c["t_rel"], c["m_idx"], c["m_mask"], c["m_rel"],
                    c["a_idx"], c["a_mask"], c["a_rel"], c["a_dist"], uniq, list(moff[:-1]), map_of)


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng, n_in, n_out):
    return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))


def _add_mlp(store, prefix, rng, n_in, width, n_out, zero_out=False, out_scale=1.0):
    store.add(prefix + ".w1", _glorot(rng, n_in, width))
    store.add(prefix + ".b1", np.zeros(width))
    store.add(prefix + ".w2", np.zeros((width, n_out)) if zero_out else out_scale * _glorot(rng, width, n_out))
    store.add(prefix + ".b2", np.zeros(n_out))


def _add_rpe(store, prefix, rng, h):
    store.add(prefix + ".w1", _glorot(rng, 6, h))
    store.add(prefix + ".b1", np.zeros(h))


def _add_block(store, prefix, rng, h):
    for name in ("wq", "wk", "wv", "wkr", "wvr", "wo"):
        store.add(f"{prefix}.{name}", _glorot(rng, h, h))
    store.add(prefix + ".ln_g", np.ones(h))
    store.add(prefix + ".ln_b", np.zeros(h))


def _add_encoder(store, prefix, rng, cfg, kinds):
    h = cfg.hidden
    store.add(prefix + ".embed", rng.normal(0.0, 1.0, size=(cfg.K, h)))
    for kd in kinds:
        _add_rpe(store, f"{prefix}.rpe_{kd}", rng, h)
    for layer in range(cfg.layers):
        for kd in kinds:
            _add_block(store, f"{prefix}.l{layer}.{kd}", rng, h)


def init_mapenc(store, cfg: NetConfig, seed=0):
    rng = np.random.default_rng([seed, 1])
    h = cfg.hidden
    _add_mlp(store, "mapenc.embed", rng, 3, h, h)
    _add_rpe(store, "mapenc.rpe", rng, h)
    _add_block(store, "mapenc.attn", rng, h)


def init_policy(store, cfg: NetConfig, seed=0):
    rng = np.random.default_rng([seed, 2])
    _add_encoder(store, "policy", rng, cfg, "tma")
    _add_mlp(store, "policy.head", rng, cfg.hidden, cfg.mlp_width, cfg.K, out_scale=1e-2)
    _add_mlp(store, "value", rng, cfg.hidden, cfg.mlp_width, 1, zero_out=True)


def init_decomp_disc(store, cfg: NetConfig, seed=0, scene=True, inter=True):
    rng = np.random.default_rng([seed, 3])
    if scene:
        _add_encoder(store, "disc.scene", rng, cfg, "tm")
        _add_mlp(store, "disc.scene.head", rng, cfg.hidden, cfg.mlp_width, 1, zero_out=True)
    if inter:
        _add_encoder(store, "disc.inter", rng, cfg, "t")
        _add_mlp(store, "disc.inter.pair", rng, 6, cfg.hidden, cfg.hidden)
        _add_mlp(store, "disc.inter.head", rng, 3 * cfg.hidden, cfg.mlp_width, 1, zero_out=True)


def init_ps_disc(store, cfg: NetConfig, seed=0):
    rng = np.random.default_rng([seed, 4])
    _add_encoder(store, "disc.ps", rng, cfg, "tma")
    _add_mlp(store, "disc.ps.head", rng, cfg.hidden, cfg.mlp_width, 1, zero_out=True)


def copy_backbone(store, src, dst):
    """Copy every ``src.*`` array whose name and shape match a ``dst.*`` array (heads excluded)."""
    for name in store.names(dst + "."):
        suffix = name[len(dst) + 1:]
        other = f"{src}.{suffix}"
        if suffix.startswith("head") or other not in store or store[other].shape != store[name].shape:
            continue
        store[name].data = store[other].data.copy()


def init_all(cfg: NetConfig, seed=0, disc="decomp"):
    store = ag.ParamStore()
    init_mapenc(store, cfg, seed)
    init_policy(store, cfg, seed)
    if disc in ("decomp", "both"):
        init_decomp_disc(store, cfg, seed)
    if disc in ("ps", "both"):
        init_ps_disc(store, cfg, seed)
    return store


# ---------------------------------------------------------------------------
# building blocks


def mlp(store, prefix, x):
    """Two-layer perceptron: linear, relu, linear."""
    hdn = ag.relu(ag.linear(x, store[prefix + ".w1"], store[prefix + ".b1"]))
    return ag.linear(hdn, store[prefix + ".w2"], store[prefix + ".b2"])


def rpe_hidden(store, prefix, rel):
    return ag.relu(ag.linear(rel, store[prefix + ".w1"], store[prefix + ".b1"]))


def attn_block(store, prefix, xq, src, idx, mask, rpe_hid, cache=None):
    """Single-head attention of ``xq`` over gathered ``src`` rows with relative encodings.

    Keys are ``src @ Wk`` plus ``hid @ Wkr^T`` and values ``src @ Wv`` plus
    ``hid @ Wvr``; the relative terms are applied on the query / pooled side so
    the (n, P, h) tensor is never multiplied by an h x h matrix. Output is
    LN(xq + attn @ Wo). ``cache`` = precomputed (src @ Wk, src @ Wv) arrays.
    """
    n, h = xq.shape
    q = ag.matmul(xq, store[prefix + ".wq"])
    qr = ag.matmul(q, store[prefix + ".wkr"])
    if cache is None:
        kp, vp = ag.matmul(src, store[prefix + ".wk"]), ag.matmul(src, store[prefix + ".wv"])
    else:
        kp, vp = cache
    k = ag.gather_rows(kp, idx)
    v = ag.gather_rows(vp, idx)
    scores = ag.bmm(k, ag.reshape(q, (n, h, 1))) + ag.bmm(rpe_hid, ag.reshape(qr, (n, h, 1)))
    p = ag.masked_softmax(ag.mul(ag.reshape(scores, (n, -1)), 1.0 / np.sqrt(h)), mask)
    p3 = ag.reshape(p, (n, 1, -1))
    pooled = ag.reshape(ag.bmm(p3, v), (n, h))
    pooled_r = ag.reshape(ag.bmm(p3, rpe_hid), (n, h))
    a = pooled + ag.matmul(pooled_r, store[prefix + ".wvr"])
    return ag.layer_norm(xq + ag.matmul(a, store[prefix + ".wo"]), store[prefix + ".ln_g"], store[prefix + ".ln_b"])


def map_key(mp):
    """Content key for a MapGraph so identical template maps share one encoding."""
    key = getattr(mp, "_content_key", None)
    if key is None:
        key = hash((mp.token_mid.tobytes(), mp.token_dir.tobytes(), mp.token_lane.tobytes()))
        mp._content_key = key
    return key


def _map_token_features(mp):
    return np.column_stack([mp.token_len / 2.0, mp.token_lane, 1.0 - mp.token_lane])


def encode_map(store, mp, cfg: NetConfig):
    """Per-token map features: embed intrinsic token attributes, then attend over tokens within 20 m."""
    x = mlp(store, "mapenc.embed", _map_token_features(mp))
    pose = mp.token_poses
    d = np.hypot(pose[:, None, 0] - pose[None, :, 0], pose[:, None, 1] - pose[None, :, 1])
    key = np.where(d <= cfg.map_enc_radius, d, np.inf)
    P = int(np.max(np.sum(np.isfinite(key), axis=1)))
    order = np.argsort(key, axis=1, kind="stable")[:, :P]
    valid = np.isfinite(np.take_along_axis(key, order, axis=1))
    order = np.where(valid, order, 0)
    rel = relative_features(pose[:, None, :], pose[order], 0.0, cfg)
    hid = rpe_hidden(store, "mapenc.rpe", rel)
    return attn_block(store, "mapenc.attn", x, x, order, valid, hid)


class MapCache:
    """Map features for a frozen encoder, keyed by map content."""

    def __init__(self, store, cfg):
        self.store, self.cfg = store, cfg
        self._cache = {}

    def __call__(self, mp):
        key = map_key(mp)
        if key not in self._cache:
            with ag.no_grad():
                self._cache[key] = ag.Tensor(encode_map(self.store, mp, self.cfg).data)
        return self._cache[key]


def stacked_map_features(store, geo: Geometry, cfg, cache=None):
    feats = [cache(m) if cache is not None else encode_map(store, m, cfg) for m in geo.maps]
    return feats[0] if len(feats) == 1 else ag.concat(feats, axis=0)


def encode(store, prefix, geo: Geometry, mapfeat, cfg: NetConfig, kinds="tma"):
    """Stacked temporal / map-agent / agent-agent attention; returns the last layer's features."""
    x = ag.gather_rows(store[prefix + ".embed"], geo.tokens)
    hid = {"t": rpe_hidden(store, prefix + ".rpe_t", geo.t_rel)}
    if "m" in kinds:
        hid["m"] = rpe_hidden(store, prefix + ".rpe_m", geo.m_rel)
    if "a" in kinds:
        hid["a"] = rpe_hidden(store, prefix + ".rpe_a", geo.a_rel)
    out = {}
    for layer in range(cfg.layers):
        pre = f"{prefix}.l{layer}"
        x = attn_block(store, pre + ".t", x, x, geo.t_idx, geo.t_mask, hid["t"])
        out["temp"] = x
        if "m" in kinds:
            x = attn_block(store, pre + ".m", x, mapfeat, geo.m_idx, geo.m_mask, hid["m"])
            out["map"] = x
        if "a" in kinds:
            x = attn_block(store, pre + ".a", x, x, geo.a_idx, geo.a_mask, hid["a"])
            out["agent"] = x
    return out


# ---------------------------------------------------------------------------
# policy and value


def policy_features(store, geo, mapfeat, cfg):
    return encode(store, "policy", geo, mapfeat, cfg, "tma")


def policy_logits(store, feats):
    return mlp(store, "policy.head", feats["agent"])


def value_forward(store, agent_feat):
    """Scalar value per row; the backbone is detached so only ``value.*`` learns from it."""
    return ag.reshape(mlp(store, "value", ag.detach(agent_feat)), (agent_feat.shape[0],))


def policy_forward(store, histories, cfg, cache=None):
    """Logits (n_queries, K) for every element of every history, plus the geometry."""
    geo = build_geometry(histories, cfg)
    mapfeat = stacked_map_features(store, geo, cfg, cache)
    feats = policy_features(store, geo, mapfeat, cfg)
    return policy_logits(store, feats), feats, geo


def step_rows(geo, n_steps=None):
    """Query rows for elements 0..T-1 of every scene (the policy's decision points) and their targets."""
    rows, scene, step, agent = [], [], [], []
    for s, (off, E, N) in enumerate(geo.offsets):
        T = E - 1 if n_steps is None else n_steps
        r = off + np.arange(T * N)
        rows.append(r)
        scene.append(np.full(T * N, s))
        step.append(np.arange(T * N) // N)
        agent.append(np.arange(T * N) % N)
    return np.concatenate(rows), np.concatenate(scene), np.concatenate(step), np.concatenate(agent)


def expert_targets(histories, geo):
    rows, scene, step, agent = step_rows(geo)
    tgt = np.array([histories[s].tokens[t, i] for s, t, i in zip(scene, step, agent)], dtype=int)
    return rows, tgt


def bc_loss(store, histories, cfg, cache=None):
    """Mean negative log-likelihood of the expert tokens under teacher forcing."""
    if not histories:
        raise ValueError("bc_loss needs a non-empty batch")
    logits, _, geo = policy_forward(store, histories, cfg, cache)
    rows, tgt = expert_targets(histories, geo)
    logp = ag.log_softmax(ag.gather_rows(logits, rows))
    picked = ag.take(logp, (np.arange(len(rows)), tgt))
    return ag.mul(ag.tsum(picked), -1.0 / len(rows))


# ---------------------------------------------------------------------------
# discriminators

LOGIT_CLAMP = float(np.log((1 - 1e-6) / 1e-6))


def disc_rows(geo):
    """Query rows of elements 1..T (discriminator decision points) with (scene, step, agent)."""
    rows, scene, step, agent = [], [], [], []
    for s, (off, E, N) in enumerate(geo.offsets):
        r = off + N + np.arange((E - 1) * N)
        rows.append(r)
        scene.append(np.full(len(r), s))
        step.append(np.arange(len(r)) // N)
        agent.append(np.arange(len(r)) % N)
    return np.concatenate(rows), np.concatenate(scene), np.concatenate(step), np.concatenate(agent)


def scene_logits(store, geo, mapfeat, cfg):
    feats = encode(store, "disc.scene", geo, mapfeat, cfg, "tm")
    return ag.reshape(mlp(store, "disc.scene.head", feats["map"]), (geo.n,))


def pair_list(geo, rows):
    """(ego row, neighbour row, distance) for every neighbour of every row in ``rows``."""
    m = geo.a_mask[rows]
    r_i = np.repeat(rows, m.sum(axis=1))
    r_j = geo.a_idx[rows][m]
    d = geo.a_dist[rows][m]
    return r_i, r_j, d


def interaction_logits(store, geo, r_i, r_j, cfg):
    temp = encode(store, "disc.inter", geo, None, cfg, "t")["temp"]
    rel = relative_features(geo.poses[r_i], geo.poses[r_j], 0.0, cfg)
    pair = mlp(store, "disc.inter.pair", rel)
    x = ag.concat([ag.gather_rows(temp, r_i), pair, ag.gather_rows(temp, r_j)], axis=-1)
    return ag.reshape(mlp(store, "disc.inter.head", x), (len(r_i),))


def ps_logits(store, geo, mapfeat, cfg):
    feats = encode(store, "disc.ps", geo, mapfeat, cfg, "tma")
    return ag.reshape(mlp(store, "disc.ps.head", feats["agent"]), (geo.n,))


def sigmoid_np(z):
    return ag._stable_sigmoid(z)


# ---------------------------------------------------------------------------
# single-scene convenience wrappers


def _last_row(geo, ego):
    off, E, N = geo.offsets[0]
    return geo.q(0, E - 1, ego)


def psgail_score(store, ego, history: History, cfg, max_neighbors=None, cache=None):
    """Monolithic discriminator probability for ``ego`` at the last step of ``history``."""
    with ag.no_grad():
        geo = build_geometry([history], cfg, max_neighbors)
        z = ps_logits(store, geo, stacked_map_features(store, geo, cfg, cache), cfg)
    return float(sigmoid_np(z.data[_last_row(geo, ego)]))


def scene_score(store, ego, history: History, cfg, cache=None):
    """Scene realism S for ``ego`` at the last step; reads only the ego track and the map."""
    with ag.no_grad():
        geo = build_geometry([history], cfg)
        z = scene_logits(store, geo, stacked_map_features(store, geo, cfg, cache), cfg)
    return float(sigmoid_np(z.data[_last_row(geo, ego)]))


class NotNeighbor(ValueError):
    pass


def interaction_score(store, ego, other, history: History, cfg):
    """Interaction realism I for the (ego, other) pair at the last step."""
    with ag.no_grad():
        geo = build_geometry([history], cfg)
        r_i = _last_row(geo, ego)
        r_j = _last_row(geo, other)
        if not np.any(geo.a_idx[r_i][geo.a_mask[r_i]] == r_j):
            raise NotNeighbor(f"agent {other} is not a neighbour of agent {ego}")
        z = interaction_logits(store, geo, np.array([r_i]), np.array([r_j]), cfg)
    return float(sigmoid_np(z.data[0]))


# ---------------------------------------------------------------------------
# rollout policy


class NetworkPolicy:
    """Samples tokens from the policy network, one batched evaluation per step.

    The encoder is causal over elements, so each step only encodes the newest
    element; per-scene caches hold every layer's temporal key/value
    projections of earlier elements. Slot ``k`` of ``ctxs`` owns cache ``k``;
    a context at t = 0 resets its slot.
    """

    def __init__(self, store, cfg: NetConfig, cache=None, greedy=False):
        self.store, self.cfg = store, cfg
        self.cache = cache if cache is not None else MapCache(store, cfg)
        self.greedy = greedy
        self._kv = {}

    def step_outputs(self, ctxs):
        """Log-probabilities (n, K) and values (n,) for the newest element of every context."""
        store, cfg = self.store, self.cfg
        hist = [History(c.scenario, c.tokens, c.poses) for c in ctxs]
        for k, c in enumerate(ctxs):
            if c.t == 0:
                self._kv[k] = [([], []) for _ in range(cfg.layers)]
            elif len(self._kv.get(k, [([], [])])[0][0]) != c.t:
                raise RuntimeError(f"slot {k}: policy cache is out of step with the rollout")
        with ag.no_grad():
            geo = build_geometry(hist, cfg, last_only=True)
            mapfeat = stacked_map_features(store, geo, cfg, self.cache)
            x = ag.gather_rows(store["policy.embed"], geo.tokens)
            hid_t = rpe_hidden(store, "policy.rpe_t", geo.t_rel)
            hid_m = rpe_hidden(store, "policy.rpe_m", geo.m_rel)
            hid_a = rpe_hidden(store, "policy.rpe_a", geo.a_rel)
            h = cfg.hidden
            for layer in range(cfg.layers):
                pre = f"policy.l{layer}"
                src = []
                for which in (0, 1):
                    rows = [r for k in range(len(ctxs)) for r in self._kv[k][layer][which]]
                    src.append(ag.Tensor(np.concatenate(rows + [np.zeros((1, h))])))
                kp = ag.matmul(x, store[pre + ".t.wk"]).data
                vp = ag.matmul(x, store[pre + ".t.wv"]).data
                for k, (off, _, n) in enumerate(geo.offsets):
                    self._kv[k][layer][0].append(kp[off:off + n])
                    self._kv[k][layer][1].append(vp[off:off + n])
                x = attn_block(store, pre + ".t", x, None, geo.t_idx, geo.t_mask, hid_t, cache=tuple(src))
                x = attn_block(store, pre + ".m", x, mapfeat, geo.m_idx, geo.m_mask, hid_m)
                x = attn_block(store, pre + ".a", x, x, geo.a_idx, geo.a_mask, hid_a)
            logp = ag.log_softmax(mlp(store, "policy.head", x)).data
            values = value_forward(store, x).data
        return logp, values

    def act(self, ctxs, rngs):
        logp, values = self.step_outputs(ctxs)
        out, start = [], 0
        for c, rng in zip(ctxs, rngs):
            n = c.scenario.n_agents
            lp = logp[start:start + n]
            if self.greedy:
                a = np.argmax(lp, axis=1)
            else:
                cdf = np.cumsum(np.exp(lp), axis=1)
                u = rng.random(n) * cdf[:, -1]
                a = np.minimum((cdf < u[:, None]).sum(axis=1), lp.shape[1] - 1)
            out.append((a, lp[np.arange(n), a], values[start:start + n]))
            start += n
        return out
