"""Adversarial fine-tuning: discriminator losses, rewards, GAE, PPO and training loops."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from . import nets
from .env import collision_matrix, neighbor_matrix, rollout_batch
from .world import ConfigError

SCORE_EPS = 1e-6
VARIANTS = ("full", "no_scene", "no_inter", "mean_w", "no_lambda", "mean_lambda")
LOG_COLUMNS = ("iter", "disc_mean_policy", "disc_std_policy", "disc_loss", "ppo_loss", "value_loss",
               "reward_mean", "collision_rate_train")


class Divergence(RuntimeError):
    """Raised by the training loops when the policy logits blow up."""


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    ppo_epochs: int = 1
    batch: int = 8
    rollout_len: int = 16
    value_coef: float = 1e-3
    alpha_w: float = 1.0
    beta_w: float = 10.0
    alpha_l: float = 1.0
    beta_l: float = 10.0
    lr_policy: float = 5e-5
    lr_disc: float = 1e-4
    lr_bc: float = 5e-4
    lr_value: float | None = None
    weight_decay: float = 0.01
    iterations: int = 200
    bc_steps: int = 2000
    bc_batch: int = 8
    reward_momentum: float = 0.99
    divergence_logit: float = 50.0
    variant: str = "full"
    disc_init: str = "policy"
    disc_warmup: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0 or self.beta_w <= 0 or self.beta_l <= 0:
            raise ConfigError("clip_eps and the distance scales must be positive")
        if self.ppo_epochs != 1:
            raise ConfigError("only one PPO epoch per iteration is supported")
        if self.batch < 1 or self.bc_batch < 1 or self.iterations < 0 or self.bc_steps < 0:
            raise ConfigError("batch sizes must be positive and step counts non-negative")
        if self.disc_init not in ("policy", "random"):
            raise ConfigError("disc_init must be 'policy' or 'random'")
        if self.disc_warmup < 0:
            raise ConfigError("disc_warmup must be non-negative")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# closed-form pieces


def weight(d, alpha=1.0, beta=10.0):
    """Distance-decayed weight alpha * exp(-d / beta)."""
    d = np.asarray(d, dtype=float)
    if beta <= 0:
        raise ValueError("beta must be positive")
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    out = alpha * np.exp(-d / beta)
    return float(out) if out.ndim == 0 else out


def clamp_score(p):
    return np.clip(p, SCORE_EPS, 1.0 - SCORE_EPS)


def agent_reward(S, interactions=()):
    """-ln(1 - S) - sum_j w_j ln(1 - I_j) for ``interactions`` = [(I_j, w_j), ...]."""
    r = -np.log(1.0 - clamp_score(S))
    for i_score, w in interactions:
        r -= w * np.log(1.0 - clamp_score(i_score))
    return float(r)


def social_reward(r_i, neighbors=(), alpha=1.0, beta=10.0):
    """r_i + sum_j alpha exp(-d_ij / beta) r_j for ``neighbors`` = [(r_j, d_ij), ...]."""
    return float(r_i + sum(weight(d, alpha, beta) * r_j for r_j, d in neighbors))


def gae(rewards, values, bootstrap=0.0, gamma=0.99, lam=0.95):
    """Generalized advantage estimates and value targets along axis 0."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError("rewards and values must have the same shape")
    adv = np.zeros_like(r)
    nxt_v = np.broadcast_to(np.asarray(bootstrap, dtype=float), r.shape[1:]).copy()
    run = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * nxt_v - v[t]
        run = delta + gamma * lam * run
        adv[t] = run
        nxt_v = v[t]
    return adv, adv + v


def bce_terms(logits, label):
    """Per-term BCE on logits clamped to the score range [eps, 1 - eps]."""
    return ag.bce_with_logits(ag.clip(logits, -nets.LOGIT_CLAMP, nets.LOGIT_CLAMP), label)


def weighted_disc_loss(expert_terms, policy_terms):
    """Negated discriminator objective normalised by the total term weight.

    Each argument is a list of (logits tensor, weights array). Expert terms
    carry label 1, policy terms label 0.
    """
    total = 0.0
    parts = []
    for terms, label in ((expert_terms, 1.0), (policy_terms, 0.0)):
        for z, w in terms:
            w = np.broadcast_to(np.asarray(w, dtype=float), z.shape)
            if z.shape[0] == 0:
                continue
            parts.append(ag.tsum(ag.mul(bce_terms(z, label), w)))
            total += float(w.sum())
    if not parts or total <= 0:
        raise ValueError("discriminator loss needs non-empty expert and policy batches")
    loss = parts[0]
    for p in parts[1:]:
        loss = loss + p
    return ag.mul(loss, 1.0 / total)


def ppo_loss(new_logp, old_logp, adv, values, targets, clip_eps=0.2, value_coef=1e-3):
    """Clipped surrogate plus weighted squared value error, averaged over agent-steps.

    Returns (total, surrogate, value_loss) tensors. ``adv`` is used as given.
    """
    old_logp = np.asarray(old_logp, dtype=float)
    ratio = ag.exp(new_logp - old_logp)
    if not np.all(np.isfinite(ratio.data)):
        bad = int(np.flatnonzero(~np.isfinite(ratio.data))[0])
        raise FloatingPointError(f"non-finite importance ratio at agent-step {bad}")
    adv = np.asarray(adv, dtype=float)
    unclipped = ag.mul(ratio, adv)
    clipped = ag.mul(ag.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv)
    surrogate = ag.mul(ag.tmean(ag.minimum(unclipped, clipped)), -1.0)
    err = values - np.asarray(targets, dtype=float)
    value_loss = ag.tmean(ag.mul(err, err))
    return surrogate + ag.mul(value_loss, value_coef), surrogate, value_loss


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=float)
    sd = adv.std()
    return (adv - adv.mean()) / (sd if sd > 1e-8 else 1.0)


class RunningNorm:
    """Exponential running mean / variance used to standardise rewards."""

    def __init__(self, momentum=0.99):
        self.momentum = momentum
        self.mean = None
        self.var = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        m, v = float(x.mean()), float(x.var())
        if self.mean is None:
            self.mean, self.var = m, v
        else:
            k = self.momentum
            self.mean = k * self.mean + (1 - k) * m
            self.var = k * self.var + (1 - k) * v
        return (x - self.mean) / np.sqrt(self.var + 1e-8)


# ---------------------------------------------------------------------------
# scoring and reward assembly


@dataclass
class RewardBreakdown:
    """Reward components of one agent at one step."""

    S: float
    interactions: list  # (j, I_ij, w_ij)
    reward: float
    neighbor_reward: float
    social: float
    lambdas: list  # (j, lambda_ij)


@dataclass
class StepScores:
    """Discriminator outputs at every (scene, step, agent) decision point of a batch."""

    scene: np.ndarray
    step: np.ndarray
    agent: np.ndarray
    S: np.ndarray | None  # per decision point, or None without a scene head
    pair_ego: np.ndarray  # decision-point index of the ego
    pair_other: np.ndarray  # decision-point index of the neighbour
    pair_dist: np.ndarray
    I: np.ndarray | None  # per pair, or None without an interaction head
    w: np.ndarray  # per pair interaction weights
    z_scene: object = None  # logits tensors (kept for the loss)
    z_inter: object = None

    @property
    def n(self):
        return len(self.scene)


def _pair_weights(ego, dist, n_points, alpha, beta, mean):
    if mean:
        count = np.bincount(ego, minlength=n_points)
        return 1.0 / count[ego] if len(ego) else np.zeros(0)
    return weight(dist, alpha, beta) if len(dist) else np.zeros(0)


def score_decomp(store, histories, ncfg, tcfg: TrainConfig, mapcache=None):
    """Scene and interaction logits / probabilities for every decision point."""
    variant = tcfg.variant
    geo = nets.build_geometry(histories, ncfg)
    rows, scene, step, agent = nets.disc_rows(geo)
    pos = np.full(geo.n, -1)
    pos[rows] = np.arange(len(rows))
    r_i, r_j, d = nets.pair_list(geo, rows)
    ego, other = pos[r_i], pos[r_j]
    w = _pair_weights(ego, d, len(rows), tcfg.alpha_w, tcfg.beta_w, variant == "mean_w")
    out = StepScores(scene, step, agent, None, ego, other, d, None, w)
    if variant != "no_scene":
        mapfeat = nets.stacked_map_features(store, geo, ncfg, mapcache)
        z = ag.gather_rows(nets.scene_logits(store, geo, mapfeat, ncfg), rows)
        out.z_scene, out.S = z, nets.sigmoid_np(z.data)
    if variant != "no_inter":
        z = nets.interaction_logits(store, geo, r_i, r_j, ncfg)
        out.z_inter, out.I = z, nets.sigmoid_np(z.data)
    return out


def score_ps(store, histories, ncfg, max_neighbors=None, mapcache=None):
    geo = nets.build_geometry(histories, ncfg, max_neighbors)
    rows, scene, step, agent = nets.disc_rows(geo)
    mapfeat = nets.stacked_map_features(store, geo, ncfg, mapcache)
    z = ag.gather_rows(nets.ps_logits(store, geo, mapfeat, ncfg), rows)
    e = np.zeros(0, dtype=int)
    return StepScores(scene, step, agent, nets.sigmoid_np(z.data), e, e, np.zeros(0), None, np.zeros(0), z_scene=z)


def decomp_disc_loss(expert: StepScores, policy: StepScores):
    terms = []
    for sc in (expert, policy):
        t = []
        if sc.z_scene is not None:
            t.append((sc.z_scene, 1.0))
        if sc.z_inter is not None:
            t.append((sc.z_inter, sc.w))
        terms.append(t)
    return weighted_disc_loss(*terms)


def combined_score(sc: StepScores):
    """Per decision point (S + sum w I) / (1 + sum w); the logged realism score."""
    num = np.zeros(sc.n)
    den = np.zeros(sc.n)
    if sc.S is not None:
        num += sc.S
        den += 1.0
    if sc.I is not None and len(sc.I):
        num += np.bincount(sc.pair_ego, sc.w * sc.I, minlength=sc.n)
        den += np.bincount(sc.pair_ego, sc.w, minlength=sc.n)
    keep = den > 0
    return num[keep] / den[keep]


def agent_rewards(sc: StepScores):
    """Vectorised per-decision-point reward from clamped scores."""
    r = np.zeros(sc.n)
    if sc.S is not None:
        r -= np.log(1.0 - clamp_score(sc.S))
    if sc.I is not None and len(sc.I):
        r -= np.bincount(sc.pair_ego, sc.w * np.log(1.0 - clamp_score(sc.I)), minlength=sc.n)
    return r


def social_pairs(histories, sc: StepScores, radius):
    """Uncapped neighbour pairs (ego index, other index, distance) at each decision point."""
    index = {}
    for k, key in enumerate(zip(sc.scene, sc.step, sc.agent)):
        index[key] = k
    ego, other, dist = [], [], []
    for s, h in enumerate(histories):
        member, d = neighbor_matrix(h.poses[1:], radius)
        t, i, j = np.nonzero(member)
        ego.append([index[(s, a, b)] for a, b in zip(t, i)])
        other.append([index[(s, a, b)] for a, b in zip(t, j)])
        dist.append(d[t, i, j])
    cat = np.concatenate
    return cat(ego).astype(int), cat(other).astype(int), cat(dist)


def social_rewards(r, ego, other, dist, n, tcfg: TrainConfig):
    if tcfg.variant == "no_lambda" or len(ego) == 0:
        lam = np.zeros(len(ego))
    elif tcfg.variant == "mean_lambda":
        lam = 1.0 / np.bincount(ego, minlength=n)[ego]
    else:
        lam = weight(dist, tcfg.alpha_l, tcfg.beta_l)
    nbr = np.bincount(ego, lam * r[other], minlength=n) if len(ego) else np.zeros(n)
    return r + nbr, nbr, lam


def breakdowns(sc: StepScores, r, nbr, social, soc_pairs, lam):
    """Materialise per-decision-point RewardBreakdown records."""
    out = []
    ego_p, other_p, _ = soc_pairs
    for k in range(sc.n):
        inter = []
        if sc.I is not None:
            sel = np.flatnonzero(sc.pair_ego == k)
            inter = [(int(sc.agent[sc.pair_other[p]]), float(sc.I[p]), float(sc.w[p])) for p in sel]
        sel = np.flatnonzero(ego_p == k)
        lams = [(int(sc.agent[other_p[p]]), float(lam[p])) for p in sel]
        S = float(sc.S[k]) if sc.S is not None else float("nan")
        out.append(RewardBreakdown(S, inter, float(r[k]), float(nbr[k]), float(social[k]), lams))
    return out


# ---------------------------------------------------------------------------
# training loops


def _check_finite(store, it):
    try:
        store.check_finite()
    except ag.GraphFault as exc:
        raise Divergence(f"iteration {it}: {exc}") from exc


def train_bc(store, demos, ncfg, tcfg: TrainConfig, seed=0, steps=None, log_every=50):
    """Teacher-forced maximum likelihood on expert tokens. Trains ``policy.*`` and ``mapenc.*``."""
    steps = tcfg.bc_steps if steps is None else steps
    rng = np.random.default_rng([seed, 11])
    logs = []
    hist = [nets.History.from_demo(demos, k) for k in range(len(demos))]
    for it in range(steps):
        idx = rng.choice(len(hist), size=min(tcfg.bc_batch, len(hist)), replace=False)
        store.zero_grad()
        loss = nets.bc_loss(store, [hist[k] for k in idx], ncfg)
        loss.backward()
        ag.adamw_update(store, tcfg.lr_bc, weight_decay=tcfg.weight_decay, prefixes=("policy.", "mapenc."))
        _check_finite(store, it)
        if it % log_every == 0 or it == steps - 1:
            logs.append({"step": it, "nll": float(loss.data)})
    return logs


def bc_metrics(store, demos, ncfg, batch=32):
    """Mean NLL and top-1 accuracy of expert tokens under teacher forcing."""
    nll, hits, count = 0.0, 0, 0
    cache = nets.MapCache(store, ncfg)
    for start in range(0, len(demos), batch):
        hist = [nets.History.from_demo(demos, k) for k in range(start, min(start + batch, len(demos)))]
        with ag.no_grad():
            logits, _, geo = nets.policy_forward(store, hist, ncfg, cache)
            rows, tgt = nets.expert_targets(hist, geo)
            lp = ag.log_softmax(ag.gather_rows(logits, rows)).data
        nll -= float(lp[np.arange(len(rows)), tgt].sum())
        hits += int((np.argmax(lp, axis=1) == tgt).sum())
        count += len(rows)
    return nll / count, hits / count


@dataclass
class TrainResult:
    store: ag.ParamStore
    logs: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""


def _batch_collision_rate(rolls):
    hit, total = 0, 0
    for r in rolls:
        fp = r.scenario.footprints()
        any_hit = np.zeros(r.scenario.n_agents, dtype=bool)
        for p in r.poses[1:]:
            any_hit |= collision_matrix(p, fp).any(axis=1)
        hit += int(any_hit.sum())
        total += len(any_hit)
    return hit / max(total, 1)


def _ppo_step(store, rolls, social, sc: StepScores, ncfg, tcfg, cache, it):
    """GAE on social rewards, then one clipped-PPO step on ``policy.*`` and ``value.*``."""
    hist = [nets.History.from_rollout(r) for r in rolls]
    adv = np.zeros(sc.n)
    tgt = np.zeros(sc.n)
    old_logp = np.zeros(sc.n)
    old_v = np.zeros(sc.n)
    for s, r in enumerate(rolls):
        sel = np.flatnonzero(sc.scene == s)
        T, N = r.tokens.shape
        grid = np.zeros((T, N), dtype=int)
        grid[sc.step[sel], sc.agent[sel]] = sel
        a, g = gae(social[grid], r.values, 0.0, tcfg.gamma, tcfg.gae_lambda)
        adv[grid], tgt[grid] = a, g
        old_logp[grid], old_v[grid] = r.logp, r.values
    adv_n = normalize_advantages(adv)

    store.zero_grad()
    logits, feats, geo = nets.policy_forward(store, hist, ncfg, cache)
    rows, scene, step, agent = nets.step_rows(geo)
    # decision points are ordered (scene, step, agent) in both layouts
    taken = np.array([rolls[s].tokens[t, i] for s, t, i in zip(scene, step, agent)], dtype=int)
    mean_abs = float(np.abs(logits.data[rows]).mean())
    if not np.isfinite(mean_abs) or mean_abs > tcfg.divergence_logit:
        raise Divergence(f"iteration {it}: mean |policy logit| = {mean_abs:.3g} exceeds {tcfg.divergence_logit}")
    lp = ag.log_softmax(ag.gather_rows(logits, rows))
    new_logp = ag.take(lp, (np.arange(len(rows)), taken))
    values = ag.gather_rows(nets.value_forward(store, feats["agent"]), rows)
    try:
        total, surr, vloss = ppo_loss(new_logp, old_logp, adv_n, values, tgt, tcfg.clip_eps, tcfg.value_coef)
    except FloatingPointError as exc:
        raise Divergence(f"iteration {it}: {exc}") from exc
    total.backward()
    lr_value = tcfg.lr_policy if tcfg.lr_value is None else tcfg.lr_value
    ag.adamw_update(store, tcfg.lr_policy, weight_decay=tcfg.weight_decay, prefixes=("policy.",))
    ag.adamw_update(store, lr_value, weight_decay=tcfg.weight_decay, prefixes=("value.",))
    return float(surr.data), float(vloss.data)


def _add_discriminator(store, ncfg, tcfg, seed, disc):
    """Add missing discriminator parameters; returns the prefixes the discriminator step updates."""
    if disc == "decomp":
        want = {"no_inter": ("scene",), "no_scene": ("inter",)}.get(tcfg.variant, ("scene", "inter"))
        missing = [p for p in want if not store.names(f"disc.{p}.")]
        if missing:
            nets.init_decomp_disc(store, ncfg, seed, scene="scene" in missing, inter="inter" in missing)
        added = [f"disc.{p}" for p in missing]
        prefixes = tuple(f"disc.{p}." for p in want)
    elif disc == "ps":
        added = [] if store.names("disc.ps.") else ["disc.ps"]
        if added:
            nets.init_ps_disc(store, ncfg, seed)
        prefixes = ("disc.ps.",)
    else:
        raise ConfigError(f"unknown discriminator {disc!r}")
    if tcfg.disc_init == "policy":
        for prefix in added:
            nets.copy_backbone(store, "policy", prefix)
    return prefixes


def train_gail(store, demos, scenarios, ncfg, tcfg: TrainConfig, seed=0, disc="decomp", max_neighbors=None,
               iterations=None, log_path=None):
    """Fine-tune a BC checkpoint adversarially.

    ``disc="decomp"`` uses the scene / interaction discriminator pair,
    ``disc="ps"`` the monolithic one with neighbour cap ``max_neighbors``
    (None = all agents within the radius). Each iteration collects fresh
    rollouts, takes one discriminator step and one PPO step; the first
    ``tcfg.disc_warmup`` extra iterations update only the discriminator and
    are not logged. Returns a TrainResult; on divergence the partial logs are
    kept and ``diverged`` set.
    """
    iterations = tcfg.iterations if iterations is None else iterations
    if iterations <= 0:
        _LogWriter(log_path).close()  # header-only log
        return TrainResult(store.copy(), [])
    store = store.copy()
    store.moments = {}  # fresh optimiser state for fine-tuning
    prefixes = _add_discriminator(store, ncfg, tcfg, seed, disc)

    cache = nets.MapCache(store, ncfg)  # mapenc is frozen: encode each map once
    demo_hist = [nets.History.from_demo(demos, k) for k in range(len(demos))]
    by_digest = {sc.digest(): k for k, sc in enumerate(demos.scenarios)}
    pool = [sc for sc in scenarios if sc.digest() in by_digest]
    if not pool:
        raise ConfigError("no training scenario has a demonstration")
    rng = np.random.default_rng([seed, 21])
    norm = RunningNorm(tcfg.reward_momentum)
    writer = _LogWriter(log_path)
    result = TrainResult(store, [])
    warm = tcfg.disc_warmup
    for k in range(warm + iterations):
        it = k - warm
        pick = rng.choice(len(pool), size=min(tcfg.batch, len(pool)), replace=False)
        batch = [pool[j] for j in pick]
        seeds = rng.integers(0, 2**31 - 1, size=len(batch))
        try:
            rolls = rollout_batch(nets.NetworkPolicy(store, ncfg, cache), batch, seeds, demos.vocab)
        except Exception as exc:
            result.diverged, result.message = True, f"iteration {it}: rollout failed: {exc}"
            break
        pol_hist = [nets.History.from_rollout(r) for r in rolls]
        exp_hist = [demo_hist[by_digest[sc.digest()]] for sc in batch]

        store.zero_grad()
        if disc == "decomp":
            sc_e = score_decomp(store, exp_hist, ncfg, tcfg, cache)
            sc_p = score_decomp(store, pol_hist, ncfg, tcfg, cache)
            dloss = decomp_disc_loss(sc_e, sc_p)
            shown = combined_score(sc_p)
        else:
            sc_e = score_ps(store, exp_hist, ncfg, max_neighbors, cache)
            sc_p = score_ps(store, pol_hist, ncfg, max_neighbors, cache)
            dloss = weighted_disc_loss([(sc_e.z_scene, 1.0)], [(sc_p.z_scene, 1.0)])
            shown = sc_p.S
        dloss.backward()
        ag.adamw_update(store, tcfg.lr_disc, weight_decay=tcfg.weight_decay, prefixes=prefixes)
        if it < 0:
            continue

        r = agent_rewards(sc_p)
        ego, other, dist = social_pairs(pol_hist, sc_p, ncfg.neighbor_radius)
        social, _, _ = social_rewards(r, ego, other, dist, sc_p.n, tcfg)
        try:
            surr, vloss = _ppo_step(store, rolls, norm(social), sc_p, ncfg, tcfg, cache, it)
            _check_finite(store, it)
        except Divergence as exc:
            result.diverged, result.message = True, str(exc)
            break
        row = {"iter": it, "disc_mean_policy": float(np.mean(shown)), "disc_std_policy": float(np.std(shown)),
               "disc_loss": float(dloss.data), "ppo_loss": surr, "value_loss": vloss,
               "reward_mean": float(np.mean(r)), "collision_rate_train": _batch_collision_rate(rolls)}
        result.logs.append(row)
        writer.write(row)
    writer.close()
    return result


def train_decompgail(store, demos, scenarios, ncfg, tcfg: TrainConfig, seed=0, iterations=None, log_path=None):
    return train_gail(store, demos, scenarios, ncfg, tcfg, seed, "decomp", None, iterations, log_path)


def train_psgail(store, demos, scenarios, ncfg, tcfg: TrainConfig, seed=0, max_neighbors=None, iterations=None,
                 log_path=None):
    return train_gail(store, demos, scenarios, ncfg, tcfg, seed, "ps", max_neighbors, iterations, log_path)


# ---------------------------------------------------------------------------
# logs


class _LogWriter:
    def __init__(self, path):
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.w = csv.DictWriter(self.fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            self.w.writeheader()

    def write(self, row):
        if self.fh is not None:
            self.w.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _fmt(x):
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def logs_to_csv(rows, columns=LOG_COLUMNS):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in columns})
    return buf.getvalue()


def read_log_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in rows]
