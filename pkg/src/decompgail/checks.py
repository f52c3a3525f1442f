"""Finite-difference gradient checks of every trained objective on a small bundled scene."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import gailrl, nets
from .env import rollout
from .expert import IdmParams, collect_raw_deltas, gen_demos
from .world import build_vocab, gen_scenario, scenario_suite

GRAD_TOLERANCE = 1e-4


def bundled_scene(seed=0, n_agents=3):
    return gen_scenario("crossing", n_agents, seed)


def _jitter_heads(store, rng, scale=0.1):
    # zero-initialised output layers would hide every upstream gradient
    for name in store.names():
        if name.endswith(".w2") and not np.any(store[name].data):
            store[name].data = rng.normal(0.0, scale, store[name].shape)


def grad_check_suite(ncfg: nets.NetConfig, seed=0, per_tensor=3, h=1e-5, K=None):
    """Max relative gradient error of the BC, decomposed, PS-GAIL and PPO objectives.

    Every parameter tensor of each objective contributes ``per_tensor``
    randomly chosen coordinates.
    """
    K = ncfg.K if K is None else K
    idm = IdmParams()
    vocab = build_vocab(collect_raw_deltas(scenario_suite(12, seed), idm, seed=seed), K, seed)
    sc = bundled_scene(seed)
    demos = gen_demos([sc], idm, vocab)
    expert_h = [nets.History.from_demo(demos, 0)]

    store = nets.init_all(ncfg, seed, disc="both")
    rng = np.random.default_rng([seed, 99])
    _jitter_heads(store, rng)
    tcfg = gailrl.TrainConfig()
    with ag.no_grad():
        roll = rollout(nets.NetworkPolicy(store, ncfg), sc, seed, vocab)
    policy_h = [nets.History.from_rollout(roll)]
    cache = nets.MapCache(store, ncfg)

    def bc(st):
        return nets.bc_loss(st, expert_h, ncfg)

    def decomp(st):
        return gailrl.decomp_disc_loss(gailrl.score_decomp(st, expert_h, ncfg, tcfg, cache),
                                       gailrl.score_decomp(st, policy_h, ncfg, tcfg, cache))

    def ps(st):
        e = gailrl.score_ps(st, expert_h, ncfg, None, cache)
        p = gailrl.score_ps(st, policy_h, ncfg, None, cache)
        return gailrl.weighted_disc_loss([(e.z_scene, 1.0)], [(p.z_scene, 1.0)])

    T, N = roll.tokens.shape
    old_logp = roll.logp.reshape(-1) + rng.normal(0.0, 0.1, T * N)
    adv = gailrl.normalize_advantages(rng.normal(size=T * N))
    targets = rng.normal(size=T * N)

    # the value head reads stop-gradient features; hold them fixed so the
    # finite differences see the same objective the backward pass does
    with ag.no_grad():
        frozen = ag.Tensor(nets.policy_forward(store, policy_h, ncfg, cache)[1]["agent"].data.copy())

    def ppo(st):
        logits, _, geo = nets.policy_forward(st, policy_h, ncfg, cache)
        rows, _, step, agent = nets.step_rows(geo)
        lp = ag.log_softmax(ag.gather_rows(logits, rows))
        new = ag.take(lp, (np.arange(len(rows)), roll.tokens[step, agent]))
        values = ag.gather_rows(nets.value_forward(st, frozen), rows)
        return gailrl.ppo_loss(new, old_logp, adv, values, targets, tcfg.clip_eps, tcfg.value_coef)[0]

    jobs = {
        "bc": (bc, store.names("policy.") + store.names("mapenc.")),
        "decomp_disc": (decomp, store.names("disc.scene.") + store.names("disc.inter.")),
        "psgail_disc": (ps, store.names("disc.ps.")),
        "ppo": (ppo, store.names("policy.") + store.names("value.")),
    }
    return {name: ag.grad_check(f, store, names, h=h, seed=seed, per_tensor=per_tensor)
            for name, (f, names) in jobs.items()}
