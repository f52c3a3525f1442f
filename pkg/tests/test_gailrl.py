"""Reward formulas, discriminator loss, GAE, PPO and the fine-tuning loops."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decompgail import autograd as ag
from decompgail import gailrl, nets
from decompgail.world import ConfigError

mpmath.mp.dps = 40


def brute_gae(r, v, gamma, lam):
    T = len(r)
    v_next = np.append(v[1:], 0.0)
    delta = r + gamma * v_next - v
    return np.array([sum((gamma * lam) ** l * delta[t + l] for l in range(T - t)) for t in range(T)])


class TestFormulas:
    def test_weight_values(self):
        assert gailrl.weight(0, 1, 10) == 1.0
        assert gailrl.weight(10, 1, 10) == pytest.approx(float(mpmath.exp(-1)), abs=1e-12)
        assert gailrl.weight(60, 1, 10) == pytest.approx(float(mpmath.exp(-6)), abs=1e-15)

    @given(st.floats(0, 100), st.floats(0, 100))
    def test_weight_monotone(self, d1, d2):
        if d1 < d2 and np.exp(-d1 / 10) != np.exp(-d2 / 10):
            assert gailrl.weight(d1) > gailrl.weight(d2)

    def test_weight_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            gailrl.weight(1.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            gailrl.weight(-1.0)

    def test_agent_reward_examples(self):
        assert gailrl.agent_reward(0.5) == pytest.approx(np.log(2), abs=1e-12)
        assert gailrl.agent_reward(0.5, [(0.5, gailrl.weight(0.0))]) == pytest.approx(2 * np.log(2), abs=1e-12)

    def test_agent_reward_oracle(self):
        got = gailrl.agent_reward(0.8, [(0.6, gailrl.weight(10)), (0.4, gailrl.weight(20))])
        mp = mpmath.mpf
        ref = -mpmath.log(1 - mp("0.8")) - mpmath.exp(-1) * mpmath.log(1 - mp("0.6")) \
            - mpmath.exp(-2) * mpmath.log(1 - mp("0.4"))
        assert got == pytest.approx(float(ref), abs=1e-12)

    def test_agent_reward_clamped(self):
        assert np.isfinite(gailrl.agent_reward(1.0, [(1.0, 1.0)]))

    def test_social_reward(self):
        assert gailrl.social_reward(1.7) == 1.7
        assert gailrl.social_reward(1.0, [(2.0, 0.0)]) == 3.0
        nb = [(0.5, 3.0), (-1.2, 17.5), (2.25, 44.0)]
        ref = mpmath.mpf(0.9) + mpmath.fsum(mpmath.mpf(r) * mpmath.exp(-mpmath.mpf(d) / 10) for r, d in nb)
        assert gailrl.social_reward(0.9, nb) == pytest.approx(float(ref), abs=1e-12)

    def test_disc_loss_at_half(self):
        z = ag.Tensor(np.zeros(1))
        loss = gailrl.weighted_disc_loss([(z, 1.0)], [(z, 1.0)])
        assert loss.item() == pytest.approx(np.log(2), abs=1e-12)
        with pytest.raises(ValueError):
            gailrl.weighted_disc_loss([], [])

    def test_disc_loss_saturated_floor(self):
        big = nets.LOGIT_CLAMP + 5
        loss = gailrl.weighted_disc_loss([(ag.Tensor(np.full(3, big)), 1.0)], [(ag.Tensor(np.full(3, -big)), 1.0)])
        assert loss.item() == pytest.approx(-np.log(1 - 1e-6), rel=1e-6)


class TestGae:
    def test_single_step(self):
        adv, tgt = gailrl.gae([1.0], [0.0], 0.0)
        assert adv[0] == 1.0 and tgt[0] == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        r, v = rng.normal(size=16), rng.normal(size=16)
        adv, tgt = gailrl.gae(r, v, 0.0, 0.99, 0.95)
        assert np.max(np.abs(adv - brute_gae(r, v, 0.99, 0.95))) < 1e-10
        assert np.allclose(tgt, adv + v, atol=0)

    def test_lambda_one_telescopes(self):
        rng = np.random.default_rng(1)
        r, v = rng.normal(size=16), rng.normal(size=16)
        adv, _ = gailrl.gae(r, v, 0.0, 0.99, 1.0)
        ret = np.array([sum(0.99 ** (l - t) * r[l] for l in range(t, 16)) for t in range(16)])
        assert np.max(np.abs(adv - (ret - v))) < 1e-10

    def test_columns_independent(self):
        rng = np.random.default_rng(2)
        r, v = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
        adv, _ = gailrl.gae(r, v)
        for c in range(3):
            assert np.array_equal(adv[:, c], gailrl.gae(r[:, c], v[:, c])[0])


class TestPpo:
    def test_on_policy_surrogate_is_zero(self):
        adv = gailrl.normalize_advantages(np.random.default_rng(0).normal(size=50))
        lp = ag.Tensor(np.full(50, -1.3))
        _, surr, _ = gailrl.ppo_loss(lp, np.full(50, -1.3), adv, ag.Tensor(np.zeros(50)), np.zeros(50))
        assert abs(surr.item()) < 1e-12

    def test_clip_selected(self):
        lp = ag.Tensor(np.array([np.log(1.5)]))
        _, surr, _ = gailrl.ppo_loss(lp, np.zeros(1), np.ones(1), ag.Tensor(np.zeros(1)), np.zeros(1), 0.2)
        assert surr.item() == pytest.approx(-1.2, abs=1e-12)

    def test_value_term_weight(self):
        lp = ag.Tensor(np.zeros(2))
        total, surr, vloss = gailrl.ppo_loss(lp, np.zeros(2), np.zeros(2), ag.Tensor(np.array([1.0, 3.0])),
                                             np.zeros(2), value_coef=1e-3)
        assert vloss.item() == 5.0 and total.item() == pytest.approx(surr.item() + 5e-3, abs=1e-15)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_non_finite_ratio_faults(self):
        with pytest.raises(FloatingPointError, match="agent-step 1"):
            gailrl.ppo_loss(ag.Tensor(np.array([0.0, 800.0])), np.zeros(2), np.ones(2), ag.Tensor(np.zeros(2)),
                            np.zeros(2))

    def test_normalized_advantages(self):
        a = gailrl.normalize_advantages(np.random.default_rng(3).normal(5, 3, 100))
        assert abs(a.mean()) < 1e-12 and a.std() == pytest.approx(1.0, abs=1e-12)

    def test_gradient_on_two_agent_batch(self, ncfg, small_demos):
        from decompgail.env import rollout

        store = nets.init_all(ncfg, 0, disc=None)
        sc = next(s for s in small_demos.scenarios if s.n_agents >= 2)
        from conftest import subset_history

        roll = rollout(nets.NetworkPolicy(store, ncfg), sc, 0, small_demos.vocab)
        h = subset_history(nets.History.from_rollout(roll), [0, 1])
        h = nets.History(h.scenario, h.tokens[:4], h.poses[:5])
        rng = np.random.default_rng(0)
        n = 8
        old = rng.normal(-4.1, 0.1, n)
        adv = gailrl.normalize_advantages(rng.normal(size=n))

        def f(st):
            logits, _, geo = nets.policy_forward(st, [h], ncfg)
            rows, _, step, agent = nets.step_rows(geo)
            lp = ag.take(ag.log_softmax(ag.gather_rows(logits, rows)), (np.arange(n), h.tokens[step, agent]))
            return gailrl.ppo_loss(lp, old, adv, ag.Tensor(np.zeros(n)), np.zeros(n))[0]

        assert ag.grad_check(f, store, store.names("policy."), per_tensor=2) < 1e-4


class TestConfig:
    def test_defaults_from_hyperparameter_table(self):
        c = gailrl.TrainConfig()
        assert (c.gamma, c.gae_lambda, c.clip_eps, c.ppo_epochs, c.rollout_len, c.value_coef) == (
            0.99, 0.95, 0.2, 1, 16, 1e-3)
        assert (c.alpha_w, c.beta_w, c.alpha_l, c.beta_l) == (1, 10, 1, 10)
        assert (c.lr_policy, c.lr_disc, c.lr_bc, c.weight_decay) == (5e-5, 1e-4, 5e-4, 0.01)

    @pytest.mark.parametrize("bad", [{"gamma": 1.0}, {"clip_eps": 0.0}, {"beta_w": -1.0}, {"variant": "x"},
                                     {"batch": 0}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            gailrl.TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            gailrl.TrainConfig.from_dict({"lr": 1.0})

    def test_round_trip(self):
        c = gailrl.TrainConfig(batch=3, variant="no_scene")
        assert gailrl.TrainConfig.from_dict(c.to_dict()) == c


@pytest.fixture(scope="module")
def tiny(ncfg, small_demos):
    store = nets.init_all(ncfg, 0, disc=None)
    tcfg = gailrl.TrainConfig(batch=2, iterations=2)
    return store, small_demos, tcfg


class TestScoring:
    def test_zero_heads_give_ln2_rewards(self, ncfg, small_demos):
        store = nets.init_all(ncfg, 0, disc="decomp")
        hs = [nets.History.from_demo(small_demos, k) for k in range(3)]
        sc = gailrl.score_decomp(store, hs, ncfg, gailrl.TrainConfig())
        assert np.all(sc.S == 0.5) and np.all(sc.I == 0.5)
        r = gailrl.agent_rewards(sc)
        expect = np.log(2) * (1 + np.bincount(sc.pair_ego, sc.w, minlength=sc.n))
        assert np.allclose(r, expect, atol=1e-12, rtol=0)
        loss = gailrl.decomp_disc_loss(sc, sc)
        assert loss.item() == pytest.approx(np.log(2), abs=1e-12)

    def test_breakdowns_recompute(self, jittered, ncfg, small_demos):
        tcfg = gailrl.TrainConfig()
        hs = [nets.History.from_demo(small_demos, k) for k in range(3)]
        sc = gailrl.score_decomp(jittered, hs, ncfg, tcfg)
        r = gailrl.agent_rewards(sc)
        pairs = gailrl.social_pairs(hs, sc, ncfg.neighbor_radius)
        social, nbr, lam = gailrl.social_rewards(r, *pairs, sc.n, tcfg)
        recs = gailrl.breakdowns(sc, r, nbr, social, pairs, lam)
        ego, other, dist = pairs
        for k, b in enumerate(recs):
            assert gailrl.agent_reward(b.S, [(i, w) for _, i, w in b.interactions]) == pytest.approx(b.reward, abs=1e-12)
            nb = [(r[other[p]], dist[p]) for p in np.flatnonzero(ego == k)]
            assert gailrl.social_reward(b.reward, nb) == pytest.approx(b.social, abs=1e-12)
            assert all(0 < w <= 1 for _, _, w in b.interactions) and all(0 < l <= 1 for _, l in b.lambdas)

    @pytest.mark.parametrize("variant", ["no_scene", "no_inter", "mean_w", "no_lambda", "mean_lambda"])
    def test_variants(self, jittered, ncfg, small_demos, variant):
        tcfg = gailrl.TrainConfig(variant=variant)
        hs = [nets.History.from_demo(small_demos, k) for k in range(2)]
        sc = gailrl.score_decomp(jittered, hs, ncfg, tcfg)
        assert (sc.S is None) == (variant == "no_scene") and (sc.I is None) == (variant == "no_inter")
        if variant == "mean_w":
            assert np.allclose(np.bincount(sc.pair_ego, sc.w), (np.bincount(sc.pair_ego) > 0).astype(float))
        r = gailrl.agent_rewards(sc)
        pairs = gailrl.social_pairs(hs, sc, ncfg.neighbor_radius)
        social, nbr, lam = gailrl.social_rewards(r, *pairs, sc.n, tcfg)
        if variant == "no_lambda":
            assert np.array_equal(social, r)
        if variant == "mean_lambda":
            ego = pairs[0]
            assert np.allclose(np.bincount(ego, lam)[np.unique(ego)], 1.0)


class TestLoops:
    def test_zero_iterations_identity(self, tiny, tmp_path):
        store, demos, tcfg = tiny
        for disc in ("decomp", "ps"):
            res = gailrl.train_gail(store, demos, demos.scenarios, nets.NetConfig(), tcfg, 0, disc, iterations=0,
                                    log_path=tmp_path / "log.csv")
            assert res.logs == [] and res.store.names() == store.names()
            assert all(res.store[n].data.tobytes() == store[n].data.tobytes() for n in store.names())

    def test_protocol_and_frozen_encoder(self, tiny, tmp_path):
        store, demos, tcfg = tiny
        path = tmp_path / "log.csv"
        res = gailrl.train_decompgail(store, demos, demos.scenarios, nets.NetConfig(), tcfg, 0, log_path=path)
        assert not res.diverged
        assert [r["iter"] for r in res.logs] == [0, 1]
        assert gailrl.read_log_csv(path.read_text()) == gailrl.read_log_csv(gailrl.logs_to_csv(res.logs))
        assert path.read_text().splitlines()[0] == ",".join(gailrl.LOG_COLUMNS)
        for n in store.names("mapenc."):
            assert res.store[n].data.tobytes() == store[n].data.tobytes()
        assert any(not np.array_equal(res.store[n].data, store[n].data) for n in store.names("policy."))
        assert res.store.names("disc.scene.") and res.store.names("disc.inter.")

    def test_deterministic(self, tiny):
        store, demos, tcfg = tiny
        a = gailrl.train_decompgail(store, demos, demos.scenarios, nets.NetConfig(), tcfg, 3, iterations=1)
        b = gailrl.train_decompgail(store, demos, demos.scenarios, nets.NetConfig(), tcfg, 3, iterations=1)
        assert a.logs == b.logs
        assert all(np.array_equal(a.store[n].data, b.store[n].data) for n in a.store.names())

    def test_variant_manifest(self, tiny):
        store, demos, tcfg = tiny
        cfg = gailrl.TrainConfig(**{**tcfg.to_dict(), "variant": "no_scene"})
        res = gailrl.train_decompgail(store, demos, demos.scenarios, nets.NetConfig(), cfg, 0, iterations=1)
        assert not res.store.names("disc.scene.") and res.store.names("disc.inter.")

    def test_psgail_caps_differ(self, tiny):
        store, demos, tcfg = tiny
        ncfg = nets.NetConfig()
        five = [sc for sc in demos.scenarios if sc.n_agents == 5]
        a = gailrl.train_psgail(store, demos, five, ncfg, tcfg, 0, max_neighbors=0, iterations=2)
        b = gailrl.train_psgail(store, demos, five, ncfg, tcfg, 0, max_neighbors=None, iterations=2)
        assert a.store.names("disc.ps.") and not a.diverged
        assert [r["disc_std_policy"] for r in a.logs] != [r["disc_std_policy"] for r in b.logs]

    def test_divergence_guard(self, tiny):
        store, demos, tcfg = tiny
        cfg = gailrl.TrainConfig(**{**tcfg.to_dict(), "divergence_logit": 1e-6})
        res = gailrl.train_decompgail(store, demos, demos.scenarios, nets.NetConfig(), cfg, 0)
        assert res.diverged and "logit" in res.message and res.logs == []

    def test_bc_reduces_nll(self, ncfg, small_demos):
        store = nets.init_all(ncfg, 0, disc=None)
        before = gailrl.bc_metrics(store, small_demos, ncfg)[0]
        logs = gailrl.train_bc(store, small_demos, ncfg, gailrl.TrainConfig(bc_batch=4), 0, steps=30, log_every=10)
        after = gailrl.bc_metrics(store, small_demos, ncfg)[0]
        assert after < before - 0.3 and [r["step"] for r in logs] == [0, 10, 20, 29]
