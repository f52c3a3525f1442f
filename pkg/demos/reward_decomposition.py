"""Score one demonstration with randomly initialised discriminators and show the reward pieces."""

import numpy as np

from decompgail import gailrl, nets
from decompgail.checks import _jitter_heads
from decompgail.expert import gen_demos
from decompgail.world import scenario_suite

suite = scenario_suite(6, seed=0)
demos = gen_demos(suite, K=64, seed=0)
cfg = nets.NetConfig()
tcfg = gailrl.TrainConfig()

# freshly initialised heads are zero, so every score starts at exactly 0.5
store = nets.init_all(cfg, 0, disc="decomp")
hist = [nets.History.from_demo(demos, 0)]
sc = gailrl.score_decomp(store, hist, cfg, tcfg)
print("untrained: S in", (sc.S.min(), sc.S.max()), "I in", (sc.I.min(), sc.I.max()))

# random heads give a non-trivial breakdown
_jitter_heads(store, np.random.default_rng(7), scale=0.3)
sc = gailrl.score_decomp(store, hist, cfg, tcfg)
r = gailrl.agent_rewards(sc)
pairs = gailrl.social_pairs(hist, sc, cfg.neighbor_radius)
social, nbr, lam = gailrl.social_rewards(r, *pairs, sc.n, tcfg)
recs = gailrl.breakdowns(sc, r, nbr, social, pairs, lam)
for b in recs[:: max(1, len(recs) // 6)]:
    inter = ", ".join("j=%d I=%.3f w=%.3f" % x for x in b.interactions)
    print("S=%.3f  [%s]  agent reward %.3f  social %.3f" % (b.S, inter, b.reward, b.social))

# the scene score of agent 0 ignores every other car
h = hist[0]
base = nets.scene_score(store, 0, h, cfg)
moved = nets.History(h.scenario, h.tokens.copy(), h.poses.copy())
moved.poses[:, 1:, :2] += 5.0
print("scene score before / after moving the other cars: %.17g / %.17g" % (base, nets.scene_score(store, 0, moved, cfg)))
