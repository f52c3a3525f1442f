"""Walk through the synthetic world: a scenario, the expert, tokens and the metrics checks."""

import numpy as np

from decompgail.env import collision_matrix, offroad_mask, rollout
from decompgail.expert import ExpertPolicy, collect_raw_deltas
from decompgail.world import build_vocab, gen_scenario, scenario_suite, split_heldout, tokenize

# one crossing scene with four cars; routes alternate between the two roads
sc = gen_scenario("crossing", 4, seed=3)
print("template", sc.template, "agents", sc.n_agents, "map tokens", len(sc.map.token_mid))
for a in sc.agents:
    print("  agent", a.id, "route", a.route, "pose", np.round(a.pose, 2), "speed %.2f" % a.speed)

# a small suite, split by scene hash; the vocabulary only sees training scenes
suite = scenario_suite(40, seed=0)
train, held = split_heldout(suite)
vocab = build_vocab(collect_raw_deltas(train), K=64, seed=0)
print("train", len(train), "held-out", len(held), "vocab", vocab.K, "slot 0 =", vocab.deltas[0])

# tokenization error: raw expert deltas vs their nearest vocabulary entries
raw = collect_raw_deltas(train, noise=None, mirror=False)
snapped = vocab.deltas[tokenize(raw, vocab)]
print("mean tokenization error %.3f m" % np.mean(np.hypot(*(raw[:, :2] - snapped[:, :2]).T)))

# the expert executed in token space stays clean
roll = rollout(ExpertPolicy(vocab=vocab), sc, 0, vocab)
fp = np.broadcast_to(sc.footprints(), roll.poses.shape[:2] + (2,))
print("collisions", int(collision_matrix(roll.poses, fp).any(axis=(1, 2)).sum()),
      "off-road steps", int(offroad_mask(roll.poses, sc.map).sum()))
speeds = np.hypot(*np.diff(roll.poses[..., :2], axis=0).transpose(2, 0, 1)) / sc.dt
print("final speeds", np.round(speeds[-1], 2))
