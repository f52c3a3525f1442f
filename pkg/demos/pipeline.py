"""End-to-end run: dataset, behaviour cloning, adversarial fine-tuning and held-out metrics.

Uses the desk preset in configs/desk.json. Expect roughly fifteen minutes on one core.
"""

import os
import sys

from decompgail import evaluation, gailrl, nets
from decompgail.config import Config
from decompgail.data import build_dataset

cfg = Config.load(os.path.join(os.path.dirname(__file__), "..", "configs", "desk.json"))
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

ds = build_dataset(cfg, seed)
print("scenes: train", len(ds.train), "held-out", len(ds.heldout))

store = nets.init_all(cfg.nets, seed, disc=None)
logs = gailrl.train_bc(store, ds.train_demos, cfg.nets, cfg.train, seed, cfg.train.bc_steps, log_every=500)
for row in logs:
    print("bc step %4d  nll %.3f" % (row["step"], row["nll"]))
nll, top1 = gailrl.bc_metrics(store, ds.heldout_demos, cfg.nets)
print("held-out nll %.3f  top-1 %.3f" % (nll, top1))

res = gailrl.train_decompgail(store, ds.train_demos, ds.train, cfg.nets, cfg.train, seed)
print("fine-tuning diverged:", res.diverged, " final-window score mean/std: %.3f / %.3f"
      % evaluation.window_stats(res.logs))

ref = evaluation.expert_reference(ds.heldout, ds.vocab)
for name, ckpt in (("bc", store), ("decompgail", res.store)):
    m = evaluation.evaluate(ckpt, ds.heldout, ds.vocab, cfg.nets, cfg.eval.rollouts, seed, reference=ref)
    print("%-10s collision %.4f  off-road %.4f  speed JSD %.4f  minADE %.3f"
          % (name, 1 - m.collision_likelihood, m.offroad_rate, m.speed_jsd, m.min_ade))
