"""Held-out metrics plus the stability and ablation experiment harnesses."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import rel_entr

from . import gailrl, nets
from .env import collision_matrix, offroad_mask, rollout_batch
from .expert import ExpertPolicy

SPEED_BINS = np.linspace(0.0, 15.0, 21)
STABILITY_WINDOW = 20


@dataclass
class MetricsReport:
    collision_likelihood: float
    offroad_rate: float
    speed_jsd: float
    min_ade: float
    rollouts: int
    scenarios: int

    def to_csv(self):
        return rows_to_csv([asdict(self)], [f.name for f in fields(self)])

    @classmethod
    def from_csv(cls, text):
        row = read_csv(text)[0]
        return cls(*(int(row[f.name]) if f.type in (int, "int") else float(row[f.name]) for f in fields(cls)))


def speed_histogram(speeds):
    counts, _ = np.histogram(np.clip(np.asarray(speeds, dtype=float), 0.0, 15.0), bins=SPEED_BINS)
    return counts / max(counts.sum(), 1)


def jsd(p, q):
    """Jensen-Shannon divergence (natural log) of two histograms."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    return float(0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum())


def rollout_seed(seed, k, r):
    return int(np.random.SeedSequence([seed, k, r]).generate_state(1)[0])


def expert_reference(scenarios, vocab):
    """Expert trajectories (T + 1, N, 3) for each scenario, executed in token space."""
    rolls = rollout_batch(ExpertPolicy(vocab=vocab), scenarios, [0] * len(scenarios), vocab)
    return [r.poses for r in rolls]


def evaluate_policy(make_policy, scenarios, vocab, R=32, seed=0, batch=64, reference=None) -> MetricsReport:
    """Roll ``R`` seeded episodes per scenario and aggregate the desk metrics.

    ``make_policy()`` returns a fresh policy object per chunk of ``batch``
    episodes. ``reference`` are expert pose arrays (defaults to the expert run
    on each scenario).
    """
    if reference is None:
        reference = expert_reference(scenarios, vocab)
    jobs = [(k, r) for k in range(len(scenarios)) for r in range(R)]
    collided = offroaded = agents = 0
    speeds = []
    ade = np.full((len(scenarios), R), np.inf)
    for start in range(0, len(jobs), batch):
        chunk = jobs[start:start + batch]
        scs = [scenarios[k] for k, _ in chunk]
        rolls = rollout_batch(make_policy(), scs, [rollout_seed(seed, k, r) for k, r in chunk], vocab)
        for (k, r), ro in zip(chunk, rolls):
            sc = scenarios[k]
            p = ro.poses
            fp = sc.footprints()
            hit = np.zeros(sc.n_agents, dtype=bool)
            for t in range(1, len(p)):
                hit |= collision_matrix(p[t], fp).any(axis=1)
            off = offroad_mask(p[1:], sc.map).any(axis=0)
            collided += int(hit.sum())
            offroaded += int(off.sum())
            agents += sc.n_agents
            speeds.append((np.hypot(*np.diff(p[..., :2], axis=0).transpose(2, 0, 1)) / sc.dt).ravel())
            ade[k, r] = float(np.mean(np.hypot(*(p[1:, :, :2] - reference[k][1:, :, :2]).transpose(2, 0, 1))))
    ref_speeds = np.concatenate([(np.hypot(*np.diff(p[..., :2], axis=0).transpose(2, 0, 1)) / sc.dt).ravel()
                                 for p, sc in zip(reference, scenarios)])
    return MetricsReport(
        collision_likelihood=1.0 - collided / agents,
        offroad_rate=offroaded / agents,
        speed_jsd=jsd(speed_histogram(np.concatenate(speeds)), speed_histogram(ref_speeds)),
        min_ade=float(np.mean(ade.min(axis=1))),
        rollouts=R,
        scenarios=len(scenarios),
    )


def evaluate(store, scenarios, vocab, ncfg, R=32, seed=0, batch=64, reference=None) -> MetricsReport:
    """Metrics of the sampling policy stored in checkpoint ``store``."""
    cache = nets.MapCache(store, ncfg)
    return evaluate_policy(lambda: nets.NetworkPolicy(store, ncfg, cache), scenarios, vocab, R, seed, batch,
                           reference)


# ---------------------------------------------------------------------------
# harnesses


@dataclass
class StabilityReport:
    rows: list  # dicts: config, iter, mean, std
    summary: list  # dicts: config, window_mean, window_std, diverged

    def window(self, config):
        return next(r for r in self.summary if r["config"] == config)

    def verdict(self):
        """True when DecompGAIL's final-window score std is below the uncapped PS-GAIL's."""
        return self.window("decompgail")["window_std"] < self.window("psgail_all")["window_std"]

    def to_csv(self):
        return rows_to_csv(self.rows, ["config", "iter", "mean", "std"])

    def summary_csv(self):
        return rows_to_csv(self.summary, ["config", "window_mean", "window_std", "diverged"])

    @classmethod
    def from_csv(cls, text, summary_text):
        rows = [{"config": r["config"], "iter": int(r["iter"]), "mean": float(r["mean"]), "std": float(r["std"])}
                for r in read_csv(text)]
        summ = [{"config": r["config"], "window_mean": float(r["window_mean"]),
                 "window_std": float(r["window_std"]), "diverged": r["diverged"] == "True"}
                for r in read_csv(summary_text)]
        return cls(rows, summ)


def cap_name(cap):
    return "psgail_all" if cap is None else f"psgail_m{cap}"


def window_stats(logs, window=STABILITY_WINDOW):
    """Mean of the per-iteration score means and stds over the last ``window`` iterations."""
    if not logs:
        return 0.5, 0.0  # zero-initialised heads score exactly 0.5 everywhere
    tail = logs[-window:]
    return float(np.mean([r["disc_mean_policy"] for r in tail])), float(np.mean([r["disc_std_policy"] for r in tail]))


def stability_harness(store, demos, scenarios, ncfg, tcfg, seed=0, iterations=None, caps=(5, 10, None),
                      window=STABILITY_WINDOW) -> StabilityReport:
    """Fine-tune with each discriminator under identical seeds and track policy-sample scores."""
    runs = [(cap_name(c), "ps", c) for c in caps] + [("decompgail", "decomp", None)]
    rows, summary = [], []
    for name, disc, cap in runs:
        res = gailrl.train_gail(store, demos, scenarios, ncfg, tcfg, seed, disc, cap, iterations)
        for r in res.logs:
            rows.append({"config": name, "iter": r["iter"], "mean": r["disc_mean_policy"], "std": r["disc_std_policy"]})
        m, s = window_stats(res.logs, window)
        summary.append({"config": name, "window_mean": m, "window_std": s, "diverged": res.diverged})
    return StabilityReport(rows, summary)


ABLATION_ROWS = (
    ("w/o DecompGAIL", None),
    ("w/o scene realism", "no_scene"),
    ("w/o interact realism", "no_inter"),
    ("mean interact realism", "mean_w"),
    ("w/o neighborhood reward", "no_lambda"),
    ("mean neighborhood reward", "mean_lambda"),
    ("full", "full"),
)
ABLATION_COLUMNS = ("variant", "collision_likelihood", "offroad_rate", "speed_jsd", "min_ade", "diverged")


def ablation_harness(store, demos, scenarios, heldout, ncfg, tcfg, seed=0, iterations=None, R=32, eval_seed=0,
                     rows=ABLATION_ROWS):
    """Train each ablation variant from the same checkpoint and seed; evaluate on ``heldout``.

    Returns (table rows, {variant: checkpoint}).
    """
    reference = expert_reference(heldout, demos.vocab)
    table, stores = [], {}
    for label, variant in rows:
        if variant is None:
            out, diverged = store, False
        else:
            cfg = gailrl.TrainConfig(**{**tcfg.to_dict(), "variant": variant})
            res = gailrl.train_decompgail(store, demos, scenarios, ncfg, cfg, seed, iterations)
            out, diverged = res.store, res.diverged
        m = evaluate(out, heldout, demos.vocab, ncfg, R, eval_seed, reference=reference)
        stores[label] = out
        table.append({"variant": label, "collision_likelihood": m.collision_likelihood,
                      "offroad_rate": m.offroad_rate, "speed_jsd": m.speed_jsd, "min_ade": m.min_ade,
                      "diverged": diverged})
    return table, stores


def read_ablation_csv(text):
    out = []
    for r in read_csv(text):
        row = {"variant": r["variant"], "diverged": r["diverged"] == "True"}
        row.update({k: float(r[k]) for k in ABLATION_COLUMNS[1:-1]})
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# CSV helpers (header row, LF endings, '.' decimals, repr floats for exact round trips)


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))
