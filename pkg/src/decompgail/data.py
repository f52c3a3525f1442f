"""Dataset assembly and on-disk layout shared by the CLI and the harnesses."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .expert import DemoSet, collect_raw_deltas, gen_demos
from .world import Scenario, TokenVocab, build_vocab, scenario_suite, split_heldout


@dataclass
class Dataset:
    scenarios: list
    train: list
    heldout: list
    vocab: TokenVocab
    demos: DemoSet  # one demonstration per scenario, in ``scenarios`` order

    def subset(self, scenarios) -> DemoSet:
        index = {sc.digest(): k for k, sc in enumerate(self.demos.scenarios)}
        return DemoSet(list(scenarios), [self.demos.tokens[index[sc.digest()]] for sc in scenarios], self.vocab)

    @property
    def train_demos(self):
        return self.subset(self.train)

    @property
    def heldout_demos(self):
        return self.subset(self.heldout)


def build_dataset(cfg, seed: int) -> Dataset:
    """Scenario suite, train / held-out split, vocabulary (from training scenarios only) and demos."""
    w = cfg.world
    scenarios = scenario_suite(w.n_scenarios, seed, w.n_agents)
    train, heldout = split_heldout(scenarios, w.heldout_frac)
    idm = cfg.expert.idm()
    vocab = build_vocab(collect_raw_deltas(train, idm, seed=seed), w.vocab_size, seed)
    demos = gen_demos(scenarios, idm, vocab)
    return Dataset(scenarios, train, heldout, vocab, demos)


def save_dataset(ds: Dataset, path):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "scenarios.jsonl"), "w") as fh:
        for sc in ds.scenarios:
            fh.write(sc.to_json() + "\n")
    with open(os.path.join(path, "vocab.json"), "w") as fh:
        fh.write(ds.vocab.to_json() + "\n")
    with open(os.path.join(path, "demos.jsonl"), "w") as fh:
        fh.write(ds.demos.to_jsonl())
    with open(os.path.join(path, "split.json"), "w") as fh:
        json.dump({"train": [sc.digest() for sc in ds.train], "heldout": [sc.digest() for sc in ds.heldout]},
                  fh, indent=1)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(os.path.join(path, "scenarios.jsonl")) as fh:
        scenarios = [Scenario.from_json(line) for line in fh if line.strip()]
    with open(os.path.join(path, "vocab.json")) as fh:
        vocab = TokenVocab.from_json(fh.read())
    with open(os.path.join(path, "demos.jsonl")) as fh:
        demos = DemoSet.from_jsonl(fh.read(), scenarios, vocab)
    with open(os.path.join(path, "split.json")) as fh:
        split = json.load(fh)
    by = {sc.digest(): sc for sc in scenarios}
    return Dataset(scenarios, [by[d] for d in split["train"]], [by[d] for d in split["heldout"]], vocab, demos)
