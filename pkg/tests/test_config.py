"""JSON configuration sections and dataset assembly / on-disk layout."""

import json

import numpy as np
import pytest

from decompgail.config import Config
from decompgail.data import build_dataset, load_dataset, save_dataset
from decompgail.world import ConfigError


class TestConfig:
    def test_empty_object_gives_defaults(self):
        assert Config.from_dict({}) == Config()

    def test_json_round_trip(self, tmp_path):
        cfg = Config.from_dict({"world": {"n_scenarios": 10}, "train": {"batch": 4}, "eval": {"rollouts": 3}})
        p = tmp_path / "c.json"
        p.write_text(cfg.to_json())
        assert Config.load(p) == cfg

    def test_vocab_size_drives_K(self):
        assert Config.from_dict({"world": {"vocab_size": 32}}).nets.K == 32

    @pytest.mark.parametrize("d", [
        [],
        {"bogus": {}},
        {"train": {"nope": 1}},
        {"train": []},
        {"world": {"heldout_frac": 1.0}},
        {"world": {"n_agents": [4, 3]}},
        {"nets": {"hidden": 0}},
        {"expert": {"T": -1.0}},
        {"world": {"n_agents": [3, 12]}},
        {"eval": {"rollouts": 0}},
    ])
    def test_rejected(self, d):
        with pytest.raises(ConfigError):
            Config.from_dict(d)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            Config.load(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            Config.load(tmp_path / "bad.json")


@pytest.fixture(scope="module")
def small_cfg():
    return Config.from_dict({"world": {"n_scenarios": 20}})


class TestDataset:
    def test_split_and_vocab(self, small_cfg):
        ds = build_dataset(small_cfg, 0)
        assert len(ds.train) + len(ds.heldout) == 20 and ds.heldout
        assert not {sc.digest() for sc in ds.train} & {sc.digest() for sc in ds.heldout}
        assert ds.vocab.K == 64 and np.array_equal(ds.vocab.deltas[0], np.zeros(3))
        assert ds.train_demos.scenarios == ds.train

    def test_vocab_ignores_heldout(self, small_cfg):
        ds = build_dataset(small_cfg, 0)
        from decompgail.expert import collect_raw_deltas
        from decompgail.world import build_vocab

        again = build_vocab(collect_raw_deltas(ds.train, small_cfg.expert.idm(), seed=0), 64, 0)
        assert np.array_equal(again.deltas, ds.vocab.deltas)

    def test_deterministic(self, small_cfg):
        a, b = build_dataset(small_cfg, 2), build_dataset(small_cfg, 2)
        assert a.demos.to_jsonl() == b.demos.to_jsonl() and a.vocab.to_json() == b.vocab.to_json()

    def test_save_load_round_trip(self, small_cfg, tmp_path):
        ds = build_dataset(small_cfg, 1)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert [sc.digest() for sc in back.heldout] == [sc.digest() for sc in ds.heldout]
        assert back.demos.to_jsonl() == ds.demos.to_jsonl()
        save_dataset(back, tmp_path / "again")
        for f in ("scenarios.jsonl", "vocab.json", "demos.jsonl", "split.json"):
            assert (tmp_path / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
        assert set(json.loads((tmp_path / "split.json").read_text())) == {"train", "heldout"}
