"""Layered run configuration."""

import pytest

from vpe.config import RunConfig, known_keys, resolve
from vpe.errors import ConfigError


class TestRunConfig:
    def test_defaults(self):
        rc = RunConfig()
        assert rc.train().lr == 1e-4 and rc.train().batch_size == 128
        assert rc.model().latent_dim == 300 and rc.train().prototype_ratio == 200

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig().set("train.learning_rate", "1")
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig().load_text("nosection.x = 1", "f")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="parse"):
            RunConfig().set("train.iterations", "many")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            RunConfig().load_text("train.lr 0.1", "f")

    def test_file_parsing(self):
        rc = RunConfig()
        rc.load_text("# comment\ntrain.lr = 0.002  # inline\nmodel.encoder = 8x3,16x3,32x3\n"
                     "train.augment = false\n", "f")
        assert rc.train().lr == 0.002 and rc.train().augment is False
        assert rc.model().encoder == ((8, 3), (16, 3), (32, 3))

    def test_toy_preset(self):
        rc = RunConfig()
        rc.set("run.preset", "toy")
        assert rc.model().input_size == 16

    def test_invalid_section_values_rejected(self):
        rc = RunConfig()
        rc.set("train.batch_size", "0")
        with pytest.raises(ConfigError):
            rc.train()

    def test_text_round_trip(self):
        rc = RunConfig()
        rc.set("train.lr", "3e-4")
        rc.set("model.encoder", "8x3,8x3,8x3")
        again = RunConfig()
        again.load_text(rc.to_text(), "dump")
        assert again.to_text() == rc.to_text()

    def test_every_key_listed(self):
        keys = known_keys()
        assert "train.lr" in keys and "run.holdout" in keys and len(keys) == len(set(keys))


class TestPrecedence:
    def test_layers(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("train.lr = 0.1\ntrain.iterations = 7\ntrain.seed = 4\n")
        env = {"VPE_TRAIN_LR": "0.2", "VPE_TRAIN_SEED": "5", "HOME": "/x"}
        rc = resolve(str(f), {"train.lr": 0.3}, env)
        t = rc.train()
        assert (t.lr, t.seed, t.iterations) == (0.3, 5, 7)
        assert rc.sources["train.lr"] == "flag" and rc.sources["train.seed"] == "env VPE_TRAIN_SEED"

    def test_unset_flags_ignored(self):
        assert resolve(None, {"train.lr": None}, {}).train().lr == 1e-4

    def test_env_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="VPE_TRAIN_BOGUS"):
            resolve(None, {}, {"VPE_TRAIN_BOGUS": "1"})

    def test_env_multiword_key(self):
        assert resolve(None, {}, {"VPE_TRAIN_BATCH_SIZE": "32"}).train().batch_size == 32

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            resolve(str(tmp_path / "none.txt"), {}, {})
