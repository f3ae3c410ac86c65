"""Pipeline configuration parsing and round trips."""

import pytest

from acdforge import config as C
from acdforge.errors import ConfigError


class TestParse:
    def test_empty_text_gives_defaults(self):
        assert C.parse_config("") == C.default_config()

    def test_partial_section_overrides(self):
        cfg = C.parse_config("[train]\nepochs = 33\nlr0 = 0.2\n")
        assert cfg.train.epochs == 33
        assert cfg.train.lr0 == 0.2
        assert cfg.train.momentum == 0.9          # untouched default
        assert cfg.model == C.default_config().model

    def test_round_trip_equality(self):
        cfg = C.default_config()
        cfg.train.epochs = 120
        cfg.train.schedule = (40, 80)
        cfg.prune.prune_sfeb = True
        cfg.data.kind = "csv"
        cfg.data.csv_path = "meta.csv"
        text = C.config_to_text(cfg)
        again = C.parse_config(text)
        assert again == cfg
        assert C.config_to_text(again) == text

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            C.parse_config("[optimizer]\nlr = 1\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            C.parse_config("[train]\nlearning_rate = 0.1\n")

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            C.parse_config("[train]\nepochs = many\n")

    def test_bad_schedule(self):
        with pytest.raises(ConfigError, match="schedule"):
            C.parse_config("[train]\nschedule = 100;200\n")

    def test_empty_schedule(self):
        cfg = C.parse_config("[train]\nschedule =\n")
        assert cfg.train.schedule == ()

    def test_booleans(self):
        for raw, want in [("true", True), ("yes", True), ("1", True),
                          ("false", False), ("no", False), ("0", False)]:
            cfg = C.parse_config(f"[prune]\nprune_sfeb = {raw}\n")
            assert cfg.prune.prune_sfeb is want
        with pytest.raises(ConfigError, match="boolean"):
            C.parse_config("[prune]\nprune_sfeb = maybe\n")

    def test_malformed_text(self):
        with pytest.raises(ConfigError, match="malformed"):
            C.parse_config("epochs = 3\n")       # key before any section


class TestValidation:
    def test_csv_kind_needs_path(self):
        with pytest.raises(ConfigError, match="csv_path"):
            C.parse_config("[data]\nkind = csv\n")

    def test_unknown_data_kind(self):
        with pytest.raises(ConfigError, match="kind"):
            C.parse_config("[data]\nkind = streaming\n")

    def test_nonpositive_model_dim(self):
        with pytest.raises(ConfigError, match="positive"):
            C.parse_config("[model]\nn_cls = 0\n")

    def test_stage_validation_surfaces_as_config_error(self):
        with pytest.raises(ConfigError):
            C.parse_config("[prune]\nmethod = random\n")
        with pytest.raises(ConfigError):
            C.parse_config("[distill]\ntemperature = -1\n")


class TestFiles:
    def test_save_and_load(self, tmp_path):
        cfg = C.default_config()
        cfg.run.seed = 9
        path = str(tmp_path / "pipe.ini")
        C.save_config(path, cfg)
        assert C.load_config(path) == cfg
