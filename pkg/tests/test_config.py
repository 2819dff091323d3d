"""Config parsing: key=value grammar, typing, validation, round trips."""

import pytest

from defectforge.config import (
    ConfigError,
    PipelineConfig,
    config_field_types,
    dump_config,
    load_config,
    parse_config,
)


class TestParsing:
    def test_defaults_construct(self):
        cfg = PipelineConfig()
        assert cfg.working_size == 512
        assert cfg.scales == (64, 128, 256)

    def test_basic_keys(self):
        cfg = parse_config("seed = 7\nworking_size=256\nstage2_lr = 0.01\n")
        assert cfg.seed == 7
        assert cfg.working_size == 256
        assert cfg.stage2_lr == 0.01

    def test_comments_and_blanks(self):
        text = "# header\n\nseed = 3  # inline\n   \nalpha = 2.0\n"
        cfg = parse_config(text)
        assert cfg.seed == 3
        assert cfg.alpha == 2.0

    def test_tuple_values(self):
        cfg = parse_config("scales = 32, 64\nratios = 1.0,0.5\n")
        assert cfg.scales == (32, 64)
        assert cfg.ratios == (1.0, 0.5)

    def test_single_element_tuple(self):
        cfg = parse_config("ratios = 1.0")
        assert cfg.ratios == (1.0,)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="unknown config key 'learning_rate'"):
            parse_config("learning_rate = 0.1")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate config key 'seed'"):
            parse_config("seed = 1\nseed = 2\n")

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="'seed'.*as int"):
            parse_config("seed = 1.5")

    def test_bad_float(self):
        with pytest.raises(ConfigError, match="'alpha'.*as float"):
            parse_config("alpha = lots")

    def test_line_without_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("seed = 1\njust words\n")

    def test_empty_list_value(self):
        with pytest.raises(ConfigError, match="'scales'.*empty list"):
            parse_config("scales = ,")


class TestValidation:
    def test_stage2_input_multiple(self):
        with pytest.raises(ConfigError, match="multiple of 64"):
            PipelineConfig(stage2_input=100)

    def test_stage1_input_multiple(self):
        with pytest.raises(ConfigError, match="multiple of 32"):
            PipelineConfig(stage1_input=100)

    def test_channel_arity(self):
        with pytest.raises(ConfigError, match="stage1_channels"):
            PipelineConfig(stage1_channels=(8, 16))
        with pytest.raises(ConfigError, match="stage2_channels"):
            PipelineConfig(stage2_channels=(8, 16, 24))

    def test_working_size_vs_scales(self):
        with pytest.raises(ConfigError, match="smaller than the smallest"):
            PipelineConfig(working_size=32, scales=(64,))

    def test_threshold_range(self):
        with pytest.raises(ConfigError, match="selection_threshold"):
            PipelineConfig(selection_threshold=1.5)

    def test_positive_rates(self):
        with pytest.raises(ConfigError, match="stage1_lr"):
            PipelineConfig(stage1_lr=0.0)

    def test_zero_epochs_allowed(self):
        cfg = PipelineConfig(stage1_epochs=0)
        assert cfg.stage1_epochs == 0

    def test_momentum_below_one(self):
        with pytest.raises(ConfigError, match="momentum"):
            PipelineConfig(momentum=1.0)
        assert PipelineConfig(momentum=0.0).momentum == 0.0


class TestRoundTrip:
    def test_dump_parse_identity(self):
        cfg = PipelineConfig(seed=5, scales=(32, 64), stage2_lr=0.015)
        assert parse_config(dump_config(cfg)) == cfg

    def test_dump_covers_every_field(self):
        text = dump_config(PipelineConfig())
        for name in config_field_types():
            assert f"{name} = " in text

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 11\nstage2_epochs = 2\n")
        cfg = load_config(path)
        assert cfg.seed == 11
        assert cfg.stage2_epochs == 2
