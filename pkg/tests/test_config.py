"""Tests for the key=value run configuration."""
import json

import pytest

from dfaf.config import (
    ConfigError,
    RunConfig,
    as_model_config,
    as_task_spec,
    as_train_config,
    config_dict,
    config_lines,
    load_run_config,
    parse_config_text,
)
from dfaf.data import answer_vocabulary


class TestParseText:
    def test_pairs_comments_and_blanks(self):
        text = "# a comment\n\ndim=32\n  order = e_then_r  \n"
        assert parse_config_text(text) == {"dim": "32", "order": "e_then_r"}

    def test_value_may_contain_equals(self):
        assert parse_config_text("gradcheck_corrupt=a=b") == {
            "gradcheck_corrupt": "a=b"
        }

    def test_syntax_errors_collected_with_line_numbers(self):
        text = "dim=32\nnot a pair\n=nokey\ndim=64\n"
        with pytest.raises(ConfigError) as err:
            parse_config_text(text, source="f.cfg")
        messages = err.value.errors
        assert len(messages) == 3
        assert "f.cfg:2" in messages[0]
        assert "f.cfg:3" in messages[1]
        assert "duplicate" in messages[2]


class TestLoadRunConfig:
    def test_no_sources_gives_defaults(self):
        assert load_run_config(env={}) == RunConfig()

    def test_override_beats_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("dim=32\nheads=2\n")
        cfg = load_run_config(str(path), ["dim=16"], env={})
        assert cfg.dim == 16
        assert cfg.heads == 2

    def test_env_seed_beats_overrides(self):
        cfg = load_run_config(None, ["seed=5"], env={"DFAF_SEED": "99"})
        assert cfg.seed == 99

    def test_bad_env_seed_reported(self):
        with pytest.raises(ConfigError, match="DFAF_SEED"):
            load_run_config(env={"DFAF_SEED": "not-a-number"})

    def test_tuple_fields_parse(self):
        cfg = load_run_config(
            None,
            ["templates=attribute, relational", "schedule_breakpoints=3,7"],
            env={},
        )
        assert cfg.templates == ("attribute", "relational")
        assert cfg.schedule_breakpoints == (3, 7)

    def test_unknown_and_unparsable_collected_together(self):
        with pytest.raises(ConfigError) as err:
            load_run_config(None, ["dim=banana", "wat=1", "epochs=x"], env={})
        joined = "\n".join(err.value.errors)
        assert "banana" in joined
        assert "wat" in joined
        assert "epochs" in joined

    def test_semantic_errors_listed_per_subsystem(self):
        with pytest.raises(ConfigError) as err:
            load_run_config(None, ["heads=3", "clip=-1"], env={})
        joined = "\n".join(err.value.errors)
        assert "model:" in joined
        assert "training:" in joined

    def test_task_semantic_error_reported(self):
        with pytest.raises(ConfigError, match="task:"):
            load_run_config(None, ["n_shapes=5"], env={})

    def test_gradcheck_keys_validated(self):
        with pytest.raises(ConfigError, match="gradcheck"):
            load_run_config(None, ["gradcheck_eps=0"], env={})

    def test_missing_file_reported(self):
        with pytest.raises(ConfigError, match="no-such-file.cfg"):
            load_run_config("no-such-file.cfg", env={})

    def test_bad_set_syntax_reported(self):
        with pytest.raises(ConfigError, match="--set"):
            load_run_config(None, ["dim"], env={})


class TestRoundTrip:
    def test_lines_reload_to_equal_config(self, tmp_path):
        cfg = load_run_config(
            None,
            [
                "templates=existence,counting",
                "noise_std=0.05",
                "base_lr=0.0005",
                "schedule_breakpoints=1,4",
                "attention_type=dyintra_only",
                "dim=32",
                "heads=2",
                "grid_rows=2",
                "grid_cols=2",
                "n_colors=7",
                "n_shapes=2",
            ],
            env={},
        )
        path = tmp_path / "echo.cfg"
        path.write_text(config_lines(cfg))
        assert load_run_config(str(path), env={}) == cfg

    def test_dict_is_json_ready_strings(self):
        payload = config_dict(RunConfig())
        assert all(isinstance(v, str) for v in payload.values())
        json.dumps(payload)

    def test_every_field_appears_exactly_once(self):
        lines = config_lines(RunConfig()).strip().splitlines()
        keys = [line.split("=", 1)[0] for line in lines]
        assert len(keys) == len(set(keys))
        assert set(keys) == set(config_dict(RunConfig()).keys())


class TestSubConfigs:
    def test_task_spec_fields_flow_through(self):
        cfg = load_run_config(
            None, ["grid_rows=2", "grid_cols=4", "seed=9", "noise_std=0.1"], env={}
        )
        spec = as_task_spec(cfg)
        assert (spec.grid_rows, spec.grid_cols) == (2, 4)
        assert spec.seed == 9
        assert spec.noise_std == 0.1

    def test_model_config_gets_answer_count_from_task(self):
        cfg = load_run_config(None, ["templates=attribute"], env={})
        spec = as_task_spec(cfg)
        n_answers = len(answer_vocabulary(spec))
        mc = as_model_config(cfg, n_answers)
        assert mc.n_answers == 4
        assert mc.d_v == cfg.d_v

    def test_train_config_shares_seed(self):
        cfg = load_run_config(None, ["seed=31"], env={})
        assert as_train_config(cfg).seed == 31
        assert as_task_spec(cfg).seed == 31
