"""Run-config resolution: defaults, file loading, overrides, hashing."""

import json

import pytest

from emofuse.config import (CorpusSpec, PretrainSpec, RunConfig, config_hash,
                            default_run_config, load_run_config,
                            run_config_to_dict)
from emofuse.errors import ConfigError, ParameterError


class TestDefaults:
    def test_default_config_is_coherent(self):
        cfg = default_run_config()
        assert cfg.model.ssrl_dim == cfg.encoder.embed_dim
        assert cfg.model.ssrl_n_layers == cfg.encoder.n_layers
        assert cfg.encoder.input_dim == cfg.model.mfcc_dim
        assert cfg.trainer.lr == 1e-3

    def test_dict_view_is_json_serializable(self):
        tree = run_config_to_dict(default_run_config())
        json.dumps(tree)  # would raise on tuples/ndarrays
        assert tree["model"]["conv"]["kernel"] == [8, 12]

    def test_spec_guards(self):
        with pytest.raises(ParameterError):
            CorpusSpec(n_speakers=1)
        with pytest.raises(ParameterError):
            CorpusSpec(n_per_class=0)
        with pytest.raises(ParameterError):
            PretrainSpec(epochs=0)
        with pytest.raises(ParameterError):
            PretrainSpec(lr=0.0)

    def test_cross_section_coherence_enforced(self):
        base = default_run_config()
        with pytest.raises(ConfigError, match="ssrl_dim"):
            RunConfig(model=base.model, encoder=type(base.encoder)(
                n_layers=2, embed_dim=32, n_clusters=12, n_heads=2, ff_dim=48,
                dropout_p=0.0, input_dim=39, selected_layers=[0, 2]))


class TestLoading:
    def test_toml_and_json_resolve_identically(self, tmp_path):
        toml = tmp_path / "run.toml"
        toml.write_text('seed = 9\n[trainer]\nmax_epochs = 2\n')
        as_json = tmp_path / "run.json"
        as_json.write_text(json.dumps({"seed": 9, "trainer": {"max_epochs": 2}}))
        a = load_run_config(toml)
        b = load_run_config(as_json)
        assert a.seed == b.seed == 9
        assert a.trainer.max_epochs == b.trainer.max_epochs == 2
        assert config_hash(a) == config_hash(b)

    def test_partial_sections_keep_other_defaults(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text('[corpus]\nn_speakers = 7\n')
        cfg = load_run_config(p)
        assert cfg.corpus.n_speakers == 7
        assert cfg.corpus.n_per_class == default_run_config().corpus.n_per_class

    def test_unknown_keys_rejected(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text('bogus = 1\n')
        with pytest.raises(ConfigError, match="bogus"):
            load_run_config(p)
        p.write_text('[trainer]\nlearning_rate = 0.1\n')
        with pytest.raises(ConfigError, match="trainer.learning_rate"):
            load_run_config(p)

    def test_scalar_where_table_expected(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({"trainer": 5}))
        with pytest.raises(ConfigError, match="table"):
            load_run_config(p)

    def test_unsupported_extension(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text("seed: 1\n")
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_section_validation_propagates(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text('[trainer]\nlr = -0.5\n')
        with pytest.raises(ParameterError):
            load_run_config(p)


class TestOverrides:
    def test_dotted_overrides_apply_after_file(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text('seed = 9\n')
        cfg = load_run_config(p, overrides={"seed": 11, "trainer.batch_size": 8})
        assert cfg.seed == 11
        assert cfg.trainer.batch_size == 8

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="trainer.bogus"):
            load_run_config(None, overrides={"trainer.bogus": 1})
        with pytest.raises(ConfigError):
            load_run_config(None, overrides={"nope": 1})


class TestHash:
    def test_stable_and_hex(self):
        h = config_hash(default_run_config())
        assert h == config_hash(default_run_config())
        assert len(h) == 64
        int(h, 16)

    def test_sensitive_to_every_section(self, tmp_path):
        base = config_hash(default_run_config())
        edits = ['seed = 1', '[corpus]\nn_per_class = 2', '[encoder]\nn_clusters = 9',
                 '[model]\npooled_dim = 32', '[trainer]\nbatch_size = 16',
                 '[pretrain]\nepochs = 3']
        seen = {base}
        for k, body in enumerate(edits):
            p = tmp_path / f"run{k}.toml"
            p.write_text(body + "\n")
            h = config_hash(load_run_config(p))
            assert h not in seen
            seen.add(h)
