"""End-to-end command line behavior: artifacts, idempotence, exit codes."""

import argparse
import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest

from emofuse import cli
from emofuse.audio import AudioSegment, read_wav, write_wav
from emofuse.checkpoint import load_checkpoint
from emofuse.config import config_hash, load_run_config
from emofuse.fmx import read_fmx

RUN_TOML = """\
seed = 3

[corpus]
n_speakers = 3
n_per_class = 1

[trainer]
max_epochs = 2
batch_size = 4

[pretrain]
epochs = 2
"""

N_UTTS = 3 * 1 * 4  # speakers x per-class x classes


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One tiny corpus taken through synth -> extract -> pretrain -> train."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(RUN_TOML)
    corpus = root / "corpus"
    feats = root / "feats"
    encoder = root / "encoder.ckpt"
    model_dir = root / "model"
    base = ["--config", str(cfg)]
    assert cli.main(["synth", *base, "--out", str(corpus)]) == 0
    manifest = corpus / "manifest.csv"
    assert cli.main(["extract", *base, "--manifest", str(manifest),
                     "--out", str(feats), "--workers", "2"]) == 0
    assert cli.main(["pretrain", *base, "--out", str(encoder)]) == 0
    assert cli.main(["train", *base, "--encoder-ckpt", str(encoder),
                     "--folds", "3", "--out", str(model_dir)]) == 0
    return SimpleNamespace(root=root, cfg=cfg, corpus=corpus, manifest=manifest,
                           feats=feats, encoder=encoder, model_dir=model_dir,
                           ckpt=model_dir / "model.ckpt",
                           hash=config_hash(load_run_config(cfg)))


def manifest_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestUsageErrors:
    def test_no_command(self):
        assert cli.main([]) == 2

    def test_unknown_command(self):
        assert cli.main(["transmogrify"]) == 2

    def test_extract_requires_manifest(self):
        assert cli.main(["extract"]) == 2

    def test_finetune_requires_source_ckpt(self, tmp_path):
        assert cli.main(["finetune", "--encoder-ckpt", "e.ckpt",
                         "--subset", "speakers:0.5",
                         "--out", str(tmp_path)]) == 2

    def test_bad_subset_value(self, tmp_path):
        for bad in ("bogus", "speakers:0", "speakers:1.5", "segments:0.5"):
            assert cli.main(["finetune", "--encoder-ckpt", "e.ckpt",
                             "--source-ckpt", "m.ckpt", "--subset", bad,
                             "--out", str(tmp_path)]) == 2

    def test_bad_feature_kind(self):
        assert cli.main(["extract", "--manifest", "m.csv",
                         "--features", "mfcc,spectrogram"]) == 2

    def test_missing_config_file_is_a_runtime_error(self, capsys):
        assert cli.main(["synth", "--config", "/no/such/file.toml",
                         "--out", "x"]) == 1
        assert "error:" in capsys.readouterr().err


class TestParseSubset:
    def test_fraction_forms(self):
        policy = cli.parse_subset("speakers:0.2")
        assert (policy.kind, policy.fraction) == ("speakers", 0.2)
        policy = cli.parse_subset("utterances:1/10")
        assert (policy.kind, policy.fraction) == ("utterances", 0.1)

    def test_rejects_malformed(self):
        for bad in ("speakers", "speakers:", "speakers:a/b", "frames:0.5"):
            with pytest.raises(argparse.ArgumentTypeError):
                cli.parse_subset(bad)


class TestSynth:
    def test_corpus_layout(self, ws):
        rows = manifest_rows(ws.manifest)
        assert len(rows) == N_UTTS
        assert sorted(rows[0]) == ["dataset_id", "path", "raw_label", "speaker_id"]
        for row in rows:
            assert (ws.corpus / row["path"]).exists()

    def test_wavs_are_readable_16k(self, ws):
        row = manifest_rows(ws.manifest)[0]
        seg = read_wav(ws.corpus / row["path"])
        assert seg.sample_rate == 16000
        assert seg.samples.size > 0


class TestExtract:
    def test_one_file_per_utterance_per_kind(self, ws):
        made = sorted(p.name for p in ws.feats.rglob("*.fmx"))
        assert len(made) == N_UTTS * 2
        assert sum(n.endswith(".mfcc.fmx") for n in made) == N_UTTS
        assert sum(n.endswith(".prosody.fmx") for n in made) == N_UTTS

    def test_fmx_contents(self, ws):
        mfcc_path = next(iter(sorted(ws.feats.rglob("*.mfcc.fmx"))))
        matrix, meta = read_fmx(mfcc_path)
        assert matrix.data.shape == (349, 39)
        assert meta["kind"] == "mfcc"
        assert meta["n_segments"] == 1
        assert meta["config_hash"] == ws.hash
        pros_path = next(iter(sorted(ws.feats.rglob("*.prosody.fmx"))))
        matrix, meta = read_fmx(pros_path)
        assert matrix.data.shape == (1, 103)
        assert meta["kind"] == "prosody"

    def test_rerun_skips_everything(self, ws, capsys):
        before = {p: p.stat().st_mtime_ns for p in ws.feats.rglob("*.fmx")}
        assert cli.main(["extract", "--config", str(ws.cfg),
                         "--manifest", str(ws.manifest),
                         "--out", str(ws.feats), "--workers", "1"]) == 0
        line = capsys.readouterr().out
        assert f"extracted 0 files, skipped {N_UTTS * 2} up-to-date files" in line
        after = {p: p.stat().st_mtime_ns for p in ws.feats.rglob("*.fmx")}
        assert before == after

    def test_changed_wav_invalidates_cache(self, ws, tmp_path, capsys):
        row = manifest_rows(ws.manifest)[0]
        wav = tmp_path / "one.wav"
        seg = read_wav(ws.corpus / row["path"])
        write_wav(wav, seg)
        mani = tmp_path / "manifest.csv"
        with mani.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "speaker_id", "raw_label", "dataset_id"])
            writer.writerow(["one.wav", row["speaker_id"], row["raw_label"],
                             row["dataset_id"]])
        args = ["extract", "--config", str(ws.cfg), "--manifest", str(mani),
                "--out", str(tmp_path / "f"), "--workers", "1"]
        assert cli.main(args) == 0
        assert "extracted 2 files" in capsys.readouterr().out
        write_wav(wav, AudioSegment(seg.samples * 0.5, seg.sample_rate))
        assert cli.main(args) == 0
        assert "extracted 2 files, skipped 0" in capsys.readouterr().out

    def test_corrupted_wav_fails_naming_the_file(self, ws, tmp_path, capsys):
        rows = manifest_rows(ws.manifest)[:2]
        good = tmp_path / "good.wav"
        write_wav(good, read_wav(ws.corpus / rows[0]["path"]))
        (tmp_path / "bad.wav").write_bytes(b"RIFF junk that is not a wav")
        mani = tmp_path / "manifest.csv"
        with mani.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "speaker_id", "raw_label", "dataset_id"])
            writer.writerow(["good.wav", rows[0]["speaker_id"],
                             rows[0]["raw_label"], rows[0]["dataset_id"]])
            writer.writerow(["bad.wav", rows[1]["speaker_id"],
                             rows[1]["raw_label"], rows[1]["dataset_id"]])
        out = tmp_path / "f"
        assert cli.main(["extract", "--config", str(ws.cfg),
                         "--manifest", str(mani), "--out", str(out),
                         "--workers", "1"]) == 1
        assert "bad.wav" in capsys.readouterr().err
        assert len(list(out.rglob("*.fmx"))) == 2  # the good file still landed

    def test_embeddings_require_encoder_ckpt(self, ws, capsys):
        assert cli.main(["extract", "--config", str(ws.cfg),
                         "--manifest", str(ws.manifest),
                         "--out", str(ws.feats),
                         "--features", "ssrl-embed"]) == 2
        assert "--encoder-ckpt" in capsys.readouterr().err

    def test_embedding_extraction(self, ws, tmp_path):
        assert cli.main(["extract", "--config", str(ws.cfg),
                         "--manifest", str(ws.manifest),
                         "--out", str(tmp_path),
                         "--features", "ssrl-embed",
                         "--encoder-ckpt", str(ws.encoder)]) == 0
        made = sorted(tmp_path.rglob("*.ssrl-embed.fmx"))
        assert len(made) == N_UTTS
        matrix, meta = read_fmx(made[0])
        assert matrix.data.shape == (349, 24)
        assert meta["kind"] == "ssrl-embed"

    def test_default_cache_dir_honors_env(self, ws, tmp_path, monkeypatch):
        monkeypatch.setenv("EMOFUSE_CACHE", str(tmp_path / "cache"))
        assert cli.cache_dir() == tmp_path / "cache"
        assert cli.main(["extract", "--config", str(ws.cfg),
                         "--manifest", str(ws.manifest),
                         "--features", "mfcc", "--workers", "1"]) == 0
        assert len(list((tmp_path / "cache").rglob("*.mfcc.fmx"))) == N_UTTS


class TestPretrain:
    def test_checkpoint_and_history(self, ws):
        tensors, config = load_checkpoint(ws.encoder)
        assert config["ssrl"]["embed_dim"] == 24
        assert config["config_hash"] == ws.hash
        assert tensors
        with ws.encoder.with_suffix(".history.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["epoch"] for r in rows] == ["0", "1", "2"]
        losses = [float(r["masked_nll"]) for r in rows]
        assert all(np.isfinite(losses))

    def test_wrong_checkpoint_kind_is_rejected(self, ws, capsys):
        # encoder slot given a fusion model checkpoint and vice versa
        assert cli.main(["evaluate", "--config", str(ws.cfg),
                         "--encoder-ckpt", str(ws.ckpt),
                         "--source-ckpt", str(ws.ckpt)]) == 1
        assert "not an encoder checkpoint" in capsys.readouterr().err
        assert cli.main(["evaluate", "--config", str(ws.cfg),
                         "--encoder-ckpt", str(ws.encoder),
                         "--source-ckpt", str(ws.encoder)]) == 1
        assert "not a fusion model checkpoint" in capsys.readouterr().err


class TestTrain:
    def test_artifact_set(self, ws):
        names = {p.name for p in ws.model_dir.iterdir()}
        assert {"model.ckpt", "results.json", "results_fold00.json",
                "confusion.csv", "confusion.png", "history_fold00.csv",
                "history.png"} <= names

    def test_results_json_identifies_the_run(self, ws):
        payload = json.loads((ws.model_dir / "results.json").read_text())
        assert payload["schema_version"] == 1
        assert payload["n_folds"] == 1
        assert payload["config_hash"] == ws.hash
        assert payload["seed"] == 3
        fold = json.loads((ws.model_dir / "results_fold00.json").read_text())
        assert fold["fold"] == 0
        assert 1 <= fold["epochs_run"] <= 2
        assert fold["config_hash"] == ws.hash

    def test_checkpoint_config_complete(self, ws):
        _, config = load_checkpoint(ws.ckpt)
        assert config["config_hash"] == ws.hash
        assert "model" in config and "stats" in config


class TestKfold:
    def test_per_fold_jsons_and_byte_stable_aggregate(self, ws, tmp_path):
        base = ["kfold", "--config", str(ws.cfg),
                "--encoder-ckpt", str(ws.encoder), "--folds", "3"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main([*base, "--out", str(out1)]) == 0
        assert cli.main([*base, "--out", str(out2)]) == 0
        for k in range(3):
            assert (out1 / f"results_fold{k:02d}.json").exists()
        payload = json.loads((out1 / "results.json").read_text())
        assert payload["n_folds"] == 3
        assert len(payload["folds"]) == 3
        assert (out1 / "results.json").read_bytes() \
            == (out2 / "results.json").read_bytes()
        assert (out1 / "confusion.csv").read_bytes() \
            == (out2 / "confusion.csv").read_bytes()


class TestFinetune:
    def test_transfer_run_logs_selected_speakers(self, ws, tmp_path, capsys):
        cfg = tmp_path / "shifted.toml"
        cfg.write_text(RUN_TOML.replace(
            "n_per_class = 1", 'n_per_class = 1\nrecipe_set = "shifted"'))
        out = tmp_path / "ft"
        assert cli.main(["finetune", "--config", str(cfg),
                         "--encoder-ckpt", str(ws.encoder),
                         "--source-ckpt", str(ws.ckpt),
                         "--subset", "speakers:0.5",
                         "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "selected speakers:" in stdout
        assert (out / "model.ckpt").exists()
        assert (out / "results.json").exists()
        # the saved model keeps the source architecture section
        _, config = load_checkpoint(out / "model.ckpt")
        assert config["model"] == load_checkpoint(ws.ckpt)[1]["model"]


class TestEvaluate:
    def test_stdout_payload_and_artifacts(self, ws, tmp_path, capsys):
        out = tmp_path / "ev"
        assert cli.main(["evaluate", "--config", str(ws.cfg),
                         "--encoder-ckpt", str(ws.encoder),
                         "--source-ckpt", str(ws.ckpt),
                         "--out", str(out)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["n_utterances"] == N_UTTS
        assert 0.0 <= payload["wa"] <= 1.0
        assert 0.0 <= payload["ua"] <= 1.0
        assert payload["config_hash"] == ws.hash
        assert payload["seed"] == 3
        assert json.loads((out / "evaluation.json").read_text()) == payload
        assert (out / "confusion.csv").exists()
        assert (out / "confusion.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_seed_flag_overrides_config(self, ws, capsys):
        assert cli.main(["evaluate", "--config", str(ws.cfg), "--seed", "42",
                         "--encoder-ckpt", str(ws.encoder),
                         "--source-ckpt", str(ws.ckpt)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["seed"] == 42
        assert payload["config_hash"] != ws.hash  # the seed is part of the config
