import numpy as np
import pytest

from emofuse.corpus import (
    CLASS_NAMES,
    EmotionLabel,
    UtteranceRecord,
    default_label_map,
    load_manifest,
    map_label,
    synth_corpus,
    write_manifest,
)
from emofuse.errors import FormatError, LabelError, ParameterError


def test_label_map_core_entries():
    label_map = default_label_map()
    assert map_label("excitement", label_map) is EmotionLabel.HAPPY
    assert map_label("anger", label_map) is EmotionLabel.ANGRY
    assert map_label("sadness", label_map) is EmotionLabel.SAD
    assert map_label("neutral", label_map) is EmotionLabel.NEUTRAL


def test_calm_rejected_by_default():
    with pytest.raises(LabelError):
        map_label("calm", default_label_map())


def test_manifest_round_trip(tmp_path):
    records = [
        UtteranceRecord("a/u1.wav", "spk01", EmotionLabel.HAPPY, "synth"),
        UtteranceRecord("a/u2.wav", "spk02", EmotionLabel.SAD, "synth"),
    ]
    path = tmp_path / "m.csv"
    write_manifest(path, records)
    back = load_manifest(path)
    assert [(r.path, r.speaker_id, r.label, r.dataset_id) for r in back] == [
        (r.path, r.speaker_id, r.label, r.dataset_id) for r in records
    ]


def test_empty_manifest_gives_empty_list(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("path,speaker_id,raw_label,dataset_id\n")
    assert load_manifest(path) == []


def test_missing_header_rejected(tmp_path):
    path = tmp_path / "noheader.csv"
    path.write_text("a.wav,spk,angry,ds\n")
    with pytest.raises(FormatError):
        load_manifest(path)


def test_strict_mode_lists_all_bad_rows(tmp_path):
    lines = ["path,speaker_id,raw_label,dataset_id"]
    for i in range(10):
        label = "bogus" if i in (2, 6) else "angry"
        lines.append(f"u{i}.wav,spk{i},{label},ds")
    path = tmp_path / "bad.csv"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LabelError) as err:
        load_manifest(path)
    # rows are 1-indexed counting the header, so bad data rows 2 and 6 are lines 4 and 8
    assert "4" in str(err.value) and "8" in str(err.value)
    kept = load_manifest(path, strict=False)
    assert len(kept) == 8


def test_synth_corpus_counts():
    pairs = synth_corpus(n_speakers=4, n_per_class=5, seed=7)
    assert len(pairs) == 80
    per_class = {name: 0 for name in CLASS_NAMES}
    for _, rec in pairs:
        per_class[rec.label.value] += 1
    assert all(count == 20 for count in per_class.values())


def test_synth_corpus_deterministic():
    a = synth_corpus(n_speakers=2, n_per_class=2, seed=99)
    b = synth_corpus(n_speakers=2, n_per_class=2, seed=99)
    for (seg_a, rec_a), (seg_b, rec_b) in zip(a, b):
        np.testing.assert_array_equal(seg_a.samples, seg_b.samples)
        assert rec_a == rec_b


def test_synth_corpus_seed_changes_audio():
    a = synth_corpus(n_speakers=2, n_per_class=1, seed=1)
    b = synth_corpus(n_speakers=2, n_per_class=1, seed=2)
    assert not np.array_equal(a[0][0].samples, b[0][0].samples)


def test_synth_corpus_segments_are_7s_16k():
    for seg, rec in synth_corpus(n_speakers=2, n_per_class=1, seed=5):
        assert seg.sample_rate == 16000
        assert len(seg.samples) == 112000
        assert np.max(np.abs(seg.samples)) <= 1.0
        assert rec.speaker_id


def test_synth_corpus_parameter_guards():
    with pytest.raises(ParameterError):
        synth_corpus(n_speakers=1, n_per_class=5, seed=0)
    with pytest.raises(ParameterError):
        synth_corpus(n_speakers=4, n_per_class=0, seed=0)


def test_synth_corpus_classes_separable_in_energy():
    # angry recipe is loudest, sad quietest; RMS ordering must hold per speaker
    pairs = synth_corpus(n_speakers=3, n_per_class=2, seed=11)
    rms = {}
    for seg, rec in pairs:
        rms.setdefault((rec.speaker_id, rec.label.value), []).append(
            float(np.sqrt(np.mean(seg.samples**2)))
        )
    speakers = {spk for spk, _ in rms}
    for spk in speakers:
        means = {label: np.mean(rms[(spk, label)]) for label in CLASS_NAMES}
        assert means["angry"] > means["happy"] > means["neutral"] > means["sad"]
