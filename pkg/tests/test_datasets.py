import json

import numpy as np
import pytest

from seppipe.datasets import (
    ManifestEntry,
    load_entry_audio,
    load_manifest,
    synth_dataset,
    synth_split,
    write_manifest,
)
from seppipe.dsp import MixSpec
from seppipe.errors import InvalidInput


def test_manifest_roundtrip(tmp_path):
    entries = [
        ManifestEntry("test/utt0000/mix.wav", ["test/utt0000/s1.wav", "test/utt0000/s2.wav"], [1.5], 42),
        ManifestEntry("test/utt0001/mix.wav", ["test/utt0001/s1.wav", "test/utt0001/s2.wav"], [-2.25], 43),
    ]
    write_manifest(tmp_path / "m.jsonl", entries)
    back = load_manifest(tmp_path / "m.jsonl")
    assert back == entries
    # one JSON object per line with the documented keys
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    record = json.loads(lines[0])
    assert set(record) == {"mixture_path", "source_paths", "snr_db", "seed"}


def test_missing_manifest(tmp_path):
    with pytest.raises(InvalidInput):
        load_manifest(tmp_path / "nope.jsonl")


def test_bad_manifest_line(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"mixture_path": "x"}\n')
    with pytest.raises(InvalidInput):
        load_manifest(tmp_path / "bad.jsonl")


def test_split_counts_and_audio(tmp_path):
    spec = MixSpec(source_count=2, seed=0, duration=0.5)
    manifest = synth_split(tmp_path, "train", 4, spec, base_seed=3)
    entries = load_manifest(manifest)
    assert len(entries) == 4
    mixture, sources = load_entry_audio(entries[0], tmp_path)
    assert len(sources) == 2
    assert len(mixture) == 4000
    assert all(len(s) == len(mixture) for s in sources)
    # mixture approximately equals the written source sum (PCM quantization)
    np.testing.assert_allclose(
        mixture.samples, sources[0].samples + sources[1].samples, atol=3.0 / 32768)


def test_regeneration_is_identical(tmp_path):
    spec = MixSpec(source_count=2, seed=0, duration=0.25)
    m1 = synth_split(tmp_path / "a", "val", 3, spec, base_seed=11)
    m2 = synth_split(tmp_path / "b", "val", 3, spec, base_seed=11)
    assert m1.read_text() == m2.read_text()
    for entry in load_manifest(m1):
        a = (tmp_path / "a" / entry.mixture_path).read_bytes()
        b = (tmp_path / "b" / entry.mixture_path).read_bytes()
        assert a == b


def test_three_source_dataset(tmp_path):
    spec = MixSpec(source_count=3, seed=0, duration=0.25)
    manifests = synth_dataset(tmp_path, {"train": 2, "val": 1, "test": 1}, spec, base_seed=5)
    assert set(manifests) == {"train", "val", "test"}
    for entry in load_manifest(manifests["train"]):
        assert len(entry.source_paths) == 3
        assert len(entry.snr_db) == 2


def test_snr_recorded_matches_audio(tmp_path):
    spec = MixSpec(source_count=2, seed=0, duration=0.5)
    manifest = synth_split(tmp_path, "test", 3, spec, base_seed=9)
    for entry in load_manifest(manifest):
        _, sources = load_entry_audio(entry, tmp_path)
        measured = 10 * np.log10(sources[0].energy() / sources[1].energy())
        assert measured == pytest.approx(entry.snr_db[0], abs=0.01)
