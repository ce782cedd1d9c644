"""Synthetic mixture datasets: WAV trees plus line-delimited JSON manifests.

Each manifest line carries {mixture_path, source_paths, snr_db, seed}. Paths
are stored relative to the manifest's directory, so trees are relocatable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import MixSpec, mix_sources, read_wav, synth_toy_source, write_wav
from .errors import InvalidInput

DEFAULT_KINDS = ("harmonic_voice", "modulated_noise", "chirp")


@dataclass
class ManifestEntry:
    mixture_path: str
    source_paths: list
    snr_db: list
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "mixture_path": self.mixture_path,
                "source_paths": self.source_paths,
                "snr_db": self.snr_db,
                "seed": self.seed,
            },
            sort_keys=True,
        )


def write_manifest(path, entries) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(e.to_json() + "\n")


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise InvalidInput(f"manifest {path} does not exist")
    entries = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entries.append(
                    ManifestEntry(rec["mixture_path"], rec["source_paths"], rec["snr_db"], rec["seed"])
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise InvalidInput(f"{path}:{line_no}: bad manifest line ({exc})") from exc
    return entries


def load_entry_audio(entry: ManifestEntry, root) -> tuple:
    """Resolve paths against the manifest directory and load (mixture, sources)."""
    root = Path(root)
    mixture = read_wav(root / entry.mixture_path)
    sources = [read_wav(root / p).relabeled(f"source-{i + 1}") for i, p in enumerate(entry.source_paths)]
    for s in sources:
        if s.sample_rate != mixture.sample_rate:
            raise InvalidInput(f"sample rate mismatch in {entry.mixture_path}")
    return mixture, sources


def synth_split(
    out_dir,
    split: str,
    count: int,
    mix_spec: MixSpec,
    kinds=DEFAULT_KINDS,
    base_seed: int = 0,
    sample_rate: int = 8000,
) -> Path:
    """Generate `count` mixtures under out_dir/split/ and write its manifest.

    Everything is a pure function of (base_seed, split, index), so re-running
    with the same configuration reproduces identical audio and manifests.
    """
    out_dir = Path(out_dir)
    split_dir = out_dir / split
    split_dir.mkdir(parents=True, exist_ok=True)
    split_tag = abs(hash_str(split)) % (2 ** 31)
    entries = []
    for i in range(count):
        rng = np.random.default_rng([base_seed, split_tag, i])
        utt_seed = int(rng.integers(0, 2 ** 31))
        sources = [
            synth_toy_source(
                kinds[s % len(kinds)],
                mix_spec.duration,
                seed=int(rng.integers(0, 2 ** 31)),
                sample_rate=sample_rate,
            )
            for s in range(mix_spec.source_count)
        ]
        snrs = mix_spec.draw_snrs(rng)
        mixture, scaled = mix_sources(sources, mix_spec, snr_db=snrs)

        utt = f"utt{i:04d}"
        (split_dir / utt).mkdir(exist_ok=True)
        mix_rel = f"{split}/{utt}/mix.wav"
        write_wav(out_dir / mix_rel, mixture)
        src_rels = []
        for s, wav in enumerate(scaled, start=1):
            rel = f"{split}/{utt}/s{s}.wav"
            write_wav(out_dir / rel, wav)
            src_rels.append(rel)
        entries.append(ManifestEntry(mix_rel, src_rels, [round(v, 6) for v in snrs], utt_seed))

    manifest_path = out_dir / f"{split}.jsonl"
    write_manifest(manifest_path, entries)
    return manifest_path


def synth_dataset(out_dir, split_counts: dict, mix_spec: MixSpec, kinds=DEFAULT_KINDS,
                  base_seed: int = 0, sample_rate: int = 8000) -> dict:
    """Generate all requested splits; returns {split: manifest_path}."""
    return {
        split: synth_split(out_dir, split, count, mix_spec, kinds, base_seed, sample_rate)
        for split, count in split_counts.items()
        if count > 0
    }


def hash_str(s: str) -> int:
    """Stable (non-salted) string hash for seeding."""
    h = 0
    for ch in s:
        h = (h * 131 + ord(ch)) % (2 ** 31)
    return h
