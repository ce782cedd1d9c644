import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# allow running the suite from a source checkout without installing
SRC = Path(__file__).resolve().parent.parent / "src"
if SRC.exists() and str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from seppipe.dsp import MixSpec, mix_sources, synth_toy_source  # noqa: E402


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_mixture(seed: int, duration: float = 1.0, source_count: int = 2,
                 kinds=("harmonic_voice", "modulated_noise", "chirp"), snr_db=None):
    """One synthetic mixture plus its scaled sources, deterministic in seed."""
    sources = [
        synth_toy_source(kinds[s % len(kinds)], duration, seed=seed * 10 + s)
        for s in range(source_count)
    ]
    spec = MixSpec(source_count=source_count, seed=seed, duration=duration)
    return mix_sources(sources, spec, snr_db=snr_db)
