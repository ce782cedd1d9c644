"""Time-frequency pre-separation network: recurrent encoder, unit-norm
embedding head, recurrent separation layer and per-source ReLU mask heads.

Input is the normalized mixture magnitude [T, F] (batched as [B, T, F]); the
model emits per-bin embeddings for the affinity objective and one nonnegative
mask per source for the permutation-invariant objective.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .dsp import (
    FeatureStats,
    Waveform,
    estimate_label,
    masked_reconstruct,
    normalize_magnitude,
    stft,
    DEFAULT_FRAME_LEN,
    DEFAULT_HOP,
)
from .errors import InvalidInput, NumericalError


@dataclass
class PreStageConfig:
    source_count: int = 2
    feature_dim: int = 129
    embed_dim: int = 40
    encoder_layers: int = 1
    separation_layers: int = 1
    hidden_units: int = 128  # per direction
    bidirectional: bool = True
    dropout: float = 0.5

    def __post_init__(self):
        if self.embed_dim < self.source_count:
            raise InvalidInput(
                f"embed_dim {self.embed_dim} must be >= source_count {self.source_count}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidInput(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def toy(cls, source_count: int = 2) -> "PreStageConfig":
        return cls(source_count=source_count)

    @classmethod
    def full(cls, source_count: int = 2) -> "PreStageConfig":
        return cls(source_count=source_count, encoder_layers=2, hidden_units=896)

    def to_dict(self) -> dict:
        return asdict(self)


class PreStageModel(nn.Module):
    """Encoder BLSTM -> embedding head (tanh, row-normalized) -> separation
    BLSTM over reshaped embeddings -> per-source linear + ReLU mask heads."""

    def __init__(self, cfg: PreStageConfig):
        super().__init__()
        self.cfg = cfg
        dirs = 2 if cfg.bidirectional else 1
        self.encoder = nn.LSTM(
            cfg.feature_dim,
            cfg.hidden_units,
            num_layers=cfg.encoder_layers,
            bidirectional=cfg.bidirectional,
            batch_first=True,
            dropout=cfg.dropout if cfg.encoder_layers > 1 else 0.0,
        )
        self.embed_proj = nn.Linear(dirs * cfg.hidden_units, cfg.feature_dim * cfg.embed_dim)
        self.dropout = nn.Dropout(cfg.dropout)
        self.separator = nn.LSTM(
            cfg.feature_dim * cfg.embed_dim,
            cfg.hidden_units,
            num_layers=cfg.separation_layers,
            bidirectional=cfg.bidirectional,
            batch_first=True,
            dropout=cfg.dropout if cfg.separation_layers > 1 else 0.0,
        )
        self.mask_heads = nn.ModuleList(
            [nn.Linear(dirs * cfg.hidden_units, cfg.feature_dim) for _ in range(cfg.source_count)]
        )

    def embed(self, norm_mag: torch.Tensor) -> torch.Tensor:
        """[B, T, F] -> unit-norm embeddings [B, T*F, D]."""
        h, _ = self.encoder(norm_mag)
        e = torch.tanh(self.embed_proj(h))  # [B, T, F*D]
        b, t, _ = e.shape
        v = e.reshape(b, t * self.cfg.feature_dim, self.cfg.embed_dim)
        v = v / torch.clamp(v.norm(dim=-1, keepdim=True), min=1e-8)
        if not torch.isfinite(v).all():
            raise NumericalError("non-finite embedding activations")
        return v

    def forward(self, norm_mag: torch.Tensor):
        """[B, T, F] -> (embeddings [B, T*F, D], masks [B, S, T, F])."""
        v = self.embed(norm_mag)
        b, t, f = norm_mag.shape
        x = self.dropout(v.reshape(b, t, f * self.cfg.embed_dim))
        h, _ = self.separator(x)
        masks = torch.stack([torch.relu(head(h)) for head in self.mask_heads], dim=1)
        if not torch.isfinite(masks).all():
            raise NumericalError("non-finite mask activations")
        return v, masks


def embed(norm_mag, model: PreStageModel) -> torch.Tensor:
    """Single-utterance [T, F] -> [(T*F), D] unit-norm embeddings."""
    x = torch.as_tensor(np.asarray(norm_mag), dtype=torch.float32).unsqueeze(0)
    return model.embed(x)[0]

def prestage_forward(norm_mag, model: PreStageModel):
    """Single-utterance [T, F] -> ([(T*F), D] embeddings, [S, T, F] masks)."""
    x = torch.as_tensor(np.asarray(norm_mag), dtype=torch.float32).unsqueeze(0)
    v, masks = model(x)
    return v[0], masks[0]


def prestage_separate(
    mixture: Waveform,
    model: PreStageModel,
    stats: FeatureStats,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    masks: np.ndarray | None = None,
) -> list:
    """Run the pre-stage on one mixture: masked magnitude + mixture phase -> waveforms.

    Estimates are trimmed/padded to the mixture length and labeled
    estimate-1..S. Passing an explicit mask stack [S, T, F] bypasses the model
    (oracle stand-in path).
    """
    spec = stft(mixture, frame_len, hop)
    if masks is None:
        model.eval()
        norm = normalize_magnitude(spec.magnitude(), stats)
        with torch.no_grad():
            _, m = model(torch.as_tensor(norm, dtype=torch.float32).unsqueeze(0))
        masks = m[0].numpy().astype(np.float64)
    masks = np.asarray(masks)
    if masks.shape[1:] != spec.values.shape:
        raise InvalidInput(f"mask stack {masks.shape} does not match spectrogram {spec.values.shape}")
    return [
        masked_reconstruct(spec, masks[s], length=len(mixture), label=estimate_label(s + 1))
        for s in range(masks.shape[0])
    ]
