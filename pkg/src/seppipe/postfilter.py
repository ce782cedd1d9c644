"""Waveform-domain post-filter: strided 1-D conv encoders for the mixture and
each pre-separated stream, dot-product attention fusion, a dilated temporal
conv-net mask estimator, and a transposed-conv decoder.

One encoder basis, one projection and one fusion/mask path are shared across
all pre-separated streams, so the network is equivariant to permuting its
input streams and checkpoints are agnostic to the source count.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsp import Waveform, estimate_label, fit_length
from .errors import InvalidInput, NumericalError

EPS = 1e-8


@dataclass
class E2epfConfig:
    source_count: int = 2
    enc_filters: int = 256      # N
    enc_kernel: int = 20        # L, stride is L/2
    bottleneck_channels: int = 256
    conv_channels: int = 512
    kernel_size: int = 3
    blocks_per_repeat: int = 8  # dilations 1, 2, ..., 2^(M-1)
    repeats: int = 4
    norm_type: str = "gLN"      # "gLN" or "id"
    use_attention: bool = True

    def __post_init__(self):
        if self.blocks_per_repeat < 1 or self.repeats < 1:
            raise InvalidInput("need at least one block and one repeat")
        if self.enc_filters < self.source_count:
            raise InvalidInput("enc_filters must be >= source_count")
        if self.enc_kernel % 2:
            raise InvalidInput(f"enc_kernel must be even, got {self.enc_kernel}")
        if self.norm_type not in ("gLN", "id"):
            raise InvalidInput(f"unknown norm_type {self.norm_type!r}")

    @property
    def stride(self) -> int:
        return self.enc_kernel // 2

    @classmethod
    def toy(cls, source_count: int = 2) -> "E2epfConfig":
        return cls(
            source_count=source_count,
            enc_filters=64,
            bottleneck_channels=64,
            conv_channels=128,
            blocks_per_repeat=6,
            repeats=2,
        )

    @classmethod
    def full(cls, source_count: int = 2) -> "E2epfConfig":
        return cls(source_count=source_count)

    def to_dict(self) -> dict:
        return asdict(self)

    def receptive_field(self) -> int:
        """Frames spanned by the dilated stack: 1 + (kernel-1) * R * (2^M - 1)."""
        return 1 + (self.kernel_size - 1) * self.repeats * (2 ** self.blocks_per_repeat - 1)


class GlobalLayerNorm(nn.Module):
    """Normalize over channels and frames jointly, per sample, with a
    trainable per-channel gain and bias."""

    def __init__(self, channels: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        # x: [B, C, K]
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = x.var(dim=(1, 2), keepdim=True, unbiased=False)
        return self.gain * (x - mean) / torch.sqrt(var + EPS) + self.bias


def make_norm(norm_type: str, channels: int) -> nn.Module:
    if norm_type == "gLN":
        return GlobalLayerNorm(channels)
    return nn.Identity()


class DilatedBlock(nn.Module):
    """1x1 conv -> PReLU -> norm -> depthwise dilated conv -> PReLU -> norm ->
    1x1 conv, added back onto the block input. Symmetric zero padding keeps
    the frame count unchanged."""

    def __init__(self, channels: int, hidden: int, kernel: int, dilation: int, norm_type: str):
        super().__init__()
        pad = (kernel - 1) // 2 * dilation
        self.expand = nn.Conv1d(channels, hidden, 1)
        self.prelu1 = nn.PReLU()
        self.norm1 = make_norm(norm_type, hidden)
        self.depthwise = nn.Conv1d(hidden, hidden, kernel, dilation=dilation, padding=pad, groups=hidden)
        self.prelu2 = nn.PReLU()
        self.norm2 = make_norm(norm_type, hidden)
        self.project = nn.Conv1d(hidden, channels, 1)

    def forward(self, x):
        y = self.norm1(self.prelu1(self.expand(x)))
        y = self.norm2(self.prelu2(self.depthwise(y)))
        return x + self.project(y)


class MaskTCN(nn.Module):
    """Bottleneck 1x1 conv, R repeats of M dilated residual blocks, and a 1x1
    ReLU head emitting one nonnegative mask over the encoder channels."""

    def __init__(self, in_channels: int, cfg: E2epfConfig):
        super().__init__()
        self.bottleneck = nn.Conv1d(in_channels, cfg.bottleneck_channels, 1)
        blocks = []
        for _ in range(cfg.repeats):
            for m in range(cfg.blocks_per_repeat):
                blocks.append(
                    DilatedBlock(
                        cfg.bottleneck_channels,
                        cfg.conv_channels,
                        cfg.kernel_size,
                        2 ** m,
                        cfg.norm_type,
                    )
                )
        self.blocks = nn.Sequential(*blocks)
        self.mask_head = nn.Conv1d(cfg.bottleneck_channels, cfg.enc_filters, 1)

    def forward(self, fused):
        # fused: [B, in_channels, K] -> mask [B, N, K]
        y = self.blocks(self.bottleneck(fused))
        mask = torch.relu(self.mask_head(y))
        if not torch.isfinite(mask).all():
            raise NumericalError("non-finite mask activations")
        return mask


@dataclass
class AttentionFusion:
    """similarity and weights are [K, K] (weights rows sum to 1); context is [K, N]."""

    similarity: torch.Tensor
    weights: torch.Tensor
    context: torch.Tensor


def attention_fuse(wy_p: torch.Tensor, ws_p: torch.Tensor) -> AttentionFusion:
    """Dot-product attention between projected mixture frames (rows) and
    projected pre-separated frames (columns), softmax over the latter.

    wy_p, ws_p: [K, N] or batched [B, K, N]. The softmax is computed with the
    usual max subtraction, so extreme magnitudes stay finite.
    """
    wy_p = torch.as_tensor(np.asarray(wy_p)) if not isinstance(wy_p, torch.Tensor) else wy_p
    ws_p = torch.as_tensor(np.asarray(ws_p)) if not isinstance(ws_p, torch.Tensor) else ws_p
    if wy_p.shape != ws_p.shape:
        raise InvalidInput(f"frame/channel mismatch: {tuple(wy_p.shape)} vs {tuple(ws_p.shape)}")
    similarity = wy_p @ ws_p.transpose(-2, -1)           # [..., K, K]
    weights = torch.softmax(similarity, dim=-1)
    context = weights @ ws_p                              # [..., K, N]
    return AttentionFusion(similarity, weights, context)


class PostFilterModel(nn.Module):
    def __init__(self, cfg: E2epfConfig):
        super().__init__()
        self.cfg = cfg
        n, k = cfg.enc_filters, cfg.enc_kernel
        self.encoder_mix = nn.Conv1d(1, n, k, stride=cfg.stride, bias=False)
        self.encoder_src = nn.Conv1d(1, n, k, stride=cfg.stride, bias=False)
        self.proj_mix = nn.Conv1d(n, n, 1)
        self.proj_src = nn.Conv1d(n, n, 1)
        # the no-attention ablation is parameter-matched: it stacks the raw
        # projected features where the attention variant stacks their
        # attention-weighted average, so the two differ only in the weighting
        self.tcn = MaskTCN(3 * n, cfg)
        self.decoder = nn.ConvTranspose1d(n, 1, k, stride=cfg.stride, bias=False)
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.xavier_normal_(p)
        # identity start for the projections: similarities are computed over
        # the raw encodings from the first step instead of a random mix
        with torch.no_grad():
            eye = torch.eye(n).unsqueeze(-1)
            self.proj_mix.weight.copy_(eye)
            self.proj_mix.bias.zero_()
            self.proj_src.weight.copy_(eye)
            self.proj_src.bias.zero_()

    def encode_mixture(self, wav: torch.Tensor) -> torch.Tensor:
        """[B, T] -> nonnegative [B, N, K], K = floor((T - L) / stride) + 1."""
        if wav.shape[-1] < self.cfg.enc_kernel:
            raise InvalidInput(
                f"segment of {wav.shape[-1]} samples is shorter than the {self.cfg.enc_kernel}-sample kernel"
            )
        return torch.relu(self.encoder_mix(wav.unsqueeze(1)))

    def encode_source(self, wav: torch.Tensor) -> torch.Tensor:
        if wav.shape[-1] < self.cfg.enc_kernel:
            raise InvalidInput(
                f"segment of {wav.shape[-1]} samples is shorter than the {self.cfg.enc_kernel}-sample kernel"
            )
        return torch.relu(self.encoder_src(wav.unsqueeze(1)))

    def decode(self, masked: torch.Tensor, length: int) -> torch.Tensor:
        """[B, N, K] masked mixture encoding -> [B, length] waveform."""
        out = self.decoder(masked).squeeze(1)
        if out.shape[-1] >= length:
            return out[..., :length]
        return F.pad(out, (0, length - out.shape[-1]))

    def forward(self, mixture: torch.Tensor, pre_sep: torch.Tensor) -> torch.Tensor:
        """mixture [B, T], pre_sep [B, S, T] -> estimates [B, S, T]."""
        if mixture.shape[-1] != pre_sep.shape[-1]:
            raise InvalidInput(
                f"mixture length {mixture.shape[-1]} differs from pre-separated length {pre_sep.shape[-1]}"
            )
        b, s, t = pre_sep.shape
        wy = self.encode_mixture(mixture)                       # [B, N, K]
        ws = self.encode_source(pre_sep.reshape(b * s, t))      # [B*S, N, K]
        wy_p = torch.relu(self.proj_mix(wy))                    # [B, N, K]
        ws_p = torch.relu(self.proj_src(ws))                    # [B*S, N, K]

        n, k = wy.shape[1], wy.shape[2]
        wy_rep = wy_p.repeat_interleave(s, dim=0)               # [B*S, N, K]
        if self.cfg.use_attention:
            fusion = attention_fuse(wy_rep.transpose(1, 2), ws_p.transpose(1, 2))
            middle = fusion.context.transpose(1, 2)             # [B*S, N, K]
        else:
            middle = ws_p                                       # plain stack
        fused = torch.cat([ws, middle, wy_rep], dim=1)          # [B*S, 3N, K]

        mask = self.tcn(fused).reshape(b, s, n, k)              # [B, S, N, K]
        masked = wy.unsqueeze(1) * mask                         # [B, S, N, K]
        est = self.decode(masked.reshape(b * s, n, k), t)
        return est.reshape(b, s, t)


def e2epf_forward(mixture: Waveform, pre_sep, model: PostFilterModel) -> list:
    """Full post-filter pass over one utterance; returns S estimate waveforms
    trimmed to the mixture length."""
    lengths = {len(w) for w in pre_sep}
    if lengths != {len(mixture)}:
        raise InvalidInput(f"pre-separated lengths {sorted(lengths)} differ from mixture {len(mixture)}")
    model.eval()
    mix = torch.as_tensor(mixture.samples, dtype=torch.float32).unsqueeze(0)
    srcs = torch.stack([torch.as_tensor(w.samples, dtype=torch.float32) for w in pre_sep]).unsqueeze(0)
    with torch.no_grad():
        est = model(mix, srcs)[0]
    return [
        Waveform(fit_length(est[i].numpy().astype(np.float64), len(mixture)),
                 mixture.sample_rate, estimate_label(i + 1))
        for i in range(est.shape[0])
    ]
