"""Optimizer loops for both stages: seeded shuffling, Adam updates, gradient
clipping, validation-driven learning-rate rules, early stopping and
checkpointing. A single-threaded mode exists so runs are bit-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .dsp import FeatureStats, segment_waveform, stft
from .dsp import DEFAULT_FRAME_LEN, DEFAULT_HOP
from .datasets import load_entry_audio, load_manifest
from .errors import InvalidInput, NumericalError
from .losses import (
    LossWeights,
    dc_loss,
    dl_loss,
    joint_loss,
    phase_sensitive_targets,
    si_snr_pit_loss,
    upit_psm_loss,
)
from .masks import membership_from_sources
from .prestage import PreStageConfig, PreStageModel, prestage_separate
from .postfilter import E2epfConfig, PostFilterModel

RULE_SCALE_ON_INCREASE = "scale_0.7_on_val_increase"
RULE_HALVE_AFTER_3 = "halve_after_3_consecutive_val_increases"


@dataclass
class TrainRecipe:
    stage: str  # "pre" or "post"
    batch_size: int = 16
    init_lr: float = 5e-4
    lr_rule: str = RULE_SCALE_ON_INCREASE
    min_epochs: int = 30
    max_epochs: int = 200
    early_stop_rel_improvement: float | None = 0.01
    grad_clip: float = 5.0
    seed: int = 0
    lr_floor: float = 1e-6
    segment_seconds: float = 4.0
    epoch_fraction: float = 1.0  # seeded subsample of segments per epoch
    num_threads: int | None = None

    def __post_init__(self):
        if self.init_lr <= 0:
            raise InvalidInput(f"init_lr must be positive, got {self.init_lr}")
        if self.batch_size < 1:
            raise InvalidInput(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_rule not in (RULE_SCALE_ON_INCREASE, RULE_HALVE_AFTER_3):
            raise InvalidInput(f"unknown lr_rule {self.lr_rule!r}")
        if not 0.0 < self.epoch_fraction <= 1.0:
            raise InvalidInput(f"epoch_fraction must be in (0, 1], got {self.epoch_fraction}")

    @classmethod
    def pre_defaults(cls, **kw) -> "TrainRecipe":
        base = dict(stage="pre", init_lr=5e-4, lr_rule=RULE_SCALE_ON_INCREASE,
                    min_epochs=30, max_epochs=200, early_stop_rel_improvement=0.01)
        base.update(kw)
        return cls(**base)

    @classmethod
    def post_defaults(cls, **kw) -> "TrainRecipe":
        base = dict(stage="post", init_lr=1e-4, lr_rule=RULE_HALVE_AFTER_3,
                    min_epochs=0, max_epochs=100, early_stop_rel_improvement=None)
        base.update(kw)
        return cls(**base)


def lr_trajectory(rule: str, init_lr: float, val_losses) -> list:
    """Learning rate in force during each epoch, as a pure function of the
    validation-loss sequence: entry e is the lr for epoch e+1 given val losses
    of epochs 1..e.
    """
    lrs = [init_lr]
    lr = init_lr
    consecutive = 0
    for e in range(1, len(val_losses) + 1):
        if e >= 2 and val_losses[e - 1] > val_losses[e - 2]:
            if rule == RULE_SCALE_ON_INCREASE:
                lr *= 0.7
            else:
                consecutive += 1
                if consecutive >= 3:
                    lr *= 0.5
                    consecutive = 0
        elif rule == RULE_HALVE_AFTER_3:
            consecutive = 0
        lrs.append(lr)
    return lrs


def should_stop_pre(val_losses, min_epochs: int, rel_improvement: float) -> bool:
    """Stop once past min_epochs and the epoch-over-epoch relative validation
    improvement falls below the threshold."""
    e = len(val_losses)
    if e < max(min_epochs, 2):
        return False
    prev, cur = val_losses[-2], val_losses[-1]
    return (prev - cur) / abs(prev) < rel_improvement


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_log(path, log) -> None:
    with open(path, "w") as f:
        for entry in log:
            f.write(entry.to_json() + "\n")


def _apply_thread_setting(recipe: TrainRecipe):
    if recipe.num_threads is not None:
        torch.set_num_threads(recipe.num_threads)


# ---------------------------------------------------------------------------
# pre-stage


@dataclass
class PreStageItem:
    mag: torch.Tensor         # [T, F] mixture magnitude
    targets: torch.Tensor     # [S, T, F] phase-sensitive targets
    membership: np.ndarray    # [(Tv*F), S]
    valid_frames: int


def _valid_frames(valid_samples: int, frame_len: int, hop: int) -> int:
    if valid_samples < frame_len:
        return 0
    return (valid_samples - frame_len) // hop + 1


def load_prestage_items(entries, root, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP,
                        seg_seconds: float = 4.0) -> list:
    """Segment every utterance and precompute the loss inputs per segment.
    Frames that extend into a zero-padded tail are dropped from the loss."""
    items = []
    for entry in entries:
        mixture, sources = load_entry_audio(entry, root)
        mix_segs = segment_waveform(mixture, seg_seconds)
        src_segs = [segment_waveform(s, seg_seconds) for s in sources]
        for k, seg in enumerate(mix_segs):
            t_valid = _valid_frames(seg.valid_samples, frame_len, hop)
            if t_valid == 0:
                continue
            mix_spec = stft(seg.waveform, frame_len, hop)
            src_specs = [stft(ss[k].waveform, frame_len, hop) for ss in src_segs]
            targets = phase_sensitive_targets(mix_spec, src_specs)
            membership = membership_from_sources([s.values[:t_valid] for s in src_specs])
            items.append(PreStageItem(
                mag=torch.as_tensor(mix_spec.magnitude(), dtype=torch.float32),
                targets=torch.as_tensor(targets, dtype=torch.float32),
                membership=membership,
                valid_frames=t_valid,
            ))
    if not items:
        raise InvalidInput("no usable training segments")
    return items


def fit_stats_from_items(items) -> FeatureStats:
    return FeatureStats.fit(item.mag.numpy()[: item.valid_frames] for item in items)


def prestage_batch_loss(model: PreStageModel, batch, stats: FeatureStats,
                        weights: LossWeights) -> torch.Tensor:
    """Mean joint loss over a list of PreStageItem; the permutation is chosen
    per utterance."""
    mean = torch.as_tensor(stats.mean, dtype=torch.float32)
    std = torch.as_tensor(stats.std, dtype=torch.float32)
    norm = torch.stack([(item.mag - mean) / std for item in batch])  # [B, T, F]
    v, masks = model(norm)
    f = norm.shape[2]
    losses = []
    for b, item in enumerate(batch):
        tv = item.valid_frames
        v_b = v[b].reshape(norm.shape[1], f, -1)[:tv].reshape(tv * f, -1)
        m_b = masks[b, :, :tv]
        j_dc = dc_loss(v_b, torch.as_tensor(item.membership, dtype=torch.float32))
        cost, outcome = upit_psm_loss(m_b, item.mag[:tv], item.targets[:, :tv])
        j_dl = dl_loss(outcome, weights.competing_weight)
        losses.append(joint_loss(j_dc, j_dl, weights.embedding_weight))
    return torch.stack(losses).mean()


def _epoch_indices(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    perm = rng.permutation(n)
    keep = max(1, int(round(fraction * n)))
    return perm[:keep]


def _run_epochs(recipe, model, train_step, val_fn, save_fn):
    """Shared schedule/early-stop/NaN skeleton; returns (log, val_losses)."""
    log, val_losses = [], []
    rng = np.random.default_rng(recipe.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=recipe.init_lr)
    last_good = ckpt.params_from_module(model)

    for epoch in range(1, recipe.max_epochs + 1):
        lr = lr_trajectory(recipe.lr_rule, recipe.init_lr, val_losses)[-1]
        if recipe.stage == "post" and lr < recipe.lr_floor:
            break
        for group in optimizer.param_groups:
            group["lr"] = lr

        start = time.monotonic()
        model.train()
        epoch_losses = []
        for loss in train_step(rng, optimizer):
            if not np.isfinite(loss):
                save_fn(last_good, val_losses, log, aborted=True)
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            epoch_losses.append(loss)
        model.eval()
        with torch.no_grad():
            val_loss = val_fn()
        if not np.isfinite(val_loss):
            save_fn(last_good, val_losses, log, aborted=True)
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")

        val_losses.append(val_loss)
        last_good = ckpt.params_from_module(model)
        log.append(EpochLog(epoch, float(np.mean(epoch_losses)), val_loss, lr,
                            time.monotonic() - start))

        if (recipe.stage == "pre"
                and recipe.early_stop_rel_improvement is not None
                and should_stop_pre(val_losses, recipe.min_epochs, recipe.early_stop_rel_improvement)):
            break
    save_fn(last_good, val_losses, log, aborted=False)
    return log, val_losses


def train_prestage(recipe: TrainRecipe, train_manifest, val_manifest, root,
                   cfg: PreStageConfig, weights: LossWeights, ckpt_path,
                   log_path=None, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """Train the pre-separation network on a manifest; returns (checkpoint path, log)."""
    _apply_thread_setting(recipe)
    torch.manual_seed(recipe.seed)
    train_items = load_prestage_items(load_manifest(train_manifest), root, frame_len, hop,
                                      recipe.segment_seconds)
    val_items = load_prestage_items(load_manifest(val_manifest), root, frame_len, hop,
                                    recipe.segment_seconds)
    stats = fit_stats_from_items(train_items)
    model = PreStageModel(cfg)

    def train_step(rng, optimizer):
        idx = _epoch_indices(rng, len(train_items), recipe.epoch_fraction)
        for i in range(0, len(idx), recipe.batch_size):
            batch = [train_items[j] for j in idx[i:i + recipe.batch_size]]
            optimizer.zero_grad()
            loss = prestage_batch_loss(model, batch, stats, weights)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), recipe.grad_clip)
            optimizer.step()
            yield float(loss.detach())

    def val_fn():
        losses = []
        for i in range(0, len(val_items), recipe.batch_size):
            batch = val_items[i:i + recipe.batch_size]
            losses.append(float(prestage_batch_loss(model, batch, stats, weights)))
        return float(np.mean(losses))

    def save_fn(params, val_losses, log, aborted):
        metadata = {
            "stage": "prestage",
            "recipe": asdict(recipe),
            "loss_weights": asdict(weights),
            "frame_len": frame_len,
            "hop": hop,
            "epochs_run": len(log),
            "val_losses": val_losses,
            "aborted": aborted,
        }
        ckpt.save_checkpoint(ckpt_path, "prestage", cfg.to_dict(), params, stats, metadata)

    log, _ = _run_epochs(recipe, model, train_step, val_fn, save_fn)
    if log_path is not None:
        write_log(log_path, log)
    return Path(ckpt_path), log


# ---------------------------------------------------------------------------
# post-filter


@dataclass
class PostFilterItem:
    mixture: torch.Tensor   # [T]
    pre_sep: torch.Tensor   # [S, T]
    refs: torch.Tensor      # [S, T]
    valid_samples: int


def load_postfilter_items(entries, root, pre_model: PreStageModel, stats: FeatureStats,
                          seg_seconds: float, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP,
                          min_keep: int = 1000) -> list:
    """Run the frozen pre-stage over every utterance, then segment the
    mixture, pre-separated streams and references identically."""
    items = []
    pre_model.eval()
    for entry in entries:
        mixture, sources = load_entry_audio(entry, root)
        pre = prestage_separate(mixture, pre_model, stats, frame_len, hop)
        mix_segs = segment_waveform(mixture, seg_seconds)
        pre_segs = [segment_waveform(p, seg_seconds) for p in pre]
        ref_segs = [segment_waveform(s, seg_seconds) for s in sources]
        for k, seg in enumerate(mix_segs):
            valid = seg.valid_samples
            if valid < min_keep:
                continue
            refs = np.stack([r[k].waveform.samples for r in ref_segs])
            if any(np.sum(refs[s, :valid] ** 2) < 1e-8 for s in range(refs.shape[0])):
                continue
            items.append(PostFilterItem(
                mixture=torch.as_tensor(seg.waveform.samples, dtype=torch.float32),
                pre_sep=torch.as_tensor(
                    np.stack([p[k].waveform.samples for p in pre_segs]), dtype=torch.float32),
                refs=torch.as_tensor(refs, dtype=torch.float32),
                valid_samples=valid,
            ))
    if not items:
        raise InvalidInput("no usable training segments")
    return items


def postfilter_batch_loss(model: PostFilterModel, batch) -> torch.Tensor:
    """Mean permutation-searched negative SI-SNR over a list of PostFilterItem."""
    mix = torch.stack([item.mixture for item in batch])
    pre = torch.stack([item.pre_sep for item in batch])
    est = model(mix, pre)
    losses = []
    for b, item in enumerate(batch):
        n = item.valid_samples
        loss, _ = si_snr_pit_loss(list(est[b, :, :n]), list(item.refs[:, :n]))
        losses.append(loss)
    return torch.stack(losses).mean()


def train_e2epf(recipe: TrainRecipe, train_manifest, val_manifest, root,
                prestage_ckpt, cfg: E2epfConfig, ckpt_path, log_path=None,
                frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """Train the post-filter against a frozen pre-stage checkpoint."""
    _apply_thread_setting(recipe)
    torch.manual_seed(recipe.seed)
    pre = ckpt.load_checkpoint(prestage_ckpt)
    if pre.kind != "prestage":
        raise InvalidInput(f"{prestage_ckpt} is a {pre.kind!r} checkpoint, expected prestage")
    pre_model = PreStageModel(PreStageConfig(**pre.config))
    ckpt.load_into_module(pre_model, pre.params)
    for p in pre_model.parameters():
        p.requires_grad_(False)

    train_items = load_postfilter_items(load_manifest(train_manifest), root, pre_model,
                                        pre.stats, recipe.segment_seconds, frame_len, hop)
    val_items = load_postfilter_items(load_manifest(val_manifest), root, pre_model,
                                      pre.stats, recipe.segment_seconds, frame_len, hop)
    model = PostFilterModel(cfg)

    def train_step(rng, optimizer):
        idx = _epoch_indices(rng, len(train_items), recipe.epoch_fraction)
        for i in range(0, len(idx), recipe.batch_size):
            batch = [train_items[j] for j in idx[i:i + recipe.batch_size]]
            optimizer.zero_grad()
            loss = postfilter_batch_loss(model, batch)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), recipe.grad_clip)
            optimizer.step()
            yield float(loss.detach())

    def val_fn():
        losses = []
        for i in range(0, len(val_items), recipe.batch_size):
            losses.append(float(postfilter_batch_loss(model, val_items[i:i + recipe.batch_size])))
        return float(np.mean(losses))

    def save_fn(params, val_losses, log, aborted):
        metadata = {
            "stage": "postfilter",
            "recipe": asdict(recipe),
            "prestage_fingerprint": pre.fingerprint,
            "frame_len": frame_len,
            "hop": hop,
            "epochs_run": len(log),
            "val_losses": val_losses,
            "aborted": aborted,
        }
        ckpt.save_checkpoint(ckpt_path, "postfilter", cfg.to_dict(), params, pre.stats, metadata)

    log, _ = _run_epochs(recipe, model, train_step, val_fn, save_fn)
    if log_path is not None:
        write_log(log_path, log)
    return Path(ckpt_path), log
