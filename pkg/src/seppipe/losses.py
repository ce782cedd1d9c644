"""Training objectives: embedding-affinity loss, permutation-invariant mask
loss, its discriminative extension, the joint combination, and waveform-level
scale-invariant SNR with permutation search.

Everything differentiable is written in torch; permutation selection itself is
a detached argmin. Permutations are enumerated lexicographically and ties are
broken toward the lowest index, so outcomes are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations as _permutations

import numpy as np
import torch

from .dsp import ComplexSpectrogram, Waveform
from .errors import InvalidInput, Unsupported

EPS = 1e-8
SI_SNR_CAP_DB = 100.0
MAX_SOURCES = 4  # factorial enumeration; datasets here use 2 or 3


@dataclass
class LossWeights:
    """Joint-objective weights: embedding_weight is the affinity-loss share in
    [0, 1], competing_weight scales the non-optimal permutation penalty."""

    embedding_weight: float = 0.05
    competing_weight: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.embedding_weight <= 1.0:
            raise InvalidInput(f"embedding_weight must be in [0, 1], got {self.embedding_weight}")
        if self.competing_weight < 0.0:
            raise InvalidInput(f"competing_weight must be >= 0, got {self.competing_weight}")


@dataclass
class PermutationOutcome:
    """Per-permutation costs plus the selected assignment.

    costs keeps the autograd graph when built from tensors; selected_cost is
    always the minimum, with ties resolved to the lowest enumeration index.
    """

    costs: torch.Tensor
    permutations: tuple
    selected_index: int

    @property
    def selected_cost(self) -> torch.Tensor:
        return self.costs[self.selected_index]

    @property
    def selected_permutation(self) -> tuple:
        return self.permutations[self.selected_index]


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, Waveform):
        x = x.samples
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    t = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        t = t.to(dtype)
    elif not t.is_floating_point():
        t = t.double()
    return t


def enumerate_permutations(source_count: int) -> tuple:
    if source_count > MAX_SOURCES:
        raise Unsupported(f"permutation enumeration limited to {MAX_SOURCES} sources, got {source_count}")
    return tuple(_permutations(range(source_count)))


def _select_min(costs: torch.Tensor) -> int:
    # torch.argmin ties are unspecified; scan for the first strict minimum.
    vals = costs.detach().cpu().numpy()
    return int(np.argmin(vals))


def dc_loss(embeddings, membership) -> torch.Tensor:
    """Affinity-matrix distance ||VV^T - BB^T||_F^2 / (T*F)^2 via the low-rank
    expansion ||V^T V||^2 - 2 ||V^T B||^2 + ||B^T B||^2.

    embeddings: [(T*F), D], membership: [(T*F), S] one-hot rows. The full
    (T*F)^2 affinity matrix is never materialized.
    """
    v = _as_tensor(embeddings)
    b = _as_tensor(membership, dtype=v.dtype)
    if v.shape[0] != b.shape[0]:
        raise InvalidInput(f"row counts differ: embeddings {v.shape[0]}, membership {b.shape[0]}")
    n = v.shape[0]
    vtv = v.t() @ v
    vtb = v.t() @ b
    btb = b.t() @ b
    loss = (vtv ** 2).sum() - 2.0 * (vtb ** 2).sum() + (btb ** 2).sum()
    return torch.clamp(loss / float(n) ** 2, min=0.0)


def phase_sensitive_targets(mix, sources) -> np.ndarray:
    """[S, T, F] training targets |X_s| cos(theta_y - theta_s) from complex spectra."""
    y = mix.values if isinstance(mix, ComplexSpectrogram) else np.asarray(mix)
    out = []
    for x in sources:
        xs = x.values if isinstance(x, ComplexSpectrogram) else np.asarray(x)
        if xs.shape != y.shape:
            raise InvalidInput(f"source {xs.shape} and mixture {y.shape} shapes differ")
        out.append(np.abs(xs) * np.cos(np.angle(y) - np.angle(xs)))
    return np.stack(out)


def upit_psm_loss(masks, mix, sources, permutation=None):
    """Utterance-level permutation-invariant loss against phase-sensitive targets.

    For each assignment theta the cost is
    sum_s || |Y| * M_s - |X_theta(s)| cos(theta_y - theta_theta(s)) ||_F^2
    divided by T*F*S. Returns (selected cost, PermutationOutcome); passing an
    explicit permutation skips the search and returns that assignment's cost,
    which is what gradient checks probe.

    masks: [S, T, F] (tensor, differentiable); mix / sources: complex spectra
    or a precomputed (mix magnitude, target stack) pair of real arrays.
    """
    m = _as_tensor(masks)
    mix_is_complex = isinstance(mix, ComplexSpectrogram) or np.asarray(mix).dtype.kind == "c"
    if mix_is_complex:
        targets = torch.as_tensor(phase_sensitive_targets(mix, sources), dtype=m.dtype)
        mag_y = torch.as_tensor(
            np.abs(mix.values if isinstance(mix, ComplexSpectrogram) else np.asarray(mix)), dtype=m.dtype
        )
    else:  # precomputed real pair: (mixture magnitude, target stack)
        mag_y = _as_tensor(mix, dtype=m.dtype)
        targets = _as_tensor(sources, dtype=m.dtype)
    if m.shape != targets.shape:
        raise InvalidInput(f"masks {tuple(m.shape)} and targets {tuple(targets.shape)} shapes differ")
    s_count = m.shape[0]
    norm = float(m[0].numel() * s_count)

    masked = mag_y.unsqueeze(0) * m  # [S, T, F]
    # pair_cost[s, j] = || masked_s - target_j ||_F^2
    diff = masked.unsqueeze(1) - targets.unsqueeze(0)
    pair_cost = (diff ** 2).sum(dim=(-2, -1))

    if permutation is not None:
        perm = tuple(permutation)
        cost = sum(pair_cost[s, perm[s]] for s in range(s_count)) / norm
        outcome = PermutationOutcome(cost.reshape(1), (perm,), 0)
        return cost, outcome

    perms = enumerate_permutations(s_count)
    costs = torch.stack([
        sum(pair_cost[s, perm[s]] for s in range(s_count)) / norm for perm in perms
    ])
    idx = _select_min(costs)
    outcome = PermutationOutcome(costs, perms, idx)
    return outcome.selected_cost, outcome


def dl_loss(outcome: PermutationOutcome, competing_weight: float) -> torch.Tensor:
    """Selected cost minus competing_weight times the summed non-selected costs.

    With competing_weight = 0 this is exactly the permutation-invariant cost;
    larger weights push other assignments apart and can make the value negative.
    """
    if competing_weight < 0:
        raise InvalidInput(f"competing_weight must be >= 0, got {competing_weight}")
    best = outcome.selected_cost
    others = outcome.costs.sum() - best
    return best - competing_weight * others


def joint_loss(embedding_loss, assignment_loss, embedding_weight: float) -> torch.Tensor:
    """Convex combination: weight * embedding_loss + (1 - weight) * assignment_loss."""
    if not 0.0 <= embedding_weight <= 1.0:
        raise InvalidInput(f"embedding_weight must be in [0, 1], got {embedding_weight}")
    j_dc = _as_tensor(embedding_loss)
    j_dl = _as_tensor(assignment_loss, dtype=j_dc.dtype)
    return embedding_weight * j_dc + (1.0 - embedding_weight) * j_dl


def si_snr(est, ref, zero_mean: bool = True) -> torch.Tensor:
    """Scale-invariant source-to-noise ratio in dB.

    est is projected onto ref; the ratio of projection to residual energy is
    returned, capped at +100 dB when the residual is negligible. A silent
    reference is an error, not a cap. zero_mean=False skips mean subtraction
    (the raw three-formula definition).
    """
    x_est = _as_tensor(est)
    x_ref = _as_tensor(ref, dtype=x_est.dtype)
    if x_est.shape != x_ref.shape:
        raise InvalidInput(f"length mismatch: {tuple(x_est.shape)} vs {tuple(x_ref.shape)}")
    if zero_mean:
        x_est = x_est - x_est.mean()
        x_ref = x_ref - x_ref.mean()
    ref_energy = (x_ref ** 2).sum()
    if float(ref_energy.detach()) < EPS:
        raise InvalidInput("reference signal is silent")
    target = (x_est * x_ref).sum() / ref_energy * x_ref
    noise = x_est - target
    target_energy = (target ** 2).sum()
    noise_energy = (noise ** 2).sum()
    if float(target_energy.detach()) < 1e-30:
        return x_est.new_tensor(-SI_SNR_CAP_DB)
    if float((noise_energy / target_energy).detach()) < 1e-10:
        return x_est.new_tensor(SI_SNR_CAP_DB)
    return 10.0 * torch.log10(target_energy / noise_energy)


def si_snr_pit_loss(est_waves, ref_waves, permutation=None):
    """Negative mean SI-SNR under the best source assignment.

    Costs per permutation are -mean_s si_snr(est_s, ref_theta(s)); the minimum
    is selected with the usual lowest-index tie rule. Gradients flow through
    the SI-SNR terms of the selected assignment only.
    """
    ests = [_as_tensor(e) for e in est_waves]
    refs = [_as_tensor(r, dtype=ests[0].dtype) for r in ref_waves]
    if len(ests) != len(refs):
        raise InvalidInput(f"{len(ests)} estimates vs {len(refs)} references")
    s_count = len(ests)
    pair = {}
    for i in range(s_count):
        for j in range(s_count):
            pair[i, j] = si_snr(ests[i], refs[j])

    if permutation is not None:
        perm = tuple(permutation)
        cost = -sum(pair[s, perm[s]] for s in range(s_count)) / s_count
        outcome = PermutationOutcome(cost.reshape(1), (perm,), 0)
        return cost, outcome

    perms = enumerate_permutations(s_count)
    costs = torch.stack([
        -sum(pair[s, perm[s]] for s in range(s_count)) / s_count for perm in perms
    ])
    idx = _select_min(costs)
    outcome = PermutationOutcome(costs, perms, idx)
    return outcome.selected_cost, outcome
