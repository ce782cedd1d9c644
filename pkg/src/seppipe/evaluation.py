"""Separation quality metrics: SI-SNR and its improvement, a least-squares
SDR/SIR/SAR decomposition over delayed reference copies, assignment-mode
scoring, oracle-mask baselines and dataset-level reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import linalg as sla

from .dsp import Waveform, masked_reconstruct, stft
from .dsp import DEFAULT_FRAME_LEN, DEFAULT_HOP
from .errors import InvalidInput
from .losses import enumerate_permutations, si_snr
from .masks import ideal_mask_stack

METRIC_CAP_DB = 100.0
SILENT_REF_ENERGY = 1e-8
DEFAULT_FILTER_LEN = 512
RIDGE = 1e-9

REPORT_SCHEMA_VERSION = 1


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64).reshape(-1)


def si_snr_improvement(est, ref, mixture) -> float:
    """si_snr(est, ref) - si_snr(mixture, ref), both in dB."""
    return float(si_snr(_samples(est), _samples(ref))) - float(si_snr(_samples(mixture), _samples(ref)))


@dataclass
class BssEval:
    sdr: float
    sir: float
    sar: float
    regularized: bool = False


def _delayed_projection(refs: np.ndarray, est: np.ndarray, flen: int):
    """Least-squares projection of est onto the span of 0..flen-1 sample
    delays of each reference row. Returns (projection[n+flen-1], regularized).

    Normal equations are assembled from FFT cross-correlations, so the cost is
    O((S*flen)^3) for the solve rather than O(n * (S*flen)^2).
    """
    s_count, n = refs.shape
    nfft = sfft.next_fast_len(n + 2 * flen)
    rf = np.fft.rfft(refs, nfft, axis=1)
    ef = np.fft.rfft(est, nfft)

    gram = np.zeros((s_count * flen, s_count * flen))
    lags = np.arange(flen)
    for i in range(s_count):
        for j in range(i, s_count):
            c = np.fft.irfft(np.conj(rf[i]) * rf[j], nfft)  # c[d] = sum_u r_i[u] r_j[u+d]
            block = sla.toeplitz(c[lags], c[(nfft - lags) % nfft])
            gram[i * flen:(i + 1) * flen, j * flen:(j + 1) * flen] = block
            if j > i:
                gram[j * flen:(j + 1) * flen, i * flen:(i + 1) * flen] = block.T
    rhs = np.zeros(s_count * flen)
    for j in range(s_count):
        c = np.fft.irfft(np.conj(rf[j]) * ef, nfft)
        rhs[j * flen:(j + 1) * flen] = c[lags]

    regularized = False
    try:
        coeffs = np.linalg.solve(gram, rhs)
        if not np.all(np.isfinite(coeffs)):
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        regularized = True
        coeffs = np.linalg.solve(gram + RIDGE * np.eye(gram.shape[0]), rhs)

    proj = np.zeros(n + flen - 1)
    for j in range(s_count):
        proj += np.convolve(refs[j], coeffs[j * flen:(j + 1) * flen])
    return proj, regularized


def _ratio_db(num: float, den: float) -> float:
    if num < 1e-30:
        return -METRIC_CAP_DB
    if den / num < 1e-10:
        return METRIC_CAP_DB
    return float(10.0 * np.log10(num / den))


def bss_eval(est, refs, target_index: int, filter_len: int = DEFAULT_FILTER_LEN) -> BssEval:
    """Decompose est into target / interference / artifact components by
    projecting onto delayed copies of the references, then report the three
    energy ratios (each capped at +/-100 dB).
    """
    est = _samples(est)
    ref_mat = np.stack([_samples(r) for r in refs])
    if ref_mat.shape[1] != est.shape[0]:
        raise InvalidInput(f"length mismatch: est {est.shape[0]} vs refs {ref_mat.shape[1]}")
    if not 0 <= target_index < ref_mat.shape[0]:
        raise InvalidInput(f"target_index {target_index} out of range")

    s_target, reg1 = _delayed_projection(ref_mat[target_index:target_index + 1], est, filter_len)
    full_proj, reg2 = _delayed_projection(ref_mat, est, filter_len)
    est_pad = np.concatenate([est, np.zeros(filter_len - 1)])
    e_interf = full_proj - s_target
    e_artif = est_pad - full_proj

    target_e = float(np.sum(s_target ** 2))
    interf_e = float(np.sum(e_interf ** 2))
    artif_e = float(np.sum(e_artif ** 2))
    return BssEval(
        sdr=_ratio_db(target_e, interf_e + artif_e),
        sir=_ratio_db(target_e, interf_e),
        sar=_ratio_db(target_e + interf_e, artif_e),
        regularized=reg1 or reg2,
    )


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


def score_utterance(
    ests,
    refs,
    mixture=None,
    mode: str = "default",
    filter_len: int = DEFAULT_FILTER_LEN,
    compute_bss: bool = True,
) -> dict:
    """Score one utterance's outputs against its references.

    mode="default" keeps the emitted order; mode="optimal" first picks the
    permutation that maximizes mean SI-SNR and reports every metric under it.
    """
    if len(ests) != len(refs):
        raise InvalidInput(f"{len(ests)} estimates vs {len(refs)} references")
    if mode not in ("default", "optimal"):
        raise InvalidInput(f"unknown assignment mode {mode!r}")
    est_arrs = [_samples(e) for e in ests]
    ref_arrs = [_samples(r) for r in refs]
    s_count = len(est_arrs)

    perm = tuple(range(s_count))
    if mode == "optimal":
        best = None
        for cand in enumerate_permutations(s_count):
            score = np.mean([float(si_snr(est_arrs[s], ref_arrs[cand[s]])) for s in range(s_count)])
            if best is None or score > best[0]:
                best = (score, cand)
        perm = best[1]

    per_source = []
    regularized = False
    for s in range(s_count):
        ref = ref_arrs[perm[s]]
        row = {"estimate": s + 1, "reference": perm[s] + 1,
               "si_snr_db": float(si_snr(est_arrs[s], ref))}
        if mixture is not None:
            row["si_snri_db"] = row["si_snr_db"] - float(si_snr(_samples(mixture), ref))
        if compute_bss:
            bss = bss_eval(est_arrs[s], ref_arrs, perm[s], filter_len)
            row.update(sdr_db=bss.sdr, sir_db=bss.sir, sar_db=bss.sar)
            regularized = regularized or bss.regularized
        per_source.append(row)

    out = {
        "assignment": mode,
        "permutation": list(perm),
        "per_source": per_source,
        "si_snr_db": _mean([r["si_snr_db"] for r in per_source]),
    }
    if mixture is not None:
        out["si_snri_db"] = _mean([r["si_snri_db"] for r in per_source])
    if compute_bss:
        for key in ("sdr_db", "sir_db", "sar_db"):
            out[key] = _mean([r[key] for r in per_source])
        if regularized:
            out["regularized"] = True
    return out


@dataclass
class EvalReport:
    assignment: str
    summary: dict = field(default_factory=dict)
    utterances: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    excluded_silent: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "assignment": self.assignment,
            "summary": self.summary,
            "utterances": self.utterances,
            "errors": self.errors,
            "excluded_silent": self.excluded_silent,
        }


def _aggregate(rows, excluded: int, errors: list, assignment: str) -> EvalReport:
    summary = {"count": len(rows), "excluded_silent": excluded}
    for key in ("si_snr_db", "si_snri_db", "sdr_db", "sir_db", "sar_db"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            summary[key] = float(np.mean(vals))
    summary["regularized_count"] = sum(1 for r in rows if r.get("regularized"))
    return EvalReport(assignment, summary, rows, errors, excluded)


def evaluate_set(
    items,
    mode: str = "default",
    filter_len: int = DEFAULT_FILTER_LEN,
    compute_bss: bool = True,
) -> EvalReport:
    """Score an iterable of (utt_id, ests, refs, mixture) tuples.

    Utterances with a silent reference are excluded and counted.
    """
    rows, errors = [], []
    excluded = 0
    for utt_id, ests, refs, mixture in items:
        if any(float(np.sum(_samples(r) ** 2)) < SILENT_REF_ENERGY for r in refs):
            excluded += 1
            continue
        row = score_utterance(ests, refs, mixture, mode, filter_len, compute_bss)
        row["id"] = utt_id
        rows.append(row)
    return _aggregate(rows, excluded, errors, mode)


def oracle_eval(
    entries,
    root,
    mask_kind: str,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    filter_len: int = DEFAULT_FILTER_LEN,
    compute_bss: bool = False,
    mode: str = "default",
) -> EvalReport:
    """Reconstruct every manifest entry with an ideal mask stack (mixture
    phase retained) and score the results."""
    from .datasets import load_entry_audio  # local import to avoid a cycle

    def items():
        for i, entry in enumerate(entries):
            mixture, sources = load_entry_audio(entry, root)
            mix_spec = stft(mixture, frame_len, hop)
            src_specs = [stft(s, frame_len, hop) for s in sources]
            masks = ideal_mask_stack(src_specs, mix_spec, mask_kind)
            ests = [
                masked_reconstruct(mix_spec, masks[s], length=len(mixture), label=f"estimate-{s + 1}")
                for s in range(masks.shape[0])
            ]
            yield entry.mixture_path, ests, sources, mixture

    return evaluate_set(items(), mode=mode, filter_len=filter_len, compute_bss=compute_bss)
