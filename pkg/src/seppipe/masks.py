"""Ideal time-frequency masks and the per-bin source membership matrix.

All functions accept ComplexSpectrogram instances or raw complex [T, F]
arrays and return plain numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .dsp import ComplexSpectrogram
from .errors import InvalidInput

SILENCE_EPS = 1e-8

MASK_KINDS = ("ibm", "irm", "ipsm")


def _values(x) -> np.ndarray:
    if isinstance(x, ComplexSpectrogram):
        return x.values
    return np.asarray(x)


def ideal_psm(xs, y) -> np.ndarray:
    """Phase-sensitive mask |X_s| cos(theta_y - theta_s) / |Y|, unclipped.

    Bins where the mixture magnitude is below 1e-8 are set to 0.
    """
    xs, y = _values(xs), _values(y)
    if xs.shape != y.shape:
        raise InvalidInput(f"source {xs.shape} and mixture {y.shape} shapes differ")
    mag_y = np.abs(y)
    mask = np.zeros(y.shape)
    live = mag_y >= SILENCE_EPS
    # |X| cos(theta_y - theta_s) == Re(X * conj(Y)) / |Y|
    mask[live] = (xs[live] * np.conj(y[live])).real / (mag_y[live] ** 2)
    return mask


def ideal_ibm(x_all) -> np.ndarray:
    """Binary masks [S, T, F]: 1 for the max-magnitude source, ties to the lowest index."""
    mags = np.stack([np.abs(_values(x)) for x in x_all])
    if mags.shape[0] < 2:
        raise InvalidInput("need at least two sources")
    winner = np.argmax(mags, axis=0)  # first max wins ties
    masks = np.zeros(mags.shape)
    for s in range(mags.shape[0]):
        masks[s][winner == s] = 1.0
    return masks


def ideal_irm(x_all) -> np.ndarray:
    """Ratio masks [S, T, F]: |X_s| / sum_j |X_j|; all-silent bins get uniform 1/S."""
    mags = np.stack([np.abs(_values(x)) for x in x_all])
    if mags.shape[0] < 2:
        raise InvalidInput("need at least two sources")
    total = mags.sum(axis=0)
    silent = total < SILENCE_EPS
    total = np.where(silent, 1.0, total)
    masks = mags / total
    masks[:, silent] = 1.0 / mags.shape[0]
    return masks


def ideal_mask_stack(x_all, y, kind: str) -> np.ndarray:
    """Oracle mask stack [S, T, F] of the requested kind (ibm, irm or ipsm)."""
    if kind == "ibm":
        return ideal_ibm(x_all)
    if kind == "irm":
        return ideal_irm(x_all)
    if kind == "ipsm":
        return np.stack([ideal_psm(x, y) for x in x_all])
    raise InvalidInput(f"unknown mask kind {kind!r}; choose from {MASK_KINDS}")


def membership_from_sources(x_all) -> np.ndarray:
    """One-hot [(T*F), S] membership: the highest-energy source per bin, ties to the lowest index."""
    energies = np.stack([np.abs(_values(x)) ** 2 for x in x_all])  # [S, T, F]
    s_count = energies.shape[0]
    winner = np.argmax(energies, axis=0).reshape(-1)
    membership = np.zeros((winner.shape[0], s_count))
    membership[np.arange(winner.shape[0]), winner] = 1.0
    return membership
