"""Coil compression onto principal virtual channels."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..nlinv import MultiCoilFrame


def pca_compress(frames: Sequence[MultiCoilFrame], n_virtual: int = 10
                 ) -> tuple[list[MultiCoilFrame], float]:
    """Project all frames onto the top right singular vectors of the stacked data.

    Returns the compressed frames and the fraction of energy retained.
    Virtual channels come out in order of decreasing energy.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to compress")
    n_coils = frames[0].n_coils
    if not 1 <= n_virtual <= n_coils:
        raise ValueError(f"n_virtual must be in [1, {n_coils}], got {n_virtual}")
    stacked = np.concatenate([fr.samples.T for fr in frames], axis=0)  # (samples, coils)
    _, s, vh = np.linalg.svd(stacked, full_matrices=False)
    total = float(np.sum(s**2))
    kept = float(np.sum(s[:n_virtual] ** 2)) / total if total > 0 else 1.0
    basis = vh[:n_virtual].conj().T  # (coils, n_virtual)
    out = [fr.with_samples((fr.samples.T @ basis).T) for fr in frames]
    return out, kept
