"""Image-quality metrics against simulated ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage


@dataclass
class MetricsReport:
    roi_rmse: Optional[list[float]]
    snr: list[float]
    profile: np.ndarray  # (height, frames)
    temporal_sharpness: float
    scale: Optional[list[float]] = field(default=None)

    def to_dict(self) -> dict:
        return {
            "roi_rmse": self.roi_rmse,
            "snr": self.snr,
            "temporal_sharpness": self.temporal_sharpness,
            "scale": self.scale,
            "mean_roi_rmse": None if self.roi_rmse is None else float(np.mean(self.roi_rmse)),
            "mean_snr": float(np.mean(self.snr)),
        }


def object_roi(support: np.ndarray, dilate: int = 2) -> np.ndarray:
    """Truth support grown by ``dilate`` pixels."""
    support = np.asarray(support, bool)
    if dilate <= 0:
        return support.copy()
    return ndimage.binary_dilation(support, iterations=dilate)


def background_roi(shape: tuple[int, int], patch: int = 8) -> np.ndarray:
    """Four ``patch`` x ``patch`` corner squares."""
    ny, nx = shape
    if 2 * patch > min(ny, nx):
        raise ValueError("image too small for the corner patches")
    mask = np.zeros(shape, bool)
    mask[:patch, :patch] = mask[:patch, -patch:] = True
    mask[-patch:, :patch] = mask[-patch:, -patch:] = True
    return mask


def fit_scale(recon: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Least-squares gain g minimizing ||g |recon| - |truth|||^2 over ``mask``."""
    a = np.abs(recon)[mask]
    b = np.abs(truth)[mask]
    den = float(np.dot(a, a))
    return float(np.dot(a, b) / den) if den > 0 else 0.0


def roi_rmse(recon: np.ndarray, truth: np.ndarray, mask: np.ndarray,
             relative: bool = True) -> tuple[float, float]:
    """Gauge-fixed RMSE of magnitudes over ``mask``; returns ``(rmse, gain)``.

    With ``relative`` the error is divided by the peak truth magnitude in the
    mask, i.e. reported as a fraction of object amplitude.
    """
    recon, truth = np.asarray(recon), np.asarray(truth)
    if recon.shape != truth.shape or mask.shape != truth.shape:
        raise ValueError("recon, truth and mask shapes differ")
    if not mask.any():
        raise ValueError("empty ROI")
    g = fit_scale(recon, truth, mask)
    err = g * np.abs(recon)[mask] - np.abs(truth)[mask]
    rmse = float(np.sqrt(np.mean(err**2)))
    if relative:
        peak = float(np.max(np.abs(truth)[mask]))
        rmse = rmse / peak if peak > 0 else rmse
    return rmse, g


def snr(recon: np.ndarray, obj: np.ndarray, background: np.ndarray) -> float:
    """Mean magnitude over the object ROI divided by the background standard deviation."""
    mag = np.abs(recon)
    sd = float(np.std(mag[background]))
    mean = float(np.mean(mag[obj]))
    return mean / sd if sd > 0 else float("inf")


def profile(series: Sequence[np.ndarray], column: int) -> np.ndarray:
    """Magnitude of one image column per frame, shape (height, frames)."""
    stack = np.abs(np.asarray(series))
    if not 0 <= column < stack.shape[2]:
        raise ValueError("profile column outside the image")
    return stack[:, :, column].T.copy()


def temporal_sharpness(prof: np.ndarray) -> float:
    """Mean over rows of the largest absolute frame-to-frame change."""
    prof = np.asarray(prof, float)
    if prof.shape[1] < 2:
        return 0.0
    return float(np.mean(np.max(np.abs(np.diff(prof, axis=1)), axis=1)))


def compute_metrics(series: Sequence[np.ndarray], truth: Optional[Sequence[np.ndarray]] = None,
                    support: Optional[Sequence[np.ndarray]] = None, profile_column: Optional[int] = None,
                    roi: Optional[np.ndarray] = None, patch: int = 8) -> MetricsReport:
    """Per-frame ROI RMSE and SNR, spatiotemporal profile and its sharpness.

    The object ROI is ``roi`` if given, otherwise the per-frame ``support``
    dilated by 2 px, otherwise the truth pixels above half their maximum
    dilated by 2 px.  RMSE is skipped without truth.
    """
    series = [np.asarray(s) for s in series]
    if not series:
        raise ValueError("empty series")
    shape = series[0].shape
    bg = background_roi(shape, patch)
    if truth is not None and len(truth) != len(series):
        raise ValueError("truth and series lengths differ")

    def obj_mask(t):
        if roi is not None:
            return np.asarray(roi, bool)
        if support is not None:
            return object_roi(support[t])
        if truth is not None:
            mag = np.abs(truth[t])
            return object_roi(mag > 0.5 * mag.max())
        mag = np.abs(series[t])
        return object_roi(mag > 0.5 * mag.max())

    rmses, gains, snrs = ([] if truth is not None else None), [], []
    for t, img in enumerate(series):
        m = obj_mask(t)
        if truth is not None:
            r, g = roi_rmse(img, truth[t], m)
            rmses.append(r)
            gains.append(g)
        snrs.append(snr(img, m, bg))
    col = shape[1] // 2 if profile_column is None else profile_column
    prof = profile(series, col)
    # profiles are compared on a common scale
    peak = prof.max()
    sharp = temporal_sharpness(prof / peak if peak > 0 else prof)
    return MetricsReport(rmses, snrs, prof, sharp, gains if truth is not None else None)
