"""Image-quality metrics against synthetic ground truth."""
from __future__ import annotations

import math

import numpy as np

__all__ = ["EXACT", "nrmse", "psnr", "mean_in_mask", "format_metrics"]

#: returned by :func:`psnr` when the images are identical
EXACT = math.inf


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match {shape}")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    return mask


def nrmse(test, ref, mask=None) -> float:
    """``||test - ref|| / ||ref||`` over the masked pixels."""
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if test.shape != ref.shape:
        raise ValueError(f"shape mismatch: {test.shape} vs {ref.shape}")
    m = _mask(mask, ref.shape)
    denom = np.linalg.norm(ref[m])
    if denom == 0:
        raise ValueError("reference has zero norm over the mask")
    return float(np.linalg.norm(test[m] - ref[m]) / denom)


def psnr(test, ref) -> float:
    """Peak signal-to-noise ratio in dB with the reference maximum as peak.

    Identical images give :data:`EXACT` (``inf``).
    """
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if test.shape != ref.shape:
        raise ValueError(f"shape mismatch: {test.shape} vs {ref.shape}")
    peak = ref.max()
    if peak <= 0:
        raise ValueError("reference maximum must be > 0")
    mse = np.mean((test - ref) ** 2)
    if mse == 0:
        return EXACT
    return float(10.0 * np.log10(peak**2 / mse))


def mean_in_mask(values, mask) -> float:
    values = np.asarray(values, dtype=np.float64)
    m = _mask(mask, values.shape)
    return float(values[m].mean())


def format_metrics(metrics: dict) -> str:
    """One ``key=value`` line per metric, in insertion order."""
    lines = []
    for key, value in metrics.items():
        if isinstance(value, float) and math.isinf(value):
            value = "exact"
        lines.append(f"{key}={value}")
    return "\n".join(lines)
