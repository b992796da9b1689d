"""MR image generation operator along the readout axis.

Two discrete realizations are provided:

* :func:`distort_splat` -- linear forward splatting. Every source pixel pushes
  its intensity to ``x + s(x)``; pile-up and signal voids come out of the
  deposit density. This is the operator used for optimization and it has an
  exact vector-Jacobian product, :func:`distort_splat_vjp`.
* :func:`distort_encoding` -- the k-space encoding sum, evaluated exactly
  with an explicit encoding matrix. Slow (O(N^2) per row) and only used as an
  independent reference.

Images are ``rows x cols`` arrays with the readout (frequency-encoding)
direction along axis 1. Off-resonance maps are in Hz.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "AcquisitionParams",
    "DomainTag",
    "FieldMap",
    "shift_map",
    "distort_splat",
    "distort_splat_vjp",
    "distort_encoding",
]

DEFAULT_READOUT_BANDWIDTH = 780.0  # Hz/pixel


class DomainTag(str, Enum):
    UNDISTORTED = "undistorted"
    DISTORTED_POS = "distorted_pos"
    DISTORTED_NEG = "distorted_neg"


@dataclass(frozen=True)
class AcquisitionParams:
    """Readout encoding parameters.

    ``readout_bandwidth`` (Hz/pixel) is the only combination of the
    gyromagnetic ratio and readout gradient that enters the displacement, so
    an off-resonance of one bandwidth moves signal by exactly one pixel.
    """

    readout_bandwidth: float = DEFAULT_READOUT_BANDWIDTH
    polarity: int = 1
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        if not np.isfinite(self.readout_bandwidth) or self.readout_bandwidth <= 0:
            raise ValueError(f"readout_bandwidth must be > 0, got {self.readout_bandwidth}")
        if self.polarity not in (1, -1):
            raise ValueError(f"polarity must be +1 or -1, got {self.polarity}")
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    def flipped(self) -> "AcquisitionParams":
        return AcquisitionParams(self.readout_bandwidth, -self.polarity, self.shape)

    def with_polarity(self, polarity: int) -> "AcquisitionParams":
        return AcquisitionParams(self.readout_bandwidth, polarity, self.shape)


@dataclass
class FieldMap:
    """Off-resonance / frequency-shift map in Hz, tagged with the pixel grid it lives on."""

    data: np.ndarray
    domain_tag: DomainTag = DomainTag.UNDISTORTED

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.domain_tag = DomainTag(self.domain_tag)
        if self.data.ndim != 2:
            raise ValueError(f"field map must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field map contains non-finite values")

    @property
    def shape(self):
        return self.data.shape


def _field(dv) -> np.ndarray:
    return dv.data if isinstance(dv, FieldMap) else np.asarray(dv, dtype=np.float64)


def _check_pair(image, dv):
    image = np.asarray(image, dtype=np.float64)
    dv = _field(dv)
    if image.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {image.shape}")
    if dv.shape != image.shape:
        raise ValueError(f"field shape {dv.shape} does not match image shape {image.shape}")
    if not np.all(np.isfinite(dv)):
        raise ValueError("field map contains non-finite values")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    return image, dv


def shift_map(dv, params: AcquisitionParams) -> np.ndarray:
    """Readout displacement in pixels, ``polarity * dv / readout_bandwidth``."""
    return (params.polarity * _field(dv)) / params.readout_bandwidth


def _splat_geometry(shift):
    rows, cols = shift.shape
    pos = np.arange(cols, dtype=np.float64)[None, :] + shift
    left = np.floor(pos)
    frac = pos - left
    left = left.astype(np.int64)
    right = left + 1
    base = (np.arange(rows, dtype=np.int64) * cols)[:, None]
    ok_left = (left >= 0) & (left < cols)
    ok_right = (right >= 0) & (right < cols)
    return left, right, frac, ok_left, ok_right, base


def distort_splat(image, dv, params: AcquisitionParams) -> np.ndarray:
    """Distort ``image`` by the off-resonance map ``dv`` with linear splatting.

    Each source pixel ``x`` of a readout row deposits ``(1 - frac)`` of its
    intensity at ``floor(x')`` and ``frac`` at ``floor(x') + 1`` where
    ``x' = x + s(x)``. Deposits that land outside the row are dropped.
    """
    image, dv = _check_pair(image, dv)
    rows, cols = image.shape
    left, right, frac, ok_left, ok_right, base = _splat_geometry(shift_map(dv, params))
    idx = np.concatenate([(base + left)[ok_left], (base + right)[ok_right]])
    w = np.concatenate([(image * (1.0 - frac))[ok_left], (image * frac)[ok_right]])
    # bincount accumulates in index order of the input, so results do not
    # depend on how rows are scheduled.
    out = np.bincount(idx, weights=w, minlength=rows * cols)
    return out.reshape(rows, cols)


def distort_splat_vjp(image, dv, params: AcquisitionParams, upstream):
    """Vector-Jacobian product of :func:`distort_splat`.

    Returns ``(grad_image, grad_dv)`` for the scalar ``sum(upstream * out)``.
    The splat is piecewise linear in the shift, so ``grad_dv`` is exact away
    from integer crossings of ``x'`` and a one-sided subgradient on them.
    """
    image, dv = _check_pair(image, dv)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != image.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match image shape {image.shape}")
    rows, cols = image.shape
    left, right, frac, ok_left, ok_right, _ = _splat_geometry(shift_map(dv, params))
    r = np.arange(rows)[:, None]
    u_left = np.where(ok_left, upstream[r, np.clip(left, 0, cols - 1)], 0.0)
    u_right = np.where(ok_right, upstream[r, np.clip(right, 0, cols - 1)], 0.0)
    grad_image = (1.0 - frac) * u_left + frac * u_right
    grad_shift = image * (u_right - u_left)
    grad_dv = grad_shift * (params.polarity / params.readout_bandwidth)
    return grad_image, grad_dv


def distort_encoding(image, dv, params: AcquisitionParams) -> np.ndarray:
    """Distort ``image`` by evaluating the readout encoding sum explicitly.

    Per readout row of length ``N`` the signal ``S(k) = sum_x I(x)
    exp(-2j pi k (x + s(x)) / N)`` is formed with an explicit encoding matrix
    and reconstructed with an inverse DFT; the real part is returned. The
    k-space index runs over the centred range ``-N/2 .. N/2-1`` (the sampled
    band is symmetric about the centre of k-space), which makes sub-pixel
    displacements band-limited interpolation. Boundaries are periodic.
    """
    image, dv = _check_pair(image, dv)
    rows, cols = image.shape
    if cols < 2:
        raise ValueError("distort_encoding needs at least 2 readout samples")
    shift = shift_map(dv, params)
    k = np.arange(cols) - cols // 2
    xhat = np.arange(cols)
    recon = np.exp(2j * np.pi * np.outer(k, xhat) / cols) / cols  # (k, xhat)
    out = np.empty((rows, cols), dtype=np.float64)
    for row in range(rows):
        pos = xhat + shift[row]
        enc = np.exp(-2j * np.pi * np.outer(k, pos) / cols)  # (k, x)
        signal = enc @ image[row]
        out[row] = (signal @ recon).real
    return out
