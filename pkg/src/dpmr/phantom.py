"""Synthetic phantoms, metal-induced off-resonance fields and spectral bins.

The default scenario mimics a gridded fluid phantom with a metallic implant
imaged with 24 Gaussian spectral bins spaced 1 kHz apart.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.ndimage import gaussian_filter

from .forward_model import AcquisitionParams, DomainTag, FieldMap, distort_splat

__all__ = [
    "PhantomSpec",
    "DipoleFieldSpec",
    "SpectralBinSpec",
    "SpectralBinStack",
    "make_grid_phantom",
    "dipole_field",
    "spectral_weight",
    "make_bin_stack",
    "make_dual_pair",
    "spec_from_dict",
]

DEFAULT_MAX_AMPLITUDE = 12000.0  # Hz
DEFAULT_BIN_CENTERS = tuple(float(c) for c in np.arange(-11500.0, 11500.0 + 1, 1000.0))
DEFAULT_BIN_FWHM = 2250.0


@dataclass(frozen=True)
class PhantomSpec:
    """Grid phantom geometry.

    ``margin`` pixels on every side are left empty (air around the phantom)
    and ``blur`` is the Gaussian width, in pixels, used to band-limit the
    grid the way a finite k-space acquisition would. The metal disk is cut
    out after blurring so the signal void keeps a sharp edge.
    """

    height: int = 64
    width: int = 64
    grid_period: int = 12
    grid_line_width: int = 3
    background_intensity: float = 0.3
    line_intensity: float = 1.0
    metal_center: tuple[float, float] = (31.5, 31.5)
    metal_radius: float = 8.0
    margin: int = 0
    blur: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "metal_center", tuple(float(v) for v in self.metal_center))
        if self.height < 8 or self.width < 8:
            raise ValueError("phantom must be at least 8x8")
        if self.metal_radius < 0:
            raise ValueError("metal_radius must be >= 0")
        if not (self.grid_period > self.grid_line_width >= 1):
            raise ValueError("need grid_period > grid_line_width >= 1")
        if self.margin < 0 or 2 * self.margin >= min(self.height, self.width):
            raise ValueError("margin leaves no phantom")
        if self.blur < 0:
            raise ValueError("blur must be >= 0")


@dataclass(frozen=True)
class DipoleFieldSpec:
    """Off-resonance of a metal cylinder: ``A (R/r)^2 cos(2(theta - theta0))``.

    ``amplitude`` is the value at ``r = R`` along ``theta0``; angles are
    measured from the readout (column) axis.
    """

    center: tuple[float, float] = (31.5, 31.5)
    core_radius: float = 8.0
    amplitude: float = 3 * 780.0
    orientation: float = 0.0
    max_amplitude: float = DEFAULT_MAX_AMPLITUDE

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if self.core_radius < 1:
            raise ValueError("core_radius must be >= 1")
        if not math.isfinite(self.amplitude) or abs(self.amplitude) > self.max_amplitude:
            raise ValueError(f"|amplitude| must be <= {self.max_amplitude} Hz, got {self.amplitude}")


@dataclass(frozen=True)
class SpectralBinSpec:
    centers: tuple[float, ...] = DEFAULT_BIN_CENTERS
    fwhm: float = DEFAULT_BIN_FWHM

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(float(c) for c in self.centers))
        if len(self.centers) < 1:
            raise ValueError("need at least one bin")
        if any(b <= a for a, b in zip(self.centers, self.centers[1:])):
            raise ValueError("bin centers must be strictly increasing")
        if not self.fwhm > 0:
            raise ValueError("fwhm must be > 0")


@dataclass
class SpectralBinStack:
    """Per-bin images, shape ``(bins, rows, cols)``."""

    bins: np.ndarray
    spec: SpectralBinSpec = field(default_factory=SpectralBinSpec)

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.float64)
        if self.bins.ndim != 3 or self.bins.shape[0] < 1:
            raise ValueError(f"bin stack must be (bins, rows, cols), got {self.bins.shape}")
        if self.bins.shape[0] != len(self.spec.centers):
            raise ValueError(f"{self.bins.shape[0]} bin images but {len(self.spec.centers)} bin centers")

    def __len__(self):
        return self.bins.shape[0]

    def map(self, fn) -> "SpectralBinStack":
        return SpectralBinStack(np.stack([fn(b) for b in self.bins]), self.spec)


def make_grid_phantom(spec: PhantomSpec) -> np.ndarray:
    rows, cols = np.mgrid[: spec.height, : spec.width]
    img = np.full((spec.height, spec.width), float(spec.background_intensity))
    on_line = ((rows % spec.grid_period) < spec.grid_line_width) | ((cols % spec.grid_period) < spec.grid_line_width)
    img[on_line] = spec.line_intensity
    if spec.margin:
        m = spec.margin
        outside = np.ones_like(img, dtype=bool)
        outside[m:-m, m:-m] = False
        img[outside] = 0.0
    if spec.blur > 0:
        img = gaussian_filter(img, spec.blur, mode="constant" if spec.margin else "nearest")
    cy, cx = spec.metal_center
    metal = (rows - cy) ** 2 + (cols - cx) ** 2 < spec.metal_radius**2
    if metal.all():
        raise ValueError("metal disk covers the whole image")
    img[metal] = 0.0
    return img


def dipole_field(spec: DipoleFieldSpec, shape) -> FieldMap:
    rows, cols = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy = rows - spec.center[0]
    dx = cols - spec.center[1]
    r = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    R = spec.core_radius
    radial = np.where(r >= R, (R / np.maximum(r, R)) ** 2, 1.0)
    return FieldMap(spec.amplitude * radial * np.cos(2.0 * (theta - spec.orientation)), DomainTag.UNDISTORTED)


def spectral_weight(delta, center, fwhm):
    """Gaussian RF profile with unit peak: ``exp(-4 ln2 (delta - center)^2 / fwhm^2)``."""
    if not fwhm > 0:
        raise ValueError("fwhm must be > 0")
    delta = np.asarray(delta, dtype=np.float64)
    return np.exp(-4.0 * math.log(2.0) * (delta - center) ** 2 / fwhm**2)


def make_bin_stack(I0, dv, bins: SpectralBinSpec) -> SpectralBinStack:
    """Weight the undistorted image by each bin's excitation profile.

    Distortion is applied afterwards, per bin, by the caller.
    """
    I0 = np.asarray(I0, dtype=np.float64)
    dv = dv.data if isinstance(dv, FieldMap) else np.asarray(dv, dtype=np.float64)
    if I0.shape != dv.shape:
        raise ValueError(f"image shape {I0.shape} does not match field shape {dv.shape}")
    stack = np.stack([I0 * spectral_weight(dv, c, bins.fwhm) for c in bins.centers])
    return SpectralBinStack(stack, bins)


def make_dual_pair(I0, dv, params: AcquisitionParams):
    """Images acquired with the positive and negative readout gradient."""
    pos = params.with_polarity(1)
    return distort_splat(I0, dv, pos), distort_splat(I0, dv, pos.flipped())


def spec_from_dict(cls, data: dict):
    """Build one of the spec dataclasses from a dict, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
