import math

import numpy as np
import pytest

from dpmr import AcquisitionParams

RBW = 780.0


@pytest.fixture
def params():
    return AcquisitionParams()


def naive_splat(image, dv, rbw=RBW, polarity=1):
    """Pixel-by-pixel linear splat, written independently of the library."""
    image = np.asarray(image, dtype=float)
    rows, cols = image.shape
    out = np.zeros_like(image)
    for r in range(rows):
        for x in range(cols):
            pos = x + polarity * dv[r][x] / rbw
            left = math.floor(pos)
            frac = pos - left
            for idx, wgt in ((left, 1.0 - frac), (left + 1, frac)):
                if 0 <= idx < cols:
                    out[r, idx] += wgt * image[r, x]
    return out


def smooth_image(seed, shape=(64, 64), n_blobs=4, sigma=8.0, floor=0.2):
    rng = np.random.default_rng(seed)
    rows, cols = shape
    r, c = np.mgrid[:rows, :cols].astype(float)
    img = np.full(shape, floor)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.2, 0.8, 2) * (rows, cols)
        img += rng.uniform(0.3, 1.0) * np.exp(-((r - cy) ** 2 + (c - cx) ** 2) / (2 * sigma**2))
    return img


def interior_field(seed, shape=(64, 64), max_shift=2.0, margin=4, sigma=8.0, rbw=RBW):
    """Smooth field (Hz) whose support stays ``margin`` px plus the shift from the readout edges.

    The readout profile is a Hann window over the allowed columns so the
    field and its slope vanish at the support edge; the peak |shift| is
    exactly ``max_shift`` pixels.
    """
    rng = np.random.default_rng(seed)
    rows, cols = shape
    pad = margin + int(math.ceil(max_shift))
    win = np.zeros(cols)
    win[pad : cols - pad] = np.hanning(cols - 2 * pad)
    r, c = np.mgrid[:rows, :cols].astype(float)
    f = np.zeros(shape)
    for _ in range(3):
        cy, cx = rng.uniform(0.25, 0.75, 2) * (rows, cols)
        f += rng.uniform(-1, 1) * np.exp(-((r - cy) ** 2 + (c - cx) ** 2) / (2 * sigma**2))
    f *= win[None, :]
    f *= max_shift / np.abs(f).max()
    return f * rbw


def framed_grid(shape=(64, 64), margin=6):
    """Band-limited grid phantom with an empty border wider than the test shifts."""
    from dpmr import PhantomSpec, make_grid_phantom

    return make_grid_phantom(PhantomSpec(height=shape[0], width=shape[1], metal_radius=0.0, margin=margin))


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.LINES, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
