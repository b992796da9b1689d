"""Direct minimization of the dual-polarity correction objective.

Unknowns, all on the image grid:

* ``dw_pos`` -- frequency-shift map that warps the positive-polarity image
  onto the negative one (lives on the positive image's grid);
* ``dw_neg`` -- the reverse map, on the negative image's grid;
* ``dv`` -- off-resonance map on the undistorted grid;
* ``latent`` -- attention logits, ``rho = sigmoid(latent)``.

Objective::

    lambda_base * L_base + lambda_dc * L_dc + lambda_tv * (TV(dv) + TV(dw_pos) + TV(dw_neg))

``L_base`` and ``L_dc`` are pixel-mean squared errors; TV is measured on the
maps expressed in readout pixels (Hz / readout bandwidth). The corrected
image is ``rho * F(I_pos, dw_pos/2) + (1 - rho) * F(I_neg, dw_neg/2)``.

:func:`solve` runs Adam on exact reverse-mode gradients. The field
gradients are passed through a Gaussian smoothing preconditioner whose width
is annealed during the run; this changes the descent path, not the
objective or its stationary points.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from .forward_model import (
    AcquisitionParams,
    DomainTag,
    FieldMap,
    distort_splat,
    distort_splat_vjp,
)

__all__ = [
    "AttentionMap",
    "SolverConfig",
    "SolverState",
    "SolveResult",
    "LossBreakdown",
    "DivergenceError",
    "Adam",
    "sigmoid",
    "base_loss",
    "half_corrections",
    "correct_pair",
    "dc_loss",
    "tv",
    "tv_grad",
    "total_loss",
    "total_loss_grad",
    "solve",
    "gradient_check",
    "off_kink_instance",
]

log = logging.getLogger(__name__)

FIELD_NAMES = ("dw_pos", "dw_neg", "dv")
PARAM_NAMES = FIELD_NAMES + ("latent",)


class DivergenceError(RuntimeError):
    """The objective became non-finite during :func:`solve`."""

    def __init__(self, iteration: int, breakdown: "LossBreakdown", where: str = ""):
        self.iteration = iteration
        self.breakdown = breakdown
        prefix = f"{where}: " if where else ""
        super().__init__(
            f"{prefix}loss diverged at iteration {iteration}: total={breakdown.total} "
            f"base={breakdown.base} dc={breakdown.dc} tv={breakdown.tv}"
        )


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@dataclass
class AttentionMap:
    """Blend weights ``rho = sigmoid(latent)``, strictly inside (0, 1)."""

    latent: np.ndarray

    def __post_init__(self):
        self.latent = np.asarray(self.latent, dtype=np.float64)
        if not np.all(np.isfinite(self.latent)):
            raise ValueError("attention latent contains non-finite values")

    @property
    def rho(self) -> np.ndarray:
        return sigmoid(self.latent)

    @classmethod
    def uniform(cls, shape) -> "AttentionMap":
        return cls(np.zeros(shape))


@dataclass
class SolverConfig:
    """Objective weights and optimizer settings.

    Step sizes: ``field_lr`` is in readout pixels per iteration (multiplied
    by the readout bandwidth to get Hz), ``latent_lr`` is in logits per
    iteration. ``precond_sigma`` is the initial Gaussian width (pixels) of
    the field-gradient smoothing, linearly annealed to
    ``precond_sigma_final`` over ``max_iters``; 0 disables it.
    """

    lambda_base: float = 1.0
    lambda_dc: float = 1.0
    lambda_tv: float = 1e-4
    field_lr: float = 3e-2
    latent_lr: float = 1e-2
    max_iters: int = 2000
    rel_tol: float = 1e-7
    stop_window: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precond_sigma: float = 6.0
    precond_sigma_final: float = 0.5
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_base", "lambda_dc", "lambda_tv"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.field_lr > 0 and self.latent_lr > 0):
            raise ValueError("learning rates must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.stop_window < 1:
            raise ValueError("stop_window must be >= 1")
        if self.precond_sigma < 0 or self.precond_sigma_final < 0:
            raise ValueError("preconditioner widths must be >= 0")

    def sigma_at(self, iteration: int) -> float:
        t = iteration / max(self.max_iters - 1, 1)
        return self.precond_sigma + (self.precond_sigma_final - self.precond_sigma) * t

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown solver setting(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def _pos_tag(polarity: int) -> DomainTag:
    return DomainTag.DISTORTED_POS if polarity == 1 else DomainTag.DISTORTED_NEG


@dataclass
class SolverState:
    dw_pos: FieldMap
    dw_neg: FieldMap
    dv: FieldMap
    attention: AttentionMap
    moments: dict = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def zeros(cls, shape, polarity: int = 1) -> "SolverState":
        shape = tuple(shape)
        return cls(
            dw_pos=FieldMap(np.zeros(shape), _pos_tag(polarity)),
            dw_neg=FieldMap(np.zeros(shape), _pos_tag(-polarity)),
            dv=FieldMap(np.zeros(shape), DomainTag.UNDISTORTED),
            attention=AttentionMap.uniform(shape),
        )

    def arrays(self) -> dict:
        """Live references to the optimized arrays, keyed by parameter name."""
        return {
            "dw_pos": self.dw_pos.data,
            "dw_neg": self.dw_neg.data,
            "dv": self.dv.data,
            "latent": self.attention.latent,
        }

    def copy(self) -> "SolverState":
        return SolverState(
            FieldMap(self.dw_pos.data.copy(), self.dw_pos.domain_tag),
            FieldMap(self.dw_neg.data.copy(), self.dw_neg.domain_tag),
            FieldMap(self.dv.data.copy(), self.dv.domain_tag),
            AttentionMap(self.attention.latent.copy()),
            {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
            self.iteration,
        )


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted total plus the unweighted terms it is built from."""

    total: float
    base: float
    dc: float
    tv: float

    def line(self, iteration: int) -> str:
        return f"{iteration},{self.total!r},{self.base!r},{self.dc!r},{self.tv!r}"


def _field(x, expected: DomainTag | None = None) -> np.ndarray:
    if isinstance(x, FieldMap):
        if expected is not None and x.domain_tag != expected:
            raise ValueError(f"field map tagged {x.domain_tag.value}, expected {expected.value}")
        return x.data
    return np.asarray(x, dtype=np.float64)


def _image(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_shapes(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch: {np.shape(a)} vs {shape}")


def _warp_params(params: AcquisitionParams) -> AcquisitionParams:
    # shift maps are always applied with the positive readout gradient
    return params.with_polarity(1)


def base_loss(I_pos, I_neg, dw_pos, dw_neg, params: AcquisitionParams) -> float:
    """Cross-prediction error between the two polarity images.

    ``dw_pos`` warps ``I_pos`` onto ``I_neg`` and ``dw_neg`` warps ``I_neg``
    onto ``I_pos``; each term is a pixel-mean squared error.
    """
    p = params.polarity
    dw_pos = _field(dw_pos, _pos_tag(p))
    dw_neg = _field(dw_neg, _pos_tag(-p))
    I_pos, I_neg = _image(I_pos), _image(I_neg)
    _check_shapes(I_pos, I_neg, dw_pos, dw_neg)
    w = _warp_params(params)
    pred_neg = distort_splat(I_pos, dw_pos, w)
    pred_pos = distort_splat(I_neg, dw_neg, w)
    return float(np.mean((pred_pos - I_pos) ** 2) + np.mean((pred_neg - I_neg) ** 2))


def half_corrections(I_pos, I_neg, dw_pos, dw_neg, params: AcquisitionParams):
    """Both inputs warped by half of their own shift map."""
    p = params.polarity
    dw_pos = _field(dw_pos, _pos_tag(p))
    dw_neg = _field(dw_neg, _pos_tag(-p))
    I_pos, I_neg = _image(I_pos), _image(I_neg)
    _check_shapes(I_pos, I_neg, dw_pos, dw_neg)
    w = _warp_params(params)
    return distort_splat(I_pos, dw_pos / 2, w), distort_splat(I_neg, dw_neg / 2, w)


def correct_pair(I_pos, I_neg, dw_pos, dw_neg, rho, params: AcquisitionParams) -> np.ndarray:
    """Attention-weighted blend of the two half-corrected images."""
    rho = rho.rho if isinstance(rho, AttentionMap) else _image(rho)
    _check_shapes(_image(I_pos), rho)
    if np.any(rho < 0) or np.any(rho > 1):
        raise ValueError("attention weights must lie in [0, 1]")
    from_pos, from_neg = half_corrections(I_pos, I_neg, dw_pos, dw_neg, params)
    return rho * from_pos + (1.0 - rho) * from_neg


def dc_loss(I0_hat, dv, I_pos, I_neg, params: AcquisitionParams) -> float:
    """Re-distort the corrected image with both gradients and compare to the inputs.

    ``I_pos`` was acquired with ``params.polarity``, ``I_neg`` with the
    opposite polarity.
    """
    dv = _field(dv, DomainTag.UNDISTORTED)
    I0_hat, I_pos, I_neg = _image(I0_hat), _image(I_pos), _image(I_neg)
    _check_shapes(I0_hat, dv, I_pos, I_neg)
    pred_pos = distort_splat(I0_hat, dv, params)
    pred_neg = distort_splat(I0_hat, dv, params.flipped())
    return float(np.mean((pred_pos - I_pos) ** 2) + np.mean((pred_neg - I_neg) ** 2))


def tv(f) -> float:
    """Anisotropic total variation divided by the pixel count; no wrap-around."""
    f = _field(f)
    return float((np.abs(np.diff(f, axis=0)).sum() + np.abs(np.diff(f, axis=1)).sum()) / f.size)


def tv_grad(f) -> np.ndarray:
    """Subgradient of :func:`tv`, taking ``sign(0) = 0``."""
    f = _field(f)
    g = np.zeros_like(f)
    s = np.sign(np.diff(f, axis=0))
    g[1:, :] += s
    g[:-1, :] -= s
    s = np.sign(np.diff(f, axis=1))
    g[:, 1:] += s
    g[:, :-1] -= s
    return g / f.size


def _forward(state: SolverState, I_pos, I_neg, params: AcquisitionParams, cfg: SolverConfig):
    w = _warp_params(params)
    dw_pos, dw_neg, dv = state.dw_pos.data, state.dw_neg.data, state.dv.data
    rho = state.attention.rho
    n = I_pos.size
    r_base_neg = distort_splat(I_pos, dw_pos, w) - I_neg
    r_base_pos = distort_splat(I_neg, dw_neg, w) - I_pos
    base = float(np.sum(r_base_pos**2) / n + np.sum(r_base_neg**2) / n)
    from_pos = distort_splat(I_pos, dw_pos / 2, w)
    from_neg = distort_splat(I_neg, dw_neg / 2, w)
    I0_hat = rho * from_pos + (1.0 - rho) * from_neg
    r_dc_pos = distort_splat(I0_hat, dv, params) - I_pos
    r_dc_neg = distort_splat(I0_hat, dv, params.flipped()) - I_neg
    dc = float(np.sum(r_dc_pos**2) / n + np.sum(r_dc_neg**2) / n)
    tv_sum = (tv(dv) + tv(dw_pos) + tv(dw_neg)) / params.readout_bandwidth
    total = cfg.lambda_base * base + cfg.lambda_dc * dc + cfg.lambda_tv * tv_sum
    cache = {
        "rho": rho,
        "from_pos": from_pos,
        "from_neg": from_neg,
        "I0_hat": I0_hat,
        "r_base_neg": r_base_neg,
        "r_base_pos": r_base_pos,
        "r_dc_pos": r_dc_pos,
        "r_dc_neg": r_dc_neg,
    }
    return LossBreakdown(total, base, dc, tv_sum), cache


def _backward(state: SolverState, I_pos, I_neg, params: AcquisitionParams, cfg: SolverConfig, c: dict) -> dict:
    w = _warp_params(params)
    n = I_pos.size
    dw_pos, dw_neg, dv = state.dw_pos.data, state.dw_neg.data, state.dv.data
    rho = c["rho"]

    _, g_dw_pos = distort_splat_vjp(I_pos, dw_pos, w, (2 * cfg.lambda_base / n) * c["r_base_neg"])
    _, g_dw_neg = distort_splat_vjp(I_neg, dw_neg, w, (2 * cfg.lambda_base / n) * c["r_base_pos"])

    g_I0_a, g_dv_a = distort_splat_vjp(c["I0_hat"], dv, params, (2 * cfg.lambda_dc / n) * c["r_dc_pos"])
    g_I0_b, g_dv_b = distort_splat_vjp(c["I0_hat"], dv, params.flipped(), (2 * cfg.lambda_dc / n) * c["r_dc_neg"])
    g_I0 = g_I0_a + g_I0_b
    g_dv = g_dv_a + g_dv_b

    g_latent = g_I0 * (c["from_pos"] - c["from_neg"]) * rho * (1.0 - rho)
    _, g_half_pos = distort_splat_vjp(I_pos, dw_pos / 2, w, rho * g_I0)
    _, g_half_neg = distort_splat_vjp(I_neg, dw_neg / 2, w, (1.0 - rho) * g_I0)
    g_dw_pos = g_dw_pos + 0.5 * g_half_pos
    g_dw_neg = g_dw_neg + 0.5 * g_half_neg

    if cfg.lambda_tv:
        k = cfg.lambda_tv / params.readout_bandwidth
        g_dw_pos = g_dw_pos + k * tv_grad(dw_pos)
        g_dw_neg = g_dw_neg + k * tv_grad(dw_neg)
        g_dv = g_dv + k * tv_grad(dv)
    return {"dw_pos": g_dw_pos, "dw_neg": g_dw_neg, "dv": g_dv, "latent": g_latent}


def _validated(state: SolverState, I_pos, I_neg):
    I_pos, I_neg = _image(I_pos), _image(I_neg)
    _check_shapes(I_pos, I_neg, state.dw_pos.data, state.dw_neg.data, state.dv.data, state.attention.latent)
    return I_pos, I_neg


def total_loss(state: SolverState, I_pos, I_neg, params: AcquisitionParams, cfg: SolverConfig) -> LossBreakdown:
    I_pos, I_neg = _validated(state, I_pos, I_neg)
    return _forward(state, I_pos, I_neg, params, cfg)[0]


def total_loss_grad(state: SolverState, I_pos, I_neg, params: AcquisitionParams, cfg: SolverConfig) -> dict:
    """Exact gradients of :func:`total_loss` keyed by ``dw_pos``, ``dw_neg``, ``dv``, ``latent``."""
    I_pos, I_neg = _validated(state, I_pos, I_neg)
    _, cache = _forward(state, I_pos, I_neg, params, cfg)
    return _backward(state, I_pos, I_neg, params, cfg, cache)


class Adam:
    """Adam over named arrays, updated in place."""

    def __init__(self, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = lrs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.moments: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, frozen=()):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, g in grads.items():
            if name in frozen:
                continue
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(g), np.zeros_like(g))
            m, v = self.moments[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= self.lrs[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SolveResult:
    state: SolverState
    rho: np.ndarray
    I0_hat: np.ndarray
    from_pos: np.ndarray
    from_neg: np.ndarray
    loss_trace: list
    scale: float = 1.0

    @property
    def dw_pos(self) -> FieldMap:
        return self.state.dw_pos

    @property
    def dw_neg(self) -> FieldMap:
        return self.state.dw_neg

    @property
    def dv(self) -> FieldMap:
        return self.state.dv

    def trace_lines(self) -> list[str]:
        return ["iter,total,base,dc,tv"] + [b.line(i) for i, b in enumerate(self.loss_trace)]


def _partial_breakdown(state: SolverState, I_pos, I_neg, params: AcquisitionParams, cfg: SolverConfig) -> LossBreakdown:
    # evaluate whichever terms still can be; the rest are reported as nan
    nan = float("nan")

    def attempt(fn):
        try:
            return float(fn())
        except ValueError:
            return nan

    arr = state.arrays()
    base = attempt(lambda: base_loss(I_pos, I_neg, arr["dw_pos"], arr["dw_neg"], params))
    dc = attempt(
        lambda: dc_loss(
            correct_pair(I_pos, I_neg, arr["dw_pos"], arr["dw_neg"], state.attention.rho, params), arr["dv"], I_pos, I_neg, params
        )
    )
    t = sum(tv(arr[n]) for n in FIELD_NAMES) / params.readout_bandwidth
    total = cfg.lambda_base * base + cfg.lambda_dc * dc + cfg.lambda_tv * t
    return LossBreakdown(total, base, dc, t)


def _check_input(img, name):
    if img.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} must be finite")
    if np.any(img < 0):
        raise ValueError(f"{name} must be non-negative")


def solve(
    I_pos,
    I_neg,
    params: AcquisitionParams,
    cfg: SolverConfig | None = None,
    *,
    freeze_latent: bool = False,
    callback: Callable | None = None,
) -> SolveResult:
    """Estimate shift maps, off-resonance and attention for one image pair.

    ``I_pos`` is the image acquired with ``params.polarity`` (normally +1)
    and ``I_neg`` the one acquired with the opposite gradient. Every map
    starts at zero, so the first corrected image is the plain average of the
    inputs. Iteration stops after ``cfg.max_iters`` steps or once the total
    loss changes by less than ``cfg.rel_tol`` (relative) over
    ``cfg.stop_window`` iterations.

    With ``cfg.normalize`` the pair is divided by its joint maximum while
    optimizing; the returned images are rescaled, the loss trace is not.
    ``callback(iteration, state, breakdown)`` is called before each update.
    """
    cfg = cfg or SolverConfig()
    I_pos, I_neg = _image(I_pos), _image(I_neg)
    _check_shapes(I_pos, I_neg)
    _check_input(I_pos, "I_pos")
    _check_input(I_neg, "I_neg")

    scale = 1.0
    if cfg.normalize:
        peak = float(max(I_pos.max(), I_neg.max()))
        if peak > 0:
            scale = peak
    Ip, In = I_pos / scale, I_neg / scale

    state = SolverState.zeros(Ip.shape, params.polarity)
    live = state.arrays()
    step = cfg.field_lr * params.readout_bandwidth
    opt = Adam({"dw_pos": step, "dw_neg": step, "dv": step, "latent": cfg.latent_lr}, cfg.beta1, cfg.beta2, cfg.eps)
    frozen = ("latent",) if freeze_latent else ()
    trace: list[LossBreakdown] = []
    window = cfg.stop_window

    for it in range(cfg.max_iters + 1):
        if not all(np.isfinite(a).all() for a in live.values()):
            raise DivergenceError(it, _partial_breakdown(state, Ip, In, params, cfg), where="non-finite parameters")
        loss, cache = _forward(state, Ip, In, params, cfg)
        if not np.isfinite(loss.total):
            raise DivergenceError(it, loss)
        trace.append(loss)
        if callback is not None:
            callback(it, state, loss)
        if it == cfg.max_iters:
            break
        if len(trace) > window:
            prev = trace[-1 - window].total
            if abs(prev - loss.total) <= cfg.rel_tol * abs(prev):
                break
        grads = _backward(state, Ip, In, params, cfg, cache)
        sigma = cfg.sigma_at(it)
        if sigma > 0:
            for name in FIELD_NAMES:
                grads[name] = gaussian_filter(grads[name], sigma, mode="nearest")
        opt.step(live, grads, frozen)
        state.iteration = it + 1

    state.moments = opt.moments
    log.debug("solve stopped after %d iterations, loss %s", state.iteration, trace[-1])
    rho = state.attention.rho
    from_pos, from_neg = half_corrections(Ip, In, state.dw_pos, state.dw_neg, params)
    I0_hat = (rho * from_pos + (1.0 - rho) * from_neg) * scale
    return SolveResult(state, rho, I0_hat, from_pos * scale, from_neg * scale, trace, scale)


def off_kink_instance(seed: int, size: int, params: AcquisitionParams | None = None):
    """Random pair and solver state whose splat positions sit away from integer crossings.

    Shift maps get ``2m + 0.5 + u`` pixels (so both the full and the halved
    shift have fractional parts in [0.2, 0.8]), the off-resonance map gets
    ``m + 0.5 + u`` pixels, with ``|u| <= 0.1``.
    """
    params = params or AcquisitionParams()
    rng = np.random.default_rng(seed)
    shape = (size, size)
    rbw = params.readout_bandwidth
    I_pos = rng.uniform(0.2, 1.0, shape)
    I_neg = rng.uniform(0.2, 1.0, shape)
    state = SolverState.zeros(shape, params.polarity)
    for name in ("dw_pos", "dw_neg"):
        px = 2 * rng.integers(-1, 2, shape) + 0.5 + rng.uniform(-0.1, 0.1, shape)
        getattr(state, name).data[:] = px * rbw
    px = rng.integers(-1, 2, shape) + 0.5 + rng.uniform(-0.1, 0.1, shape)
    state.dv.data[:] = px * rbw
    state.attention.latent[:] = rng.normal(0.0, 1.0, shape)
    return I_pos, I_neg, state


def gradient_check(
    seed: int = 0,
    size: int = 8,
    params: AcquisitionParams | None = None,
    cfg: SolverConfig | None = None,
    *,
    field_step: float = 1e-3,
    latent_step: float = 1e-5,
    corrupt: bool = False,
) -> dict:
    """Compare :func:`total_loss_grad` with central differences on every pixel of every map.

    Returns ``{name: max |analytic - numeric| / max |numeric|}``. ``corrupt``
    perturbs the analytic gradient (negative control).
    """
    if size < 4:
        raise ValueError("size must be >= 4")
    params = params or AcquisitionParams()
    cfg = cfg or SolverConfig()
    I_pos, I_neg, state = off_kink_instance(seed, size, params)
    analytic = total_loss_grad(state, I_pos, I_neg, params, cfg)
    if corrupt:
        analytic = {k: v * 1.01 for k, v in analytic.items()}
    live = state.arrays()
    errors = {}
    for name in PARAM_NAMES:
        h = latent_step if name == "latent" else field_step
        arr = live[name]
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = total_loss(state, I_pos, I_neg, params, cfg).total
            arr[idx] = orig - h
            down = total_loss(state, I_pos, I_neg, params, cfg).total
            arr[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        scale = np.abs(numeric).max()
        errors[name] = float(np.abs(analytic[name] - numeric).max() / scale) if scale > 0 else float(np.abs(analytic[name]).max())
    return errors
