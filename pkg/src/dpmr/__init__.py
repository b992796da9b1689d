"""Dual-polarity MRI metal-artifact simulation and correction."""
from .forward_model import (
    AcquisitionParams,
    DomainTag,
    FieldMap,
    distort_encoding,
    distort_splat,
    distort_splat_vjp,
    shift_map,
)
from .metrics import mean_in_mask, nrmse, psnr
from .phantom import (
    DipoleFieldSpec,
    PhantomSpec,
    SpectralBinSpec,
    SpectralBinStack,
    dipole_field,
    make_bin_stack,
    make_dual_pair,
    make_grid_phantom,
    spectral_weight,
)
from .solver import (
    AttentionMap,
    DivergenceError,
    SolverConfig,
    SolverState,
    base_loss,
    correct_pair,
    dc_loss,
    gradient_check,
    solve,
    total_loss,
    total_loss_grad,
    tv,
)
from .spectral import correct_stack, mavric_combine, rsos

__version__ = "0.1.0"
