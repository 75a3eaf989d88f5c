"""Time-aware selective scan with 3D neighborhood fusion for longitudinal risk."""

from ._core import (
    HORIZONS,
    TAU_MIN_MONTHS,
    ConfigError,
    DataError,
    DimensionError,
    Error,
    UndefinedMetricError,
    auc_at,
    c_index,
    clamp_kernels,
    count_flops,
    count_params,
    default_spec,
    discretize,
    fuse,
    generate,
    hazard_loss,
    horizon_label,
    risk_head,
    selective_scan,
    time_aware_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
