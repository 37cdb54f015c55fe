"""BrainMT: hybrid Mamba-Transformer for 4-D volumetric time series.

Thin wrapper over the C++ core. The heavy lifting (autodiff, selective scan,
training) lives in the extension module; this package re-exports the public
surface.
"""

from ._brainmt import (
    ConfigError,
    DimError,
    IoError,
    Model,
    NumericError,
    __version__,
    load_volume,
    reorder,
    save_volume,
    selective_scan,
    zoh_discretize,
    zscore_normalize,
)

__all__ = [
    "ConfigError",
    "DimError",
    "IoError",
    "Model",
    "NumericError",
    "__version__",
    "load_volume",
    "reorder",
    "save_volume",
    "selective_scan",
    "zoh_discretize",
    "zscore_normalize",
]
