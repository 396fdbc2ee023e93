"""Selective state space scans, two-modality fusion blocks and an RGB-X segmentation forward pass."""

from .errors import (ConfigError, DimensionError, DomainError, NumericError, ParseError, SigmaError,
                     StabilityError)
from .fusion import (CrossExchangeMode, ModalityPair, concat_selective_scan, conmb, consa_baseline, cromb,
                     cross_selective_scan)
from .model import (SegmentationMap, SigmaConfig, StageFeatures, count_flops, count_params, forward,
                    init_weights, predict, predict_rgb_only)
from .scan2d import DIRECTIONS, ScanDirection, flatten_direction, ss2d, unflatten_direction
from .ssm import (DiscreteScanInputs, SelectiveSsmParams, derive_selection, discretize_taylor, discretize_zoh,
                  selective_scan, selective_scan_backward, selective_scan_chunked, selective_scan_seq)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "DomainError", "NumericError", "ParseError", "SigmaError",
    "StabilityError",
    "CrossExchangeMode", "ModalityPair", "concat_selective_scan", "conmb", "consa_baseline", "cromb",
    "cross_selective_scan",
    "SegmentationMap", "SigmaConfig", "StageFeatures", "count_flops", "count_params", "forward",
    "init_weights", "predict", "predict_rgb_only",
    "DIRECTIONS", "ScanDirection", "flatten_direction", "ss2d", "unflatten_direction",
    "DiscreteScanInputs", "SelectiveSsmParams", "derive_selection", "discretize_taylor", "discretize_zoh",
    "selective_scan", "selective_scan_backward", "selective_scan_chunked", "selective_scan_seq",
]
