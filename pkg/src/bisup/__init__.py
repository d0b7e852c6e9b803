"""Quantization error suppression for a toy transformer: kernels, learnable
parameter spaces, layer-wise calibration and an experiment CLI."""

from .errors import BisupError, ConfigError, NumericError, ShapeError, StateError
from .quant import QuantConfig, QuantSpec, dequantize, quantize
from .model import QuantizedModel, ToyModel, synth_model, trace_propagation
from .calibration import CalibConfig, calibrate_model

__all__ = [
    "BisupError", "ConfigError", "NumericError", "ShapeError", "StateError",
    "QuantConfig", "QuantSpec", "quantize", "dequantize",
    "ToyModel", "QuantizedModel", "synth_model", "trace_propagation",
    "CalibConfig", "calibrate_model",
]
