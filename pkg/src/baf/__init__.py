"""Feature tensor compression for split inference.

Channel selection by correlation, per-channel quantization, tiling, lossless
coding into a self-describing bitstream, and a small learned network (BaF)
that restores the channels that were never sent.
"""

from .errors import (BafError, CompatibilityError, ConfigError, CorruptionError, DataError, FormatError,
                     InputError, InvertibilityError, RangeError, ShapeError, TrainingError)
from .tensor import BnAffine, ConvLayer, bn_forward, bn_inverse, conv2d, downsample_phases
from .select import ChannelSelection, CorrelationMatrix, accumulate_stats, rho_pq, select_channels
from .quant import QuantizedPack, dequantize_channel, quantize_channel, quantize_tensor, tile, untile
from .bitstream import Bitstream, decode, encode
from .net import BafModel, TrainConfig, baf_forward, consolidate, init_baf, restore, train_baf

__version__ = "0.1.0"

__all__ = [
    "BafError", "CompatibilityError", "ConfigError", "CorruptionError", "DataError", "FormatError",
    "InputError", "InvertibilityError", "RangeError", "ShapeError", "TrainingError",
    "BnAffine", "ConvLayer", "bn_forward", "bn_inverse", "conv2d", "downsample_phases",
    "ChannelSelection", "CorrelationMatrix", "accumulate_stats", "rho_pq", "select_channels",
    "QuantizedPack", "dequantize_channel", "quantize_channel", "quantize_tensor", "tile", "untile",
    "Bitstream", "decode", "encode",
    "BafModel", "TrainConfig", "baf_forward", "consolidate", "init_baf", "restore", "train_baf",
]
