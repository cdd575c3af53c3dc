"""Vector-quantized lookup-table inference: kernels, cost model, simulator and a desk-scale runner."""

from .kernels import QuantizedLinear, dense_matmul, matmul, quantize_linear
from .packing import pack_indices, unpack_indices
from .perf import HardwareProfile, LayerShape, ModelConfig, layer_latency, transformer_latency, v80_profile
from .sim import EngineTopology, simulate_end_to_end, simulate_layer_schedule, simulate_lutlinear
from .vq import Codebook, SchemeConfig, nearest_centroid, quantize_table_int8, train_codebook

__version__ = "0.1.0"

__all__ = [
    "Codebook", "EngineTopology", "HardwareProfile", "LayerShape", "ModelConfig", "QuantizedLinear",
    "SchemeConfig", "dense_matmul", "layer_latency", "matmul", "nearest_centroid", "pack_indices",
    "quantize_linear", "quantize_table_int8", "simulate_end_to_end", "simulate_layer_schedule",
    "simulate_lutlinear", "train_codebook", "transformer_latency", "unpack_indices", "v80_profile",
]
