"""Deployment chain: quantize, serialize, plan memory, emit C."""

from .container import (TensorRecord, deserialize, load_records, save_records,
                        serialize)
from .quantize import (QuantParams, QuantizedModel, dequant, fold_batchnorm,
                       int8_infer, load_quantized, model_size_bytes, quant,
                       quantize_int8, requant_multiplier, save_quantized)
from .memplan import MemoryPlan, plan_memory
from .cgen import emit_c_source, make_test_vectors

__all__ = [
    "TensorRecord", "serialize", "deserialize", "save_records",
    "load_records", "QuantParams", "QuantizedModel", "quant", "dequant",
    "fold_batchnorm", "quantize_int8", "requant_multiplier", "int8_infer",
    "model_size_bytes", "save_quantized", "load_quantized", "MemoryPlan",
    "plan_memory", "emit_c_source", "make_test_vectors",
]
