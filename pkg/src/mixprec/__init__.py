"""Channel-wise mixed-precision bit-width search for small neural networks.

The library learns a per-channel weight precision and per-layer
activation precision assignment by gradient descent under a model-size
or energy regularizer, then lowers the searched model into single-
precision sub-layers ready for integer inference kernels.
"""

from .cost import (CostLUT, LayerCostContext, count_search_space, energy_reg,
                   exact_model_energy, exact_model_size, size_reg, total_reg)
from .data import Dataset, gaussian_blobs, load_idx, load_idx_pair, synthetic_dataset, two_spirals
from .errors import (ConfigError, DivergenceError, EquivalenceError, GraphError,
                     MixprecError, PrecisionError, ShapeError)
from .gates import (GateState, PrecisionAssignment, PrecisionSet, anneal,
                    effective_activations, effective_weights,
                    mixedprec_layer_forward, softmax_temperature)
from .lower import (ChannelPermutation, DeployModel, LoweredModel, apply_permutation,
                    export_lowered, load_lowered, lower_model, lowered_forward,
                    plan_permutation, quantized_forward, split_layer, verify_equivalence)
from .model import LayerSpec, Network
from .optim import SGD, Adam
from .quantize import (AffineQuantParams, ChannelWeightQuantizer, PactActQuantizer,
                       affine_quantize, fake_quantize, pact_act_fakequant,
                       weight_fakequant_mixed, weight_fakequant_per_channel)
from .tensor import Tensor
from .train import (LossBreakdown, SearchResult, TrainConfig, early_stop, evaluate,
                    finetune, run_search, search_epoch, warmup)

__version__ = "0.1.0"

__all__ = [
    "AffineQuantParams", "Adam", "ChannelPermutation", "ChannelWeightQuantizer",
    "ConfigError", "CostLUT", "Dataset", "DeployModel", "DivergenceError",
    "EquivalenceError", "GateState", "GraphError", "LayerCostContext", "LayerSpec",
    "LossBreakdown", "LoweredModel", "MixprecError", "Network", "PactActQuantizer",
    "PrecisionAssignment", "PrecisionError", "PrecisionSet", "SGD", "SearchResult",
    "ShapeError", "Tensor", "TrainConfig", "affine_quantize", "anneal",
    "apply_permutation", "count_search_space", "early_stop", "effective_activations",
    "effective_weights", "energy_reg", "evaluate", "exact_model_energy",
    "exact_model_size", "export_lowered", "fake_quantize", "finetune",
    "gaussian_blobs", "load_idx", "load_idx_pair", "load_lowered", "lower_model",
    "lowered_forward", "mixedprec_layer_forward", "pact_act_fakequant",
    "plan_permutation", "quantized_forward", "run_search", "search_epoch",
    "size_reg", "softmax_temperature", "split_layer", "synthetic_dataset",
    "total_reg", "two_spirals", "verify_equivalence", "warmup",
    "weight_fakequant_mixed", "weight_fakequant_per_channel",
]
