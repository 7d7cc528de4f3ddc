"""LoRA and Conv-LoRA adapters on a small numpy vision transformer for segmentation."""

from .adapters import (ConvLoRAAdapter, EvalCounter, GateDecision, conv_lora_forward, init_adapter,
                       lora_forward, moe_balance_loss, multiscale_forward)
from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigError, DataError, DegenerateGateError, DimensionError,
                     NonFiniteError, OracleError)
from .tensor import Tensor, backward, finite_diff_check

__version__ = "0.1.0"
