"""emofuse: desk-scale speech emotion recognition.

Feature extraction (MFCC, prosody, self-supervised embeddings), cross-attention
fusion, additive-margin softmax classification, and a train / transfer-learning
harness, all on a small numpy-backed autodiff core.
"""

from .autodiff import Tensor
from .config import RunConfig, config_hash, load_run_config
from .errors import ConfigError, EmofuseError, ParameterError
from .mfcc import extract_mfcc39
from .model import FusionModel, FusionModelConfig
from .prosody import PROSODY_DIM, extract_prosody103
from .ssrl import SsrlConfig, SsrlEncoder

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "RunConfig",
    "config_hash",
    "load_run_config",
    "EmofuseError",
    "ConfigError",
    "ParameterError",
    "extract_mfcc39",
    "FusionModel",
    "FusionModelConfig",
    "PROSODY_DIM",
    "extract_prosody103",
    "SsrlEncoder",
    "SsrlConfig",
    "__version__",
]
