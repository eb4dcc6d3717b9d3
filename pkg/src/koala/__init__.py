"""Key-frame-conditioned long-video tokenizers on a small numpy autodiff stack."""
from .config import RunConfig, load_config, minimal_config, parse_config
from .errors import (ConfigError, ContractViolation, KoalaError, MalformedPrompt, NonFiniteError,
                     RejectedInput, WindowLengthError)
from .model import KoalaModel, build_model
from .qformer import QFormer, TokenSet

__all__ = [
    "RunConfig", "load_config", "minimal_config", "parse_config",
    "ConfigError", "ContractViolation", "KoalaError", "MalformedPrompt", "NonFiniteError",
    "RejectedInput", "WindowLengthError", "KoalaModel", "build_model", "QFormer", "TokenSet",
]
__version__ = "0.1.0"
