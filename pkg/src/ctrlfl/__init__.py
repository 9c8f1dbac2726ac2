"""Federated NMT with Controller layers, on a small numpy autodiff engine."""
from .errors import (
    ConfigError,
    ContractError,
    DivergenceWarning,
    InputError,
    LabelParseError,
    ProtocolError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DivergenceWarning", "InputError", "LabelParseError",
    "ProtocolError", "ShapeError", "__version__",
]
