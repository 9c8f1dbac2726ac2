"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    """A caller broke a documented precondition (e.g. backward on a non-scalar)."""


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Malformed or inconsistent federation traffic."""


class LabelParseError(ValueError):
    def __init__(self, label: str, position: int, reason: str):
        self.label = label
        self.position = position
        super().__init__(f"cannot parse {label!r} at position {position}: {reason}")


class DivergenceWarning(UserWarning):
    """Controller placement the experiments reported as non-convergent."""
