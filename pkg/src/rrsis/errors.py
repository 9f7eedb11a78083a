"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when an array does not satisfy a shape contract."""


class NumericalError(ArithmeticError):
    """Raised when a forward pass produces non-finite values.

    ``where`` names the module and stage that produced them, e.g.
    ``"lgfa/stage2"``.
    """

    def __init__(self, where, message="non-finite values"):
        self.where = where
        super().__init__(f"{where}: {message}")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


class CheckpointMismatchError(ConfigError):
    """A checkpoint's parameter shapes disagree with the requested config.

    ``mismatches`` is a list of ``(name, expected_shape, found_shape)``.
    """

    def __init__(self, mismatches):
        self.mismatches = list(mismatches)
        lines = [f"  {name}: expected {exp}, checkpoint has {got}" for name, exp, got in self.mismatches]
        super().__init__("checkpoint does not match config:\n" + "\n".join(lines))


class ManifestError(IOError):
    """A manifest record could not be loaded; ``index`` is the record position."""

    def __init__(self, index, message):
        self.index = index
        super().__init__(f"record {index}: {message}")
