"""Exception hierarchy.

Every error carries a short machine-parsable ``category`` used by the CLI
when it reports failures on a single line.
"""


class UstexError(Exception):
    category = "error"


class InvalidInputError(UstexError, ValueError):
    category = "invalid-input"


class InvalidParameterError(UstexError, ValueError):
    category = "invalid-parameter"


class ConfigurationError(UstexError, ValueError):
    category = "config-error"


class InvalidDataError(UstexError, ValueError):
    category = "invalid-data"


class ManifestError(UstexError):
    category = "manifest-error"


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    category = "manifest-missing"


class MalformedRowError(ManifestError, ValueError):
    category = "manifest-malformed-row"

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicatePathError(ManifestError, ValueError):
    category = "manifest-duplicate-path"


class PearsonUndefinedError(UstexError, ValueError):
    category = "pearson-undefined"


class NonFiniteLossError(UstexError, FloatingPointError):
    category = "non-finite-loss"

    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component
