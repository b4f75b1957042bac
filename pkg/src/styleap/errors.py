class StyleAPError(Exception):
    """Base class for all errors raised by this package."""

    code = "runtime"


class ConfigurationError(StyleAPError, ValueError):
    code = "config"


class CorpusFormatError(StyleAPError, ValueError):
    code = "corpus_format"

    def __init__(self, path, line_numbers, detail=""):
        self.path = str(path)
        self.line_numbers = list(line_numbers)
        shown = ",".join(str(n) for n in self.line_numbers[:20])
        if len(self.line_numbers) > 20:
            shown += ",..."
        msg = f"{self.path}: malformed record(s) at line(s) {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class BuildError(StyleAPError):
    code = "build"


class DimensionMismatchError(StyleAPError, ValueError):
    code = "dimension"


class DatastoreFormatError(StyleAPError):
    code = "datastore_format"


class UnknownStyleError(StyleAPError, KeyError):
    code = "unknown_style"

    def __init__(self, style_id):
        self.style_id = style_id
        super().__init__(f"unknown style id {style_id!r}")

    def __str__(self):
        return self.args[0]


class TrainingError(StyleAPError):
    code = "training"


class GradientCheckError(StyleAPError):
    code = "gradient_check"

    def __init__(self, parameter, rel_error, tolerance):
        self.parameter = parameter
        self.rel_error = rel_error
        super().__init__(
            f"gradient check failed for {parameter}: relative error "
            f"{rel_error:.3e} exceeds {tolerance:.1e}"
        )
