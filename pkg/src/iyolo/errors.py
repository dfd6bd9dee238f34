"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not satisfy a kernel's precondition."""


class SpecValidationError(ValueError):
    """A NetworkSpec violates a structural invariant."""

    def __init__(self, layer_index, message):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


class WeightFileError(ValueError):
    """Base class for IYW1 parse failures; ``offset`` is the byte position."""

    def __init__(self, offset, message):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class BadMagicError(WeightFileError):
    pass


class UnsupportedVersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    def __init__(self, offset, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(
            offset, f"truncated file: expected {expected} bytes, got {actual}"
        )


class SpecMismatchError(WeightFileError):
    pass


class PPMError(ValueError):
    """Base class for PPM parse failures."""


class UnsupportedFormatError(PPMError):
    pass


class MaxvalError(PPMError):
    pass


class TruncatedPayloadError(PPMError):
    pass


class AnnotationError(ValueError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class TrainingDivergedError(RuntimeError):
    pass


class NoGroundTruthError(ValueError):
    pass
