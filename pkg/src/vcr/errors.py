"""Error types shared across the package."""


class VcrError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(VcrError, ValueError):
    """A precondition on an argument was violated."""


class NotFoundError(VcrError, KeyError):
    """An image id is unknown to the backend."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return self.args[0] if self.args else ""


class MissingEmbeddingError(VcrError, KeyError):
    """A (image, crop) row is absent from a file-backed store."""

    def __init__(self, image_id: str, crop_key: str):
        super().__init__(f"no embedding row for image {image_id!r}, crop {crop_key!r}")
        self.image_id = image_id
        self.crop_key = crop_key

    def __str__(self) -> str:
        return self.args[0]


class FormatError(VcrError):
    """A binary or manifest file failed structural validation."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(VcrError):
    """Loaded data violates a content invariant (e.g. non-unit rows)."""
