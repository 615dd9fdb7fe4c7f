"""Exception hierarchy shared across the package."""


class DomainError(Exception):
    """Base class for all expected (non-bug) failures."""


class GeometryError(DomainError):
    pass


class EllipseFitError(GeometryError):
    pass


class MaskShapeError(GeometryError):
    pass


class MissingEllipseError(DomainError):
    """An image needs a dish ellipse and none is available."""


class LaplaceFitError(DomainError):
    pass


class SchemaError(DomainError):
    """Interchange document failed validation; ``path`` points at the bad field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class StoreError(DomainError):
    pass


class EditRejected(StoreError):
    """An edit event referenced missing entities or would corrupt state."""


class ExperimentError(DomainError):
    pass


class SynthesisError(DomainError):
    """Synthetic case generation could not satisfy its own constraints."""


class SearchError(DomainError):
    pass
