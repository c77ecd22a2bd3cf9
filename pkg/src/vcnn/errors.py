"""Exception hierarchy shared by all vcnn modules."""


class VCNNError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(VCNNError):
    pass


class UnboundedRegion(GeometryError):
    pass


class DimensionTooHigh(GeometryError):
    pass


class DimensionMismatch(GeometryError):
    pass


class EmptyPolytope(GeometryError):
    pass


class PartitionError(VCNNError):
    pass


class DuplicateSites(PartitionError):
    def __init__(self, index, other):
        self.index = index
        self.other = other
        super().__init__(f"site {index} duplicates site {other}")


class SiteOutsideDomain(PartitionError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"site {index} lies outside the domain")


class PointOutsideDomain(PartitionError):
    pass


class ShapeMismatch(VCNNError):
    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class MissingCouplingTensor(VCNNError):
    pass


class PartitionMismatch(VCNNError):
    pass


class UnknownActivation(VCNNError):
    pass


class DomainMismatch(VCNNError):
    pass


class DimensionUnsupported(VCNNError):
    pass


class FormatError(VCNNError):
    """Raised when a binary blob or JSON document cannot be parsed."""
