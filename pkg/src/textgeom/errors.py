"""Exception types shared across the package."""


class TextGeomError(Exception):
    """Base class for all package errors."""


class InvalidPolygon(TextGeomError, ValueError):
    """Polygon violates its structural invariants (too few points, odd
    vertex count, self-intersection, zero area, non-finite coordinates)."""


class ShapeError(TextGeomError, ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class NumericError(TextGeomError, ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


class DegenerateInstance(TextGeomError, ValueError):
    """A text instance collapsed during label generation or reconstruction."""


class OutOfRegion(TextGeomError, ValueError):
    """A query point lies outside the region an operation requires."""


class SceneInfeasible(TextGeomError, RuntimeError):
    """Synthetic scene constraints cannot be satisfied.

    Carries the partially generated annotation list in ``partial``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial if partial is not None else []
