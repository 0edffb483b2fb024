"""Exception types shared across the package."""


class QppError(Exception):
    """Base class for errors raised by qppkit."""


class DataFormatError(QppError):
    """An input file violates its documented format."""


class CollinearityError(QppError):
    """Design columns are linearly dependent beyond tolerance."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__("collinear design columns: " + ", ".join(self.columns))


class PredictorError(QppError):
    """A feature cell could not be computed."""
