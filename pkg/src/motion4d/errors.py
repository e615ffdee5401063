"""Exception and warning types shared across the package.

Plain ``ValueError``/``IndexError`` are used for bad arguments and
out-of-range indices; the classes below mark failure modes that callers
(in particular the CLI) need to tell apart.
"""


class Motion4DError(Exception):
    """Base class for package-specific failures."""


class GeometryError(Motion4DError, ValueError):
    """Operands live on incompatible grids."""


class FormatError(Motion4DError, ValueError):
    """A file on disk is malformed or inconsistent with its header."""


class ScheduleError(Motion4DError, ValueError):
    """An acquisition schedule does not tile the imaged volume."""


class ConfigurationError(Motion4DError, ValueError):
    """Run configuration is inconsistent with the provided inputs."""


class NumericalError(Motion4DError, RuntimeError):
    """An optimisation step produced non-finite values."""


class DegenerateSignalWarning(UserWarning):
    """A surrogate signal row has zero variance and was left unscaled."""


class SortingGapWarning(UserWarning):
    """A (phase, couch) bin had no segment; the slab was filled from the
    nearest phase."""
